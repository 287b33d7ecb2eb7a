//! Run directory layout and the four training stages.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;
use shapeseq::canonical::train_canonical_ae;
use shapeseq::checkpoint;
use shapeseq::grouping::train_grouping;
use shapeseq::pcio::{load_pointcloud, render_depth, save_depth_pgm, save_pointcloud, synth_dataset, Format, Split};
use shapeseq::transformer::train_transformer;
use shapeseq::vq::{encode_to_tokens, train_vqvae};
use shapeseq::{CanonicalAe, DepthImage, GroupingNet, ShapeDataset, TokenSequence, TrainError, Transformer, VqCodec};

use crate::config::PipelineConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    A,
    B,
    C,
    D,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::A, Stage::B, Stage::C, Stage::D];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
            Stage::D => "D",
        }
    }

    /// Subcommand that trains this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::A => "train-cae",
            Stage::B => "train-group",
            Stage::C => "train-vqvae",
            Stage::D => "train-transformer",
        }
    }

    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::A => &[],
            Stage::B => &[Stage::A],
            Stage::C => &[Stage::A, Stage::B],
            Stage::D => &[Stage::A, Stage::B, Stage::C],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Stage::A),
            "B" => Ok(Stage::B),
            "C" => Ok(Stage::C),
            "D" => Ok(Stage::D),
            _ => Err(CliError::Usage(format!("unknown stage '{s}', expected A, B, C or D"))),
        }
    }
}

/// Files of one run, all under `root`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data(&self, split: Split) -> PathBuf {
        self.root.join("data").join(split_name(split))
    }

    pub fn depth(&self) -> PathBuf {
        self.root.join("data").join("test_depth")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage_{}.json", stage.tag().to_ascii_lowercase()))
    }

    pub fn history(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage_{}.history.tsv", stage.tag().to_ascii_lowercase()))
    }

    pub fn generated(&self) -> PathBuf {
        self.root.join("generated")
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(shapeseq::Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes the train and test splits (and depth renderings of the test
/// shapes) and echoes the config into the run directory.
pub fn synth_data(config: &PipelineConfig, run: &RunDir) -> Result<(usize, usize), CliError> {
    let d = &config.data;
    let mut counts = (0, 0);
    for (split, count, seed) in [
        (Split::Train, d.train_count, d.seed),
        (Split::Test, d.test_count, d.seed.wrapping_add(1)),
    ] {
        let dir = run.data(split);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        create_dir(&dir)?;
        let set = synth_dataset(d.family, count, d.points, seed)?;
        for (i, pc) in set.samples.iter().enumerate() {
            save_pointcloud(pc, &dir.join(format!("shape_{i:03}.xyz")), Format::XyzText)?;
        }
        if split == Split::Test {
            create_dir(&run.depth())?;
            for (i, pc) in set.samples.iter().enumerate() {
                let img = render_depth(pc, config.condition.image_size)?;
                save_depth_pgm(&img, &run.depth().join(format!("shape_{i:03}.pgm")))?;
            }
            counts.1 = set.len();
        } else {
            counts.0 = set.len();
        }
    }
    write_text(&run.config(), &config.to_toml())?;
    Ok(counts)
}

/// Point cloud files (`.xyz`, `.pcsq`) in a directory, sorted by name.
pub fn cloud_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|source| {
        CliError::Core(shapeseq::Error::Io {
            path: dir.to_path_buf(),
            source,
        })
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("xyz" | "pcsq")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dir(dir: &Path) -> Result<Vec<shapeseq::PointCloud>, CliError> {
    cloud_files(dir)?
        .iter()
        .map(|p| load_pointcloud(p, Format::from_path(p)).map_err(CliError::from))
        .collect()
}

pub fn load_split(run: &RunDir, split: Split) -> Result<ShapeDataset, CliError> {
    let dir = run.data(split);
    let missing = || CliError::MissingData {
        split: split_name(split).into(),
        path: dir.clone(),
    };
    if !dir.is_dir() {
        return Err(missing());
    }
    let samples = load_dir(&dir)?;
    if samples.is_empty() {
        return Err(missing());
    }
    Ok(ShapeDataset { samples, split, seed: 0 })
}

pub fn load_stage<T: DeserializeOwned>(run: &RunDir, stage: Stage, needed_by: &str) -> Result<T, CliError> {
    let path = run.checkpoint(stage);
    if !path.exists() {
        return Err(CliError::MissingStage {
            needed_by: needed_by.to_string(),
            missing: stage,
            path,
        });
    }
    Ok(checkpoint::load::<T>(&path, stage.tag())?.model)
}

/// Every trained component a command needs.
pub struct Trained {
    pub cae: CanonicalAe,
    pub grouping: GroupingNet,
    pub vq: VqCodec,
}

impl Trained {
    pub fn load(run: &RunDir, needed_by: &str) -> Result<Self, CliError> {
        Ok(Self {
            cae: load_stage(run, Stage::A, needed_by)?,
            grouping: load_stage(run, Stage::B, needed_by)?,
            vq: load_stage(run, Stage::C, needed_by)?,
        })
    }

    pub fn tokens(&self, clouds: &[shapeseq::PointCloud]) -> Result<Vec<TokenSequence>, CliError> {
        let sphere = self.cae.sphere()?;
        let ga = self.grouping.assignment(&sphere)?;
        clouds
            .iter()
            .map(|pc| encode_to_tokens(&self.cae, &ga, &self.vq, pc).map_err(CliError::from))
            .collect()
    }
}

/// Reads a loss-history sidecar: a header line, then one tab-separated row
/// per epoch.
pub fn read_history(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| {
        CliError::Core(shapeseq::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(n, line)| {
            line.split('\t')
                .skip(1)
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        CliError::Core(shapeseq::Error::Parse {
                            source_name: path.display().to_string(),
                            location: format!("line {}", n + 2),
                            message: format!("bad value '{v}'"),
                        })
                    })
                })
                .collect()
        })
        .collect()
}

fn write_history(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut s = format!("epoch\t{}\n", columns.join("\t"));
    for (e, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&format!("{e}\t{}\n", cells.join("\t")));
    }
    write_text(path, &s)
}

fn save_stage<T: Serialize>(
    run: &RunDir,
    stage: Stage,
    config: &PipelineConfig,
    result: Result<T, TrainError<T>>,
) -> Result<T, CliError> {
    let echo = serde_json::to_value(config).expect("config serializes");
    match result {
        Ok(model) => {
            checkpoint::save(&run.checkpoint(stage), stage.tag(), echo, &model)?;
            Ok(model)
        }
        Err(TrainError::Diverged {
            epoch,
            last_finite,
            message,
        }) => {
            let path = run.checkpoint(stage).with_extension("diverged.json");
            checkpoint::save(&path, stage.tag(), echo, &*last_finite)?;
            Err(CliError::Core(shapeseq::Error::Diverged {
                epoch,
                message: format!("{message}; last finite model saved to {}", path.display()),
            }))
        }
        Err(TrainError::Invalid(e)) => Err(e.into()),
    }
}

/// Trains one stage from the train split and the upstream checkpoints,
/// writing the checkpoint and its loss-history sidecar.
pub fn run_stage(stage: Stage, config: &PipelineConfig, run: &RunDir) -> Result<PathBuf, CliError> {
    let needed_by = format!("stage {stage}");
    for &req in stage.requires() {
        if !run.checkpoint(req).exists() {
            return Err(CliError::MissingStage {
                needed_by,
                missing: req,
                path: run.checkpoint(req),
            });
        }
    }
    let train = load_split(run, Split::Train)?;
    let history = run.history(stage);
    match stage {
        Stage::A => {
            let cae = save_stage(run, stage, config, train_canonical_ae(&train, &config.cae_config()))?;
            let rows: Vec<Vec<f64>> = cae.history.iter().map(|h| vec![h.cd, h.emd, h.total]).collect();
            write_history(&history, &["cd", "emd", "total"], &rows)?;
        }
        Stage::B => {
            let cae: CanonicalAe = load_stage(run, Stage::A, &needed_by)?;
            let net = save_stage(run, stage, config, train_grouping(&train, &cae, &config.grouping_config()))?;
            let rows: Vec<Vec<f64>> = net.history.iter().map(|&h| vec![h]).collect();
            write_history(&history, &["structure"], &rows)?;
        }
        Stage::C => {
            let cae: CanonicalAe = load_stage(run, Stage::A, &needed_by)?;
            let net: GroupingNet = load_stage(run, Stage::B, &needed_by)?;
            let ga = net.assignment(&cae.sphere()?)?;
            let vq = save_stage(run, stage, config, train_vqvae(&train, &cae, &ga, &config.vq_config()))?;
            let rows: Vec<Vec<f64>> = vq.history.iter().map(|h| vec![h.cd, h.emd, h.commit, h.total]).collect();
            write_history(&history, &["cd", "emd", "commit", "total"], &rows)?;
        }
        Stage::D => {
            let trained = Trained::load(run, &needed_by)?;
            let tokens = trained.tokens(&train.samples)?;
            let images: Option<Vec<DepthImage>> = if config.condition.enabled {
                Some(
                    train
                        .samples
                        .iter()
                        .map(|pc| render_depth(pc, config.condition.image_size))
                        .collect::<Result<_, _>>()?,
                )
            } else {
                None
            };
            let tf = train_transformer(
                &tokens,
                trained.grouping.config.groups,
                trained.vq.codebook.vocab(),
                &config.transformer_config(),
                images.as_deref(),
            );
            let tf: Transformer = save_stage(run, stage, config, tf)?;
            let rows: Vec<Vec<f64>> = tf.history.iter().map(|&h| vec![h]).collect();
            write_history(&history, &["nll"], &rows)?;
        }
    }
    Ok(run.checkpoint(stage))
}
