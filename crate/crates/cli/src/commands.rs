//! Generation, completion, reconstruction, evaluation and usage reports.

use std::path::{Path, PathBuf};

use shapeseq::geometry::chamfer_distance;
use shapeseq::metrics::{evaluate, tmd_with};
use shapeseq::pcio::{load_depth, load_pointcloud, normalize_unit_sphere, save_pointcloud, Format, Split};
use shapeseq::transformer::{generate_shape, sample_sequence};
use shapeseq::vq::codebook_usage;
use shapeseq::{MetricOptions, MetricReport, SamplingConfig, Transformer};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::pipeline::{create_dir, load_dir, load_split, load_stage, split_name, write_text, RunDir, Stage, Trained};

/// Seed of the `i`-th sample of a command run with `seed`.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

fn format_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub struct Generated {
    pub files: Vec<PathBuf>,
    pub tokens: Vec<Vec<usize>>,
}

/// Samples `n` shapes, writing `shape_NNN.xyz` and one line of tokens per
/// shape to `tokens.txt`.
pub fn generate(
    config: &PipelineConfig,
    run: &RunDir,
    n: usize,
    sampling: &SamplingConfig,
    dest: &Path,
) -> Result<Generated, CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let trained = Trained::load(run, "generate")?;
    let tf: Transformer = load_stage(run, Stage::D, "generate")?;
    if tf.condition.is_some() {
        return Err(CliError::Usage("the transformer is conditional; use `complete`".into()));
    }
    create_dir(dest)?;
    let resolution = trained.cae.config.sphere_points;
    let mut out = Generated {
        files: Vec::new(),
        tokens: Vec::new(),
    };
    for i in 0..n {
        let (tokens, shape) = generate_shape(
            &tf,
            &trained.vq,
            &trained.grouping,
            sampling,
            sample_seed(config.seed, i),
            None,
            resolution,
        )?;
        let path = dest.join(format!("shape_{i:03}.xyz"));
        save_pointcloud(&shape, &path, Format::XyzText)?;
        out.files.push(path);
        out.tokens.push(tokens.0);
    }
    let lines: Vec<String> = out.tokens.iter().map(|t| format_tokens(t)).collect();
    write_text(&dest.join("tokens.txt"), &(lines.join("\n") + "\n"))?;
    Ok(out)
}

pub struct Completions {
    pub files: Vec<PathBuf>,
    pub tmd: f64,
}

/// Draws `k` completions of a depth image and reports their TMD.
pub fn complete(
    config: &PipelineConfig,
    run: &RunDir,
    depth: &Path,
    k: usize,
    sampling: &SamplingConfig,
    dest: &Path,
) -> Result<Completions, CliError> {
    if k < 2 {
        return Err(CliError::Usage("--k must be at least 2".into()));
    }
    let trained = Trained::load(run, "complete")?;
    let tf: Transformer = load_stage(run, Stage::D, "complete")?;
    if tf.condition.is_none() {
        return Err(CliError::Usage(
            "the transformer was trained without conditions; set condition.enabled and retrain stage D".into(),
        ));
    }
    let feature = tf.encode_condition(&load_depth(depth)?)?;
    let sphere = trained.cae.sphere()?;
    let ga = trained.grouping.assignment(&sphere)?;
    create_dir(dest)?;
    let mut files = Vec::new();
    let mut shapes = Vec::new();
    let mut lines = Vec::new();
    for i in 0..k {
        let tokens = sample_sequence(&tf, sampling, sample_seed(config.seed, i), Some(&feature))?;
        let shape = trained.vq.decode_tokens(&tokens, &sphere, &ga)?;
        let path = dest.join(format!("completion_{i:03}.xyz"));
        save_pointcloud(&shape, &path, Format::XyzText)?;
        lines.push(format_tokens(&tokens.0));
        files.push(path);
        shapes.push(shape);
    }
    let tmd = tmd_with(&shapes, &MetricOptions::default())?;
    write_text(&dest.join("tokens.txt"), &(lines.join("\n") + "\n"))?;
    write_text(&dest.join("tmd.txt"), &format!("tmd = {tmd:e}\nk = {k}\ntemperature = {}\n", sampling.temperature))?;
    Ok(Completions { files, tmd })
}

/// Encodes each input to tokens and decodes it back; returns the written
/// files with the Chamfer distance to the normalized input.
pub fn reconstruct(run: &RunDir, inputs: &[PathBuf], dest: &Path) -> Result<Vec<(PathBuf, f64)>, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("reconstruct needs at least one input file".into()));
    }
    let trained = Trained::load(run, "reconstruct")?;
    let sphere = trained.cae.sphere()?;
    let ga = trained.grouping.assignment(&sphere)?;
    create_dir(dest)?;
    let mut out = Vec::new();
    for input in inputs {
        let pc = normalize_unit_sphere(&load_pointcloud(input, Format::from_path(input))?)?;
        let tokens = trained.tokens(std::slice::from_ref(&pc))?.remove(0);
        let rec = trained.vq.decode_tokens(&tokens, &sphere, &ga)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("shape");
        let path = dest.join(format!("{stem}.rec.xyz"));
        save_pointcloud(&rec, &path, Format::XyzText)?;
        out.push((path, chamfer_distance(&pc, &rec)?));
    }
    Ok(out)
}

/// Metrics of the clouds in `gen` against those in `reference`; the report
/// is written as key-value text to `report`.
pub fn eval(gen: &Path, reference: &Path, opts: &MetricOptions, report: &Path) -> Result<MetricReport, CliError> {
    let g = load_dir(gen)?;
    let r = load_dir(reference)?;
    if g.len() < 2 || r.len() < 2 {
        return Err(CliError::Usage(format!(
            "eval needs at least two clouds on each side ({} in {}, {} in {})",
            g.len(),
            gen.display(),
            r.len(),
            reference.display()
        )));
    }
    let rep = evaluate(&g, &r, opts)?;
    write_text(report, &rep.to_kv())?;
    Ok(rep)
}

/// Percentage of codebook entries used by the tokens of a split.
pub fn usage_report(run: &RunDir, split: Split, report: &Path) -> Result<f64, CliError> {
    let trained = Trained::load(run, "usage-report")?;
    let data = load_split(run, split)?;
    let tokens = trained.tokens(&data.samples)?;
    let usage = codebook_usage(&trained.vq.codebook, &tokens)?;
    write_text(
        report,
        &format!(
            "usage_percent = {usage}\nsplit = {}\nshapes = {}\nvocab = {}\ngroups = {}\n",
            split_name(split),
            tokens.len(),
            trained.vq.codebook.vocab(),
            trained.vq.groups
        ),
    )?;
    Ok(usage)
}
