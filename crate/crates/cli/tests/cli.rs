use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shapeseq::canonical::train_canonical_ae;
use shapeseq::pcio::Split;
use shapeseq::{CanonicalAe, MetricReport};
use shapeseq_cli::pipeline::{load_split, load_stage, read_history, synth_data};
use shapeseq_cli::{run_stage, CliError, PipelineConfig, RunDir, Stage};

const TINY: &str = r#"
seed = 3
data.train_count = 4
data.test_count = 3
data.points = 64
cae.k = 8
cae.edge_widths = [8, 8]
cae.latent_dim = 16
cae.decoder_width = 16
cae.sphere_points = 64
cae.epochs = 3
cae.batch_size = 4
grouping.groups = 4
grouping.hidden = 16
grouping.epochs = 3
vq.k = 8
vq.edge_widths = [8, 8]
vq.feature_dim = 16
vq.decoder_width = 16
vq.entries = 8
vq.epochs = 3
transformer.layers = 1
transformer.heads = 2
transformer.d_model = 16
transformer.mlp_ratio = 2
transformer.cond_channels = [4, 4, 4, 4]
transformer.epochs = 3
condition.image_size = 16
"#;

fn tiny() -> PipelineConfig {
    PipelineConfig::parse(TINY, "tiny").unwrap()
}

fn shapeseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapeseq")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stage_b_without_a_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    synth_data(&tiny(), &run).unwrap();
    match run_stage(Stage::B, &tiny(), &run) {
        Err(CliError::MissingStage { missing, .. }) => assert_eq!(missing, Stage::A),
        other => panic!("expected a dependency error, got {other:?}"),
    }
    let out = shapeseq(&["--out", dir.path().to_str().unwrap(), "train-group"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage A") && stderr.contains("train-cae"), "{stderr}");
}

#[test]
fn stage_a_checkpoint_reloads_to_identical_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let config = tiny();
    synth_data(&config, &run).unwrap();
    run_stage(Stage::A, &config, &run).unwrap();
    let loaded: CanonicalAe = load_stage(&run, Stage::A, "test").unwrap();
    let direct = train_canonical_ae(&load_split(&run, Split::Train).unwrap(), &config.cae_config()).unwrap();
    assert_eq!(loaded.params, direct.params);
    assert_eq!(loaded.config, direct.config);
}

#[test]
fn tiny_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let root = dir.path().join("run");
    let out = root.to_str().unwrap();
    ok(shapeseq(&["--config", cfg.to_str().unwrap(), "--out", out, "synth-data"]));
    // later commands pick up the echoed config
    for cmd in ["train-cae", "train-group", "train-vqvae", "train-transformer"] {
        ok(shapeseq(&["--out", out, cmd]));
    }
    let run = RunDir::new(&root);
    for stage in Stage::ALL {
        let h = read_history(&run.history(stage)).unwrap();
        assert_eq!(h.len(), 3);
        assert!(h.iter().flatten().all(|v| v.is_finite()));
    }

    let a = root.join("gen_a");
    let b = root.join("gen_b");
    for d in [&a, &b] {
        ok(shapeseq(&["--out", out, "--seed", "7", "generate", "--n", "4", "--dest", d.to_str().unwrap()]));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap());
    }

    let test = run.data(Split::Test);
    let report = root.join("self.txt");
    ok(shapeseq(&[
        "--out",
        out,
        "eval",
        "--gen",
        test.to_str().unwrap(),
        "--ref",
        test.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    let rep = MetricReport::from_kv(&fs::read_to_string(&report).unwrap(), "self").unwrap();
    assert!(rep.mmd_cd.abs() < 1e-12 && rep.mmd_emd.abs() < 1e-12);
    assert_eq!((rep.cov_cd, rep.cov_emd), (1.0, 1.0));

    let shape = run.data(Split::Train).join("shape_000.xyz");
    let printed = ok(shapeseq(&["--out", out, "reconstruct", shape.to_str().unwrap()]));
    assert!(printed.contains("cd "));
    assert!(root.join("reconstructions/shape_000.rec.xyz").exists());

    let usage = ok(shapeseq(&["--out", out, "usage-report"]));
    assert!(usage.contains("codebook usage"));

    // the unconditional model cannot complete depth images
    let depth = run.depth().join("shape_000.pgm");
    let refused = shapeseq(&["--out", out, "complete", "--depth", depth.to_str().unwrap(), "--k", "3"]);
    assert_eq!(refused.status.code(), Some(2));
}

#[test]
fn conditional_completion() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let mut config = tiny();
    config.condition.enabled = true;
    synth_data(&config, &run).unwrap();
    for stage in Stage::ALL {
        run_stage(stage, &config, &run).unwrap();
    }
    let depth = run.depth().join("shape_001.pgm");
    let dest = dir.path().join("completions");
    let sampling = config.sampling.clone();
    let out = shapeseq_cli::commands::complete(&config, &run, &depth, 3, &sampling, &dest).unwrap();
    assert_eq!(out.files.len(), 3);
    assert!(out.tmd.is_finite() && out.tmd >= 0.0);
    assert!(dest.join("tmd.txt").exists());
    let again = shapeseq_cli::commands::complete(&config, &run, &depth, 3, &sampling, &dir.path().join("again")).unwrap();
    assert_eq!(out.tmd, again.tmd);
}

#[test]
fn bad_arguments_fail_with_usage_status() {
    assert_eq!(shapeseq(&["generate", "--n", "many"]).status.code(), Some(2));
    assert_eq!(shapeseq(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(shapeseq(&["reconstruct"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "grouping.gruops = 4\n").unwrap();
    let out = shapeseq(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "synth-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gruops"));
    assert!(!Path::new(&dir.path().join("data")).exists());
}
