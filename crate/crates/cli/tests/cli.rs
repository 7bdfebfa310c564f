//! End-to-end runs of the `bmd` binary on a tiny config.

use std::path::Path;
use std::process::Command;

use bmd_cli::checkpoint::Checkpoint;
use bmd_cli::config::ExperimentConfig;
use bmd_cli::{pipeline, state};

const TINY: &str = r#"
method = "RES[BMD]"
demos.episodes = 12
diffusion.hidden = [16, 16]
diffusion.epochs = 3
steering.hidden = [8, 8]
discovery.hidden = [8, 8]
residual.hidden = [8, 8]
ppo.critic_hidden = [8, 8]
ppo.update_epochs = 2
ppo.minibatch_size = 16
trainer.epochs = 5
trainer.warmup_epochs = 2
trainer.episodes = 4
trainer.checkpoint_every = 0
eval.episodes = 16
probe.episodes = 8
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(TINY).unwrap()
}

fn bmd(dir: &Path, args: &[&str]) -> std::process::Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_bmd"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir)
        .env("BMD_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(out: std::process::Output) -> std::process::Output {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn staged_pipeline_and_eval_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for stage in ["gen-demos", "pretrain", "discover", "finetune", "eval"] {
        ok(bmd(d, &[stage]));
    }
    let cfg = tiny();
    let eval_csv = |stem: &str| std::fs::read(bmd_cli::io::run_file(d, &cfg, stem, "csv")).unwrap();
    let first: Vec<Vec<u8>> = ["eval", "permode", "confusion", "trajectories"].iter().map(|s| eval_csv(s)).collect();
    ok(bmd(d, &["eval"]));
    let second: Vec<Vec<u8>> = ["eval", "permode", "confusion", "trajectories"].iter().map(|s| eval_csv(s)).collect();
    assert_eq!(first, second);
    assert!(String::from_utf8_lossy(&first[0]).starts_with("method,landscape,seed,SR,SR_M,mc_at_080,entropy\n"));

    // the discovery checkpoint resumes to the same final state as one run
    let ck = Checkpoint::load(&bmd_cli::io::run_file(d, &cfg, "finetune", "bmdc")).unwrap();
    let staged = state::restore_trainer(&cfg, &ck).unwrap();
    let pre = Checkpoint::load(&bmd_cli::io::run_file(d, &cfg, "pretrain", "bmdc")).unwrap();
    let direct = pipeline::train(&cfg, state::load_diffusion(&pre, &cfg.diffusion).unwrap()).unwrap();
    assert_eq!(
        state::trainer_checkpoint(&cfg, &staged, "x").to_bytes(),
        state::trainer_checkpoint(&cfg, &direct, "x").to_bytes()
    );

    ok(bmd(d, &["plot"]));
    let svg = std::fs::read_to_string(bmd_cli::io::run_file(d, &cfg, "trajectories_plot", "svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 16);
    assert!(bmd_cli::io::run_file(d, &cfg, "landscape", "csv").exists());

    let out = ok(bmd(d, &["report"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("RES[BMD]"));
}

#[test]
fn trainer_checkpoint_round_trip_is_bit_identical() {
    for method in ["RES[BMD]", "DSRL", "DPPO"] {
        let mut cfg = tiny();
        cfg.method = method.parse().unwrap();
        let ds = pipeline::demos(&cfg).unwrap();
        let (policy, _) = pipeline::pretrain(&cfg, &ds).unwrap();
        let tr = pipeline::train(&cfg, policy).unwrap();
        let bytes = state::trainer_checkpoint(&cfg, &tr, "finetune").to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let back = state::restore_trainer(&cfg, &ck).unwrap();
        assert_eq!(state::trainer_checkpoint(&cfg, &back, "finetune").to_bytes(), bytes, "{method}");
    }
}

#[test]
fn checkpoint_for_another_method_is_rejected() {
    let cfg = tiny();
    let ds = pipeline::demos(&cfg).unwrap();
    let (policy, _) = pipeline::pretrain(&cfg, &ds).unwrap();
    let tr = pipeline::new_trainer(&cfg, policy).unwrap();
    let ck = state::trainer_checkpoint(&cfg, &tr, "discovery");
    let other = ExperimentConfig {
        method: "DSRL".parse().unwrap(),
        ..cfg.clone()
    };
    assert!(state::restore_trainer(&other, &ck).is_err());
    let mut wider = cfg.clone();
    wider.ppo.critic_hidden = vec![9, 8];
    let e = state::restore_trainer(&wider, &ck).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // missing previous stage
    assert_eq!(bmd(d, &["discover"]).status.code(), Some(3));
    // config validation
    assert_eq!(bmd(d, &["gen-demos", "--set", "trainer.warmup_epochs = 99"]).status.code(), Some(2));
    assert_eq!(bmd(d, &["gen-demos", "--set", "nonsense = 1"]).status.code(), Some(2));
    // version mismatch
    ok(bmd(d, &["gen-demos"]));
    ok(bmd(d, &["pretrain"]));
    let cfg = tiny();
    let p = bmd_cli::io::run_file(d, &cfg, "pretrain", "bmdc");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&p, bytes).unwrap();
    let out = bmd(d, &["discover"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 99"));
    // divergence: any NLL counts as too high with a negative margin
    ok(bmd(d, &["pretrain"]));
    let out = bmd(
        d,
        &[
            "discover",
            "--input",
            p.to_str().unwrap(),
            "--set",
            "trainer.divergence_margin = -100.0",
            "--set",
            "trainer.divergence_patience = 1",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn equal_hash_and_seed_give_equal_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        for stage in ["gen-demos", "pretrain", "discover", "finetune", "eval"] {
            ok(bmd(d, &[stage, "--seed", "3"]));
        }
    }
    let cfg = ExperimentConfig { seed: 3, ..tiny() };
    for stem in ["eval", "permode", "confusion"] {
        assert_eq!(
            std::fs::read(bmd_cli::io::run_file(a.path(), &cfg, stem, "csv")).unwrap(),
            std::fs::read(bmd_cli::io::run_file(b.path(), &cfg, stem, "csv")).unwrap()
        );
    }
}
