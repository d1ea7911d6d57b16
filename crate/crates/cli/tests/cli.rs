use std::path::Path;
use std::process::Command;

use icicl_cli::commands::{bench, eval, gen, theorem, train};
use icicl_cli::data::{cache_path, Source};
use icicl_cli::{CliError, ExperimentConfig};
use icicl_core::models::ModelKind;
use icicl_core::task_gen::read_task_cache;

fn tiny(out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 3
out_dir = "{}"
[model]
kind = "icicl-tnp"
d_z = 16
layers = 1
heads = 2
d_v = 8
d_qk = 8
m = 4
m_ic = 4
[train]
epochs = 2
iterations = 4
batch_size = 4
eval_every = 1
eval_tasks = 6
checkpoint_every = 1
[task.synth]
n_t = 16
n_c = [1, 8]
[eval]
tasks = 12
n_ic = 2
"#,
        out.display()
    );
    ExperimentConfig::parse(&text).unwrap().resolve().unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icicl"))
}

fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn gen_is_byte_identical_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("a"));
    cfg.eval.tasks = 1000;
    gen::run(&cfg).unwrap();
    let first = std::fs::read(cache_path(&cfg)).unwrap();
    gen::run(&cfg).unwrap();
    assert_eq!(first, std::fs::read(cache_path(&cfg)).unwrap());

    let loaded = read_task_cache(&cache_path(&cfg), Some(&cfg.eval_hash().unwrap())).unwrap();
    let fresh = Source::open(&cfg).unwrap().eval_tasks(&cfg).unwrap();
    assert_eq!(loaded.len(), 1000);
    assert_eq!(loaded, fresh);
    let manifest = std::fs::read_to_string(cfg.out_dir.join("tasks/manifest.json")).unwrap();
    assert!(manifest.contains(&cfg.eval_hash().unwrap()));
}

#[test]
fn stale_cache_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    gen::run(&cfg).unwrap();
    let mut changed = cfg.clone();
    changed.task.synth.sigma_n = 0.1;
    let opts = eval::EvalOptions {
        untrained: true,
        ..Default::default()
    };
    match eval::run(&changed, &opts) {
        Err(CliError::Data(m)) => assert!(m.contains("regenerate"), "{m}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn untrained_cnp_report_is_finite_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.model.kind = ModelKind::Cnp;
    let opts = eval::EvalOptions {
        untrained: true,
        ..Default::default()
    };
    let a = eval::run(&cfg, &opts).unwrap();
    assert!(a
        .model
        .buckets
        .iter()
        .all(|b| b.mean.is_finite() && b.std_err.is_finite()));
    assert_eq!(a.model.buckets.len(), 3);
    let csv = || std::fs::read_to_string(cfg.out_dir.join("eval/cnp.csv")).unwrap();
    let first = csv();
    eval::run(&cfg, &opts).unwrap();
    assert_eq!(first, csv());
    assert!(a.oracle.is_some());
}

#[test]
fn training_reruns_and_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("a"));
    let a = train::run(&cfg, false).unwrap();
    assert_eq!(a.steps, 8);
    let metrics_a = std::fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap();

    let cfg_b = ExperimentConfig {
        out_dir: dir.path().join("b"),
        ..cfg.clone()
    };
    train::run(&cfg_b, false).unwrap();
    let read = |c: &ExperimentConfig, f: &str| std::fs::read(c.out_dir.join(f)).unwrap();
    let metrics_b = std::fs::read_to_string(cfg_b.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(without_timing(&metrics_a), without_timing(&metrics_b));
    for f in [
        "checkpoints/final.ckpt",
        "eval/epoch-2.csv",
        "report.txt",
        "config.snapshot",
    ] {
        if f != "config.snapshot" {
            assert_eq!(read(&cfg, f), read(&cfg_b, f), "{f}");
        }
    }

    // Stop after one epoch, then resume to the end.
    let cfg_c = ExperimentConfig {
        out_dir: dir.path().join("c"),
        ..cfg.clone()
    };
    let mut short = cfg_c.clone();
    short.train.epochs = 1;
    train::run(&short, false).unwrap();
    let mut trainer_ckpt =
        icicl_core::checkpoint::Checkpoint::load(cfg_c.out_dir.join("checkpoints/latest.ckpt")).unwrap();
    trainer_ckpt.meta["train"] = serde_json::to_value(&cfg_c.train).unwrap();
    trainer_ckpt
        .save(cfg_c.out_dir.join("checkpoints/latest.ckpt"))
        .unwrap();
    let resumed = train::run(&cfg_c, true).unwrap();
    assert_eq!(resumed.losses.len(), 4);
    assert_eq!(
        read(&cfg, "checkpoints/final.ckpt"),
        read(&cfg_c, "checkpoints/final.ckpt")
    );
    let metrics_c = std::fs::read_to_string(cfg_c.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(without_timing(&metrics_a), without_timing(&metrics_c));
}

#[test]
fn resume_with_other_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    train::run(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.train.optimizer.lr = 1e-3;
    assert!(matches!(train::run(&other, true), Err(CliError::Usage(_))));
}

#[test]
fn theorem_command_cases() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.theorem.n_tasks = 60;
    cfg.theorem.n_samples = 1000;
    let r = theorem::run(&cfg).unwrap();
    assert!(r.holds && r.significant);

    cfg.theorem.grid_points = 1;
    cfg.theorem.families = vec![icicl_core::task_gen::KernelFamily::Rbf];
    let r = theorem::run(&cfg).unwrap();
    assert!(r.holds && !r.significant);
    assert_eq!((r.lhs.mean, r.rhs.mean), (0.0, 0.0));
    assert!(std::fs::read_to_string(cfg.out_dir.join("theorem.txt"))
        .unwrap()
        .contains("PASS"));

    cfg.theorem.n_tasks = 0;
    assert!(matches!(theorem::run(&cfg), Err(CliError::Usage(_))));
}

#[test]
fn bench_table_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.bench.n_c = vec![16, 32, 64];
    cfg.bench.repeats = 1;
    cfg.bench.d_z = 16;
    cfg.bench.m = 4;
    let r = bench::run(&cfg).unwrap();
    let csv = std::fs::read_to_string(cfg.out_dir.join("bench.csv")).unwrap();
    assert!(csv.starts_with("model,N_c,N_t,N_ic,flops,wall_ms\n"));
    assert_eq!(r.rows.len(), 9);
    assert_eq!(r.fits.len(), 2);
    assert!(csv.lines().last().unwrap().starts_with("full-tnp,64,128,0,"));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let status = |args: &[&str]| {
        bin()
            .args(args)
            .env_remove("ICICL_DATA_DIR")
            .output()
            .unwrap()
            .status
            .code()
    };

    assert_eq!(
        status(&[
            "verify-theorem",
            "--seed",
            "1",
            "--n-tasks",
            "5",
            "--n-samples",
            "1000",
            "--out",
            out
        ]),
        Some(0)
    );
    assert_eq!(
        status(&["verify-theorem", "--seed", "1", "--n-tasks", "0", "--out", out]),
        Some(2)
    );
    assert_eq!(status(&["train", "--out", out]), Some(2));
    assert_eq!(status(&["no-such-command"]), Some(2));
    assert_eq!(status(&["eval", "--seed", "1", "--out", out]), Some(3));

    let cfg_path = dir.path().join("image.toml");
    std::fs::write(&cfg_path, "seed = 1\n[task]\nkind = \"image\"\n").unwrap();
    let missing = dir.path().join("nowhere");
    let code = bin()
        .args([
            "gen",
            "-c",
            cfg_path.to_str().unwrap(),
            "--out",
            out,
            "--data-dir",
            missing.to_str().unwrap(),
        ])
        .output()
        .unwrap()
        .status
        .code();
    assert_eq!(code, Some(3));

    std::fs::write(&cfg_path, "seed = 1\n[model]\nd_z = 0\n").unwrap();
    assert_eq!(status(&["gen", "-c", cfg_path.to_str().unwrap()]), Some(2));
}
