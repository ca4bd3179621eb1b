mod common;

use std::path::Path;
use std::process::Command;

use avic_cli::config::{parse_config, Settings, SweepParam};
use avic_core::pipeline::RunConfig;
use avic_core::report::read_report;
use common::*;

fn write_cfg(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn empty_file_gives_documented_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let s = parse_config(Some(&write_cfg(dir.path(), "")), &[]).unwrap();
    assert_eq!(s.run, RunConfig::default());
    assert_eq!(
        (s.run.epsilon, s.run.alpha, s.run.cls_lr, s.run.vae_lr),
        (0.02, 1.0, 0.005, 0.05)
    );
    assert_eq!(s, Settings::default());
    assert_eq!(parse_config(None, &[]).unwrap(), Settings::default());
}

#[test]
fn overrides_win_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "[train]\nepsilon = 0.05\nalpha = 0.5\n");
    let s = parse_config(Some(&cfg), &["epsilon=0.1".into()]).unwrap();
    assert_eq!((s.run.epsilon, s.run.alpha), (0.1, 0.5));
    let s = parse_config(Some(&cfg), &["train.epsilon=0.3".into()]).unwrap();
    assert_eq!(s.run.epsilon, 0.3);
}

#[test]
fn typo_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let err = parse_config(Some(&write_cfg(dir.path(), "epsilom=0.1\n")), &[]).unwrap_err();
    assert!(format!("{err:#}").contains("epsilom"), "{err:#}");
    let err = parse_config(None, &["epsilom=0.1".into()]).unwrap_err();
    assert!(format!("{err:#}").contains("epsilom"), "{err:#}");
}

#[test]
fn invariant_violations_name_the_key() {
    for (o, key) in [
        ("epsilon=2", "epsilon"),
        ("alpha=-1", "alpha"),
        ("vae_lr=0", "vae_lr"),
        ("batch_size=0", "batch_size"),
    ] {
        let err = parse_config(None, &[o.into()]).unwrap_err();
        assert!(format!("{err:#}").contains(key), "{o}: {err:#}");
    }
    let err = parse_config(Some(Path::new("/nonexistent/avic.cfg")), &[]).unwrap_err();
    assert!(format!("{err:#}").contains("/nonexistent/avic.cfg"));
}

#[test]
fn full_file_parses() {
    let dir = tempfile::tempdir().unwrap();
    let text = "\
[run]
dataset = cifar10
arch = resnet_small
seed = 7
[data]
data_dir = /tmp/d
train_limit = 100
[train]
global_epochs = 4
latent_dim = 32
[attack]
pgd_steps = 20
pgd_rand_init = true
transfer_eps = 0.1
[sweep]
sweep_param = alpha
sweep_values = 0.5, 1, 2
[output]
out_dir = /tmp/o
samples = 0
";
    let s = parse_config(Some(&write_cfg(dir.path(), text)), &[]).unwrap();
    assert_eq!(s.run.dataset.as_str(), "cifar10");
    assert_eq!(s.run.arch.as_str(), "resnet_small");
    assert_eq!(
        (s.run.seed, s.run.train_limit, s.run.epochs.global, s.run.latent_dim),
        (7, Some(100), 4, Some(32))
    );
    assert_eq!(
        (s.run.pgd_steps, s.run.pgd_rand_init, s.run.transfer_eps.clone()),
        (20, true, vec![0.1])
    );
    assert_eq!(
        (s.sweep.param, s.sweep.values.clone()),
        (SweepParam::Alpha, vec![0.5, 1.0, 2.0])
    );
    assert_eq!((s.out_dir.to_str(), s.run.samples), (Some("/tmp/o"), 0));
    assert_eq!(s.data_dir(), Path::new("/tmp/d"));
}

#[test]
fn shipped_desk_preset_parses() {
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_mnist.cfg");
    let s = parse_config(Some(&preset), &[]).unwrap();
    assert_eq!((s.run.train_limit, s.run.test_limit), (Some(10_000), Some(2_000)));
}

#[test]
fn unknown_command_exits_2_with_usage() {
    let out = Command::new(env!("CARGO_BIN_EXE_avic")).arg("trian").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn failing_command_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_avic"))
        .args(["run-avic", "--data"])
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-images"));
}

#[test]
fn stage_commands_chain_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(dir.path(), 40, 20);
    let out = dir.path().join("stages");
    let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());
    let extra = quick();
    for cmd in ["train-vae", "attack-train", "cls-train", "finetune", "eval"] {
        assert_eq!(avic(&[cmd, "--data", d, "--out", o], &extra), 0, "{cmd}");
    }
    for f in [
        "vae.bin",
        "gen.separate.bin",
        "cls.separate.bin",
        "gen.bin",
        "cls.bin",
        "eval.json",
        "global.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let snapshot =
        |names: &[&str]| -> Vec<Vec<u8>> { names.iter().map(|n| std::fs::read(out.join(n)).unwrap()).collect() };
    let files = ["gen.bin", "cls.bin", "gen.adam.bin", "eval.json"];
    let first = snapshot(&files);
    assert_eq!(avic(&["finetune", "--data", d, "--out", o], &extra), 0);
    assert_eq!(avic(&["eval", "--data", d, "--out", o], &extra), 0);
    assert_eq!(snapshot(&files), first);
}

#[test]
fn finetune_without_earlier_stages_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(dir.path(), 20, 10);
    let o = dir.path().join("empty");
    assert_eq!(
        avic(
            &[
                "finetune",
                "--data",
                data.to_str().unwrap(),
                "--out",
                o.to_str().unwrap()
            ],
            &quick()
        ),
        1
    );
}

#[test]
fn run_avic_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(dir.path(), 40, 20);
    let out = dir.path().join("run");
    let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(
        avic(&["run-avic", "--data", d, "--out", o, "--set", "seed=3"], &quick()),
        0
    );
    for f in [
        "report.json",
        "transfer.csv",
        "stages.csv",
        "timing.json",
        "samples.ppm",
        "vae.bin",
        "gen.bin",
        "cls.bin",
        "cls.separate.bin",
        "cls.clean.bin",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let r = read_report(&out.join("report.json")).unwrap();
    assert_eq!((r.seed, r.config.seed), (3, 3));
    std::fs::remove_file(out.join("transfer.csv")).unwrap();
    assert_eq!(avic(&["report", "--out", o], &[]), 0);
    let csv = std::fs::read_to_string(out.join("transfer.csv")).unwrap();
    assert_eq!(csv.lines().count(), r.transfer.len() + 1);
}

#[test]
fn limit_flags_restrict_the_splits() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(dir.path(), 40, 20);
    let out = dir.path().join("lim");
    let args = [
        "run-avic",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--limit",
        "16",
        "--test-limit",
        "8",
    ];
    assert_eq!(avic(&args, &quick()), 0);
    let r = read_report(&out.join("report.json")).unwrap();
    assert_eq!((r.config.train_limit, r.config.test_limit), (Some(16), Some(8)));
    // Eight test images, so accuracies are multiples of 12.5.
    assert_eq!((r.clean_accuracy * 8.0 / 100.0).fract(), 0.0);
}

#[test]
fn sweep_writes_one_report_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(dir.path(), 32, 16);
    for parallel in [false, true] {
        let out = dir.path().join(format!("sweep-{parallel}"));
        let mut args = vec![
            "sweep",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--param",
            "epsilon",
            "--values",
            "0.01,0.03,0.05",
        ];
        if parallel {
            args.push("--parallel");
        }
        assert_eq!(avic(&args, &quick()), 0);
        let mut reports = Vec::new();
        for entry in std::fs::read_dir(&out).unwrap() {
            let p = entry.unwrap().path().join("report.json");
            if p.is_file() {
                reports.push(read_report(&p).unwrap().config.epsilon);
            }
        }
        reports.sort_by(f64::total_cmp);
        assert_eq!(reports, vec![0.01, 0.03, 0.05]);
        assert!(out.join("epsilon=0.03").join("report.json").is_file());
        assert_eq!(
            std::fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(),
            4
        );
    }
}
