//! End-to-end checks of the command-line surface: exit codes, output files,
//! overwrite protection, and artifact reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_strep"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("strep-cli-{tag}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Tiny config: small enough that generate + pretrain + eval stays quick.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "[data]\nnodes = 8\ndays = 4\nsteps_per_day = 48\n\n\
         [model]\ndim = 16\nlayers = 2\nheads = 2\nproxy_tokens = 2\n\n\
         [train]\nmax_epochs = 2\nbatch_size = 8\npatience = 2\nseed = 11\n\n\
         [eval]\nhorizons = 12\nrepeats = 2\nfraction = 0.2\n",
    )
    .unwrap();
    path
}

#[test]
fn generate_is_seed_reproducible_and_respects_force() {
    let dir = workdir("generate");
    let cfg = write_tiny_config(&dir);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let bytes_a = fs::read(out_a.join("data.strp")).unwrap();
    let bytes_b = fs::read(out_b.join("data.strp")).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seed must produce identical containers");
    assert!(out_a.join("data.strp.meta").exists());
    assert!(out_a.join("data.strp.adj.csv").exists());
    assert!(out_a.join("run_config.cfg").exists());
    assert!(!out_a.join(".lock").exists(), "lock released");

    // Existing outputs are refused without --force (usage error: exit 2).
    let code = bin()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_a)
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(2));
    let status = bin()
        .args(["generate", "--force", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_a)
        .status()
        .unwrap();
    assert!(status.success());

    // A different seed changes the data.
    let out_c = dir.join("c");
    bin()
        .args(["generate", "--seed", "999", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_c)
        .status()
        .unwrap();
    assert_ne!(bytes_a, fs::read(out_c.join("data.strp")).unwrap());
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = workdir("missing-data");
    let cfg = write_tiny_config(&dir);
    let code = bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(dir.join("nope.strp"))
        .arg("--out")
        .arg(dir.join("out"))
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(3));
}

#[test]
fn divergence_exits_with_code_four() {
    let dir = workdir("diverge");
    // An absurd learning rate blows the parameters up within an epoch.
    let cfg = dir.join("explode.cfg");
    fs::write(
        &cfg,
        "[data]\nnodes = 8\ndays = 4\nsteps_per_day = 48\n\n\
         [model]\ndim = 16\nlayers = 1\nheads = 2\nproxy_tokens = 2\n\n\
         [train]\nlr = 1e25\ngrad_clip = 1e30\nmax_epochs = 3\nbatch_size = 8\npatience = 3\nseed = 2\n",
    )
    .unwrap();
    let gen = dir.join("gen");
    assert!(bin()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&gen)
        .status()
        .unwrap()
        .success());
    let code = bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(gen.join("data.strp"))
        .arg("--out")
        .arg(dir.join("out"))
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(4));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = workdir("bad-config");
    let path = dir.join("bad.cfg");
    fs::write(&path, "[train]\nbogus_key = 1\n").unwrap();
    let code = bin()
        .args(["generate", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(2));
}

#[test]
fn full_pipeline_writes_expected_artifacts() {
    let dir = workdir("pipeline");
    let cfg = write_tiny_config(&dir);
    let gen = dir.join("gen");
    let pre = dir.join("pre");
    let enc = dir.join("enc");
    let eval = dir.join("eval");

    assert!(bin()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&gen)
        .status()
        .unwrap()
        .success());
    assert!(bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(gen.join("data.strp"))
        .arg("--out")
        .arg(&pre)
        .status()
        .unwrap()
        .success());
    let log = fs::read_to_string(pre.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus one row per epoch:\n{log}");
    assert!(log.starts_with("epoch,l_recon,l_pred,l_ms,total,val_total,wall_seconds"));

    assert!(bin()
        .args(["encode", "--split", "test", "--checkpoint"])
        .arg(pre.join("checkpoint.bin"))
        .arg("--data")
        .arg(gen.join("data.strp"))
        .arg("--out")
        .arg(&enc)
        .status()
        .unwrap()
        .success());
    assert!(enc.join("representations_test.bin").exists());

    assert!(bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(pre.join("checkpoint.bin"))
        .arg("--data")
        .arg(gen.join("data.strp"))
        .arg("--out")
        .arg(&eval)
        .status()
        .unwrap()
        .success());
    let report = fs::read_to_string(eval.join("eval_report.csv")).unwrap();
    assert!(report.contains("RepRidge,12"));
    assert!(report.contains("HL,12"));
    assert!(report.contains("RidgeRaw,12"));
    assert!(eval.join("eval_report.json").exists());
    assert!(eval.join("timings.csv").exists());

    // Requested horizons only.
    let eval2 = dir.join("eval2");
    assert!(bin()
        .args(["eval", "--horizons", "12,24", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(pre.join("checkpoint.bin"))
        .arg("--data")
        .arg(gen.join("data.strp"))
        .arg("--out")
        .arg(&eval2)
        .status()
        .unwrap()
        .success());
    let report2 = fs::read_to_string(eval2.join("eval_report.csv")).unwrap();
    let horizons: Vec<&str> = report2
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert!(horizons.iter().all(|&h| h == "12" || h == "24"));
    assert!(horizons.contains(&"24"));
}

#[test]
fn reports_are_byte_reproducible_across_runs_and_worker_counts() {
    let dir = workdir("repro");
    let cfg = write_tiny_config(&dir);
    let gen = dir.join("gen");
    assert!(bin()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&gen)
        .status()
        .unwrap()
        .success());

    let run = |tag: &str, workers: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let pre = dir.join(format!("pre-{tag}"));
        let eval = dir.join(format!("eval-{tag}"));
        let enc = dir.join(format!("enc-{tag}"));
        assert!(bin()
            .env("STREP_WORKERS", workers)
            .args(["pretrain", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(gen.join("data.strp"))
            .arg("--out")
            .arg(&pre)
            .status()
            .unwrap()
            .success());
        assert!(bin()
            .env("STREP_WORKERS", workers)
            .args(["encode", "--split", "val", "--checkpoint"])
            .arg(pre.join("checkpoint.bin"))
            .arg("--data")
            .arg(gen.join("data.strp"))
            .arg("--out")
            .arg(&enc)
            .status()
            .unwrap()
            .success());
        assert!(bin()
            .env("STREP_WORKERS", workers)
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(pre.join("checkpoint.bin"))
            .arg("--data")
            .arg(gen.join("data.strp"))
            .arg("--out")
            .arg(&eval)
            .status()
            .unwrap()
            .success());
        (
            fs::read(pre.join("checkpoint.bin")).unwrap(),
            fs::read(enc.join("representations_val.bin")).unwrap(),
            fs::read(eval.join("eval_report.csv")).unwrap(),
        )
    };

    let (ck1, st1, rp1) = run("one", "1");
    let (ck2, st2, rp2) = run("two", "2");
    assert_eq!(ck1, ck2, "checkpoints must not depend on worker count");
    assert_eq!(st1, st2, "stores must not depend on worker count");
    assert_eq!(rp1, rp2, "reports must not depend on worker count");
}

#[test]
fn generate_imports_csv_containers() {
    let dir = workdir("csv-import");
    let cfg = write_tiny_config(&dir);
    let csv = dir.join("raw.csv");
    let mut text = String::new();
    for t in 0..96 {
        text.push_str(&format!("{},{},{}\n", t as f64 * 0.5, 100.0 - t as f64, (t % 48) as f64));
    }
    fs::write(&csv, text).unwrap();
    let out = dir.join("imported");
    assert!(bin()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--from-csv")
        .arg(&csv)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    assert!(out.join("data.strp").exists());
    // 3 columns become 3 nodes; the sidecar carries the configured cadence.
    let meta = fs::read_to_string(out.join("data.strp.meta")).unwrap();
    assert!(meta.contains("steps_per_day = 48"), "{meta}");
}

#[test]
fn env_out_root_prefixes_relative_outputs() {
    let dir = workdir("outroot");
    let cfg = write_tiny_config(&dir);
    assert!(bin()
        .env("STREP_OUT_ROOT", &dir)
        .args(["generate", "--config"])
        .arg(&cfg)
        .args(["--out", "rooted"])
        .status()
        .unwrap()
        .success());
    assert!(dir.join("rooted/data.strp").exists());
}
