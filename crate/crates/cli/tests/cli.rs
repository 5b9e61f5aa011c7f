//! End-to-end tests of the `tpd` binary: exit codes, determinism,
//! resume, and artifact-mixing refusal.

use std::path::Path;
use std::process::{Command, Output};

fn tpd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tpd"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

/// Small-everything config so each invocation stays fast.
fn tiny_config(dir: &Path) -> String {
    format!(
        r#"{{
  "seed": 5,
  "dataset": {{ "height": 16, "width": 16, "count": 3, "train_count": 2, "seed": 9 }},
  "model": {{ "base_channels": 8, "channel_mults": [1, 2], "attention_levels": [1],
              "time_embed_dim": 16, "num_heads": 4, "norm_groups": 4 }},
  "schedule": {{ "timesteps": 40 }},
  "sampler": {{ "steps": 5 }},
  "training": {{ "steps": 3, "batch_size": 1, "checkpoint_interval": 2 }},
  "paths": {{ "data_dir": "{data}", "out_dir": "{out}" }}
}}"#,
        data = dir.join("data").display(),
        out = dir.join("run").display()
    )
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn gen_data_is_deterministic_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(tmp.path()));

    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    assert_success(&tpd().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&d1).output().unwrap());
    assert_success(&tpd().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&d2).output().unwrap());
    assert_eq!(dir_bytes(&d1), dir_bytes(&d2), "reruns must be byte-identical");

    // count = 0 is refused up front.
    let bad = write_config(
        tmp.path(),
        r#"{ "dataset": { "count": 0, "train_count": 1 } }"#,
    );
    let out = tpd().args(["gen-data", "--config"]).arg(&bad).arg("--out").arg(tmp.path().join("x")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unwritable output location.
    let out = tpd()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg("/dev/null/nope")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{ "trainings": { "lr": 1 } }"#);
    let out = tpd().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("d")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("trainings"), "error names the key: {msg}");
}

#[test]
fn train_infer_cycle_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(tmp.path()));
    assert_success(&tpd().args(["gen-data", "--config"]).arg(&cfg).output().unwrap());

    // Two identical training runs.
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    assert_success(&tpd().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&r1).output().unwrap());
    assert_success(&tpd().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&r2).output().unwrap());
    let log1 = std::fs::read_to_string(r1.join("loss_log.tsv")).unwrap();
    let log2 = std::fs::read_to_string(r2.join("loss_log.tsv")).unwrap();
    assert_eq!(log1, log2, "identical config+seed must reproduce the loss log");
    assert_eq!(log1.lines().count(), 3);
    for (i, line) in log1.lines().enumerate() {
        let (step, loss) = line.split_once('\t').expect("step<TAB>loss format");
        assert_eq!(step.parse::<u64>().unwrap(), i as u64 + 1);
        loss.parse::<f64>().unwrap();
    }
    assert_eq!(
        std::fs::read(r1.join("ckpt_final.tpd")).unwrap(),
        std::fs::read(r2.join("ckpt_final.tpd")).unwrap()
    );

    // Inference twice from the same checkpoint: identical artifacts.
    let i1 = tmp.path().join("i1");
    let i2 = tmp.path().join("i2");
    let ckpt = r1.join("ckpt_final.tpd");
    for out_dir in [&i1, &i2] {
        assert_success(
            &tpd()
                .args(["infer", "--paired", "--config"])
                .arg(&cfg)
                .arg("--ckpt")
                .arg(&ckpt)
                .arg("--out")
                .arg(out_dir)
                .output()
                .unwrap(),
        );
    }
    assert_eq!(dir_bytes(&i1), dir_bytes(&i2));
    assert!(i1.join("report.json").exists());
    assert!(i1.join("00000_tryon.png").exists());
    assert!(i1.join("00000_stage1.png").exists());
    assert!(i1.join("00000_grid.png").exists());

    // Preservation holds on every emitted image.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(i1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["total_preservation_violations"], 0);
}

#[test]
fn resume_continues_loss_log_without_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny_config(tmp.path());
    let cfg = write_config(tmp.path(), &base);
    assert_success(&tpd().args(["gen-data", "--config"]).arg(&cfg).output().unwrap());

    // Uninterrupted 3-step run.
    let full = tmp.path().join("full");
    assert_success(&tpd().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&full).output().unwrap());

    // 2-step run, then resume to 3 in the same out dir.
    let two_cfg = write_config(
        &tmp.path().join("."),
        &base.replace("\"steps\": 3", "\"steps\": 2"),
    );
    let part = tmp.path().join("part");
    assert_success(&tpd().args(["train", "--config"]).arg(&two_cfg).arg("--out").arg(&part).output().unwrap());
    // Note: resuming must use the full 3-step config; the step count is
    // not part of the checkpoint, only the optimizer step counter is.
    let cfg3 = write_config(tmp.path(), &base);
    let out = tpd()
        .args(["train", "--config"])
        .arg(&cfg3)
        .arg("--out")
        .arg(&part)
        .arg("--ckpt")
        .arg(part.join("ckpt_final.tpd"))
        .output()
        .unwrap();
    assert_success(&out);

    let log_full = std::fs::read_to_string(full.join("loss_log.tsv")).unwrap();
    let log_part = std::fs::read_to_string(part.join("loss_log.tsv")).unwrap();
    assert_eq!(log_full, log_part, "resumed log must continue without gap or drift");
}

#[test]
fn mismatched_config_hash_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny_config(tmp.path());
    let cfg = write_config(tmp.path(), &base);
    assert_success(&tpd().args(["gen-data", "--config"]).arg(&cfg).output().unwrap());
    assert_success(&tpd().args(["train", "--config"]).arg(&cfg).output().unwrap());
    let ckpt = tmp.path().join("run").join("ckpt_final.tpd");

    // A different learning rate is a different model identity.
    let other = write_config(tmp.path(), &base.replace("\"batch_size\": 1", "\"batch_size\": 2"));
    let out = tpd()
        .args(["infer", "--paired", "--config"])
        .arg(&other)
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--out")
        .arg(tmp.path().join("i"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("hash"), "mixing is refused with a hash error: {msg}");

    // Resume under the changed config is refused the same way.
    let out = tpd()
        .args(["train", "--config"])
        .arg(&other)
        .arg("--out")
        .arg(tmp.path().join("r"))
        .arg("--ckpt")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Pointing at a dataset generated under different geometry fails.
    let wider = write_config(tmp.path(), &base.replace("\"width\": 16", "\"width\": 20"));
    let out = tpd().args(["train", "--config"]).arg(&wider).arg("--out").arg(tmp.path().join("w")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_emits_two_rows_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(tmp.path()));
    assert_success(&tpd().args(["gen-data", "--config"]).arg(&cfg).output().unwrap());

    let rep1 = tmp.path().join("a1.json");
    let rep2 = tmp.path().join("a2.json");
    for rep in [&rep1, &rep2] {
        assert_success(
            &tpd().args(["ablate", "--config"]).arg(&cfg).arg("--out").arg(rep).output().unwrap(),
        );
    }
    assert_eq!(std::fs::read(&rep1).unwrap(), std::fs::read(&rep2).unwrap());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&rep1).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["mode"], "satt");
    assert_eq!(rows[1]["mode"], "channel");
    assert_eq!(rows[0]["train_steps"], rows[1]["train_steps"]);
}

#[test]
fn grad_check_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{ "seed": 1234 }"#);
    let out = tpd().args(["grad-check", "--config"]).arg(&cfg).output().unwrap();
    assert_success(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    // Every family is listed exactly once.
    for family in ["conv2d", "linear", "silu", "group_norm", "softmax_attention", "full_unet"] {
        assert_eq!(text.matches(family).count(), 1, "{family} in:\n{text}");
    }

    // Negative control: injected backward fault must flip the exit code.
    let out = tpd()
        .args(["grad-check", "--config"])
        .arg(&cfg)
        .env("TPD_GRAD_CHECK_FAULT", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "fault injection must exit 2");
}
