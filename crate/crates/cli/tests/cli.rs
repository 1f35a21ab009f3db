mod common;

use std::fs;

use common::{assert_ok, code, config, mhmtl, snapshot, stderr, write_config, TASKS};
use mhmtl_core::data::{load_manifest, read_gray};
use mhmtl_core::metrics::EvalReport;
use mhmtl_core::TaskKind;

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, flags) in [
        ("gen-data", &["--config", "--out", "--seed", "--threads"][..]),
        ("train", &["--config", "--resume", "--out", "--threads"][..]),
        ("eval", &["--checkpoint", "--manifest", "--config", "--oracle", "--out"][..]),
        ("predict", &["--checkpoint", "--image", "--subtask", "--config", "--out"][..]),
    ] {
        let out = mhmtl(dir.path(), &[cmd, "--help"]);
        assert_ok(&out);
        let text = String::from_utf8(out.stdout).unwrap();
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    let top = String::from_utf8(mhmtl(dir.path(), &["--help"]).stdout).unwrap();
    assert!(top.contains("MHMTL_THREADS"));
}

#[test]
fn unknown_flag_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let out = mhmtl(dir.path(), &["train", "--config", "x.toml", "--bogus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--bogus"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(3, 10, 5));
    let cfg = cfg.to_str().unwrap();
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg, "--out", "a"]));
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg, "--out", "b"]));
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg, "--out", "c", "--seed", "4"]));
    let a = snapshot(&dir.path().join("a"));
    assert_eq!(a, snapshot(&dir.path().join("b")));
    assert_ne!(a, snapshot(&dir.path().join("c")));
    // Rerunning into the same directory rewrites the same bytes.
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg, "--out", "a"]));
    assert_eq!(a, snapshot(&dir.path().join("a")));
}

#[test]
fn gen_data_writes_count_per_subtask() {
    let dir = tempfile::tempdir().unwrap();
    let text = config(1, 10, 100).replace("orig_size_min = 80\norig_size_max = 160", "orig_size_min = 48\norig_size_max = 56");
    let cfg = write_config(dir.path(), &text);
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "d"]));
    let text = fs::read_to_string(dir.path().join("d/manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1 + 400);
    let m = load_manifest(&dir.path().join("d/manifest.jsonl")).unwrap();
    assert_eq!(m.samples.len(), 400);
    assert_eq!(load_manifest(&dir.path().join("d/val/manifest.jsonl")).unwrap().samples.len(), 16);
}

#[test]
fn invalid_task_kind_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(1, 10, 4).replace("\"detection\"", "\"detecton\""));
    let out = mhmtl(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "d"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("kind"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), &config(1, 10, 4).replace("keypoints = 2", "keypoints = 0"));
    let out = mhmtl(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "d"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("tasks.reg.keypoints"), "{}", stderr(&out));
}

#[test]
fn pipeline_runs_for_all_four_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(5, 40, 8));
    let cfg = cfg.to_str().unwrap();
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg, "--out", "data"]));
    assert_ok(&mhmtl(dir.path(), &["train", "--config", cfg]));
    for f in ["last.ckpt", "best.ckpt", "metrics.jsonl", "last_eval.txt"] {
        assert!(dir.path().join("run").join(f).is_file(), "missing {f}");
    }
    let out = mhmtl(
        dir.path(),
        &["eval", "--checkpoint", "run/best.ckpt", "--manifest", "data/val/manifest.jsonl", "--config", cfg, "--out", "ev"],
    );
    assert_ok(&out);
    let text = fs::read_to_string(dir.path().join("ev/eval_report.txt")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), text);
    let report = EvalReport::parse(&text).unwrap();
    assert_eq!(report.subtasks.len(), 4);
    for kind in TaskKind::ALL {
        assert!(report.category_means().iter().any(|(k, _)| k.starts_with(kind.name())), "{kind}");
    }

    for id in ["seg", "cls", "det", "reg"] {
        let image = format!("data/val/images/{id}-00001.png");
        let out_dir = format!("pred-{id}");
        let out = mhmtl(
            dir.path(),
            &["predict", "--checkpoint", "run/last.ckpt", "--image", &image, "--subtask", id, "--out", &out_dir],
        );
        assert_ok(&out);
        let doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(&out_dir).join("prediction.json")).unwrap())
                .unwrap();
        let orig = read_gray(&dir.path().join(&image)).unwrap().size();
        assert_eq!(doc["orig_size"], serde_json::json!(orig));
        match id {
            "seg" => {
                let mask = read_gray(&dir.path().join(&out_dir).join("mask.png")).unwrap();
                assert_eq!(mask.size(), orig);
                assert!(mask.pixels.iter().all(|&v| v < 3));
            }
            "cls" => {
                let probs: Vec<f64> = serde_json::from_value(doc["probs"].clone()).unwrap();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(doc["class"].as_u64().unwrap() < 3);
            }
            "det" => {
                let score = doc["score"].as_f64().unwrap();
                assert!((0.0..=1.0).contains(&score));
                assert_eq!(doc["box"].as_array().unwrap().len(), 4);
            }
            _ => {
                let k: Vec<[f64; 2]> = serde_json::from_value(doc["keypoints"].clone()).unwrap();
                assert_eq!(k.len(), 2);
            }
        }
    }
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(2, 4, 4));
    let cfg_s = cfg.to_str().unwrap();
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg_s, "--out", "data"]));
    assert_ok(&mhmtl(dir.path(), &["train", "--config", cfg_s]));

    // Digest mismatch: same tasks, different architecture.
    let other = dir.path().join("other.toml");
    fs::write(&other, config(2, 4, 4).replace("input_size = [64, 64]", "input_size = [32, 32]")).unwrap();
    let out = mhmtl(
        dir.path(),
        &["eval", "--checkpoint", "run/last.ckpt", "--manifest", "data/manifest.jsonl", "--config", other.to_str().unwrap()],
    );
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("digest"));

    let out = mhmtl(
        dir.path(),
        &["predict", "--checkpoint", "run/last.ckpt", "--image", "data/images/seg-00000.png", "--subtask", "nope"],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    let out = mhmtl(
        dir.path(),
        &["predict", "--checkpoint", "run/last.ckpt", "--image", "broken.png", "--subtask", "seg"],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    fs::write(dir.path().join("bad.ckpt"), b"garbage").unwrap();
    let out = mhmtl(dir.path(), &["eval", "--checkpoint", "bad.ckpt", "--manifest", "data/manifest.jsonl"]);
    assert_eq!(code(&out), 4);

    fs::remove_file(dir.path().join("data/images/cls-00002.png")).unwrap();
    let out = mhmtl(dir.path(), &["eval", "--oracle", "--manifest", "data/manifest.jsonl"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("cls-00002"));
}

#[test]
fn training_twice_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(8, 24, 4));
    let cfg = cfg.to_str().unwrap();
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg, "--out", "data"]));
    assert_ok(&mhmtl(dir.path(), &["train", "--config", cfg, "--out", "a"]));
    assert_ok(&mhmtl(dir.path(), &["train", "--config", cfg, "--out", "b"]));
    let a = snapshot(&dir.path().join("a"));
    assert_eq!(a.len(), 4);
    assert_eq!(a, snapshot(&dir.path().join("b")));
}

#[test]
fn synth_section_trains_without_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = config(8, 24, 4)
        .replace("manifest = \"data/manifest.jsonl\"\n", "")
        .replace("val_manifest = \"data/val/manifest.jsonl\"\n", "");
    let cfg = write_config(dir.path(), &text);
    assert_ok(&mhmtl(dir.path(), &["train", "--config", cfg.to_str().unwrap(), "--out", "mem"]));

    // Same seed through gen-data and a manifest gives the same run.
    let cfg2 = write_config(dir.path(), &config(8, 24, 4));
    let cfg2 = cfg2.to_str().unwrap();
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg2, "--out", "data"]));
    assert_ok(&mhmtl(dir.path(), &["train", "--config", cfg2, "--out", "disk"]));
    assert_eq!(
        fs::read(dir.path().join("mem/metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("disk/metrics.jsonl")).unwrap()
    );
}

#[test]
fn manifest_tasks_must_match_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(2, 4, 4));
    assert_ok(&mhmtl(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap(), "--out", "data"]));
    let changed = config(2, 4, 4).replace(TASKS, &TASKS.replace("classes = 3\n\n[[model.tasks]]\nid = \"det\"", "classes = 4\n\n[[model.tasks]]\nid = \"det\""));
    assert_ne!(changed, config(2, 4, 4));
    let cfg = write_config(dir.path(), &changed);
    let out = mhmtl(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("model.tasks.cls"), "{}", stderr(&out));
}
