use std::path::Path;
use std::process::{Command, Output};

use diffperc::config::RunConfig;
use diffperc::data::DatasetSpec;
use diffperc::io::MetricsLog;
use diffperc_core::task::TaskKind;

fn diffperc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffperc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = diffperc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::toy(TaskKind::Semseg);
    cfg.pretrain.codec_iters = 2;
    cfg.pretrain.toy_iters = 2;
    cfg.pretrain.dataset = DatasetSpec::new("shapes_semseg", 9, 2);
    cfg.dataset = DatasetSpec::new("shapes_semseg", 8, 3);
    cfg.eval_dataset = DatasetSpec::new("shapes_semseg", 4, 4);
    cfg.total_iters = 2;
    cfg.eval_interval = 0;
    cfg.batch_size = 2;
    cfg.ablation.iters = 2;
    cfg.ablation.early_iters = 1;
    cfg.ablation.seeds = vec![1];
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn every_subcommand_writes_its_artefacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |s: &str| d.join(s).to_str().unwrap().to_string();
    let cfg = tiny_config(d);
    std::fs::write(d.join("vocab.txt"), "<unk>\n<eos>\na\nphoto\nof\nthe\n").unwrap();
    std::fs::write(d.join("train.json"), r#"{"name": "shapes_semseg", "n": 6, "seed": 12}"#).unwrap();

    ok(&["pretrain-codec", "--config", &cfg, "--out", &p("codec"), "--vocab", &p("vocab.txt")]);
    let vocab = std::fs::read_to_string(d.join("codec/vocab.txt")).unwrap();
    assert!(vocab.lines().any(|l| l == "photo"));
    ok(&["pretrain-toy", "--config", &cfg, "--out", &p("toy"), "--init", &p("codec/checkpoint.bin")]);
    ok(&["train", "--config", &cfg, "--out", &p("train"), "--init", &p("toy/checkpoint.bin"), "--dataset", &p("train.json"), "--iters", "3"]);
    ok(&["eval", "--out", &p("eval"), "--checkpoint", &p("train/checkpoint.bin")]);
    ok(&["dump-features", "--out", &p("dump"), "--checkpoint", &p("train/checkpoint.bin"), "--index", "1"]);
    ok(&["plot-csv", "--out", &p("plot"), "--csv", &p("train/metrics.csv"), "--metric", "loss"]);
    ok(&["ablate", "--config", &cfg, "--out", &p("ablate"), "--init", &p("toy/checkpoint.bin"), "--rows", "baseline,up"]);

    for stage in ["codec", "toy", "train"] {
        for f in ["metrics.csv", "summary.json", "checkpoint.bin"] {
            assert!(d.join(stage).join(f).is_file(), "{stage}/{f}");
        }
    }
    let header = std::fs::read_to_string(d.join("train/metrics.csv")).unwrap();
    assert!(header.starts_with("run_id,step,metric,value\n"));
    let log = MetricsLog::read_csv(&d.join("train/metrics.csv")).unwrap();
    assert_eq!(log.series("loss").len(), 3);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval/summary.json")).unwrap()).unwrap();
    assert!(summary["metrics"]["miou"].as_f64().is_some());
    for f in ["image.pgm", "prediction.pgm", "target.pgm", "feature_level4.pgm", "attn_level4_prompt0.pgm"] {
        let bytes = std::fs::read(d.join("dump").join(f)).unwrap();
        assert!(bytes.starts_with(b"P5\n"), "{f}");
    }
    assert!(std::fs::read_to_string(d.join("plot/loss.svg")).unwrap().contains("<svg"));
    let table = std::fs::read_to_string(d.join("ablate/ablation.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("baseline,") || l.starts_with("up,")).count(), 4);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("o");
    let out = out.to_str().unwrap();
    let missing = diffperc(&["train", "--out", out, "--init", "/nonexistent/checkpoint.bin"]);
    assert!(!missing.status.success());

    let mut cfg = RunConfig::toy(TaskKind::Refseg);
    cfg.guidance.enabled = true;
    let path = d.join("refseg.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let bad = diffperc(&["pretrain-codec", "--config", path.to_str().unwrap(), "--out", out, "--iters", "1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("guidance"));

    let garbage = d.join("garbage.bin");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert!(!diffperc(&["eval", "--out", out, "--checkpoint", garbage.to_str().unwrap()]).status.success());
}
