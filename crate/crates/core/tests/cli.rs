use std::path::Path;
use std::process::{Command, Output};

use lpmoe_core::imageio::read_image;

const TINY: &str = "image_size = 32
embed_dim = 16
layers = 2
heads = 2
extractor_width = 4
adapter_heads = 2
adapter_points = 2
stages = 2
decoder_width = 4
batch_size = 2
lr = 0.003
checkpoint_every = 2
";

fn lpmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpmoe")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lpmoe(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = lpmoe(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn params_text_and_json() {
    let text = ok(&["params"]);
    assert!(text.contains("343673"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&ok(&["params", "--json"])).unwrap();
    assert_eq!(json["trainable"], 343_673);
    assert_eq!(json["frozen"], 449_088);

    let ablated: serde_json::Value = serde_json::from_str(&ok(&["params", "--json", "--ablate", "no-case"])).unwrap();
    assert!(ablated["trainable"].as_u64().unwrap() < 343_673);
    let mut last = 0;
    for s in ["0", "2", "4"] {
        let j: serde_json::Value = serde_json::from_str(&ok(&["params", "--json", "--stages", s])).unwrap();
        let n = j["trainable"].as_u64().unwrap();
        assert!(n > last, "stages {s}");
        last = n;
    }
}

#[test]
fn bad_arguments_and_configs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 3\nimage_size = 100\n").unwrap();
    let err = fails(&["params", "--config", p(&cfg)]);
    assert!(err.contains("line 2") && err.contains("image_size"), "{err}");

    std::fs::write(&cfg, "lr = quick\n").unwrap();
    let err = fails(&["params", "--config", p(&cfg)]);
    assert!(err.contains("line 1") && err.contains("lr"), "{err}");

    fails(&["params", "--stages", "3"]);
    fails(&["params", "--ablate", "no-everything"]);
    fails(&["params", "--config", p(&dir.path().join("missing.cfg"))]);
    fails(&["eval"]);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = ok(&["gen-data", "--out", p(d), "--count", "3", "--size", "32", "--format", "png"]);
        assert!(out.contains("wrote 3 pairs"));
    }
    for f in ["images/00000.png", "masks/00002.png", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    ok(&["gen-data", "--out", p(&dir.path().join("c")), "--count", "2", "--size", "32", "--start-index", "3"]);
    assert!(dir.path().join("c/images/00004.ppm").exists());
    fails(&["gen-data", "--out", p(&dir.path().join("d")), "--camouflage", "2"]);
}

#[test]
fn train_resume_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data), "--count", "4"]);

    // A straight run of four iterations.
    let run = root.join("run");
    let stdout = ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--iterations", "4"]);
    assert!(stdout.contains("final train iou"));
    for f in
        ["config.txt", "train.log", "checkpoint-000002.bin", "checkpoint-000004.bin", "checkpoint.bin", "summary.json"]
    {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["backbone_unchanged"], true);
    assert_eq!(summary["iterations"], 4);

    // Resuming from the midpoint rewrites the same log and final weights.
    let ckpt = run.join("checkpoint-000002.bin");
    let resumed = root.join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::write(resumed.join("train.log"), &log).unwrap();
    ok(&["train", "--data", p(&data), "--out", p(&resumed), "--resume", p(&ckpt), "--iterations", "4"]);
    assert_eq!(std::fs::read_to_string(resumed.join("train.log")).unwrap(), log);
    assert_eq!(
        std::fs::read(resumed.join("checkpoint.bin")).unwrap(),
        std::fs::read(run.join("checkpoint.bin")).unwrap()
    );

    // Evaluating the training set reproduces the logged train IoU.
    let eval = root.join("eval");
    let text = ok(&["eval", "--checkpoint", p(&run.join("checkpoint.bin")), "--data", p(&data), "--out", p(&eval)]);
    assert!(text.contains("iou"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let logged = summary["train_iou"].as_f64().unwrap();
    assert!((report["iou"].as_f64().unwrap() - logged).abs() < 1e-6);
    assert!(eval.join("report.txt").exists() && eval.join("predictions/00003.pgm").exists());

    // Prediction directory against ground truth, with one extra prediction.
    std::fs::copy(eval.join("predictions/00000.pgm"), eval.join("predictions/stray.pgm")).unwrap();
    let (pred, gt) = (eval.join("predictions"), data.join("masks"));
    let err = fails(&["eval", "--pred", p(&pred), "--gt", p(&gt)]);
    assert!(err.contains("stray"), "{err}");
    let text = ok(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--allow-missing"]);
    assert!(text.contains("stray"), "{text}");

    // Inference keeps the input size and is deterministic.
    let image = data.join("images/00001.ppm");
    let (o1, o2) = (root.join("c1.pgm"), root.join("c2.pgm"));
    ok(&["infer", "--checkpoint", p(&run.join("checkpoint.bin")), "--image", p(&image), "--out", p(&o1)]);
    ok(&["infer", "--checkpoint", p(&run.join("checkpoint.bin")), "--image", p(&image), "--out", p(&o2)]);
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    let conf = read_image(&o1).unwrap();
    assert_eq!((conf.width, conf.height, conf.channels), (32, 32, 1));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("c1.pgm.json")).unwrap()).unwrap();
    assert_eq!(meta["width"], 32);

    // A checkpoint from an unknown format version is refused by name.
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    let bad = root.join("future.bin");
    std::fs::write(&bad, bytes).unwrap();
    let err = fails(&["infer", "--checkpoint", p(&bad), "--image", p(&image), "--out", p(&o1)]);
    assert!(err.contains("version 7"), "{err}");
}
