use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn depthfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthfuse"))
        .args(args)
        .env("DEPTHFUSE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = depthfuse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generated_data_trains_a_depth_model_that_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model.txt");
    ok(&[
        "gen-data",
        "--images",
        "6",
        "--classes",
        "2",
        "--seed",
        "3",
        "--out",
        path(&data),
    ]);
    assert!(data.join("meta.txt").exists());

    let log = ok(&[
        "dcnf-train",
        "--data",
        path(&data),
        "--epochs",
        "2",
        "--superpixels",
        "16",
        "--out",
        path(&model),
    ]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 2);

    let image = fs::read_dir(data.join("rgb")).unwrap().next().unwrap().unwrap().path();
    let csv = dir.path().join("depth.csv");
    ok(&[
        "dcnf-predict",
        "--model",
        path(&model),
        "--image",
        path(&image),
        "--out",
        path(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(!text.is_empty());
    let pgm = dir.path().join("depth.pgm");
    ok(&[
        "dcnf-predict",
        "--model",
        path(&model),
        "--image",
        path(&image),
        "--out",
        path(&pgm),
    ]);
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5"));
}

#[test]
fn detection_run_writes_reports_that_eval_can_rescore() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let sets = [
        "--set",
        "images=24",
        "--set",
        "epochs=1",
        "--set",
        "dcnf_epochs=1",
        "--set",
        "seed=5",
    ];
    let mut args = vec!["fast-rcnn", "--out", path(&out)];
    args.extend(sets);
    let summary = ok(&args);
    assert!(summary.contains("mAP"));
    for file in ["fast_rcnn.md", "fast_rcnn.csv", "config.txt", "fast_rcnn_rgb_detections.csv"] {
        assert!(out.join(file).exists(), "{file}");
    }

    let scored = dir.path().join("eval");
    let dets = out.join("fast_rcnn_rgb_detections.csv");
    let mut args = vec!["eval", "--detections", path(&dets), "--out", path(&scored)];
    args.extend(sets);
    let table = ok(&args);
    assert!(table.contains("fast_rcnn_rgb_detections"));
    let rescored = fs::read_to_string(scored.join("eval.csv")).unwrap();
    let original = fs::read_to_string(out.join("fast_rcnn.csv")).unwrap();
    let values = |csv: &str, label: &str| -> Vec<String> {
        let line = csv.lines().find(|l| l.starts_with(label)).unwrap().to_string();
        line.split(',').skip(1).map(str::to_string).collect()
    };
    assert_eq!(values(&rescored, "fast_rcnn_rgb_detections"), values(&original, "RGB,"));
}

#[test]
fn config_file_and_overrides_are_applied() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("seg.conf");
    fs::write(
        &conf,
        "pipeline = segment\nimages = 16\nepochs = 1\ndcnf_epochs = 1\nnormalize_loss = true\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&[
        "segment",
        "--config",
        path(&conf),
        "--set",
        "seed=11",
        "--scheme",
        "concat",
        "--out",
        path(&out),
        "--plots",
    ]);
    let saved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(saved.contains("seed = 11") && saved.contains("scheme = concat"), "{saved}");
    assert!(out.join("segment.md").exists());
    assert!(fs::read_dir(&out)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}

#[test]
fn bad_input_fails_with_a_message() {
    let out = depthfuse(&["rcnn", "--set", "images"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("KEY=VALUE"));

    let out = depthfuse(&["rcnn", "--set", "lambda=-1"]);
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let out = depthfuse(&["eval", "--detections", "x.csv", "--data", path(&dir.path().join("none"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}
