use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "\
seed = 4
data.max_age = 9
data.image_size = 16
data.head_center = 4
data.head_count = 16
data.tail_min = 2
data.decay = 3
data.noise = 4
backbone.widths = 8,16
backbone.strides = 2,2
backbone.norm_groups = 2
head.r = 2
head.kernel = 2
head.stride = 2
head.proj_width = 16
train.batch_size = 10
train.stage1_epochs = 2
train.stage2_epochs = 1
protocol.head_range = 3-6
protocol.group_width = 2
";

fn glae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glae")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_run_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    fs::write(&cfg, TOY).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let eval = dir.path().join("eval");

    let o = glae(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("labels.csv").exists());
    assert!(data.join("resolved.cfg").exists());

    for stage in ["1", "2"] {
        let o = glae(&[
            "train",
            "--config",
            s(&cfg),
            "--stage",
            stage,
            "--data",
            s(&data),
            "--out",
            s(&run),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("epoch"));
    }
    let loss = fs::read_to_string(run.join("loss_stage2.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 2 + 1);

    // no --config: the checkpoint carries its own
    let o = glae(&[
        "evaluate",
        "--checkpoint",
        s(&run.join("stage2.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&eval),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["vanilla", "balanced", "bigger_upsilon", "smaller_upsilon"] {
        assert!(eval.join(format!("predictions_{v}.csv")).exists());
        assert!(eval.join(format!("report_{v}.json")).exists());
    }
    let resolved = fs::read_to_string(eval.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("data.max_age = 9"));

    let report = dir.path().join("score.json");
    let o = glae(&[
        "score",
        "--config",
        s(&cfg),
        "--predictions",
        s(&eval.join("predictions_smaller_upsilon.csv")),
        "--out",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("MAE"));
    let a = fs::read_to_string(&report).unwrap();
    let b = fs::read_to_string(eval.join("report_smaller_upsilon.json")).unwrap();
    assert_eq!(a, b);

    let svg = dir.path().join("usage.svg");
    let o = glae(&[
        "plot",
        "--config",
        s(&cfg),
        "--routing",
        s(&eval.join("routing.csv")),
        "--out",
        s(&svg),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg2 = dir.path().join("classes.svg");
    let o = glae(&[
        "plot",
        "--report",
        s(&eval.join("report_vanilla.json")),
        "--report",
        s(&eval.join("report_balanced.json")),
        "--out",
        s(&svg2),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&svg2).unwrap().starts_with("<svg"));
}

#[test]
fn score_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    let mut text = String::from("id,true_age,pred_age\n");
    for (i, y) in [3, 20, 20, 45, 70, 99].iter().enumerate() {
        text.push_str(&format!("s{i},{y},{y}\n"));
    }
    fs::write(&csv, text).unwrap();
    let json = dir.path().join("r.json");
    let o = glae(&["score", "--predictions", s(&csv), "--out", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["mae"], 0.0);
    assert_eq!(r["cmae"], 0.0);
    assert!(dir.path().join("r.json.resolved.cfg").exists());
}

#[test]
fn errors_are_one_categorized_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = glae(&["score", "--predictions", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: io: "), "{err}");

    let o = glae(&["score", "--predictions", s(&missing), "--set", "bogus=1"]);
    assert!(stderr(&o).starts_with("error: config: "));

    let o = glae(&["train", "--stage", "3", "--data", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: usage: "));
    assert_eq!(stderr(&o).lines().count(), 1);

    let bad = dir.path().join("bad.ckpt");
    let mut bytes = b"GLAE".to_vec();
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(b"not really a checkpoint");
    fs::write(&bad, bytes).unwrap();
    let o = glae(&["evaluate", "--checkpoint", s(&bad), "--data", "x", "--out", "y"]);
    assert!(stderr(&o).starts_with("error: corrupt: "), "{}", stderr(&o));

    let o = glae(&["train", "--stage", "2", "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}
