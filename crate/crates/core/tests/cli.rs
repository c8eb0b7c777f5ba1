use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msaupaf"))
        .args(args)
        .output()
        .expect("run msaupaf")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 8] = [
    "--set",
    "base_channels=2",
    "--set",
    "max_channels=4",
    "--set",
    "head_channels=4",
    "--set",
    "res_depth=1",
];

fn synth(dir: &Path, mode: &str) {
    ok(&[
        "synth", "--seed", "2", "--out", s(dir), "--mode", mode, "--n-forms", "3", "--page-width", "256",
        "--page-height", "256", "--rows", "3",
    ]);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let gt = t.path().join("gt");
    synth(&gt, "hard");
    let out = ok(&["eval", "--pred", s(&gt), "--gt", s(&gt)]);
    assert!(out.contains("eval.labeling.f1=1.000000"), "{out}");
    assert!(out.contains("eval.linking.f1=1.000000"), "{out}");
}

#[test]
fn synth_is_deterministic_and_stats_count_it() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "easy");
    synth(&b, "easy");
    for i in 0..3 {
        let f = format!("form_{i:04}.json");
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
    }
    let out = ok(&["stats", "--split", s(&a)]);
    assert!(out.contains("forms=3"), "{out}");
    assert!(out.contains("rejected_links=0"), "{out}");
}

#[test]
fn zero_epoch_train_then_decode_render_and_heuristic() {
    let t = tempfile::tempdir().unwrap();
    let (gt, model) = (t.path().join("gt"), t.path().join("model"));
    synth(&gt, "easy");
    let mut args = vec!["train", "--data", s(&gt), "--out", s(&model), "--epochs", "0"];
    args.extend(TINY);
    let log = ok(&args);
    assert!(log.starts_with("schedule "), "{log}");
    for f in ["config.txt", "vocab.txt", "model.mspw", "train.log"] {
        assert!(model.join(f).is_file(), "{f} missing");
    }

    let pred = t.path().join("pred");
    assert!(ok(&["decode", "--model", s(&model), "--input", s(&gt), "--out", s(&pred)]).contains("decoded=3"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(pred.join("form_0000.json")).unwrap()).unwrap();
    assert!(v["form"].is_array());
    ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--class-match", "separate"]);

    let svg = t.path().join("svg");
    ok(&["render", "--input", s(&gt), "--out", s(&svg), "--model", s(&model)]);
    ok(&["render", "--input", s(&gt), "--out", s(&svg)]);
    let text = std::fs::read_to_string(svg.join("form_0000.svg")).unwrap();
    assert!(text.starts_with("<svg") && text.contains("#ff8c00"));

    let out = ok(&["link-heuristic", "--input", s(&gt)]);
    assert!(out.contains("eval.linking.f1=1.000000"), "{out}");
    ok(&["link-heuristic", "--input", s(&gt), "--labels", "pred", "--model", s(&model), "--distance", "nearest-edge"]);
}

#[test]
fn config_file_and_overrides_are_applied() {
    let t = tempfile::tempdir().unwrap();
    let (gt, model) = (t.path().join("gt"), t.path().join("model"));
    synth(&gt, "easy");
    let cfg = t.path().join("run.txt");
    std::fs::write(&cfg, "# tiny\nepochs = 1\nbatch_size = 2\nlr_decay = multiplier\n").unwrap();
    let mut args = vec!["train", "--data", s(&gt), "--out", s(&model), "--config", s(&cfg)];
    args.extend(TINY);
    let log = ok(&args);
    assert!(log.contains("batch_size=2"), "{log}");
    assert!(log.contains("epoch=1 "), "{log}");
    assert!(log.contains("checkpoint epoch=1"), "{log}");
    let saved = std::fs::read_to_string(model.join("config.txt")).unwrap();
    assert!(saved.contains("base_channels = 2"), "{saved}");
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let gt = t.path().join("gt");
    synth(&gt, "easy");

    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--class-match", "fuzzy"]).status.code(), Some(1));
    assert_eq!(cli(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--iou", "0"]).status.code(), Some(1));
    let bad = cli(&["train", "--data", s(&gt), "--out", s(&t.path().join("m")), "--set", "lambda1=-1"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lambda1"));
    let missing = cli(&["decode", "--model", s(&t.path().join("nope")), "--input", s(&gt), "--out", s(&t.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(1));

    let broken = t.path().join("broken");
    std::fs::create_dir(&broken).unwrap();
    std::fs::write(broken.join("form.json"), b"{\"form\": [").unwrap();
    assert_eq!(cli(&["stats", "--split", s(&broken)]).status.code(), Some(1));

    let model = t.path().join("model");
    let mut args = vec!["train", "--data", s(&gt), "--out", s(&model), "--epochs", "0"];
    args.extend(TINY);
    ok(&args);
    std::fs::write(model.join("model.mspw"), b"MSPW garbage").unwrap();
    let corrupt = cli(&["decode", "--model", s(&model), "--input", s(&gt), "--out", s(&t.path().join("o"))]);
    assert_eq!(corrupt.status.code(), Some(2), "{}", String::from_utf8_lossy(&corrupt.stderr));
}
