use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 6] = [
    "gen-synth",
    "train",
    "eval",
    "salience",
    "embed",
    "gradcheck",
];

fn vgse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgse"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vgse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero_everywhere() {
    ok(&["--help"]);
    for sub in SUBCOMMANDS {
        let text = ok(&[sub, "--help"]);
        assert!(text.contains("--seed"), "{sub} lacks --seed");
    }
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!vgse(&["frobnicate"]).status.success());
}

#[test]
fn missing_checkpoint_gives_one_line_diagnostic() {
    let out = vgse(&[
        "salience",
        "--checkpoint",
        "/nonexistent/ckpt.bin",
        "--sentence",
        "a b",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck", "--seed", "0"]);
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("ok")));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let run = dir.path().join("run");
    ok(&[
        "gen-synth",
        "--n",
        "48",
        "--v-content",
        "16",
        "--d-img",
        "8",
        "--seed",
        "3",
        "--out",
        path(&corpus),
    ]);
    let header = std::fs::read_to_string(&corpus).unwrap();
    assert_eq!(header.lines().count(), 49);

    let train = |epochs: &str, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--corpus",
            path(&corpus),
            "--out-dir",
            path(&run),
            "--d-e",
            "6",
            "--d-cell",
            "6",
            "--d-a",
            "4",
            "--n-a",
            "2",
            "--batch-size",
            "8",
            "--epochs",
            epochs,
            "--seed",
            "5",
        ];
        args.extend_from_slice(extra);
        ok(&args);
    };
    train("2", &[]);
    let ckpt = run.join("checkpoint.bin");
    train("3", &["--resume", path(&ckpt), "--sequential"]);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 3);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], i);
        assert_eq!(r["objective"], "cap2all");
    }

    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--corpus",
        path(&corpus),
        "--limit",
        "20",
        "--seed",
        "1",
    ]))
    .unwrap();
    for dir in ["sentence_to_image", "image_to_sentence"] {
        let r = &report[dir];
        assert_eq!(r["n"], 20);
        let (r1, r10) = (
            r["recall_at_1"].as_f64().unwrap(),
            r["recall_at_10"].as_f64().unwrap(),
        );
        assert!(r1 <= r10 && r10 <= 1.0);
    }

    let sal: serde_json::Value = serde_json::from_str(&ok(&[
        "salience",
        "--checkpoint",
        path(&ckpt),
        "--sentence",
        "w01 v02 w03",
    ]))
    .unwrap();
    assert_eq!(sal["tokens"].as_array().unwrap().len(), 3);
    assert_eq!(sal["attention"].as_array().unwrap().len(), 2);
    assert_eq!(sal["pooled"].as_array().unwrap().len(), 3);
    assert!(!vgse(&[
        "salience",
        "--checkpoint",
        path(&ckpt),
        "--sentence",
        "zzz qqq"
    ])
    .status
    .success());

    let input = dir.path().join("in.txt");
    let output = dir.path().join("out.txt");
    std::fs::write(&input, "w01 v02\n\nv03 w01 w02\n").unwrap();
    ok(&[
        "embed",
        "--checkpoint",
        path(&ckpt),
        "--input",
        path(&input),
        "--output",
        path(&output),
    ]);
    let vectors = std::fs::read_to_string(&output).unwrap();
    assert_eq!(vectors.lines().count(), 3);
    assert!(vectors.lines().all(|l| l.split(' ').count() == 12));

    std::fs::write(&input, "v03 w01 w02\n").unwrap();
    let single = dir.path().join("single.txt");
    ok(&[
        "embed",
        "--checkpoint",
        path(&ckpt),
        "--input",
        path(&input),
        "--output",
        path(&single),
        "--sequential",
    ]);
    assert_eq!(
        std::fs::read_to_string(&single).unwrap().trim_end(),
        vectors.lines().nth(2).unwrap()
    );

    std::fs::write(&input, "").unwrap();
    ok(&[
        "embed",
        "--checkpoint",
        path(&ckpt),
        "--input",
        path(&input),
        "--output",
        path(&output),
    ]);
    assert!(std::fs::read_to_string(&output).unwrap().is_empty());
}

#[test]
fn training_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    ok(&[
        "gen-synth",
        "--n",
        "16",
        "--v-content",
        "8",
        "--d-img",
        "4",
        "--out",
        path(&corpus),
    ]);
    let out = vgse(&[
        "train",
        "--corpus",
        path(&corpus),
        "--out-dir",
        path(dir.path()),
        "--batch-size",
        "1",
        "--epochs",
        "1",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
