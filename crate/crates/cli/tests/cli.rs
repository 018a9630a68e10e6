use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
test_docs = 5

[corpus]
n_docs = 20

[encoder]
d_model = 8
n_layers = 1
n_heads = 2
ffn_dim = 16

[training]
warmup_steps_bce = 2
combined_steps = 2
batch_size = 2

[eval]
viz_docs = 3

[eval.viz_candidates]
N = [2, 3]
n_prime = 10

[bench]
sizes = [4]
repetitions = 1
n_docs = 3

[cost]
reranker_steps = 1

[abstractive]
test_docs = 3

[abstractive.model]
d_model = 8
n_heads = 2
dec_heads = 2
ffn_dim = 16
max_decode_len = 6
beam_size = 4
num_groups = 2

[abstractive.train]
warmup_steps_bce = 2
combined_steps = 1
batch_size = 2

[abstractive.corpus]
n_docs = 10
"#;

fn colo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colo"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = colo(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn with<'a>(cmd: &[&'a str]) -> Vec<&'a str> {
    [cmd, &["--config", "tiny.toml", "--out", "o"][..]].concat()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn synth_is_deterministic() {
    let dir = tiny_dir();
    ok(dir.path(), &["synth", "--config", "tiny.toml", "--out", "a"]);
    ok(dir.path(), &["synth", "--config", "tiny.toml", "--out", "b"]);
    for f in ["train.jsonl", "test.jsonl"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let test = fs::read_to_string(dir.path().join("a/test.jsonl")).unwrap();
    assert_eq!(test.lines().count(), 5);
    assert!(dir.path().join("a/synth.config.toml").exists());
}

#[test]
fn extractive_pipeline_writes_reports() {
    let dir = tiny_dir();
    let p = dir.path();
    ok(p, &with(&["train-ext", "--baseline", "--reranker-steps", "1"]));
    for f in ["colo.ckpt", "baseline.ckpt", "reranker.ckpt", "train_log.csv", "train-ext.config.toml"] {
        assert!(p.join("o").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(p.join("o/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);

    ok(
        p,
        &with(&[
            "eval",
            "--checkpoint",
            "o/colo.ckpt",
            "--baseline",
            "o/baseline.ckpt",
            "--reranker",
            "o/reranker.ckpt",
            "--systems",
            "colo_ext,classifier_topk,lead,oracle,two_stage",
        ]),
    );
    let eval = fs::read_to_string(p.join("o/eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 6);
    for s in ["colo_ext", "classifier_topk", "lead", "oracle", "two_stage"] {
        assert!(eval.lines().any(|l| l.starts_with(s)), "{s} missing in {eval}");
    }

    ok(p, &with(&["bench", "--checkpoint", "o/colo.ckpt", "--reranker", "o/reranker.ckpt"]));
    let bench = fs::read_to_string(p.join("o/bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 4);

    ok(p, &with(&["viz", "--checkpoint", "o/colo.ckpt", "--svg"]));
    assert!(fs::read_to_string(p.join("o/viz.svg")).unwrap().starts_with("<svg"));
    // With at least six sentences the viz space holds C(6,2) + C(6,3) = 35
    // candidates plus the anchor per document; the training space holds 25.
    let viz = fs::read_to_string(p.join("o/viz.csv")).unwrap();
    assert!(viz.lines().count() >= 1 + 3 * 36, "{}", viz.lines().count());

    ok(p, &with(&["train-naive"]));
    assert!(p.join("o/naive.ckpt").exists());
}

#[test]
fn abstractive_pipeline_writes_reports() {
    let dir = tiny_dir();
    let p = dir.path();
    ok(p, &["train-abs", "--config", "tiny.toml", "--out", "o"]);
    ok(p, &["eval-abs", "--config", "tiny.toml", "--out", "o", "--checkpoint", "o/abs.ckpt"]);
    let eval = fs::read_to_string(p.join("o/eval_abs.csv")).unwrap();
    assert_eq!(eval.lines().next().unwrap(), "selector,r1,r2,rl,rouge12,n_docs");
    assert_eq!(eval.lines().count(), 3);
    let decoded = fs::read_to_string(p.join("o/decoded.jsonl")).unwrap();
    assert!(decoded.lines().count() >= 3);
}

#[test]
fn score_reads_line_aligned_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.txt"), "the cat sat\na b c\n").unwrap();
    fs::write(p.join("r.txt"), "the cat sat\nx y z\n").unwrap();
    ok(p, &["score", "--candidates", "c.txt", "--reference", "r.txt", "--out", "."]);
    let csv = fs::read_to_string(p.join("score.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "id,r1,r2,rl,js2");
    assert_eq!(rows[1], "1,1.000000,1.000000,1.000000,0.000000");
    assert!(rows[2] == "2,0.000000,0.000000,0.000000,1.000000");

    fs::write(p.join("r.txt"), "only one line\n").unwrap();
    let out = colo(p, &["score", "--candidates", "c.txt", "--reference", "r.txt", "--out", "."]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = colo(dir.path(), &["eval", "--out", "."]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:") && err.contains("missing --checkpoint"), "{err}");

    let out = colo(dir.path(), &["eval", "--checkpoint", "nope.ckpt", "--out", "."]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_key_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "seed = 1\n[training]\nmargn = 0.1\n").unwrap();
    let out = colo(dir.path(), &["synth", "--config", "bad.toml", "--out", "."]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 3") && err.contains("margn"), "{err}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(colo(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn resolved_config_reloads() {
    let dir = tiny_dir();
    ok(dir.path(), &["synth", "--config", "tiny.toml", "--out", "o", "--seed", "9"]);
    let echoed = fs::read_to_string(dir.path().join("o/synth.config.toml")).unwrap();
    assert!(echoed.lines().any(|l| l == "seed = 9"), "{echoed}");
    ok(dir.path(), &["synth", "--config", "o/synth.config.toml", "--out", "p"]);
    assert_eq!(
        fs::read(dir.path().join("o/train.jsonl")).unwrap(),
        fs::read(dir.path().join("p/train.jsonl")).unwrap()
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tiny_dir();
    let p = dir.path();
    for out in ["a", "b"] {
        ok(p, &["train-ext", "--config", "tiny.toml", "--out", out]);
        ok(p, &["eval", "--config", "tiny.toml", "--out", out, "--checkpoint", &format!("{out}/colo.ckpt")]);
    }
    for f in ["colo.ckpt", "eval.csv"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    // Echoed configs differ only in the output directory.
    for f in ["train-ext.config.toml", "eval.config.toml"] {
        let read = |out: &str| -> Vec<String> {
            fs::read_to_string(p.join(out).join(f))
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with("out = "))
                .map(str::to_string)
                .collect()
        };
        assert_eq!(read("a"), read("b"), "{f}");
    }
    // The training log differs only in its timing column.
    let strip = |out: &str| -> Vec<String> {
        let log = fs::read_to_string(p.join(out).join("train_log.csv")).unwrap();
        let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
        let ms = header.iter().position(|h| *h == "ms").unwrap();
        log.lines()
            .map(|l| {
                let mut cols: Vec<&str> = l.split(',').collect();
                cols.remove(ms);
                cols.join(",")
            })
            .collect()
    };
    assert_eq!(strip("a"), strip("b"));
}
