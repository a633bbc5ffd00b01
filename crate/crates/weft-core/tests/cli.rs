//! End-to-end checks of the `weft` binary: flag surfaces, file formats,
//! and exit codes (0 success, 1 validation error, 2 stage failure).

use std::path::Path;
use std::process::Command;

use weft_core::corpus::{read_corpus, write_corpus, Document};

fn weft() -> Command {
    Command::new(env!("CARGO_BIN_EXE_weft"))
}

fn fixture_corpus(path: &Path) {
    let body = "the quick brown fox jumps over the lazy dog and runs on through \
                the wide green field past the old mill toward the river bend \
                where the tall reeds sway in the evening wind for a long time \
                until the light fades and the stars come out over the water";
    let docs: Vec<Document> = (0..4)
        .map(|i| {
            Document::new(format!("d{i}"), "en", "cli", format!("{body} number {i}."))
                .with_url(format!("https://site{i}.example.com/page"))
        })
        .collect();
    write_corpus(docs.iter(), path).unwrap();
}

#[test]
fn filter_url_writes_output_and_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    fixture_corpus(&input);
    let blacklist = dir.path().join("bl.txt");
    std::fs::write(&blacklist, "site2.example.com\n").unwrap();
    let output = dir.path().join("out.jsonl");
    let log = dir.path().join("verdicts.jsonl");
    let status = weft()
        .args(["filter-url", "--input"])
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .arg("--blacklist")
        .arg(&blacklist)
        .arg("--verdict-log")
        .arg(&log)
        .status()
        .unwrap();
    assert!(status.success());
    let (docs, _) = read_corpus(&output).unwrap();
    assert_eq!(docs.len(), 3);
    let verdicts = std::fs::read_to_string(&log).unwrap();
    assert!(verdicts.contains("\"d2\""));
    assert!(verdicts.contains("BlacklistedDomain"));
}

#[test]
fn pipeline_run_succeeds_and_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    fixture_corpus(&dir.path().join("input.jsonl"));
    let config = dir.path().join("weft.toml");
    std::fs::write(
        &config,
        r#"
[pipeline]
input = "input.jsonl"
workdir = "out"
seed = 1
stages = ["url", "lines", "onion", "quality", "pii"]
"#,
    )
    .unwrap();
    for _ in 0..2 {
        let status = weft().args(["run", "--config"]).arg(&config).status().unwrap();
        assert_eq!(status.code(), Some(0));
    }
    assert!(dir.path().join("out/05_pii/corpus.jsonl").exists());
    assert!(dir.path().join("out/manifest.json").exists());
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("weft.toml");
    std::fs::write(
        &config,
        r#"
[pipeline]
input = "does-not-exist.jsonl"
workdir = "out"
seed = 1
"#,
    )
    .unwrap();
    let status = weft().args(["run", "--config"]).arg(&config).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn stage_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fixture_corpus(&dir.path().join("input.jsonl"));
    // The sample stage demands far more tokens than the pool's cap allows.
    std::fs::write(dir.path().join("budgets.csv"), "en,100\n").unwrap();
    let config = dir.path().join("weft.toml");
    std::fs::write(
        &config,
        r#"
[pipeline]
input = "input.jsonl"
workdir = "out"
seed = 1
stages = ["sample"]

[sample]
budgets = "budgets.csv"
target = 150
total_budget = 100000
shard_size = 200
"#,
    )
    .unwrap();
    let output = weft().args(["run", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("pool exhausted") || stderr.contains("sample"), "{stderr}");
}

#[test]
fn borda_over_json_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("table.json");
    std::fs::write(
        &table,
        r#"{
  "tasks": ["t1", "t2"],
  "models": ["a", "b"],
  "scores": {"a": {"t1": 0.9, "t2": 0.1}, "b": {"t1": 0.2, "t2": 0.8}}
}"#,
    )
    .unwrap();
    let output = weft().args(["score", "--borda"]).arg(&table).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("a\t2.5"));
    assert!(stdout.contains("b\t2.5"));
}

#[test]
fn audit_with_external_generator() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    fixture_corpus(&input);
    let records = dir.path().join("records.jsonl");
    let summary = dir.path().join("summary.tsv");
    let status = weft()
        .args(["audit", "--input"])
        .arg(&input)
        .args(["--gen-cmd", "cat >/dev/null; echo unrelated continuation entirely"])
        .arg("--records")
        .arg(&records)
        .arg("--summary")
        .arg(&summary)
        .status()
        .unwrap();
    assert!(status.success());
    let summary = std::fs::read_to_string(&summary).unwrap();
    assert!(summary.starts_with("Lang.\tDocs\t"));
    let records = std::fs::read_to_string(&records).unwrap();
    assert_eq!(records.lines().count(), 4);
    assert!(records.contains("\"flagged\":false"));
}

#[test]
fn parallel_with_external_scorer() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.tsv");
    let mut tsv = String::new();
    for i in 0..6 {
        tsv.push_str(&format!(
            "de\tlv\topus\tsatz nummer {i} hier\tteikums numurs {i} te\n"
        ));
    }
    std::fs::write(&pairs, tsv).unwrap();
    let dev = dir.path().join("dev.tsv");
    std::fs::write(&dev, "de\tlv\tdev\thallo welt\tsveika pasaule\n").unwrap();
    let out = dir.path().join("docs.jsonl");
    let status = weft()
        .args(["parallel", "--pairs"])
        .arg(&pairs)
        .arg("--dev-pairs")
        .arg(&dev)
        .args(["--scorer", "external-command"])
        .args(["--scorer-cmd", "awk '{print 0.4}'"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    // Threshold 1.25 x 0.4 = 0.5 > 0.4: everything filtered out.
    let content = std::fs::read_to_string(&out).unwrap();
    assert!(content.is_empty());
}

#[test]
fn equity_trains_and_saves_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples");
    std::fs::create_dir(&samples).unwrap();
    std::fs::write(
        samples.join("aa.txt"),
        "viens divi tris cetri pieci sesi septini ".repeat(50),
    )
    .unwrap();
    std::fs::write(
        samples.join("bb.txt"),
        "uks kaks kolm neli viis kuus seitse ".repeat(50),
    )
    .unwrap();
    let vocab = dir.path().join("vocab.txt");
    let status = weft()
        .args(["equity", "--samples"])
        .arg(&samples)
        .args(["--vocab-size", "400", "--coverage", "1.0"])
        .arg("--out-vocab")
        .arg(&vocab)
        .status()
        .unwrap();
    assert!(status.success());
    let header = std::fs::read_to_string(&vocab).unwrap();
    assert!(header.starts_with("weft-bpe v1 "));
}
