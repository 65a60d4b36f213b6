//! End-to-end runs of the command-line binary: synthetic round trip,
//! config-file precedence, importers, the cost table and the stub server.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};

fn maqa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maqa"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(!out.status.success(), "expected failure, command succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_into(dir: &Path, seed: u64, questions: usize) {
    run_ok(
        maqa()
            .arg("synth")
            .arg("--seed")
            .arg(seed.to_string())
            .arg("--questions")
            .arg(questions.to_string())
            .arg("--out-dir")
            .arg(dir),
    );
}

fn data_args<'a>(cmd: &'a mut Command, dir: &Path) -> &'a mut Command {
    cmd.arg("--dataset")
        .arg(dir.join("dataset.jsonl"))
        .arg("--corpus")
        .arg(dir.join("corpus.jsonl"))
        .arg("--store")
        .arg(dir.join("store.bin"))
        .arg("--embedder")
        .arg("synthetic")
        .arg("--question-vectors")
        .arg(dir.join("question_vectors.json"))
}

fn first_report(path: &Path) -> serde_json::Value {
    let raw = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(raw.lines().next().unwrap()).unwrap()
}

#[test]
fn synthetic_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    synth_into(dir, 7, 12);
    for file in ["dataset.jsonl", "corpus.jsonl", "store.bin", "question_vectors.json"] {
        assert!(dir.join(file).exists(), "missing {file}");
    }

    let reports = dir.join("reports.jsonl");
    let out = run_ok(
        data_args(maqa().arg("run-rtv"), dir)
            .arg("--recaller")
            .arg("oracle")
            .arg("--verifier")
            .arg("support-count")
            .arg("--out")
            .arg(&reports),
    );
    assert!(out.contains("F1(all) 1.0000"), "summary: {out}");
    let lines = std::fs::read_to_string(&reports).unwrap();
    assert_eq!(lines.lines().count(), 12);

    let out = run_ok(
        maqa()
            .arg("evaluate")
            .arg("--dataset")
            .arg(dir.join("dataset.jsonl"))
            .arg("--reports")
            .arg(&reports)
            .arg("--corpus")
            .arg(dir.join("corpus.jsonl"))
            .arg("--ks")
            .arg("5,10"),
    );
    assert!(out.contains("F1 (all)         1.0000"), "evaluate: {out}");
    assert!(out.contains("MRecall@5"), "evaluate: {out}");

    let out = run_ok(
        maqa()
            .arg("evaluate")
            .arg("--dataset")
            .arg(dir.join("dataset.jsonl"))
            .arg("--reports")
            .arg(&reports)
            .arg("--json"),
    );
    let result: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(result["f1_all"], 1.0);
    assert_eq!(result["questions"], 12);

    let out = run_ok(
        maqa()
            .arg("calibrate")
            .arg("--dataset")
            .arg(dir.join("dataset.jsonl"))
            .arg("--reports")
            .arg(&reports),
    );
    assert_eq!(out.matches("tau 0.").count(), 7, "calibrate: {out}");
    let chosen: f64 = out
        .lines()
        .last()
        .and_then(|l| l.strip_prefix("selected tau = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.3..=0.9).contains(&chosen));

    let out = run_ok(
        maqa()
            .arg("analyze")
            .arg("--dataset")
            .arg(dir.join("dataset.jsonl"))
            .arg("--corpus")
            .arg(dir.join("corpus.jsonl"))
            .arg("--reports")
            .arg(&reports),
    );
    let analysis: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(analysis["evidence_usage"]["predicted_mean"], 1.0);
    assert!(analysis["support_distribution"].is_object());

    // The single-pass baseline reads only the top-k passages, so clusters
    // whose supports fall outside that window are lost even with an oracle
    // reader; it scores at most as well as the verified pipeline.
    let out = run_ok(
        data_args(maqa().arg("run-rtr"), dir)
            .arg("--reader")
            .arg("oracle")
            .arg("--out")
            .arg(dir.join("baseline.jsonl")),
    );
    let f1_all: f64 = out
        .split("F1(all) ")
        .nth(1)
        .and_then(|s| s.split(',').next())
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((0.8..=1.0).contains(&f1_all), "baseline summary: {out}");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    synth_into(dir, 3, 3);
    let cfg = dir.join("maqa.toml");
    std::fs::write(&cfg, "tau = 0.7\nevidence_k = 4\n").unwrap();

    let defaults = dir.join("r-defaults.jsonl");
    run_ok(data_args(maqa().arg("run-rtv"), dir).arg("--out").arg(&defaults));
    let report = first_report(&defaults);
    assert_eq!(report["config"]["tau"], 0.5);
    assert_eq!(report["config"]["evidence_k"], 10);

    let from_file = dir.join("r-file.jsonl");
    run_ok(
        data_args(maqa().arg("run-rtv"), dir)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&from_file),
    );
    let report = first_report(&from_file);
    assert_eq!(report["config"]["tau"], 0.7);
    assert_eq!(report["config"]["evidence_k"], 4);

    let overridden = dir.join("r-cli.jsonl");
    run_ok(
        data_args(maqa().arg("run-rtv"), dir)
            .arg("--config")
            .arg(&cfg)
            .arg("--tau")
            .arg("0.35")
            .arg("--out")
            .arg(&overridden),
    );
    let report = first_report(&overridden);
    assert_eq!(report["config"]["tau"], 0.35);
    assert_eq!(report["config"]["evidence_k"], 4);
}

#[test]
fn cost_table() {
    let default = run_ok(maqa().arg("cost"));
    for stage in ["recaller", "reranker", "verifier", "reader", "aggregator"] {
        assert!(default.contains(stage), "missing {stage} in: {default}");
    }
    let shorter = run_ok(maqa().arg("cost").arg("--l-p").arg("120"));
    assert_ne!(default, shorter);
}

#[test]
fn importers() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    let flat = dir.join("flat.jsonl");
    std::fs::write(
        &flat,
        "{\"id\":\"f1\",\"question\":\"which cities?\",\"answers\":\"NYC|New York City; LA\"}\n",
    )
    .unwrap();
    let out_data = dir.join("imported.jsonl");
    let out = run_ok(
        maqa()
            .arg("import")
            .arg("--flat")
            .arg(&flat)
            .arg("--out")
            .arg(&out_data),
    );
    assert!(out.contains("imported 1 questions"), "import: {out}");
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_data).unwrap()).unwrap();
    assert_eq!(record["answers"], serde_json::json!([["NYC", "New York City"], ["LA"]]));

    let text = dir.join("article.txt");
    let words: Vec<String> = (0..250).map(|i| format!("w{i}")).collect();
    std::fs::write(&text, words.join(" ")).unwrap();
    let out_corpus = dir.join("article.jsonl");
    let out = run_ok(
        maqa()
            .arg("import")
            .arg("--text")
            .arg(&text)
            .arg("--words")
            .arg("100")
            .arg("--out")
            .arg(&out_corpus),
    );
    assert!(out.contains("split into 3 passages"), "import: {out}");
    let raw = std::fs::read_to_string(&out_corpus).unwrap();
    let passages: Vec<serde_json::Value> =
        raw.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(passages.len(), 3);
    assert_eq!(passages[0]["title"], "article");
    assert_eq!(passages[2]["text"].as_str().unwrap().split_whitespace().count(), 50);
}

#[test]
fn failure_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let stderr = run_err(
        maqa()
            .arg("run-rtv")
            .arg("--dataset")
            .arg(dir.join("missing.jsonl"))
            .arg("--corpus")
            .arg(dir.join("missing.jsonl"))
            .arg("--store")
            .arg(dir.join("missing.bin")),
    );
    assert!(stderr.contains("error:"), "stderr: {stderr}");

    // Mutually exclusive import sources are rejected by argument parsing.
    run_err(
        maqa()
            .arg("import")
            .arg("--flat")
            .arg("a.jsonl")
            .arg("--text")
            .arg("b.txt")
            .arg("--out")
            .arg("c.jsonl"),
    );
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn stub_server_backs_service_embedder() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let corpus = dir.join("corpus.jsonl");
    std::fs::write(
        &corpus,
        "{\"id\":0,\"title\":\"\",\"text\":\"alpha bravo\"}\n{\"id\":1,\"title\":\"\",\"text\":\"charlie delta\"}\n",
    )
    .unwrap();

    let mut child = maqa()
        .arg("serve-stub")
        .arg("--port")
        .arg("0")
        .arg("--dim")
        .arg("16")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let server = KillOnDrop(child);
    let mut base_url = String::new();
    BufReader::new(stdout).read_line(&mut base_url).unwrap();
    let base_url = base_url.trim().to_string();
    assert!(base_url.starts_with("http://"), "unexpected banner: {base_url:?}");

    let store = dir.join("store.bin");
    let out = run_ok(
        maqa()
            .arg("embed")
            .arg("--corpus")
            .arg(&corpus)
            .arg("--out")
            .arg(&store)
            .arg("--embedder")
            .arg("service")
            .arg("--service-url")
            .arg(&base_url),
    );
    assert!(out.contains("embedded 2 passages (dim 16)"), "embed: {out}");
    assert!(store.exists());
    drop(server);
}
