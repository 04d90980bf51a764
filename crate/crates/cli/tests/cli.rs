use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use a3r::store::{save_embeddings, save_manifest, EmbeddingMatrix, Manifest, SampleRecord};
use serde_json::Value;

fn a3r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a3r"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["fixtures", "--seed", "3", "--out", s(dir.path())];
        args.extend_from_slice(extra);
        let o = a3r(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data_args(&self) -> Vec<String> {
        [
            ("--gallery-emb", "gallery.emb"),
            ("--gallery-manifest", "gallery.jsonl"),
            ("--query-emb", "query.emb"),
            ("--query-manifest", "query.jsonl"),
        ]
        .iter()
        .flat_map(|(flag, file)| [flag.to_string(), s(&self.path(file)).to_string()])
        .collect()
    }

    fn pipeline(&self, out: &str, extra: &[&str]) -> (Output, Value) {
        let out = self.path(out);
        let mut args: Vec<String> = vec!["pipeline".into()];
        args.extend(self.data_args());
        args.extend([
            "--qrels".into(),
            s(&self.path("qrels.jsonl")).into(),
            "--out".into(),
            s(&out).into(),
        ]);
        args.extend(extra.iter().map(|x| x.to_string()));
        let o = a3r(&args.iter().map(String::as_str).collect::<Vec<_>>());
        let report = std::fs::read_to_string(out.join("report.json"))
            .map(|t| serde_json::from_str(&t).unwrap())
            .unwrap_or(Value::Null);
        (o, report)
    }
}

fn write_run(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(
        &p,
        lines.iter().map(|l| format!("{l}\n")).collect::<String>(),
    )
    .unwrap();
    p
}

const WORKED_RUN: &str = r#"{"query_id":"q1","ranking":[{"id":"a","score":0.9},{"id":"b","score":0.8},{"id":"c","score":0.7}]}"#;
const WORKED_QRELS: &str = r#"{"query_id":"q1","relevant":["a","c"]}"#;

#[test]
fn eval_prints_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let run = write_run(dir.path(), "run.jsonl", &[WORKED_RUN]);
    let qrels = write_run(dir.path(), "qrels.jsonl", &[WORKED_QRELS]);
    let o = a3r(&["eval", "--run", s(&run), "--qrels", s(&qrels), "--k", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("\"map_at_k\": 0.833333333"), "{out}");
    assert!(out.ends_with('\n'));
    assert!(!out.contains("per_query"));
    let o = a3r(&[
        "eval",
        "--run",
        s(&run),
        "--qrels",
        s(&qrels),
        "--k",
        "3",
        "--per-query",
    ]);
    assert!(stdout(&o).contains("\"ap\": 0.833333333"));
}

#[test]
fn eval_k1_with_relevant_top1_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let run = write_run(dir.path(), "run.jsonl", &[WORKED_RUN]);
    let qrels = write_run(dir.path(), "qrels.jsonl", &[WORKED_QRELS]);
    let out = dir.path().join("eval.json");
    let o = a3r(&[
        "eval",
        "--run",
        s(&run),
        "--qrels",
        s(&qrels),
        "--k",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["map_at_k"], 1.0);
}

#[test]
fn eval_strict_recall_divides_by_all_relevant() {
    let dir = tempfile::tempdir().unwrap();
    let run = write_run(dir.path(), "run.jsonl", &[WORKED_RUN]);
    let qrels = write_run(
        dir.path(),
        "qrels.jsonl",
        &[r#"{"query_id":"q1","relevant":["a","c","z"]}"#],
    );
    let o = a3r(&[
        "eval",
        "--run",
        s(&run),
        "--qrels",
        s(&qrels),
        "--k",
        "2",
        "--strict-recall",
    ]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["recall_denominator"], "relevant");
    assert!((v["map_at_k"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-8);
}

#[test]
fn eval_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_run(dir.path(), "empty.jsonl", &[]);
    let qrels = write_run(dir.path(), "qrels.jsonl", &[WORKED_QRELS]);
    let o = a3r(&["eval", "--run", s(&empty), "--qrels", s(&qrels)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    let unknown = write_run(
        dir.path(),
        "unknown.jsonl",
        &[&WORKED_RUN.replace("q1", "q9")],
    );
    let o = a3r(&["eval", "--run", s(&unknown), "--qrels", s(&qrels)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("q9"));
}

#[test]
fn malformed_run_line_is_exit_two_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let run = write_run(dir.path(), "bad.jsonl", &[WORKED_RUN, "{not json"]);
    let qrels = write_run(dir.path(), "qrels.jsonl", &[WORKED_QRELS]);
    let o = a3r(&["eval", "--run", s(&run), "--qrels", s(&qrels)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.jsonl:2"), "{}", stderr(&o));
}

#[test]
fn missing_embeddings_exit_two_and_name_the_path() {
    let f = Fixture::new(&[]);
    let missing = f.path("nowhere.emb");
    let o = a3r(&[
        "search",
        "--gallery-emb",
        s(&missing),
        "--gallery-manifest",
        s(&f.path("gallery.jsonl")),
        "--query-emb",
        s(&f.path("query.emb")),
        "--query-manifest",
        s(&f.path("query.jsonl")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.emb"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&a3r(&["rerank", "--method", "bogus"])), 1);
    assert_eq!(code(&a3r(&["frobnicate"])), 1);
    assert_eq!(code(&a3r(&["--help"])), 0);
}

#[test]
fn separable_fixture_scores_perfectly_without_reranking() {
    let f = Fixture::new(&["--gap", "0", "--sigma", "0.05", "--query-sigma", "0"]);
    let (o, report) = f.pipeline("out", &["--method", "none", "--k", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(report["map_at_k"], 1.0);
    assert_eq!(report["config"]["method"], "none");
    assert_eq!(report["config"]["k"], 10);
}

#[test]
fn a3r_beats_plain_search_on_the_gap_fixture() {
    let f = Fixture::new(&[]);
    let (o, report) = f.pipeline("out", &["--method", "a3r", "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ours = report["map_at_k"].as_f64().unwrap();
    let base = report["baseline_map_at_k"].as_f64().unwrap();
    assert!(ours > base, "{ours} <= {base}");
    assert!(report["movement"]["promoted"].as_u64() > report["movement"]["demoted"].as_u64());
    for name in [
        "baseline.jsonl",
        "run.jsonl",
        "report.json",
        "movement.json",
        "movement.txt",
    ] {
        let text = std::fs::read_to_string(f.path("out").join(name)).unwrap();
        assert!(text.ends_with('\n'), "{name}");
    }
}

#[test]
fn pipeline_augments_when_given_a_vocabulary() {
    let f = Fixture::new(&[]);
    let vocab = f.path("vocab.json");
    let provider = f.path("provider.emb");
    let (o, _) = f.pipeline(
        "out",
        &[
            "--vocab",
            s(&vocab),
            "--provider-fixture",
            s(&provider),
            "--method",
            "none",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got = std::fs::read_to_string(f.path("out/augmented_gallery.jsonl")).unwrap();
    let want = std::fs::read_to_string(f.path("gallery_truth.jsonl")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let f = Fixture::new(&[]);
    let cfg = f.path("cfg.json");
    std::fs::write(&cfg, r#"{"method": "krnn", "k1": 10, "k2": 3, "k": 5}"#).unwrap();
    let (o, report) = f.pipeline("a", &["--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(report["config"]["method"], "krnn");
    assert_eq!(report["config"]["k1"], 10);
    assert_eq!(report["config"]["lambda"], 0.3);
    assert_eq!(report["config"]["k"], 5);
    let (_, report) = f.pipeline("b", &["--config", s(&cfg), "--method", "a3r", "--k2", "2"]);
    assert_eq!(report["config"]["method"], "a3r");
    assert_eq!(report["config"]["k1"], 10);
    assert_eq!(report["config"]["k2"], 2);

    std::fs::write(&cfg, r#"{"lamda": 0.3}"#).unwrap();
    let (o, _) = f.pipeline("c", &["--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lamda"));
}

#[test]
fn invalid_kr_settings_exit_one() {
    let f = Fixture::new(&[]);
    let (o, _) = f.pipeline("out", &["--k1", "3", "--k2", "5"]);
    assert_eq!(code(&o), 1);
    let (o, _) = f.pipeline("out", &["--lambda", "1.5"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn report_compares_runs() {
    let f = Fixture::new(&[]);
    let (o, _) = f.pipeline("out", &[]);
    assert_eq!(code(&o), 0);
    let base = f.path("out/baseline.jsonl");
    let run = f.path("out/run.jsonl");
    let qrels = f.path("qrels.jsonl");

    let o = a3r(&[
        "report",
        "--before",
        s(&base),
        "--after",
        s(&base),
        "--qrels",
        s(&qrels),
    ]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["promoted"], 0);
    assert_eq!(v["demoted"], 0);
    assert!(stderr(&o).contains("TOTAL"));

    let json = f.path("movement.json");
    let o = a3r(&[
        "report",
        "--before",
        s(&base),
        "--after",
        s(&run),
        "--qrels",
        s(&qrels),
        "--out",
        s(&json),
    ]);
    assert_eq!(code(&o), 0);
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().starts_with("query"));
    assert!(table.lines().last().unwrap().starts_with("TOTAL"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(v["promoted"].as_u64() > v["demoted"].as_u64());

    let other = write_run(
        f.dir.path(),
        "other.jsonl",
        &[r#"{"query_id":"zzz","ranking":[]}"#],
    );
    let o = a3r(&[
        "report",
        "--before",
        s(&base),
        "--after",
        s(&other),
        "--qrels",
        s(&qrels),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn search_and_rerank_write_runs() {
    let f = Fixture::new(&[]);
    let mut args: Vec<String> = vec!["search".into()];
    args.extend(f.data_args());
    args.extend(["--k".into(), "5".into()]);
    let o = a3r(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 20);
    assert!(lines
        .iter()
        .all(|l| l["ranking"].as_array().unwrap().len() == 5));

    let out = f.path("rerank.jsonl");
    args[0] = "rerank".into();
    args.extend([
        "--method".into(),
        "krnn".into(),
        "--out".into(),
        s(&out).into(),
    ]);
    let o = a3r(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = a3r::ranking::load_run(&out).unwrap();
    assert_eq!(runs.len(), 20);
    assert_eq!(runs[0].len(), 5);
}

#[test]
fn scores_use_nine_significant_digits() {
    let f = Fixture::new(&[]);
    let (o, _) = f.pipeline("out", &[]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(f.path("out/run.jsonl")).unwrap();
    for line in text.lines().take(3) {
        let v: Value = serde_json::from_str(line).unwrap();
        for e in v["ranking"].as_array().unwrap() {
            let raw = e["score"].to_string();
            let digits = raw
                .trim_start_matches('-')
                .split(['e', 'E'])
                .next()
                .unwrap()
                .replace('.', "")
                .trim_start_matches('0')
                .len();
            assert!(digits <= 9, "{raw}");
        }
    }
}

#[test]
fn unnormalized_input_is_rejected_until_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.emb");
    let unit = dir.path().join("unit.emb");
    let manifest = dir.path().join("m.jsonl");
    save_embeddings(
        &EmbeddingMatrix::from_rows(&[[3.0f32, 4.0], [0.0, 2.0]]).unwrap(),
        &raw,
    )
    .unwrap();
    save_manifest(&Manifest::from_ids(["a", "b"]).unwrap(), &manifest).unwrap();
    let search = |emb: &Path| {
        a3r(&[
            "search",
            "--gallery-emb",
            s(emb),
            "--gallery-manifest",
            s(&manifest),
            "--query-emb",
            s(emb),
            "--query-manifest",
            s(&manifest),
        ])
    };
    let o = search(&raw);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("row 0"), "{}", stderr(&o));
    assert_eq!(code(&a3r(&["normalize", s(&raw), "--out", s(&unit)])), 0);
    let o = search(&unit);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first: Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(first["ranking"][0]["id"], "a");
    assert!((first["ranking"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn misaligned_manifest_exits_one() {
    let f = Fixture::new(&[]);
    let short = f.path("short.jsonl");
    save_manifest(&Manifest::from_ids(["only"]).unwrap(), &short).unwrap();
    let o = a3r(&[
        "search",
        "--gallery-emb",
        s(&f.path("gallery.emb")),
        "--gallery-manifest",
        s(&short),
        "--query-emb",
        s(&f.path("query.emb")),
        "--query-manifest",
        s(&f.path("query.jsonl")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("short.jsonl"), "{}", stderr(&o));
}

#[test]
fn augment_through_a_stdio_encoder() {
    if Command::new("python3").arg("--version").output().is_err() {
        eprintln!("skipping: python3 not available");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("g.emb");
    let manifest = dir.path().join("g.jsonl");
    let vocab = dir.path().join("vocab.json");
    let out = dir.path().join("aug.jsonl");
    save_embeddings(
        &EmbeddingMatrix::from_rows(&[[1.0f32, 0.0, 0.0, 0.0]]).unwrap(),
        &emb,
    )
    .unwrap();
    let mut r = SampleRecord::new("car");
    r.text = Some("a car".into());
    r.attributes.insert("color".into(), None);
    save_manifest(&Manifest::new(vec![r]).unwrap(), &manifest).unwrap();
    std::fs::write(
        &vocab,
        r#"{"slots": ["color"], "values": {"color": ["blue", "red", "green"]}}"#,
    )
    .unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/support/mock_encoder.py");
    let cmd = format!("python3 {}", s(&script));
    let o = a3r(&[
        "augment",
        "--gallery-emb",
        s(&emb),
        "--gallery-manifest",
        s(&manifest),
        "--vocab",
        s(&vocab),
        "--provider-cmd",
        &cmd,
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = a3r::store::load_manifest(&out).unwrap();
    assert_eq!(m.records()[0].attribute("color"), Some("red"));
    assert_eq!(m.records()[0].text.as_deref(), Some("a car, red"));
}
