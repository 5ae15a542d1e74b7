use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;

use serde_json::{json, Value};
use wordalign::corpus::{read_bitext, write_alignments, AlignmentSet, ParallelCorpus, SentencePair};
use wordalign::service::{serve, TaskSet, TaskStore};

const BIN: &str = env!("CARGO_BIN_EXE_wordalign");

fn corpus() -> ParallelCorpus {
    ParallelCorpus::new(vec![
        SentencePair::from_text("1", "a b", "x y z").unwrap(),
        SentencePair::from_text("2", "c d e", "u v").unwrap(),
    ])
}

fn start(corpus: &ParallelCorpus, journal: &Path, annotator: Option<&str>, static_dir: Option<PathBuf>) -> String {
    let tasks = TaskSet::new(corpus, None, annotator).unwrap();
    let store = TaskStore::open(tasks, journal, annotator.map(String::from)).unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(serve(store, "127.0.0.1:0".parse().unwrap(), static_dir, move |a: SocketAddr| {
            tx.send(a).unwrap()
        }))
        .unwrap();
    });
    format!("http://{}", rx.recv().unwrap())
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .new_agent()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn check(name: &str, body: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(body).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?} for {body}");
}

fn get(agent: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut r = agent.get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

fn put(agent: &ureq::Agent, url: &str, body: Value) -> (u16, Value) {
    let mut r = agent.put(url).send_json(body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

fn post(agent: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut r = agent.post(url).send_empty().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

#[test]
fn api_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(&corpus(), &dir.path().join("journal.ndjson"), Some("ann1"), None);
    let a = agent();

    let (code, list) = get(&a, &format!("{base}/api/tasks"));
    assert_eq!(code, 200);
    check("task-list.schema.json", &list);
    assert_eq!(list.as_array().unwrap().len(), 2);

    let (code, task) = put(&a, &format!("{base}/api/tasks/1/alignment"), json!({"links": [[0,0],[1,2]], "elapsed_ms": 900}));
    assert_eq!(code, 200);
    check("task.schema.json", &task);
    let (code, task) = get(&a, &format!("{base}/api/tasks/1"));
    assert_eq!(code, 200);
    check("task.schema.json", &task);
    assert_eq!(task["links"], json!([[0, 0], [1, 2]]));
    assert_eq!(task["elapsed_ms"], 900);
    assert_eq!(task["annotator"], "ann1");

    let (code, err) = put(&a, &format!("{base}/api/tasks/1/alignment"), json!({"links": [[9,0]], "elapsed_ms": 1000}));
    assert_eq!(code, 422);
    check("error.schema.json", &err);
    let (code, _) = put(&a, &format!("{base}/api/tasks/1/alignment"), json!({"links": [], "elapsed_ms": 10}));
    assert_eq!(code, 422, "elapsed time may not decrease");
    let (code, _) = put(&a, &format!("{base}/api/tasks/1/alignment"), json!({"links": "nope"}));
    assert_eq!(code, 422);
    let (code, err) = get(&a, &format!("{base}/api/tasks/77"));
    assert_eq!(code, 404);
    check("error.schema.json", &err);
    let (code, _) = put(&a, &format!("{base}/api/tasks/77/alignment"), json!({"links": [], "elapsed_ms": 1}));
    assert_eq!(code, 404);
    let (_, task) = get(&a, &format!("{base}/api/tasks/1"));
    assert_eq!(task["links"], json!([[0, 0], [1, 2]]), "rejected writes leave state alone");

    let (code, task) = post(&a, &format!("{base}/api/tasks/1/submit"));
    assert_eq!(code, 200);
    check("task.schema.json", &task);
    assert_eq!(task["status"], "submitted");
    let (code, err) = post(&a, &format!("{base}/api/tasks/1/submit"));
    assert_eq!(code, 409);
    check("error.schema.json", &err);
    let (code, _) = put(&a, &format!("{base}/api/tasks/1/alignment"), json!({"links": [], "elapsed_ms": 2000}));
    assert_eq!(code, 409, "submitted tasks are immutable");
    let (code, _) = post(&a, &format!("{base}/api/tasks/2/reopen"));
    assert_eq!(code, 409);
    let (code, task) = post(&a, &format!("{base}/api/tasks/1/reopen"));
    assert_eq!(code, 200);
    assert_eq!(task["status"], "pending");
    let (code, _) = post(&a, &format!("{base}/api/tasks/9/submit"));
    assert_eq!(code, 404);

    let (_, list) = get(&a, &format!("{base}/api/tasks"));
    check("task-list.schema.json", &list);
    let journal = std::fs::read_to_string(dir.path().join("journal.ndjson")).unwrap();
    let events: Vec<Value> = journal.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 3, "one line per acknowledged mutation");
    for e in &events {
        check("journal-event.schema.json", e);
    }
}

#[test]
fn static_assets_are_served() {
    let dir = tempfile::tempdir().unwrap();
    let assets = dir.path().join("ui");
    std::fs::create_dir(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<p>grid</p>").unwrap();
    let base = start(&corpus(), &dir.path().join("j.ndjson"), None, Some(assets));
    let mut r = agent().get(&format!("{base}/index.html")).call().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.body_mut().read_to_string().unwrap(), "<p>grid</p>");
}

struct Server {
    child: Child,
    base: String,
}

fn spawn_cli(tasks: &Path, journal: &Path) -> Server {
    let mut child = Command::new(BIN)
        .args(["serve", "--port", "0", "--tasks"])
        .arg(tasks)
        .arg("--out")
        .arg(journal)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    Server { child, base }
}

fn write_tasks(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("tasks.txt");
    let text: String = (0..n).map(|k| format!("s{k} a b ||| t{k} x y\n")).collect();
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn kill_and_restart_replays_acknowledged_state() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = write_tasks(dir.path(), 4);
    let journal = dir.path().join("session.ndjson");
    let a = agent();

    let mut s = spawn_cli(&tasks, &journal);
    let mut expected = Vec::new();
    for (id, links, ms) in [("1", json!([[0, 0], [1, 1]]), 500), ("2", json!([[2, 2]]), 700), ("1", json!([[0, 0]]), 900)] {
        let (code, _) = put(&a, &format!("{}/api/tasks/{id}/alignment", s.base), json!({"links": links, "elapsed_ms": ms}));
        assert_eq!(code, 200);
    }
    assert_eq!(post(&a, &format!("{}/api/tasks/2/submit", s.base)).0, 200);
    for id in 1..=4 {
        expected.push(get(&a, &format!("{}/api/tasks/{id}", s.base)).1);
    }
    s.child.kill().unwrap();
    s.child.wait().unwrap();

    let mut s = spawn_cli(&tasks, &journal);
    for (id, want) in (1..=4).zip(&expected) {
        assert_eq!(&get(&a, &format!("{}/api/tasks/{id}", s.base)).1, want);
    }
    assert_eq!(post(&a, &format!("{}/api/tasks/2/submit", s.base)).0, 409);
    s.child.kill().unwrap();
    s.child.wait().unwrap();
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn score_annotator_reports_rate_and_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = write_tasks(dir.path(), 12);
    let corpus = read_bitext(&tasks).unwrap();
    let gold: Vec<AlignmentSet> = corpus.iter().map(|_| [(0, 0), (1, 1), (2, 2)].into_iter().collect()).collect();
    let gold_path = dir.path().join("gold.aln");
    write_alignments(&gold, &gold_path).unwrap();

    let journal = dir.path().join("session.ndjson");
    let s = start(&corpus, &journal, None, None);
    let a = agent();
    for id in 1..=10 {
        let (code, _) = put(&a, &format!("{s}/api/tasks/{id}/alignment"), json!({"links": [[0,0],[1,1],[2,2]], "elapsed_ms": 12_000}));
        assert_eq!(code, 200);
        assert_eq!(post(&a, &format!("{s}/api/tasks/{id}/submit")).0, 200);
    }
    // Unsubmitted work is not counted.
    put(&a, &format!("{s}/api/tasks/11/alignment"), json!({"links": [[0,1]], "elapsed_ms": 99_000}));

    let args = ["score-annotator", "--journal", journal.to_str().unwrap(), "--tasks", tasks.to_str().unwrap(), "--gold", gold_path.to_str().unwrap()];
    let (code, stdout, stderr) = run(&args);
    assert_eq!(code, 0, "{stderr}");
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(stdout.lines().next().unwrap(), "sentences\tminutes\tsents/min\tP\tR\tF1");
    assert_eq!(row, ["10", "2.00", "5.0", "100.00", "100.00", "100.00"]);

    let links = dir.path().join("export.aln");
    write_alignments(&gold[..10], &links).unwrap();
    let gold10 = dir.path().join("gold10.aln");
    write_alignments(&gold[..10], &gold10).unwrap();
    let ten = dir.path().join("ten");
    std::fs::create_dir(&ten).unwrap();
    let tasks10 = write_tasks(&ten, 10);
    let (code, stdout, _) = run(&[
        "score-annotator", "--links", links.to_str().unwrap(), "--elapsed-ms", "120000",
        "--tasks", tasks10.to_str().unwrap(), "--gold", gold10.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("\t5.0\t100.00\t100.00\t100.00"), "{stdout}");

    let empty = dir.path().join("empty.ndjson");
    std::fs::write(&empty, "").unwrap();
    let (code, _, stderr) = run(&["score-annotator", "--journal", empty.to_str().unwrap(), "--tasks", tasks.to_str().unwrap(), "--gold", gold_path.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("no submitted tasks"), "{stderr}");
}
