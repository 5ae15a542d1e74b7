//! Annotation service: task state, the append-only journal and the HTTP API
//! the grid editor talks to.
//!
//! Every mutation goes through one writer (a mutex around [`TaskStore`]); the
//! journal line is written and fsynced before the in-memory state changes and
//! before the response is sent.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::corpus::{AlignmentSet, ParallelCorpus, SentencePair, Span};
use crate::eval::{score, score_span_restricted, ScoreMode, ScoreReport};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Submitted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationTask {
    pub id: String,
    pub pair: SentencePair,
    pub links: AlignmentSet,
    pub status: TaskStatus,
    pub elapsed_ms: u64,
    pub annotator: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    #[default]
    Save,
    Submit,
    Reopen,
}

/// One journal line. `event` defaults to `save` so bare `{task, links,
/// elapsed_ms, ts}` lines replay as link updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalEvent {
    #[serde(default)]
    pub event: EventKind,
    pub task: String,
    pub links: Vec<[usize; 2]>,
    pub elapsed_ms: u64,
    pub ts: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

/// Rejections, each mapped to one HTTP status.
#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("unknown task `{0}`")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("journal write failed: {0}")]
    Journal(String),
}

impl TaskError {
    pub fn status(&self) -> StatusCode {
        match self {
            TaskError::NotFound(_) => StatusCode::NOT_FOUND,
            TaskError::Conflict(_) => StatusCode::CONFLICT,
            TaskError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            TaskError::Journal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for TaskError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.to_string(),
            status: self.status().as_u16(),
        };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub status: u16,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: String,
    pub status: TaskStatus,
    pub elapsed_ms: u64,
    pub links: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub links: Vec<[usize; 2]>,
    pub status: TaskStatus,
    pub elapsed_ms: u64,
    pub annotator: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentUpdate {
    pub links: Vec<[usize; 2]>,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    #[serde(default)]
    pub elapsed_ms: Option<u64>,
}

impl AnnotationTask {
    pub fn view(&self) -> TaskView {
        TaskView {
            id: self.id.clone(),
            source: self.pair.source.clone(),
            target: self.pair.target.clone(),
            links: links_of(&self.links),
            status: self.status,
            elapsed_ms: self.elapsed_ms,
            annotator: self.annotator.clone(),
        }
    }

    pub fn summary(&self) -> TaskSummary {
        TaskSummary {
            id: self.id.clone(),
            status: self.status,
            elapsed_ms: self.elapsed_ms,
            links: self.links.len(),
        }
    }
}

fn links_of(set: &AlignmentSet) -> Vec<[usize; 2]> {
    set.iter().map(|(i, j)| [i, j]).collect()
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// In-memory tasks keyed by id, in file order.
#[derive(Clone, Debug, Default)]
pub struct TaskSet {
    pub tasks: IndexMap<String, AnnotationTask>,
}

impl TaskSet {
    /// Tasks from a bitext, optionally pre-filled from a Pharaoh file with one
    /// line per pair.
    pub fn new(corpus: &ParallelCorpus, prefill: Option<&[AlignmentSet]>, annotator: Option<&str>) -> Result<Self> {
        if let Some(sets) = prefill {
            crate::corpus::validate_alignments(corpus, sets)?;
        }
        let mut tasks = IndexMap::new();
        for (k, pair) in corpus.iter().enumerate() {
            let links = prefill.map(|s| s[k].clone()).unwrap_or_default();
            let task = AnnotationTask {
                id: pair.id.clone(),
                pair: pair.clone(),
                links,
                status: TaskStatus::Pending,
                elapsed_ms: 0,
                annotator: annotator.map(str::to_string),
            };
            if tasks.insert(pair.id.clone(), task).is_some() {
                return Err(Error::invalid(format!("duplicate task id `{}`", pair.id)));
            }
        }
        Ok(TaskSet { tasks })
    }

    pub fn get(&self, id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(id)
    }

    /// Checks `event` against the current state without changing anything.
    pub fn check(&self, event: &JournalEvent) -> std::result::Result<AlignmentSet, TaskError> {
        let task = self
            .tasks
            .get(&event.task)
            .ok_or_else(|| TaskError::NotFound(event.task.clone()))?;
        let (n, m) = (task.pair.src_len(), task.pair.tgt_len());
        let mut set = AlignmentSet::new();
        for &[i, j] in &event.links {
            if i >= n || j >= m {
                return Err(TaskError::Unprocessable(format!(
                    "link {i}-{j} out of bounds for {n}x{m} task `{}`",
                    task.id
                )));
            }
            set.insert(i, j);
        }
        if event.elapsed_ms < task.elapsed_ms {
            return Err(TaskError::Unprocessable(format!(
                "elapsed_ms {} is below the recorded {}",
                event.elapsed_ms, task.elapsed_ms
            )));
        }
        match (event.event, task.status) {
            (EventKind::Save, TaskStatus::Submitted) => {
                Err(TaskError::Conflict(format!("task `{}` is submitted; reopen it first", task.id)))
            }
            (EventKind::Submit, TaskStatus::Submitted) => {
                Err(TaskError::Conflict(format!("task `{}` is already submitted", task.id)))
            }
            (EventKind::Reopen, TaskStatus::Pending) => {
                Err(TaskError::Conflict(format!("task `{}` is not submitted", task.id)))
            }
            _ => Ok(set),
        }
    }

    /// Validates and applies `event`.
    pub fn apply(&mut self, event: &JournalEvent) -> std::result::Result<(), TaskError> {
        let links = self.check(event)?;
        let task = self.tasks.get_mut(&event.task).expect("checked");
        task.links = links;
        task.elapsed_ms = event.elapsed_ms;
        task.status = match event.event {
            EventKind::Save => task.status,
            EventKind::Submit => TaskStatus::Submitted,
            EventKind::Reopen => TaskStatus::Pending,
        };
        if event.annotator.is_some() {
            task.annotator = event.annotator.clone();
        }
        Ok(())
    }

    /// Replays a journal. A malformed final line is an unacknowledged partial
    /// write and is dropped; malformed or invalid lines elsewhere are errors.
    /// Returns the number of events applied.
    pub fn replay(&mut self, path: &Path) -> Result<usize> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(Error::io(path, e)),
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        let mut applied = 0;
        for (k, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: JournalEvent = match serde_json::from_str(line) {
                Ok(ev) => ev,
                Err(e) if k + 1 == lines.len() => {
                    log::warn!("{}: dropping torn final journal line: {e}", path.display());
                    continue;
                }
                Err(e) => return Err(Error::parse(k + 1, format!("journal event: {e}"))),
            };
            self.apply(&event)
                .map_err(|e| Error::parse(k + 1, format!("journal replay: {e}")))?;
            applied += 1;
        }
        Ok(applied)
    }

    pub fn submitted(&self) -> impl Iterator<Item = &AnnotationTask> {
        self.tasks.values().filter(|t| t.status == TaskStatus::Submitted)
    }
}

/// Task state plus its journal; the single writer.
pub struct TaskStore {
    tasks: TaskSet,
    journal: File,
    journal_path: PathBuf,
    annotator: Option<String>,
}

impl TaskStore {
    /// Replays `journal` over `tasks` and opens it for appending. A torn final
    /// line is truncated away so later appends start on a fresh line.
    pub fn open(mut tasks: TaskSet, journal: impl AsRef<Path>, annotator: Option<String>) -> Result<Self> {
        let path = journal.as_ref().to_path_buf();
        let applied = tasks.replay(&path)?;
        log::info!("replayed {applied} journal events from {}", path.display());
        truncate_torn_tail(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(TaskStore {
            tasks,
            journal: file,
            journal_path: path,
            annotator,
        })
    }

    pub fn tasks(&self) -> &TaskSet {
        &self.tasks
    }

    pub fn journal_path(&self) -> &Path {
        &self.journal_path
    }

    /// Validates, journals (with fsync), then applies.
    pub fn commit(&mut self, mut event: JournalEvent) -> std::result::Result<&AnnotationTask, TaskError> {
        if event.annotator.is_none() {
            event.annotator = self.annotator.clone();
        }
        self.tasks.check(&event)?;
        let mut line = serde_json::to_string(&event).map_err(|e| TaskError::Journal(e.to_string()))?;
        line.push('\n');
        self.journal
            .write_all(line.as_bytes())
            .and_then(|_| self.journal.sync_data())
            .map_err(|e| TaskError::Journal(e.to_string()))?;
        self.tasks.apply(&event)?;
        Ok(self.tasks.get(&event.task).expect("applied"))
    }

    fn event(&self, kind: EventKind, id: &str, links: Vec<[usize; 2]>, elapsed_ms: u64) -> JournalEvent {
        JournalEvent {
            event: kind,
            task: id.to_string(),
            links,
            elapsed_ms,
            ts: now_ms(),
            annotator: None,
        }
    }

    pub fn save(&mut self, id: &str, update: AlignmentUpdate) -> std::result::Result<&AnnotationTask, TaskError> {
        let ev = self.event(EventKind::Save, id, update.links, update.elapsed_ms);
        self.commit(ev)
    }

    /// Submits with the current links; `elapsed_ms` defaults to the recorded value.
    pub fn submit(&mut self, id: &str, elapsed_ms: Option<u64>) -> std::result::Result<&AnnotationTask, TaskError> {
        let task = self.tasks.get(id).ok_or_else(|| TaskError::NotFound(id.to_string()))?;
        let ev = self.event(
            EventKind::Submit,
            id,
            links_of(&task.links),
            elapsed_ms.unwrap_or(task.elapsed_ms),
        );
        self.commit(ev)
    }

    pub fn reopen(&mut self, id: &str) -> std::result::Result<&AnnotationTask, TaskError> {
        let task = self.tasks.get(id).ok_or_else(|| TaskError::NotFound(id.to_string()))?;
        let ev = self.event(EventKind::Reopen, id, links_of(&task.links), task.elapsed_ms);
        self.commit(ev)
    }
}

fn truncate_torn_tail(path: &Path) -> Result<()> {
    let Ok(bytes) = std::fs::read(path) else {
        return Ok(());
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let file = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    file.set_len(keep as u64)
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(path, e))
}

pub type SharedStore = Arc<Mutex<TaskStore>>;

fn lock(store: &SharedStore) -> std::sync::MutexGuard<'_, TaskStore> {
    store.lock().unwrap_or_else(|p| p.into_inner())
}

async fn list_tasks(State(store): State<SharedStore>) -> Json<Vec<TaskSummary>> {
    let s = lock(&store);
    Json(s.tasks().tasks.values().map(AnnotationTask::summary).collect())
}

async fn get_task(State(store): State<SharedStore>, UrlPath(id): UrlPath<String>) -> Response {
    let s = lock(&store);
    match s.tasks().get(&id) {
        Some(t) => Json(t.view()).into_response(),
        None => TaskError::NotFound(id).into_response(),
    }
}

async fn put_alignment(
    State(store): State<SharedStore>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Json<AlignmentUpdate>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Json(update) = match body {
        Ok(b) => b,
        Err(e) => return TaskError::Unprocessable(e.body_text()).into_response(),
    };
    let mut s = lock(&store);
    match s.save(&id, update) {
        Ok(t) => Json(t.view()).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn submit_task(State(store): State<SharedStore>, UrlPath(id): UrlPath<String>, body: axum::body::Bytes) -> Response {
    let req: SubmitRequest = if body.iter().all(u8::is_ascii_whitespace) {
        SubmitRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return TaskError::Unprocessable(format!("submit body: {e}")).into_response(),
        }
    };
    let mut s = lock(&store);
    match s.submit(&id, req.elapsed_ms) {
        Ok(t) => Json(t.view()).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn reopen_task(State(store): State<SharedStore>, UrlPath(id): UrlPath<String>) -> Response {
    let mut s = lock(&store);
    match s.reopen(&id) {
        Ok(t) => Json(t.view()).into_response(),
        Err(e) => e.into_response(),
    }
}

/// The JSON API, plus static files from `static_dir` when given.
pub fn router(store: SharedStore, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/tasks", get(list_tasks))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/tasks/{id}/alignment", put(put_alignment))
        .route("/api/tasks/{id}/submit", post(submit_task))
        .route("/api/tasks/{id}/reopen", post(reopen_task))
        .with_state(store);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until ctrl-c. `on_bound` receives the bound address (port 0 picks one).
pub async fn serve(
    store: TaskStore,
    addr: SocketAddr,
    static_dir: Option<PathBuf>,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::invalid(format!("cannot bind {addr}: {e}")))?;
    let bound = listener
        .local_addr()
        .map_err(|e| Error::invalid(format!("cannot read bound address: {e}")))?;
    on_bound(bound);
    let app = router(Arc::new(Mutex::new(store)), static_dir.as_deref());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::invalid(format!("server error: {e}")))
}

/// Annotator throughput and quality over submitted tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotatorReport {
    pub sentences: usize,
    pub elapsed_ms: u64,
    pub sentences_per_minute: f64,
    pub score: ScoreReport,
}

impl AnnotatorReport {
    /// One row: rate, then P/R/F1 in percent.
    pub fn to_tsv(&self) -> String {
        format!(
            "sentences\tminutes\tsents/min\tP\tR\tF1\n{}\t{:.2}\t{:.1}\t{:.2}\t{:.2}\t{:.2}\n",
            self.sentences,
            self.elapsed_ms as f64 / 60_000.0,
            self.sentences_per_minute,
            100.0 * self.score.precision,
            100.0 * self.score.recall,
            100.0 * self.score.f1
        )
    }
}

/// Rate = submitted count / total elapsed minutes.
pub fn sentences_per_minute(count: usize, elapsed_ms: u64) -> Result<f64> {
    if elapsed_ms == 0 {
        return Err(Error::invalid("total elapsed time is zero; no rate defined"));
    }
    Ok(count as f64 / (elapsed_ms as f64 / 60_000.0))
}

/// Annotated sentences, keyed by position in the task file, and the total
/// time spent on them.
#[derive(Clone, Debug, Default)]
pub struct Session {
    pub sentences: Vec<(usize, AlignmentSet)>,
    pub elapsed_ms: u64,
}

impl Session {
    /// Submitted tasks of `tasks`.
    pub fn submitted(tasks: &TaskSet) -> Self {
        let mut session = Session::default();
        for (k, t) in tasks.tasks.values().enumerate() {
            if t.status == TaskStatus::Submitted {
                session.sentences.push((k, t.links.clone()));
                session.elapsed_ms += t.elapsed_ms;
            }
        }
        session
    }

    /// Exported alignments: every line counts as submitted.
    pub fn exported(sets: Vec<AlignmentSet>, elapsed_ms: u64) -> Self {
        Session {
            sentences: sets.into_iter().enumerate().collect(),
            elapsed_ms,
        }
    }
}

/// Scores annotated sentences against gold (one gold set per task-file line),
/// optionally restricted to source spans.
pub fn score_annotator(
    session: &Session,
    gold: &[AlignmentSet],
    spans: Option<(&[Vec<Span>], &[usize])>,
    mode: ScoreMode,
) -> Result<AnnotatorReport> {
    let annotated = &session.sentences;
    if annotated.is_empty() {
        return Err(Error::invalid("no submitted tasks to score"));
    }
    let mut pred = Vec::with_capacity(annotated.len());
    let mut gold_sel = Vec::with_capacity(annotated.len());
    for (k, links) in annotated {
        let g = gold
            .get(*k)
            .ok_or_else(|| Error::invalid(format!("no gold alignment for task line {}", k + 1)))?;
        pred.push(links.clone());
        gold_sel.push(g.clone());
    }
    let score = match spans {
        None => score(&pred, &gold_sel, mode)?,
        Some((spans, lens)) => {
            let pick = |k: usize| -> Result<(Vec<Span>, usize)> {
                match (spans.get(k), lens.get(k)) {
                    (Some(s), Some(&n)) => Ok((s.clone(), n)),
                    _ => Err(Error::invalid(format!("no span line for task line {}", k + 1))),
                }
            };
            let (s, n): (Vec<_>, Vec<_>) = annotated
                .iter()
                .map(|(k, _)| pick(*k))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            score_span_restricted(&pred, &gold_sel, &s, &n, mode)?
        }
    };
    Ok(AnnotatorReport {
        sentences: annotated.len(),
        elapsed_ms: session.elapsed_ms,
        sentences_per_minute: sentences_per_minute(annotated.len(), session.elapsed_ms)?,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> ParallelCorpus {
        ParallelCorpus::new(vec![
            SentencePair::from_text("1", "a b", "x y z").unwrap(),
            SentencePair::from_text("2", "c", "w").unwrap(),
        ])
    }

    fn save(task: &str, links: Vec<[usize; 2]>, ms: u64) -> JournalEvent {
        JournalEvent {
            event: EventKind::Save,
            task: task.into(),
            links,
            elapsed_ms: ms,
            ts: 0,
            annotator: None,
        }
    }

    #[test]
    fn rate_arithmetic() {
        assert_eq!(sentences_per_minute(10, 120_000).unwrap(), 5.0);
        assert!(sentences_per_minute(3, 0).is_err());
    }

    #[test]
    fn state_machine() {
        let mut ts = TaskSet::new(&corpus(), None, None).unwrap();
        ts.apply(&save("1", vec![[0, 0], [1, 2]], 10)).unwrap();
        assert!(matches!(ts.apply(&save("1", vec![[2, 0]], 20)), Err(TaskError::Unprocessable(_))));
        assert!(matches!(ts.apply(&save("1", vec![], 5)), Err(TaskError::Unprocessable(_))));
        assert!(matches!(ts.apply(&save("9", vec![], 5)), Err(TaskError::NotFound(_))));
        let mut sub = save("1", vec![[0, 0]], 30);
        sub.event = EventKind::Submit;
        ts.apply(&sub).unwrap();
        assert!(matches!(ts.apply(&sub), Err(TaskError::Conflict(_))));
        assert!(matches!(ts.apply(&save("1", vec![], 40)), Err(TaskError::Conflict(_))));
        sub.event = EventKind::Reopen;
        ts.apply(&sub).unwrap();
        assert_eq!(ts.get("1").unwrap().status, TaskStatus::Pending);
    }

    #[test]
    fn bare_event_lines_parse_as_saves() {
        let ev: JournalEvent = serde_json::from_str(r#"{"task":"2","links":[[0,0]],"elapsed_ms":7,"ts":1}"#).unwrap();
        assert_eq!(ev.event, EventKind::Save);
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.ndjson");
        let good = serde_json::to_string(&save("2", vec![[0, 0]], 7)).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"task\":\"1\",\"li")).unwrap();
        let ts = TaskSet::new(&corpus(), None, None).unwrap();
        let mut store = TaskStore::open(ts, &path, None).unwrap();
        assert_eq!(store.tasks().get("2").unwrap().elapsed_ms, 7);
        store.submit("2", None).unwrap();
        let mut again = TaskSet::new(&corpus(), None, None).unwrap();
        assert_eq!(again.replay(&path).unwrap(), 2);
        assert_eq!(again.get("2").unwrap().status, TaskStatus::Submitted);
    }

    #[test]
    fn annotator_equal_to_gold_scores_one() {
        let gold = vec![AlignmentSet::from_iter([(0, 0), (1, 2)]), AlignmentSet::from_iter([(0, 0)])];
        let session = Session::exported(gold.clone(), 24_000);
        let r = score_annotator(&session, &gold, None, ScoreMode::Macro).unwrap();
        assert_eq!((r.score.precision, r.score.recall, r.score.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.sentences_per_minute, 5.0);
        assert!(score_annotator(&Session::default(), &gold, None, ScoreMode::Macro).is_err());
    }
}
