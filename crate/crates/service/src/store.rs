//! Persistence: a content-addressed blob directory and a SQLite metadata
//! database. All metadata writes go through one connection behind a mutex.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use tbve_core::conditioning::Embedding;
use tbve_core::corpus::PreparedRecord;
use tbve_core::fsutil::{sha256_hex, write_atomic};

use crate::error::ServiceError;

pub type StoreResult<T> = Result<T, ServiceError>;

/// Blobs live at `<root>/<first two hex digits>/<sha256>`.
#[derive(Clone, Debug)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, hash: &str) -> PathBuf {
        self.root.join(&hash[..2.min(hash.len())]).join(hash)
    }

    /// Stores `bytes` unless identical bytes are already present.
    pub fn put(&self, bytes: &[u8]) -> StoreResult<String> {
        let hash = sha256_hex(bytes);
        let path = self.path(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> StoreResult<Vec<u8>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ServiceError::internal(format!("malformed blob reference {hash}")));
        }
        Ok(std::fs::read(self.path(hash))?)
    }

    pub fn count(&self) -> usize {
        let Ok(dirs) = std::fs::read_dir(&self.root) else { return 0 };
        dirs.flatten()
            .filter_map(|d| std::fs::read_dir(d.path()).ok())
            .map(|files| files.flatten().filter(|f| !f.file_name().to_string_lossy().starts_with('.')).count())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> StoreResult<Self> {
        Ok(match s {
            "queued" => JobState::Queued,
            "running" => JobState::Running,
            "done" => JobState::Done,
            "failed" => JobState::Failed,
            other => return Err(ServiceError::internal(format!("unknown job state {other}"))),
        })
    }

    pub fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Done | JobState::Failed => 2,
        }
    }

    /// Allowed moves: queued → running → done | failed. A queued job can
    /// also fail directly (e.g. when it was interrupted before starting).
    pub fn can_move_to(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Queued, JobState::Failed)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Edit,
    Synthesize,
}

impl JobKind {
    fn as_str(self) -> &'static str {
        match self {
            JobKind::Edit => "edit",
            JobKind::Synthesize => "synthesize",
        }
    }

    fn parse(s: &str) -> StoreResult<Self> {
        match s {
            "edit" => Ok(JobKind::Edit),
            "synthesize" => Ok(JobKind::Synthesize),
            other => Err(ServiceError::internal(format!("unknown job kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobRow {
    pub id: String,
    pub kind: JobKind,
    pub request: serde_json::Value,
    pub state: JobState,
    pub checkpoint_id: Option<String>,
    pub result: Option<serde_json::Value>,
    pub audio_blob: Option<String>,
    pub error: Option<JobError>,
    pub created_at_ms: i64,
    pub updated_at_ms: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingRow {
    pub id: String,
    pub content_hash: String,
    pub speaker_id: String,
    pub audio_blob: String,
    pub feature_blob: String,
    pub record: PreparedRecord,
    pub embedding: Embedding,
    pub created_at_ms: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub id: String,
    pub blob: String,
    pub step: u64,
    pub embedding_mode: String,
    pub ref_mode: String,
    pub uploaded_at_ms: i64,
}

pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS recordings (
    id TEXT PRIMARY KEY,
    content_hash TEXT NOT NULL UNIQUE,
    speaker_id TEXT NOT NULL,
    audio_blob TEXT NOT NULL,
    feature_blob TEXT NOT NULL,
    record_json TEXT NOT NULL,
    embedding_json TEXT NOT NULL,
    created_at_ms INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS recordings_speaker ON recordings (speaker_id);
CREATE TABLE IF NOT EXISTS checkpoints (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    id TEXT NOT NULL UNIQUE,
    blob TEXT NOT NULL,
    step INTEGER NOT NULL,
    embedding_mode TEXT NOT NULL,
    ref_mode TEXT NOT NULL,
    uploaded_at_ms INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS settings (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    id TEXT NOT NULL UNIQUE,
    kind TEXT NOT NULL,
    request_json TEXT NOT NULL,
    state TEXT NOT NULL,
    checkpoint_id TEXT,
    result_json TEXT,
    audio_blob TEXT,
    error_stage TEXT,
    error_message TEXT,
    created_at_ms INTEGER NOT NULL,
    updated_at_ms INTEGER NOT NULL
);
";

pub struct Db {
    conn: Mutex<Connection>,
}

fn json<T: Serialize>(v: &T) -> StoreResult<String> {
    Ok(serde_json::to_string(v)?)
}

impl Db {
    pub fn open(path: &Path) -> StoreResult<Self> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    fn with<T>(&self, f: impl FnOnce(&mut Connection) -> rusqlite::Result<T>) -> StoreResult<T> {
        let mut conn = self.conn.lock().map_err(|_| ServiceError::internal("metadata store lock poisoned"))?;
        Ok(f(&mut conn)?)
    }

    // Recordings

    pub fn insert_recording(&self, r: &RecordingRow) -> StoreResult<()> {
        let record = json(&r.record)?;
        let embedding = json(&r.embedding)?;
        self.with(|c| {
            c.execute(
                "INSERT INTO recordings (id, content_hash, speaker_id, audio_blob, feature_blob, record_json, embedding_json, created_at_ms)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
                params![r.id, r.content_hash, r.speaker_id, r.audio_blob, r.feature_blob, record, embedding, r.created_at_ms],
            )
            .map(|_| ())
        })
    }

    const RECORDING_COLUMNS: &'static str =
        "id, content_hash, speaker_id, audio_blob, feature_blob, record_json, embedding_json, created_at_ms";

    fn recording_where(&self, clause: &str, key: &str) -> StoreResult<Option<RecordingRow>> {
        let sql = format!("SELECT {} FROM recordings WHERE {clause} = ?1", Self::RECORDING_COLUMNS);
        let raw = self.with(|c| {
            c.query_row(&sql, params![key], |row| {
                Ok((
                    row.get::<_, String>(0)?,
                    row.get::<_, String>(1)?,
                    row.get::<_, String>(2)?,
                    row.get::<_, String>(3)?,
                    row.get::<_, String>(4)?,
                    row.get::<_, String>(5)?,
                    row.get::<_, String>(6)?,
                    row.get::<_, i64>(7)?,
                ))
            })
            .optional()
        })?;
        raw.map(|(id, content_hash, speaker_id, audio_blob, feature_blob, record, embedding, created_at_ms)| {
            Ok(RecordingRow {
                id,
                content_hash,
                speaker_id,
                audio_blob,
                feature_blob,
                record: serde_json::from_str(&record)?,
                embedding: serde_json::from_str(&embedding)?,
                created_at_ms,
            })
        })
        .transpose()
    }

    pub fn recording(&self, id: &str) -> StoreResult<Option<RecordingRow>> {
        self.recording_where("id", id)
    }

    pub fn recording_by_hash(&self, hash: &str) -> StoreResult<Option<RecordingRow>> {
        self.recording_where("content_hash", hash)
    }

    pub fn speaker_embeddings(&self, speaker_id: &str) -> StoreResult<Vec<Embedding>> {
        let raw: Vec<String> = self.with(|c| {
            let mut stmt = c.prepare("SELECT embedding_json FROM recordings WHERE speaker_id = ?1 ORDER BY id")?;
            let rows = stmt.query_map(params![speaker_id], |r| r.get::<_, String>(0))?;
            rows.collect()
        })?;
        raw.iter().map(|s| Ok(serde_json::from_str(s)?)).collect()
    }

    // Checkpoints

    pub fn insert_checkpoint(&self, ck: &CheckpointRow) -> StoreResult<()> {
        self.with(|c| {
            c.execute(
                "INSERT INTO checkpoints (id, blob, step, embedding_mode, ref_mode, uploaded_at_ms) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![ck.id, ck.blob, ck.step as i64, ck.embedding_mode, ck.ref_mode, ck.uploaded_at_ms],
            )
            .map(|_| ())
        })
    }

    pub fn checkpoints(&self) -> StoreResult<Vec<CheckpointRow>> {
        self.with(|c| {
            let mut stmt = c.prepare(
                "SELECT id, blob, step, embedding_mode, ref_mode, uploaded_at_ms FROM checkpoints ORDER BY seq",
            )?;
            let rows = stmt.query_map([], |r| {
                Ok(CheckpointRow {
                    id: r.get(0)?,
                    blob: r.get(1)?,
                    step: r.get::<_, i64>(2)? as u64,
                    embedding_mode: r.get(3)?,
                    ref_mode: r.get(4)?,
                    uploaded_at_ms: r.get(5)?,
                })
            })?;
            rows.collect()
        })
    }

    pub fn checkpoint(&self, id: &str) -> StoreResult<Option<CheckpointRow>> {
        Ok(self.checkpoints()?.into_iter().find(|c| c.id == id))
    }

    pub fn setting(&self, key: &str) -> StoreResult<Option<String>> {
        self.with(|c| {
            c.query_row("SELECT value FROM settings WHERE key = ?1", params![key], |r| r.get(0))
                .optional()
        })
    }

    pub fn set_setting(&self, key: &str, value: &str) -> StoreResult<()> {
        self.with(|c| {
            c.execute(
                "INSERT INTO settings (key, value) VALUES (?1, ?2) ON CONFLICT(key) DO UPDATE SET value = excluded.value",
                params![key, value],
            )
            .map(|_| ())
        })
    }

    // Jobs

    pub fn insert_job(&self, kind: JobKind, request: &serde_json::Value) -> StoreResult<JobRow> {
        let now = now_ms();
        let body = json(request)?;
        let id = self.with(|c| {
            let tx = c.transaction()?;
            let seq: i64 = tx.query_row("SELECT COALESCE(MAX(seq), 0) + 1 FROM jobs", [], |r| r.get(0))?;
            let id = format!("job-{seq:06}");
            tx.execute(
                "INSERT INTO jobs (seq, id, kind, request_json, state, created_at_ms, updated_at_ms) VALUES (?1, ?2, ?3, ?4, 'queued', ?5, ?5)",
                params![seq, id, kind.as_str(), body, now],
            )?;
            tx.commit()?;
            Ok(id)
        })?;
        self.job(&id)?.ok_or_else(|| ServiceError::internal("job vanished after insert"))
    }

    pub fn job(&self, id: &str) -> StoreResult<Option<JobRow>> {
        type Raw = (String, String, String, String, Option<String>, Option<String>, Option<String>, Option<String>, Option<String>, i64, i64);
        let raw: Option<Raw> = self.with(|c| {
            c.query_row(
                "SELECT id, kind, request_json, state, checkpoint_id, result_json, audio_blob, error_stage, error_message, created_at_ms, updated_at_ms
                 FROM jobs WHERE id = ?1",
                params![id],
                |r| {
                    Ok((
                        r.get(0)?,
                        r.get(1)?,
                        r.get(2)?,
                        r.get(3)?,
                        r.get(4)?,
                        r.get(5)?,
                        r.get(6)?,
                        r.get(7)?,
                        r.get(8)?,
                        r.get(9)?,
                        r.get(10)?,
                    ))
                },
            )
            .optional()
        })?;
        raw.map(|(id, kind, request, state, checkpoint_id, result, audio_blob, stage, message, created, updated)| {
            Ok(JobRow {
                id,
                kind: JobKind::parse(&kind)?,
                request: serde_json::from_str(&request)?,
                state: JobState::parse(&state)?,
                checkpoint_id,
                result: result.map(|r| serde_json::from_str(&r)).transpose()?,
                audio_blob,
                error: match (stage, message) {
                    (Some(stage), Some(message)) => Some(JobError { stage, message }),
                    _ => None,
                },
                created_at_ms: created,
                updated_at_ms: updated,
            })
        })
        .transpose()
    }

    pub fn jobs_in_state(&self, state: JobState) -> StoreResult<Vec<String>> {
        self.with(|c| {
            let mut stmt = c.prepare("SELECT id FROM jobs WHERE state = ?1 ORDER BY seq")?;
            let rows = stmt.query_map(params![state.as_str()], |r| r.get(0))?;
            rows.collect()
        })
    }

    /// Moves a job from `from` to `to`, refusing anything the state machine
    /// does not allow or a job that is no longer in `from`.
    fn transition(&self, id: &str, from: JobState, to: JobState, extra: impl FnOnce(&rusqlite::Transaction<'_>) -> rusqlite::Result<()>) -> StoreResult<()> {
        if !from.can_move_to(to) {
            return Err(ServiceError::internal(format!("illegal job transition {} -> {}", from.as_str(), to.as_str())));
        }
        let moved = self.with(|c| {
            let tx = c.transaction()?;
            let n = tx.execute(
                "UPDATE jobs SET state = ?1, updated_at_ms = ?2 WHERE id = ?3 AND state = ?4",
                params![to.as_str(), now_ms(), id, from.as_str()],
            )?;
            if n == 1 {
                extra(&tx)?;
            }
            tx.commit()?;
            Ok(n == 1)
        })?;
        if moved {
            Ok(())
        } else {
            Err(ServiceError::internal(format!("job {id} is not {}", from.as_str())))
        }
    }

    pub fn start_job(&self, id: &str, checkpoint_id: &str) -> StoreResult<()> {
        self.transition(id, JobState::Queued, JobState::Running, |tx| {
            tx.execute("UPDATE jobs SET checkpoint_id = ?1 WHERE id = ?2", params![checkpoint_id, id])
                .map(|_| ())
        })
    }

    pub fn finish_job(&self, id: &str, result: &serde_json::Value, audio_blob: &str) -> StoreResult<()> {
        let body = json(result)?;
        self.transition(id, JobState::Running, JobState::Done, |tx| {
            tx.execute(
                "UPDATE jobs SET result_json = ?1, audio_blob = ?2 WHERE id = ?3",
                params![body, audio_blob, id],
            )
            .map(|_| ())
        })
    }

    pub fn fail_job(&self, id: &str, from: JobState, error: &JobError) -> StoreResult<()> {
        self.transition(id, from, JobState::Failed, |tx| {
            tx.execute(
                "UPDATE jobs SET error_stage = ?1, error_message = ?2 WHERE id = ?3",
                params![error.stage, error.message, id],
            )
            .map(|_| ())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_blobs_are_stored_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::new(dir.path());
        let a = store.put(b"hello").unwrap();
        let b = store.put(b"hello").unwrap();
        let c = store.put(b"world").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(store.count(), 2);
        assert_eq!(store.get(&a).unwrap(), b"hello");
        assert!(store.get("../../etc/passwd").is_err());
    }

    #[test]
    fn state_machine_only_moves_forward() {
        use JobState::*;
        let all = [Queued, Running, Done, Failed];
        for from in all {
            for to in all {
                if from.can_move_to(to) {
                    assert!(to.rank() > from.rank(), "{from:?} -> {to:?}");
                }
            }
        }
        assert!(!Done.can_move_to(Failed));
        assert!(!Failed.can_move_to(Running));
    }

    #[test]
    fn job_rows_follow_transitions() {
        let dir = tempfile::tempdir().unwrap();
        let db = Db::open(&dir.path().join("meta.sqlite")).unwrap();
        let job = db.insert_job(JobKind::Edit, &serde_json::json!({"a": 1})).unwrap();
        assert_eq!(job.id, "job-000001");
        assert_eq!(job.state, JobState::Queued);
        assert!(db.finish_job(&job.id, &serde_json::json!({}), "x").is_err());
        db.start_job(&job.id, "ckpt").unwrap();
        assert!(db.start_job(&job.id, "ckpt").is_err());
        db.fail_job(&job.id, JobState::Running, &JobError { stage: "plan_edit".into(), message: "oov".into() })
            .unwrap();
        let row = db.job(&job.id).unwrap().unwrap();
        assert_eq!(row.state, JobState::Failed);
        assert_eq!(row.error.unwrap().stage, "plan_edit");
        assert_eq!(row.checkpoint_id.as_deref(), Some("ckpt"));
        let second = db.insert_job(JobKind::Synthesize, &serde_json::json!({})).unwrap();
        assert_eq!(second.id, "job-000002");
        assert_eq!(db.jobs_in_state(JobState::Queued).unwrap(), vec![second.id]);
    }
}
