//! REST endpoints under `/v1`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tbve_core::corpus::{input_hash, prepare_utterance, validate_id};
use tbve_core::editing::EditRequest;
use tbve_core::features::write_tbvf;
use tbve_core::frontend::ManifestRecord;
use tbve_core::training::read_checkpoint;

use crate::app::{AppState, SynthesizeRequest};
use crate::error::ServiceError;
use crate::store::{now_ms, CheckpointRow, JobKind, JobRow, JobState, RecordingRow};

const MAX_UPLOAD_BYTES: usize = 1 << 30;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/recordings", post(upload_recording))
        .route("/v1/recordings/{id}", get(get_recording))
        .route("/v1/recordings/{id}/audio", get(recording_audio))
        .route("/v1/edits", post(submit_edit))
        .route("/v1/edits/{id}", get(get_job))
        .route("/v1/edits/{id}/audio", get(job_audio))
        .route("/v1/synthesize", post(submit_synthesis))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/audio", get(job_audio))
        .route("/v1/checkpoints", post(upload_checkpoint).get(list_checkpoints))
        .route("/v1/checkpoints/{id}/activate", post(activate_checkpoint))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

type ApiResult<T> = Result<T, ServiceError>;

/// Runs store and model work off the async executor.
async fn blocking<T, F>(state: Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ServiceError::internal(format!("handler panicked: {e}")))?
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::bad_request(format!("invalid request body: {e}")))
}

fn wav_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "active_checkpoint": state.active_model().map(|m| m.id.clone()),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordingUpload {
    #[serde(default)]
    id: Option<String>,
    speaker_id: String,
    transcript: String,
    /// Aligner phone string, space separated.
    phones: String,
    durations_frames: Vec<usize>,
    /// PCM16 mono WAV, base64 encoded.
    audio_wav_base64: String,
}

#[derive(Debug, Serialize)]
struct RecordingView {
    id: String,
    speaker_id: String,
    transcript: String,
    words: Vec<String>,
    frames: usize,
    phone_durations: Vec<usize>,
    audio_sha256: String,
    feature_sha256: String,
    created_at_ms: i64,
}

impl From<&RecordingRow> for RecordingView {
    fn from(r: &RecordingRow) -> Self {
        Self {
            id: r.id.clone(),
            speaker_id: r.speaker_id.clone(),
            transcript: r.record.text.clone(),
            words: r.record.phones.words.clone(),
            frames: r.record.frames,
            phone_durations: r.record.alignment.phone_durations.clone(),
            audio_sha256: r.audio_blob.clone(),
            feature_sha256: r.feature_blob.clone(),
            created_at_ms: r.created_at_ms,
        }
    }
}

async fn upload_recording(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let upload: RecordingUpload = parse_json(&body)?;
    blocking(state, move |s| {
        let audio = base64::engine::general_purpose::STANDARD
            .decode(upload.audio_wav_base64.trim())
            .map_err(|e| ServiceError::bad_request(format!("audio_wav_base64: {e}")))?;
        if upload.speaker_id.trim().is_empty() {
            return Err(ServiceError::bad_request("speaker_id must not be empty"));
        }
        let mut record = ManifestRecord {
            id: String::new(),
            audio_path: String::new(),
            text: upload.transcript,
            phones: upload.phones,
            durations_frames: upload.durations_frames,
            speaker_id: upload.speaker_id,
        };
        let hash = input_hash(&s.lexicon_text, &record, &audio, &s.spec, &tbve_core::conditioning::EmbeddingProvider::name(&s.provider))
            .map_err(ServiceError::from_input)?;
        if let Some(existing) = s.db.recording_by_hash(&hash)? {
            return Ok((StatusCode::OK, Json(RecordingView::from(&existing))).into_response());
        }
        record.id = upload.id.unwrap_or_else(|| format!("rec-{}", &hash[..16]));
        validate_id(&record.id).map_err(ServiceError::from_input)?;
        if s.db.recording(&record.id)?.is_some() {
            return Err(ServiceError::conflict(format!("recording {} exists with different content", record.id)));
        }
        let prepared = prepare_utterance(&record, &audio, Default::default(), &s.lexicon, &s.spec, &s.provider, hash.clone())
            .map_err(ServiceError::from_input)?;
        let mut features = Vec::new();
        write_tbvf(&prepared.features, &mut features)?;
        let row = RecordingRow {
            id: record.id.clone(),
            content_hash: hash,
            speaker_id: record.speaker_id.clone(),
            audio_blob: s.blobs.put(&audio)?,
            feature_blob: s.blobs.put(&features)?,
            record: prepared.record,
            embedding: prepared.embedding,
            created_at_ms: now_ms(),
        };
        s.db.insert_recording(&row)?;
        Ok((StatusCode::CREATED, Json(RecordingView::from(&row))).into_response())
    })
    .await
}

async fn get_recording(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<RecordingView>> {
    blocking(state, move |s| {
        let row = s
            .db
            .recording(&id)?
            .ok_or_else(|| ServiceError::not_found(format!("unknown recording {id}")))?;
        Ok(Json(RecordingView::from(&row)))
    })
    .await
}

async fn recording_audio(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(state, move |s| {
        let row = s
            .db
            .recording(&id)?
            .ok_or_else(|| ServiceError::not_found(format!("unknown recording {id}")))?;
        Ok(wav_response(s.blobs.get(&row.audio_blob)?))
    })
    .await
}

fn accepted(job: &JobRow) -> Response {
    (
        StatusCode::ACCEPTED,
        [(header::LOCATION, format!("/v1/jobs/{}", job.id))],
        Json(json!({ "id": job.id, "state": job.state })),
    )
        .into_response()
}

async fn submit_edit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let request: EditRequest = parse_json(&body)?;
    blocking(state, move |s| {
        if s.db.recording(&request.utterance_id)?.is_none() {
            return Err(ServiceError::not_found(format!("unknown recording {}", request.utterance_id)));
        }
        if s.active_model().is_none() {
            return Err(ServiceError::conflict("no active checkpoint"));
        }
        let job = s.submit(JobKind::Edit, serde_json::to_value(&request)?)?;
        Ok(accepted(&job))
    })
    .await
}

async fn submit_synthesis(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let request: SynthesizeRequest = parse_json(&body)?;
    blocking(state, move |s| {
        if s.db.recording(&request.reference_recording_id)?.is_none() {
            return Err(ServiceError::not_found(format!(
                "unknown reference recording {}",
                request.reference_recording_id
            )));
        }
        if s.active_model().is_none() {
            return Err(ServiceError::conflict("no active checkpoint"));
        }
        let job = s.submit(JobKind::Synthesize, serde_json::to_value(&request)?)?;
        Ok(accepted(&job))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct JobView {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub request: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<crate::store::JobError>,
    pub created_at_ms: i64,
    pub updated_at_ms: i64,
}

impl From<JobRow> for JobView {
    fn from(j: JobRow) -> Self {
        Self {
            id: j.id,
            kind: j.kind,
            state: j.state,
            request: j.request,
            checkpoint_id: j.checkpoint_id,
            result: j.result,
            error: j.error,
            created_at_ms: j.created_at_ms,
            updated_at_ms: j.updated_at_ms,
        }
    }
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    blocking(state, move |s| {
        let job = s.db.job(&id)?.ok_or_else(|| ServiceError::not_found(format!("unknown job {id}")))?;
        Ok(Json(JobView::from(job)))
    })
    .await
}

async fn job_audio(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(state, move |s| {
        let job = s.db.job(&id)?.ok_or_else(|| ServiceError::not_found(format!("unknown job {id}")))?;
        match (job.state, job.audio_blob) {
            (JobState::Done, Some(blob)) => Ok(wav_response(s.blobs.get(&blob)?)),
            (state, _) => Err(ServiceError::conflict(format!("job {id} is {}, no audio", state.as_str()))),
        }
    })
    .await
}

#[derive(Debug, Serialize)]
struct CheckpointView {
    id: String,
    step: u64,
    embedding_mode: String,
    ref_mode: String,
    sha256: String,
    uploaded_at_ms: i64,
    active: bool,
}

fn checkpoint_view(row: CheckpointRow, active: Option<&str>) -> CheckpointView {
    CheckpointView {
        active: active == Some(row.id.as_str()),
        id: row.id,
        step: row.step,
        embedding_mode: row.embedding_mode,
        ref_mode: row.ref_mode,
        sha256: row.blob,
        uploaded_at_ms: row.uploaded_at_ms,
    }
}

async fn upload_checkpoint(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    blocking(state, move |s| {
        let ck = read_checkpoint(&body).map_err(|e| ServiceError::unprocessable(e.to_string()))?;
        let sha = tbve_core::fsutil::sha256_hex(&body);
        let id = format!("ckpt-{}", &sha[..16]);
        let active = s.active_model().map(|m| m.id.clone());
        if let Some(row) = s.db.checkpoint(&id)? {
            return Ok((StatusCode::OK, Json(checkpoint_view(row, active.as_deref()))).into_response());
        }
        let row = CheckpointRow {
            id,
            blob: s.blobs.put(&body)?,
            step: ck.step,
            embedding_mode: ck.model.config.embedding_mode.as_str().into(),
            ref_mode: ck.model.config.ref_mode.as_str().into(),
            uploaded_at_ms: now_ms(),
        };
        s.db.insert_checkpoint(&row)?;
        Ok((StatusCode::CREATED, Json(checkpoint_view(row, active.as_deref()))).into_response())
    })
    .await
}

async fn list_checkpoints(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<CheckpointView>>> {
    blocking(state, move |s| {
        let active = s.active_model().map(|m| m.id.clone());
        Ok(Json(
            s.db.checkpoints()?
                .into_iter()
                .map(|r| checkpoint_view(r, active.as_deref()))
                .collect(),
        ))
    })
    .await
}

async fn activate_checkpoint(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    blocking(state, move |s| {
        s.activate(&id)?;
        Ok(Json(json!({ "active_checkpoint": id })))
    })
    .await
}
