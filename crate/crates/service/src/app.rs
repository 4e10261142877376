//! Service state, checkpoint registry and the job worker pool.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tbve_core::audio::AudioClip;
use tbve_core::conditioning::{speaker_embedding, FallbackProvider};
use tbve_core::editing::{edit, synthesize_text, EditContext, EditRequest, EditSource};
use tbve_core::features::{read_tbvf, FrameSpec};
use tbve_core::frontend::Lexicon;
use tbve_core::model::AcousticModel;
use tbve_core::training::read_checkpoint;
use tokio::sync::Notify;
use tokio::task::JoinHandle;

use crate::error::ServiceError;
use crate::store::{BlobStore, Db, JobError, JobKind, JobRow, JobState, StoreResult};

pub const ACTIVE_CHECKPOINT_KEY: &str = "active_checkpoint";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    pub workers: usize,
    /// Lexicon file; `<data_dir>/lexicon.txt` when unset.
    pub lexicon: Option<PathBuf>,
}

impl ServiceConfig {
    /// Reads `TBVE_DATA_DIR`, `TBVE_PORT`, `TBVE_WORKERS` and `TBVE_LEXICON`.
    pub fn from_env() -> Result<Self, String> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let parse = |k: &str, default: usize| -> Result<usize, String> {
            var(k).map_or(Ok(default), |v| v.parse().map_err(|_| format!("{k} must be a number, got '{v}'")))
        };
        Ok(Self {
            data_dir: var("TBVE_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("tbve-data")),
            port: u16::try_from(parse("TBVE_PORT", 8080)?).map_err(|_| "TBVE_PORT out of range".to_string())?,
            workers: parse("TBVE_WORKERS", 1)?,
            lexicon: var("TBVE_LEXICON").map(PathBuf::from),
        })
    }

    pub fn lexicon_path(&self) -> PathBuf {
        self.lexicon.clone().unwrap_or_else(|| self.data_dir.join("lexicon.txt"))
    }
}

/// The model jobs run on. Jobs take an `Arc` when they start, so activation
/// never affects a job already running.
pub struct LoadedModel {
    pub id: String,
    pub model: AcousticModel,
}

#[derive(Default)]
struct Queue {
    items: Mutex<VecDeque<String>>,
    closed: std::sync::atomic::AtomicBool,
    notify: Notify,
}

pub struct AppState {
    pub config: ServiceConfig,
    pub db: Db,
    pub blobs: BlobStore,
    pub lexicon: Lexicon,
    pub lexicon_text: String,
    pub spec: FrameSpec,
    pub provider: FallbackProvider,
    active: RwLock<Option<Arc<LoadedModel>>>,
    queue: Queue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeRequest {
    pub text: String,
    pub reference_recording_id: String,
    #[serde(default)]
    pub seed: u64,
}

impl AppState {
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let lexicon_path = config.lexicon_path();
        let lexicon_text = std::fs::read_to_string(&lexicon_path)
            .map_err(|e| ServiceError::internal(format!("cannot read lexicon {}: {e}", lexicon_path.display())))?;
        let lexicon = Lexicon::parse(&lexicon_text).map_err(ServiceError::from_input)?;
        let db = Db::open(&config.data_dir.join("meta.sqlite"))?;
        let state = Arc::new(Self {
            blobs: BlobStore::new(config.data_dir.join("blobs")),
            db,
            lexicon,
            lexicon_text,
            spec: FrameSpec::default(),
            provider: FallbackProvider::default(),
            active: RwLock::new(None),
            queue: Queue::default(),
            config,
        });
        if let Some(id) = state.db.setting(ACTIVE_CHECKPOINT_KEY)? {
            let loaded = state.load_checkpoint(&id)?;
            *state.active.write().expect("model lock") = Some(Arc::new(loaded));
        }
        // Jobs cut off by a previous shutdown: running ones cannot resume.
        for id in state.db.jobs_in_state(JobState::Running)? {
            state.db.fail_job(
                &id,
                JobState::Running,
                &JobError {
                    stage: "interrupted".into(),
                    message: "service stopped while the job was running".into(),
                },
            )?;
        }
        for id in state.db.jobs_in_state(JobState::Queued)? {
            state.enqueue(id);
        }
        Ok(state)
    }

    pub fn active_model(&self) -> Option<Arc<LoadedModel>> {
        self.active.read().expect("model lock").clone()
    }

    pub fn load_checkpoint(&self, id: &str) -> Result<LoadedModel, ServiceError> {
        let row = self
            .db
            .checkpoint(id)?
            .ok_or_else(|| ServiceError::not_found(format!("unknown checkpoint {id}")))?;
        let bytes = self.blobs.get(&row.blob)?;
        let ck = read_checkpoint(&bytes).map_err(ServiceError::from_input)?;
        if ck.model.inventory != self.lexicon.inventory() {
            return Err(ServiceError::unprocessable(
                "checkpoint phone inventory does not match the service lexicon",
            ));
        }
        Ok(LoadedModel {
            id: id.to_string(),
            model: ck.model,
        })
    }

    pub fn activate(&self, id: &str) -> Result<(), ServiceError> {
        let loaded = Arc::new(self.load_checkpoint(id)?);
        let mut slot = self.active.write().expect("model lock");
        self.db.set_setting(ACTIVE_CHECKPOINT_KEY, id)?;
        *slot = Some(loaded);
        Ok(())
    }

    pub fn enqueue(&self, job_id: String) {
        self.queue.items.lock().expect("queue lock").push_back(job_id);
        self.queue.notify.notify_one();
    }

    pub fn submit(&self, kind: JobKind, request: serde_json::Value) -> StoreResult<JobRow> {
        let row = self.db.insert_job(kind, &request)?;
        self.enqueue(row.id.clone());
        Ok(row)
    }

    async fn next_job(&self) -> Option<String> {
        loop {
            let notified = self.queue.notify.notified();
            if let Some(id) = self.queue.items.lock().expect("queue lock").pop_front() {
                return Some(id);
            }
            if self.queue.closed.load(std::sync::atomic::Ordering::SeqCst) {
                return None;
            }
            notified.await;
        }
    }

    pub fn edit_source(&self, recording_id: &str) -> Result<EditSource, ServiceError> {
        let rec = self
            .db
            .recording(recording_id)?
            .ok_or_else(|| ServiceError::not_found(format!("unknown recording {recording_id}")))?;
        let features = read_tbvf(self.blobs.get(&rec.feature_blob)?.as_slice())?;
        let raw_audio = AudioClip::from_wav_bytes(&self.blobs.get(&rec.audio_blob)?)?;
        let speaker = speaker_embedding(&self.db.speaker_embeddings(&rec.speaker_id)?)?;
        Ok(EditSource {
            id: rec.id,
            features,
            phones: rec.record.phones,
            alignment: rec.record.alignment,
            raw_audio: Some(raw_audio),
            speaker_embedding: Some(speaker),
        })
    }

    fn context(&self) -> EditContext<'_> {
        EditContext {
            lexicon: &self.lexicon,
            provider: &self.provider,
            vocoder: None,
            spec: self.spec,
            attach_metrics: true,
        }
    }

    /// Runs one job to completion. Failures are recorded on the job with
    /// the pipeline stage that raised them.
    pub fn run_job(&self, id: &str) -> StoreResult<()> {
        let Some(job) = self.db.job(id)? else { return Ok(()) };
        if job.state != JobState::Queued {
            return Ok(());
        }
        let Some(loaded) = self.active_model() else {
            return self.db.fail_job(
                id,
                JobState::Queued,
                &JobError {
                    stage: "checkpoint".into(),
                    message: "no active checkpoint".into(),
                },
            );
        };
        self.db.start_job(id, &loaded.id)?;
        match self.execute(&job, &loaded) {
            Ok((result, wav)) => {
                let blob = self.blobs.put(&wav)?;
                self.db.finish_job(id, &result, &blob)
            }
            Err(err) => self.db.fail_job(id, JobState::Running, &err),
        }
    }

    fn execute(&self, job: &JobRow, loaded: &LoadedModel) -> Result<(serde_json::Value, Vec<u8>), JobError> {
        let input_error = |e: serde_json::Error| JobError {
            stage: "request".into(),
            message: e.to_string(),
        };
        let lookup_error = |e: ServiceError| JobError {
            stage: "load".into(),
            message: e.message,
        };
        let core_error = |e: tbve_core::Error| JobError {
            stage: e.stage().unwrap_or("internal").to_string(),
            message: e.root().to_string(),
        };
        let wav_error = |e: tbve_core::Error| JobError {
            stage: "encode".into(),
            message: e.to_string(),
        };
        match job.kind {
            JobKind::Edit => {
                let req: EditRequest = serde_json::from_value(job.request.clone()).map_err(input_error)?;
                let source = self.edit_source(&req.utterance_id).map_err(lookup_error)?;
                let result = edit(&req, &loaded.model, &source, &self.context()).map_err(core_error)?;
                let body = serde_json::json!({
                    "checkpoint_id": loaded.id,
                    "boundaries_samples": [result.boundaries_samples.0, result.boundaries_samples.1],
                    "region_frames": [result.region_frames.start, result.region_frames.end],
                    "original_frames": [result.original_frames.start, result.original_frames.end],
                    "durations": result.durations,
                    "fade_samples": result.fade_samples,
                    "metrics": result.metrics,
                });
                Ok((body, result.audio.to_wav_bytes().map_err(wav_error)?))
            }
            JobKind::Synthesize => {
                let req: SynthesizeRequest = serde_json::from_value(job.request.clone()).map_err(input_error)?;
                let source = self.edit_source(&req.reference_recording_id).map_err(lookup_error)?;
                let result = synthesize_text(&req.text, &loaded.model, &source, &self.context(), req.seed).map_err(core_error)?;
                let body = serde_json::json!({
                    "checkpoint_id": loaded.id,
                    "words": result.phones.words,
                    "durations": result.durations,
                    "samples": result.audio.len(),
                });
                Ok((body, result.audio.to_wav_bytes().map_err(wav_error)?))
            }
        }
    }
}

/// Bounded worker pool pulling job ids from the shared queue.
pub struct Workers {
    handles: Vec<JoinHandle<()>>,
    state: Arc<AppState>,
}

impl Workers {
    pub fn spawn(state: Arc<AppState>, count: usize) -> Self {
        let handles = (0..count.max(1))
            .map(|_| {
                let state = state.clone();
                tokio::spawn(async move {
                    while let Some(id) = state.next_job().await {
                        let st = state.clone();
                        let job = id.clone();
                        let outcome = tokio::task::spawn_blocking(move || st.run_job(&job)).await;
                        match outcome {
                            Ok(Ok(())) => {}
                            Ok(Err(e)) => tracing::error!(job = %id, "job bookkeeping failed: {e}"),
                            Err(e) => {
                                tracing::error!(job = %id, "job panicked: {e}");
                                let _ = state.db.fail_job(
                                    &id,
                                    JobState::Running,
                                    &JobError {
                                        stage: "internal".into(),
                                        message: "worker panicked".into(),
                                    },
                                );
                            }
                        }
                    }
                })
            })
            .collect();
        Self { handles, state }
    }

    /// Stops taking new work once the queue is empty and waits for every
    /// queued and running job to finish.
    pub async fn drain(self) {
        self.state.queue.closed.store(true, std::sync::atomic::Ordering::SeqCst);
        self.state.queue.notify.notify_waiters();
        for h in self.handles {
            let _ = h.await;
        }
    }
}
