//! Prepared corpus directories.
//!
//! `prepare_data` turns a manifest, a lexicon and the referenced WAV files
//! into a directory the trainer and editor read:
//!
//! ```text
//! <out>/lexicon.txt          copy of the lexicon
//! <out>/utterances.jsonl     one PreparedRecord per line, manifest order
//! <out>/features/<id>.tbvf   extracted vocoder features
//! <out>/embeddings.jsonl     utterance embedding cache
//! <out>/summary.json         counts, frame spec, provider, failures
//! ```
//!
//! Every record carries a hash of its inputs. A rerun over unchanged inputs
//! reuses the existing outputs and rewrites nothing.

pub mod toy;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::conditioning::{embed_utterance, speaker_embedding, Embedding, EmbeddingCache, EmbeddingMode, EmbeddingProvider};
use crate::editing::EditSource;
use crate::error::{Error, Result};
use crate::features::{extract_features, read_tbvf_file, write_tbvf, FrameSpec, VocoderFeatures};
use crate::frontend::{ingest_alignment, manifest_phones, read_manifest_file, Lexicon, ManifestRecord, PhoneSequence, WordAlignment};
use crate::fsutil::{sha256_hex, write_if_changed};
use crate::training::TrainingExample;

pub const UTTERANCES_FILE: &str = "utterances.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const FEATURES_DIR: &str = "features";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedRecord {
    pub id: String,
    pub speaker_id: String,
    pub text: String,
    /// Audio location as resolved at preparation time.
    pub audio_path: PathBuf,
    pub audio_sha256: String,
    pub input_hash: String,
    pub frames: usize,
    pub phones: PhoneSequence,
    pub alignment: WordAlignment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub utterances: usize,
    pub speakers: usize,
    pub total_frames: usize,
    pub spec: FrameSpec,
    pub provider: String,
    pub failures: Vec<RecordFailure>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareReport {
    pub summary: PrepareSummary,
    /// Records whose outputs were reused from an earlier run.
    pub reused: usize,
    /// Output files created or rewritten.
    pub files_written: usize,
}

/// Everything derived from one recording.
#[derive(Clone, Debug)]
pub struct PreparedUtterance {
    pub record: PreparedRecord,
    pub features: VocoderFeatures,
    pub embedding: Embedding,
}

pub fn input_hash(lexicon_text: &str, record: &ManifestRecord, audio: &[u8], spec: &FrameSpec, provider: &str) -> Result<String> {
    let mut buf = Vec::with_capacity(audio.len() + 1024);
    for part in [
        sha256_hex(lexicon_text.as_bytes()),
        serde_json::to_string(record)?,
        serde_json::to_string(spec)?,
        provider.to_string(),
        sha256_hex(audio),
    ] {
        buf.extend_from_slice(part.as_bytes());
        buf.push(0);
    }
    Ok(sha256_hex(&buf))
}

/// Ids become file names, so they are restricted to a portable alphabet.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("utterance id '{id}' must be 1-128 chars of [A-Za-z0-9_.-] not starting with '.'")))
    }
}

/// Extracts features, checks the alignment and embeds one recording.
pub fn prepare_utterance(
    record: &ManifestRecord,
    audio_bytes: &[u8],
    audio_path: PathBuf,
    lexicon: &Lexicon,
    spec: &FrameSpec,
    provider: &dyn EmbeddingProvider,
    input_hash: String,
) -> Result<PreparedUtterance> {
    validate_id(&record.id)?;
    let clip = AudioClip::from_wav_bytes(audio_bytes)?;
    if clip.sample_rate != spec.sample_rate {
        return Err(Error::invalid(format!(
            "sample rate {} Hz, expected {} Hz",
            clip.sample_rate, spec.sample_rate
        )));
    }
    let phones = manifest_phones(record, lexicon)?;
    let features = extract_features(&clip, spec)?;
    let alignment = ingest_alignment(record, &features, &phones)?;
    let embedding = embed_utterance(&features, provider)?;
    Ok(PreparedUtterance {
        record: PreparedRecord {
            id: record.id.clone(),
            speaker_id: record.speaker_id.clone(),
            text: record.text.clone(),
            audio_path,
            audio_sha256: sha256_hex(audio_bytes),
            input_hash,
            frames: features.frame_count(),
            phones,
            alignment,
        },
        features,
        embedding,
    })
}

fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{id}.tbvf"))
}

fn read_records(path: &Path) -> Result<Vec<PreparedRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    std::fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

enum Outcome {
    Reused(PreparedRecord, Embedding),
    Fresh(Box<PreparedUtterance>),
    Failed(RecordFailure),
}

/// Prepares every manifest record into `out_dir`. Per-record problems are
/// collected into the summary's failure list; only unreadable manifest or
/// lexicon files and output I/O errors abort the run.
pub fn prepare_data(
    manifest: &Path,
    lexicon_path: &Path,
    out_dir: &Path,
    spec: &FrameSpec,
    provider: &dyn EmbeddingProvider,
) -> Result<PrepareReport> {
    spec.validate()?;
    let lexicon_text = std::fs::read_to_string(lexicon_path)?;
    let lexicon = Lexicon::parse(&lexicon_text)?;
    let records = read_manifest_file(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let provider_name = provider.name();

    let previous: HashMap<String, PreparedRecord> = read_records(&out_dir.join(UTTERANCES_FILE))
        .unwrap_or_default()
        .into_iter()
        .map(|r| (r.id.clone(), r))
        .collect();
    let old_cache = EmbeddingCache::load(out_dir.join(EMBEDDINGS_FILE)).unwrap_or_default();

    let mut seen = BTreeSet::new();
    let duplicate: Vec<bool> = records.iter().map(|r| !seen.insert(r.id.clone())).collect();

    let work: Vec<(&ManifestRecord, bool)> = records.iter().zip(duplicate).collect();
    let outcomes = crate::exec::map(&work, |&(rec, dup)| {
        let fail = |e: Error| {
            Outcome::Failed(RecordFailure {
                id: rec.id.clone(),
                error: e.to_string(),
            })
        };
        if dup {
            return fail(Error::invalid("duplicate utterance id"));
        }
        let path = base.join(&rec.audio_path);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => return fail(Error::invalid(format!("cannot read {}: {e}", path.display()))),
        };
        let hash = match input_hash(&lexicon_text, rec, &bytes, spec, &provider_name) {
            Ok(h) => h,
            Err(e) => return fail(e),
        };
        if let (Some(old), Some(emb)) = (previous.get(&rec.id), old_cache.get(&rec.id)) {
            if old.input_hash == hash && feature_path(out_dir, &rec.id).exists() {
                return Outcome::Reused(old.clone(), emb.clone());
            }
        }
        match prepare_utterance(rec, &bytes, path, &lexicon, spec, provider, hash) {
            Ok(u) => Outcome::Fresh(Box::new(u)),
            Err(e) => fail(e),
        }
    });

    let mut prepared = Vec::new();
    let mut failures = Vec::new();
    let mut cache = EmbeddingCache::default();
    let mut reused = 0;
    let mut files_written = 0;
    for outcome in outcomes {
        match outcome {
            Outcome::Reused(rec, emb) => {
                reused += 1;
                cache.insert(rec.id.clone(), emb);
                prepared.push(rec);
            }
            Outcome::Fresh(u) => {
                let mut buf = Vec::new();
                write_tbvf(&u.features, &mut buf)?;
                files_written += usize::from(write_if_changed(&feature_path(out_dir, &u.record.id), &buf)?);
                cache.insert(u.record.id.clone(), u.embedding);
                prepared.push(u.record);
            }
            Outcome::Failed(f) => failures.push(f),
        }
    }

    let summary = PrepareSummary {
        utterances: prepared.len(),
        speakers: prepared.iter().map(|r| r.speaker_id.as_str()).collect::<BTreeSet<_>>().len(),
        total_frames: prepared.iter().map(|r| r.frames).sum(),
        spec: *spec,
        provider: provider_name,
        failures,
    };

    let mut lines = Vec::new();
    for r in &prepared {
        serde_json::to_writer(&mut lines, r)?;
        lines.push(b'\n');
    }
    files_written += usize::from(write_if_changed(&out_dir.join(UTTERANCES_FILE), &lines)?);
    files_written += usize::from(write_if_changed(&out_dir.join(LEXICON_FILE), lexicon_text.as_bytes())?);
    files_written += usize::from(write_if_changed(
        &out_dir.join(SUMMARY_FILE),
        &serde_json::to_vec_pretty(&summary)?,
    )?);
    let emb_path = out_dir.join(EMBEDDINGS_FILE);
    if cache != old_cache || !emb_path.exists() {
        cache.save(&emb_path)?;
        files_written += 1;
    }

    Ok(PrepareReport {
        summary,
        reused,
        files_written,
    })
}

/// A prepared corpus directory opened for reading.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub lexicon: Lexicon,
    pub summary: PrepareSummary,
    pub records: Vec<PreparedRecord>,
    pub embeddings: EmbeddingCache,
}

impl Corpus {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let summary_path = dir.join(SUMMARY_FILE);
        if !summary_path.exists() {
            return Err(Error::invalid(format!("{} is not a prepared data directory", dir.display())));
        }
        let summary: PrepareSummary = serde_json::from_slice(&std::fs::read(&summary_path)?)?;
        Ok(Self {
            lexicon: Lexicon::from_file(dir.join(LEXICON_FILE))?,
            records: read_records(&dir.join(UTTERANCES_FILE))?,
            embeddings: EmbeddingCache::load(dir.join(EMBEDDINGS_FILE))?,
            summary,
            dir,
        })
    }

    pub fn spec(&self) -> FrameSpec {
        self.summary.spec
    }

    pub fn record(&self, id: &str) -> Result<&PreparedRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::invalid(format!("unknown utterance '{id}'")))
    }

    pub fn features(&self, id: &str) -> Result<VocoderFeatures> {
        let rec = self.record(id)?;
        let f = read_tbvf_file(feature_path(&self.dir, &rec.id))?;
        if f.frame_count() != rec.frames {
            return Err(Error::AlignmentMismatch {
                sum: rec.frames,
                frames: f.frame_count(),
            });
        }
        Ok(f)
    }

    pub fn utterance_embedding(&self, id: &str) -> Result<&Embedding> {
        self.embeddings
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no cached embedding for '{id}'")))
    }

    /// Mean utterance embedding of every speaker.
    pub fn speaker_embeddings(&self) -> Result<BTreeMap<String, Embedding>> {
        let mut by_speaker: BTreeMap<String, Vec<Embedding>> = BTreeMap::new();
        for r in &self.records {
            by_speaker
                .entry(r.speaker_id.clone())
                .or_default()
                .push(self.utterance_embedding(&r.id)?.clone());
        }
        by_speaker
            .into_iter()
            .map(|(s, e)| Ok((s, speaker_embedding(&e)?)))
            .collect()
    }

    /// Training examples for `ids` (all records when `None`), carrying the
    /// embedding `mode` calls for.
    pub fn training_examples(&self, mode: EmbeddingMode, ids: Option<&[String]>) -> Result<Vec<TrainingExample>> {
        let speakers = match mode {
            EmbeddingMode::Speaker => self.speaker_embeddings()?,
            _ => BTreeMap::new(),
        };
        let chosen: Vec<&PreparedRecord> = match ids {
            Some(ids) => ids.iter().map(|id| self.record(id)).collect::<Result<_>>()?,
            None => self.records.iter().collect(),
        };
        chosen
            .into_iter()
            .map(|r| {
                let embedding = match mode {
                    EmbeddingMode::None => None,
                    EmbeddingMode::Utterance => Some(self.utterance_embedding(&r.id)?.clone()),
                    EmbeddingMode::Speaker => Some(speakers[&r.speaker_id].clone()),
                };
                Ok(TrainingExample {
                    id: r.id.clone(),
                    phones: r.phones.phones.clone(),
                    durations: r.alignment.phone_durations.clone(),
                    features: self.features(&r.id)?,
                    embedding,
                })
            })
            .collect()
    }

    /// Loads a recording for editing. The raw waveform is attached when the
    /// original audio file is still readable.
    pub fn edit_source(&self, id: &str) -> Result<EditSource> {
        let rec = self.record(id)?;
        let speaker = self.speaker_embeddings()?.remove(&rec.speaker_id);
        let raw_audio = std::fs::read(&rec.audio_path)
            .ok()
            .filter(|b| sha256_hex(b) == rec.audio_sha256)
            .map(|b| AudioClip::from_wav_bytes(&b))
            .transpose()?;
        Ok(EditSource {
            id: rec.id.clone(),
            features: self.features(id)?,
            phones: rec.phones.clone(),
            alignment: rec.alignment.clone(),
            raw_audio,
            speaker_embedding: speaker,
        })
    }
}
