//! Utterance-level conditioning: speaker-verification style embeddings from
//! a pluggable provider, and learned reference encodings.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{write_tbvf, VocoderFeatures, MFCC_DIM};
use crate::nn::layers::{conv_out_len, BatchNorm, Conv1d, Gru, Linear, Segment};
use crate::nn::{Graph, Matrix, ParamStore, Var};

pub const EMBED_DIM: usize = 32;
pub const REF_CONV_CHANNELS: usize = 128;
pub const REF_GRU_HIDDEN: usize = 64;
pub const REF_CONV_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    #[default]
    None,
    Speaker,
    Utterance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefMode {
    #[default]
    None,
    Standard,
    Variational,
}

impl EmbeddingMode {
    pub const ALL: [EmbeddingMode; 3] = [EmbeddingMode::None, EmbeddingMode::Speaker, EmbeddingMode::Utterance];

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingMode::None => "none",
            EmbeddingMode::Speaker => "speaker",
            EmbeddingMode::Utterance => "utterance",
        }
    }
}

impl RefMode {
    pub const ALL: [RefMode; 3] = [RefMode::None, RefMode::Standard, RefMode::Variational];

    pub fn as_str(self) -> &'static str {
        match self {
            RefMode::None => "none",
            RefMode::Standard => "standard",
            RefMode::Variational => "variational",
        }
    }
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown embedding mode '{s}' (none|speaker|utterance)")))
    }
}

impl std::str::FromStr for RefMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown reference mode '{s}' (none|standard|variational)")))
    }
}

/// A 32-dim utterance or speaker embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

pub type UtteranceEmbedding = Embedding;
pub type SpeakerEmbedding = Embedding;

impl Embedding {
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if vector.len() != EMBED_DIM {
            return Err(Error::Shape(format!("embedding has {} dims, expected {EMBED_DIM}", vector.len())));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(Self(vector))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EMBED_DIM])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Source of utterance embeddings (a pretrained speaker-verification model
/// in production, [`FallbackProvider`] otherwise).
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, features: &VocoderFeatures) -> Result<UtteranceEmbedding>;

    /// Identifier stored next to cached embeddings.
    fn name(&self) -> String;
}

pub fn embed_utterance(features: &VocoderFeatures, provider: &dyn EmbeddingProvider) -> Result<UtteranceEmbedding> {
    if features.frame_count() == 0 {
        return Err(Error::EmptyFrames);
    }
    provider.embed(features)
}

/// Mean per dimension. Each dimension is summed in sorted order so the
/// result does not depend on input order.
pub fn speaker_embedding(utts: &[UtteranceEmbedding]) -> Result<SpeakerEmbedding> {
    if utts.is_empty() {
        return Err(Error::invalid("speaker embedding needs at least one utterance"));
    }
    let n = utts.len() as f64;
    let mean = (0..EMBED_DIM)
        .map(|d| {
            let mut col: Vec<f64> = utts.iter().map(|u| u.0[d] as f64).collect();
            col.sort_by(f64::total_cmp);
            (col.iter().sum::<f64>() / n) as f32
        })
        .collect();
    Embedding::new(mean)
}

pub const FALLBACK_STATS: usize = 2 * MFCC_DIM + 2;
pub const FALLBACK_SEED: u64 = 0x5eed_e3b0;

/// Fixed centre and scale of each summary statistic, so that typical
/// speech maps to unit-order coordinates before projection.
fn stat_scale(i: usize) -> (f64, f64) {
    match i {
        0 => (120.0, 30.0),
        1..=12 => (0.0, 5.0),
        13 => (0.0, 10.0),
        14..=25 => (0.0, 2.0),
        26 => (5.0, 0.3),
        _ => (0.5, 0.25),
    }
}

/// Summary statistics: MFCC means, MFCC standard deviations, mean
/// `ln(1 + f0)` over voiced frames (0 when none are voiced) and mean
/// periodicity.
pub fn utterance_stats(features: &VocoderFeatures) -> [f64; FALLBACK_STATS] {
    let frames = features.frame_count().max(1) as f64;
    let mut out = [0.0; FALLBACK_STATS];
    for t in 0..features.frame_count() {
        for (d, &c) in features.mfcc(t).iter().enumerate() {
            out[d] += c as f64 / frames;
        }
    }
    for t in 0..features.frame_count() {
        for (d, &c) in features.mfcc(t).iter().enumerate() {
            out[MFCC_DIM + d] += (c as f64 - out[d]).powi(2) / frames;
        }
    }
    for d in 0..MFCC_DIM {
        out[MFCC_DIM + d] = out[MFCC_DIM + d].sqrt();
    }
    let voiced: Vec<f64> = features
        .f0_track()
        .into_iter()
        .filter(|&f| f > 0.0)
        .map(|f| (f as f64).ln_1p())
        .collect();
    if !voiced.is_empty() {
        out[2 * MFCC_DIM] = voiced.iter().sum::<f64>() / voiced.len() as f64;
    }
    let per: f64 = (0..features.frame_count())
        .map(|t| features.periodicity(t).iter().map(|&p| p as f64).sum::<f64>())
        .sum();
    out[2 * MFCC_DIM + 1] = per / (frames * 5.0);
    out
}

/// Deterministic stand-in for a speaker-verification model: normalised
/// summary statistics mapped through a seeded random isometry
/// (`R^28 → R^32` with orthonormal columns).
#[derive(Clone, Debug)]
pub struct FallbackProvider {
    seed: u64,
    projection: Vec<[f64; FALLBACK_STATS]>,
}

impl FallbackProvider {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(FALLBACK_STATS);
        while cols.len() < FALLBACK_STATS {
            let mut v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let projection = (0..EMBED_DIM)
            .map(|r| std::array::from_fn(|c| cols[c][r]))
            .collect();
        Self { seed, projection }
    }
}

impl Default for FallbackProvider {
    fn default() -> Self {
        Self::new(FALLBACK_SEED)
    }
}

impl EmbeddingProvider for FallbackProvider {
    fn embed(&self, features: &VocoderFeatures) -> Result<UtteranceEmbedding> {
        let stats = utterance_stats(features);
        let z: Vec<f64> = stats
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (c, k) = stat_scale(i);
                (s - c) / k
            })
            .collect();
        let v = self
            .projection
            .iter()
            .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() as f32)
            .collect();
        Embedding::new(v).map_err(|e| Error::Provider(e.to_string()))
    }

    fn name(&self) -> String {
        format!("fallback-{:x}", self.seed)
    }
}

/// Runs an external program with the path of a TBVF feature file as its
/// last argument; the program must print exactly 32 little-endian f32
/// values (128 bytes) on stdout and exit successfully.
#[derive(Clone, Debug)]
pub struct SubprocessProvider {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl SubprocessProvider {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

impl EmbeddingProvider for SubprocessProvider {
    fn embed(&self, features: &VocoderFeatures) -> Result<UtteranceEmbedding> {
        let provider_err = |msg: String| Error::Provider(format!("{}: {msg}", self.program.display()));
        let mut file = tempfile::Builder::new()
            .suffix(".tbvf")
            .tempfile()
            .map_err(|e| provider_err(e.to_string()))?;
        write_tbvf(features, &mut file)?;
        file.flush()?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .stdin(Stdio::null())
            .output()
            .map_err(|e| provider_err(e.to_string()))?;
        if !out.status.success() {
            return Err(provider_err(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        if out.stdout.len() != EMBED_DIM * 4 {
            return Err(provider_err(format!(
                "wrote {} bytes, expected {}",
                out.stdout.len(),
                EMBED_DIM * 4
            )));
        }
        let v = out
            .stdout
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Embedding::new(v).map_err(|e| provider_err(e.to_string()))
    }

    fn name(&self) -> String {
        format!("subprocess:{}", self.program.display())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheLine {
    utterance_id: String,
    vector: Embedding,
}

/// Utterance embeddings keyed by utterance id, persisted as JSONL.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache {
    entries: BTreeMap<String, Embedding>,
}

impl EmbeddingCache {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(Self::default());
        }
        let mut entries = BTreeMap::new();
        for (n, line) in std::fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: CacheLine = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.insert(l.utterance_id, l.vector);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        for (id, v) in &self.entries {
            serde_json::to_writer(
                &mut buf,
                &CacheLine {
                    utterance_id: id.clone(),
                    vector: v.clone(),
                },
            )?;
            buf.push(b'\n');
        }
        crate::fsutil::write_atomic(path.as_ref(), &buf)
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.entries.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, e: Embedding) {
        self.entries.insert(id.into(), e);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Embedding)> {
        self.entries.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEncoding {
    pub vector: Vec<f32>,
    pub kl_term: f64,
}

/// Conditioning selected for one synthesis call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditioningBundle {
    pub embedding_mode: EmbeddingMode,
    pub ref_mode: RefMode,
    pub embedding: Option<Embedding>,
    pub reference: Option<ReferenceEncoding>,
}

impl ConditioningBundle {
    pub fn validate(&self) -> Result<()> {
        if (self.embedding_mode == EmbeddingMode::None) != self.embedding.is_none() {
            return Err(Error::invalid("embedding must be present exactly when embedding_mode is not none"));
        }
        if (self.ref_mode == RefMode::None) != self.reference.is_none() {
            return Err(Error::invalid("reference encoding must be present exactly when ref_mode is not none"));
        }
        if let Some(r) = &self.reference {
            if r.vector.len() != EMBED_DIM || r.kl_term < 0.0 {
                return Err(Error::invalid("reference encoding must be 32-dim with a non-negative KL term"));
            }
        }
        Ok(())
    }
}

/// `Σ ½(μ² + σ² − ln σ² − 1)` for diagonal Gaussians against `N(0, I)`.
pub fn kl_closed_form(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - (s * s).ln() - 1.0))
        .sum()
}

/// Per-row KL of `N(μ, exp(logvar))` against `N(0, I)`, averaged over rows.
pub fn kl_term(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let rows = g.value(mu).rows().max(1) as f64;
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var);
    let b = g.sub(a, logvar);
    let b = g.add_scalar(b, -1.0);
    let s = g.sum_all(b);
    g.scale(s, 0.5 / rows)
}

/// Conv stack (k3/s2/p1, batch norm, ReLU) followed by a bidirectional GRU
/// whose final states are projected to 32 dims. In variational mode two
/// heads give a mean and log-variance and the output is a reparameterised
/// sample (the mean at eval).
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    pub mode: RefMode,
    convs: Vec<(Conv1d, BatchNorm)>,
    gru_fwd: Gru,
    gru_bwd: Gru,
    proj: Linear,
    logvar: Option<Linear>,
}

pub struct RefOutput {
    /// `B × 32` encodings.
    pub encoding: Var,
    /// Scalar mean KL (zero constant in standard mode).
    pub kl: Var,
    pub mean: Option<Var>,
    pub logvar: Option<Var>,
    /// Sequence lengths after each conv layer, per input segment.
    pub conv_lengths: Vec<[usize; REF_CONV_LAYERS]>,
}

impl ReferenceEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, mode: RefMode, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if mode == RefMode::None {
            return Err(Error::invalid("reference encoder needs a standard or variational mode"));
        }
        let mut convs = Vec::new();
        let mut ch = input_dim;
        for i in 0..REF_CONV_LAYERS {
            let name = format!("{prefix}.conv{i}");
            convs.push((
                Conv1d::new(store, &name, ch, REF_CONV_CHANNELS, 3, 2, 1, rng),
                BatchNorm::new(store, &format!("{prefix}.bn{i}"), REF_CONV_CHANNELS),
            ));
            ch = REF_CONV_CHANNELS;
        }
        let gru_fwd = Gru::new(store, &format!("{prefix}.gru_fwd"), ch, REF_GRU_HIDDEN, rng);
        let gru_bwd = Gru::new(store, &format!("{prefix}.gru_bwd"), ch, REF_GRU_HIDDEN, rng);
        let summary = 2 * REF_GRU_HIDDEN;
        let (proj, logvar) = match mode {
            RefMode::Standard => (Linear::new(store, &format!("{prefix}.proj"), summary, EMBED_DIM, rng), None),
            _ => (
                Linear::new(store, &format!("{prefix}.mean"), summary, EMBED_DIM, rng),
                Some(Linear::new(store, &format!("{prefix}.logvar"), summary, EMBED_DIM, rng)),
            ),
        };
        Ok(Self {
            mode,
            convs,
            gru_fwd,
            gru_bwd,
            proj,
            logvar,
        })
    }

    pub fn internal_lengths(frames: usize) -> [usize; REF_CONV_LAYERS] {
        let mut len = frames;
        std::array::from_fn(|_| {
            len = conv_out_len(len, 3, 2, 1);
            len
        })
    }

    pub fn logvar_head(&self) -> Option<&Linear> {
        self.logvar.as_ref()
    }

    pub fn mean_head(&self) -> &Linear {
        &self.proj
    }

    /// Encodes every segment of the stacked `rows × input_dim` matrix `x`.
    /// Batch norm statistics in training span all segments.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[Segment]) -> RefOutput {
        let mut h = x;
        let mut segs = segments.to_vec();
        let mut lengths = vec![[0usize; REF_CONV_LAYERS]; segments.len()];
        for (layer, (conv, bn)) in self.convs.iter().enumerate() {
            let (y, out_segs) = conv.forward_segments(g, store, h, &segs);
            let y = bn.forward(g, store, y);
            h = g.relu(y);
            for (l, s) in lengths.iter_mut().zip(&out_segs) {
                l[layer] = s.len;
            }
            segs = out_segs;
        }
        let summaries: Vec<Var> = segs
            .iter()
            .map(|s| {
                let seq = g.slice_rows(h, s.start, s.start + s.len);
                let f = self.gru_fwd.final_state(g, store, seq, false);
                let b = self.gru_bwd.final_state(g, store, seq, true);
                g.concat_cols(&[f, b])
            })
            .collect();
        let summary = g.concat_rows(&summaries);
        let mean = self.proj.forward(g, store, summary);
        match &self.logvar {
            None => {
                let kl = g.constant(Matrix::zeros(1, 1));
                RefOutput {
                    encoding: mean,
                    kl,
                    mean: None,
                    logvar: None,
                    conv_lengths: lengths,
                }
            }
            Some(head) => {
                let logvar = head.forward(g, store, summary);
                let kl = kl_term(g, mean, logvar);
                let (rows, cols) = g.value(mean).shape();
                let encoding = match g.rng() {
                    Some(rng) => {
                        let eps = Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect());
                        let eps = g.constant(eps);
                        let half = g.scale(logvar, 0.5);
                        let sigma = g.exp(half);
                        let noise = g.mul(sigma, eps);
                        g.add(mean, noise)
                    }
                    None => mean,
                };
                RefOutput {
                    encoding,
                    kl,
                    mean: Some(mean),
                    logvar: Some(logvar),
                    conv_lengths: lengths,
                }
            }
        }
    }

    /// Single-utterance encoding of model-space features (`T × input_dim`).
    /// `rng` selects training behaviour (batch statistics, sampling).
    pub fn encode(&self, store: &ParamStore, features: &Matrix, rng: Option<ChaCha8Rng>) -> Result<ReferenceEncoding> {
        if features.rows() == 0 {
            return Err(Error::EmptyFrames);
        }
        let mut g = match rng {
            Some(r) => Graph::train(r),
            None => Graph::eval(),
        };
        let x = g.constant(features.clone());
        let out = self.forward(
            &mut g,
            store,
            x,
            &[Segment {
                start: 0,
                len: features.rows(),
            }],
        );
        Ok(ReferenceEncoding {
            vector: g.value(out.encoding).data().iter().map(|&v| v as f32).collect(),
            kl_term: g.value(out.kl).get(0, 0).max(0.0),
        })
    }
}
