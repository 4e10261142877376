//! Acoustic model: phone encoder, variance adaptor, length regulator and the
//! coarse/fine decoder pair.
//!
//! Decoder input layout per frame, in column order:
//!
//! | block                     | width        | present when                 |
//! |---------------------------|--------------|------------------------------|
//! | upsampled phone encoding  | `hidden`     | always                       |
//! | upsampled f0              | 1            | always                       |
//! | utterance/speaker embed.  | 32           | `embedding_mode != none`     |
//! | reference encoding        | 32           | `ref_mode != none`           |
//! | masked acoustic context   | 19           | always                       |
//! | mask token                | 32           | `mask_token_on_decoder`      |
//!
//! Features enter the network in "model space": `[ln(1 + f0), mfcc,
//! periodicity]` standardised per dimension with corpus statistics
//! ([`FeatureNorm`]). Masked context frames are zero in model space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{EmbeddingMode, RefMode, ReferenceEncoder, RefOutput, EMBED_DIM};
use crate::error::{Error, Result};
use crate::features::F0_MIN_HZ;
use crate::features::{VocoderFeatures, FEATURE_DIM, PERIODICITY_COLS};
use crate::nn::layers::{positional_encoding, Conv1d, FftBlock, LayerNorm, Linear, Segment};
use crate::nn::{Graph, Matrix, ParamId, ParamStore, Var};

pub const MASK_TOKEN_DIM: usize = 32;
/// Upper bound on a predicted phone duration, in frames.
pub const MAX_PHONE_FRAMES: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub ffn_kernel: usize,
    pub encoder_blocks: usize,
    pub coarse_blocks: usize,
    pub fine_blocks: usize,
    pub variance_kernel: usize,
    pub dropout: f64,
    pub mask_token_dim: usize,
    pub feature_dim: usize,
    pub embedding_mode: EmbeddingMode,
    pub ref_mode: RefMode,
    pub mask_token_on_encoder: bool,
    pub mask_token_on_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            heads: 2,
            ffn_dim: 1024,
            ffn_kernel: 3,
            encoder_blocks: 4,
            coarse_blocks: 4,
            fine_blocks: 4,
            variance_kernel: 3,
            dropout: 0.1,
            mask_token_dim: MASK_TOKEN_DIM,
            feature_dim: FEATURE_DIM,
            embedding_mode: EmbeddingMode::None,
            ref_mode: RefMode::None,
            mask_token_on_encoder: true,
            mask_token_on_decoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.encoder_blocks == 0 || self.coarse_blocks == 0 || self.fine_blocks == 0 {
            return fail("every stack needs at least one block");
        }
        if self.mask_token_dim != MASK_TOKEN_DIM {
            return fail("mask_token_dim must be 32");
        }
        if self.feature_dim != FEATURE_DIM {
            return fail("feature_dim must be 19");
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail("hidden must be a positive multiple of heads");
        }
        if self.ffn_dim == 0 || self.ffn_kernel % 2 == 0 || self.variance_kernel % 2 == 0 {
            return fail("ffn_dim must be positive and kernels odd");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn decoder_input_width(&self) -> usize {
        self.hidden
            + 1
            + if self.embedding_mode != EmbeddingMode::None { EMBED_DIM } else { 0 }
            + if self.ref_mode != RefMode::None { EMBED_DIM } else { 0 }
            + FEATURE_DIM
            + if self.mask_token_on_decoder { MASK_TOKEN_DIM } else { 0 }
    }
}

/// Per-dimension affine map between vocoder features and model space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for FeatureNorm {
    fn default() -> Self {
        Self {
            mean: vec![0.0; FEATURE_DIM],
            std: vec![1.0; FEATURE_DIM],
        }
    }
}

fn raw_row(frame: &[f32]) -> [f64; FEATURE_DIM] {
    std::array::from_fn(|d| if d == 0 { (frame[0] as f64).ln_1p() } else { frame[d] as f64 })
}

impl FeatureNorm {
    /// Mean and standard deviation of every model-space dimension over all
    /// frames; near-constant dimensions keep unit scale.
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a VocoderFeatures>) -> Self {
        let mut n = 0.0;
        let mut sum = [0.0f64; FEATURE_DIM];
        let mut sq = [0.0f64; FEATURE_DIM];
        for f in corpus {
            for t in 0..f.frame_count() {
                let r = raw_row(f.frame(t));
                for d in 0..FEATURE_DIM {
                    sum[d] += r[d];
                    sq[d] += r[d] * r[d];
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = (0..FEATURE_DIM)
            .map(|d| {
                let var = (sq[d] / n - mean[d] * mean[d]).max(0.0);
                let s = var.sqrt();
                if s < 1e-3 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn to_model(&self, features: &VocoderFeatures) -> Matrix {
        let t = features.frame_count();
        let mut data = Vec::with_capacity(t * FEATURE_DIM);
        for i in 0..t {
            let r = raw_row(features.frame(i));
            data.extend((0..FEATURE_DIM).map(|d| (r[d] - self.mean[d]) / self.std[d]));
        }
        Matrix::from_vec(t, FEATURE_DIM, data)
    }

    /// Model-space log-f0 value for `log1p_f0`.
    pub fn f0_to_model(&self, log1p_f0: f64) -> f64 {
        (log1p_f0 - self.mean[0]) / self.std[0]
    }

    /// Inverse map. f0 below the analysis floor becomes unvoiced and
    /// periodicity is clamped to `[0, 1]`.
    pub fn from_model(&self, m: &Matrix) -> VocoderFeatures {
        let mut f = VocoderFeatures::zeros(m.rows());
        for t in 0..m.rows() {
            let fr = f.frame_mut(t);
            for d in 0..FEATURE_DIM {
                let v = m.get(t, d) * self.std[d] + self.mean[d];
                fr[d] = if d == 0 {
                    let hz = v.exp_m1();
                    if hz.is_finite() && hz >= F0_MIN_HZ {
                        hz.min(1000.0) as f32
                    } else {
                        0.0
                    }
                } else if PERIODICITY_COLS.contains(&d) {
                    v.clamp(0.0, 1.0) as f32
                } else {
                    v as f32
                };
            }
        }
        f
    }
}

/// Mean `ln(1 + f0)` over each phone's voiced frames (0 when none are).
pub fn phone_f0_targets(features: &VocoderFeatures, durations: &[usize]) -> Vec<f64> {
    let mut t = 0;
    durations
        .iter()
        .map(|&d| {
            let voiced: Vec<f64> = (t..t + d)
                .map(|i| features.f0(i) as f64)
                .filter(|&f| f > 0.0)
                .map(f64::ln_1p)
                .collect();
            t += d;
            if voiced.is_empty() {
                0.0
            } else {
                voiced.iter().sum::<f64>() / voiced.len() as f64
            }
        })
        .collect()
}

/// Regression target of the duration head for a phone of `frames` frames.
pub fn duration_target(frames: usize) -> f64 {
    (frames.max(1) as f64).ln()
}

/// Inference mapping of raw duration outputs: `round(exp(raw))`, capped.
pub fn quantize_durations(raw: &[f64]) -> Vec<usize> {
    raw.iter()
        .map(|&r| {
            let d = r.min((MAX_PHONE_FRAMES as f64).ln()).exp().round();
            if d.is_finite() && d > 0.0 {
                d as usize
            } else {
                0
            }
        })
        .collect()
}

fn regulate_index(durations: &[usize]) -> Result<Vec<Option<usize>>> {
    let index: Vec<Option<usize>> = durations
        .iter()
        .enumerate()
        .flat_map(|(p, &d)| std::iter::repeat(Some(p)).take(d))
        .collect();
    if index.is_empty() {
        return Err(Error::EmptyFrames);
    }
    Ok(index)
}

/// Repeats row `p` of `per_phone` `durations[p]` times.
pub fn length_regulate(per_phone: &Matrix, durations: &[usize]) -> Result<Matrix> {
    if durations.len() != per_phone.rows() {
        return Err(Error::Shape(format!(
            "{} durations for {} phones",
            durations.len(),
            per_phone.rows()
        )));
    }
    Ok(per_phone.gather_rows(&regulate_index(durations)?))
}

fn length_regulate_var(g: &mut Graph, per_phone: Var, durations: &[usize]) -> Result<Var> {
    let index = regulate_index(durations)?;
    Ok(g.gather_rows(per_phone, index))
}

/// Decoder-input pieces for one utterance, all at frame rate.
pub struct DecoderParts<'a> {
    pub upsampled: Var,
    pub f0_frames: Var,
    pub embedding: Option<Var>,
    pub reference: Option<Var>,
    pub context: &'a Matrix,
    pub mask_flags: &'a [bool],
}

/// Concatenates the decoder input in the documented column order.
/// `mask_table` is the `2 × 32` token table (row 0 unmasked, row 1
/// masked), or `None` when tokens are not used on the decoder side.
/// Masked frames of `context` are zeroed here regardless of their values.
pub fn assemble_decoder_input_var(g: &mut Graph, parts: DecoderParts<'_>, mask_table: Option<Var>) -> Result<Var> {
    let frames = g.value(parts.upsampled).rows();
    let check = |what: &str, n: usize| {
        if n != frames {
            Err(Error::Shape(format!("{what} has {n} frames, expected {frames}")))
        } else {
            Ok(())
        }
    };
    check("f0", g.value(parts.f0_frames).rows())?;
    check("context", parts.context.rows())?;
    check("mask flags", parts.mask_flags.len())?;
    if parts.context.cols() != FEATURE_DIM {
        return Err(Error::Shape(format!("context has {} columns", parts.context.cols())));
    }
    let mut cols = vec![parts.upsampled, parts.f0_frames];
    for v in [parts.embedding, parts.reference].into_iter().flatten() {
        let width = g.value(v).cols();
        if g.value(v).rows() != 1 || width != EMBED_DIM {
            return Err(Error::Shape("conditioning vectors must be 1 × 32".into()));
        }
        let ones = g.constant(Matrix::filled(frames, 1, 1.0));
        cols.push(g.matmul(ones, v));
    }
    let mut ctx = parts.context.clone();
    for (t, &m) in parts.mask_flags.iter().enumerate() {
        if m {
            ctx.row_mut(t).fill(0.0);
        }
    }
    cols.push(g.constant(ctx));
    if let Some(table) = mask_table {
        let index = parts.mask_flags.iter().map(|&m| Some(usize::from(m))).collect();
        cols.push(g.gather_rows(table, index));
    }
    Ok(g.concat_cols(&cols))
}

/// Plain-matrix form of [`assemble_decoder_input_var`].
pub fn assemble_decoder_input(
    upsampled: &Matrix,
    f0_frames: &[f64],
    embedding: Option<&[f32]>,
    reference: Option<&[f32]>,
    context: &Matrix,
    mask_flags: &[bool],
    mask_table: Option<&Matrix>,
) -> Result<Matrix> {
    let mut g = Graph::eval();
    let as_row = |g: &mut Graph, v: &[f32]| g.constant(Matrix::row_vector(&v.iter().map(|&x| x as f64).collect::<Vec<_>>()));
    let parts = DecoderParts {
        upsampled: g.constant(upsampled.clone()),
        f0_frames: g.constant(Matrix::from_vec(f0_frames.len(), 1, f0_frames.to_vec())),
        embedding: embedding.map(|e| as_row(&mut g, e)),
        reference: reference.map(|r| as_row(&mut g, r)),
        context,
        mask_flags,
    };
    let table = mask_table.map(|t| g.constant(t.clone()));
    let v = assemble_decoder_input_var(&mut g, parts, table)?;
    Ok(g.value(v).clone())
}

/// Two conv → ReLU → layer norm → dropout stages and a scalar projection.
#[derive(Clone, Debug)]
struct VarianceHead {
    convs: Vec<(Conv1d, LayerNorm)>,
    out: Linear,
}

impl VarianceHead {
    fn new(store: &mut ParamStore, name: &str, dim: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let convs = (0..2)
            .map(|i| {
                (
                    Conv1d::same(store, &format!("{name}.conv{i}"), dim, dim, kernel, rng),
                    LayerNorm::new(store, &format!("{name}.ln{i}"), dim),
                )
            })
            .collect();
        Self {
            convs,
            out: Linear::new(store, &format!("{name}.out"), dim, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let mut h = x;
        for (conv, ln) in &self.convs {
            let y = conv.forward(g, store, h);
            let y = g.relu(y);
            let y = ln.forward(g, store, y);
            h = g.dropout(y, dropout);
        }
        self.out.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct Stack {
    input: Linear,
    blocks: Vec<FftBlock>,
    out: Option<Linear>,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        in_dim: usize,
        blocks: usize,
        out_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), in_dim, cfg.hidden, rng),
            blocks: (0..blocks)
                .map(|i| {
                    FftBlock::new(
                        store,
                        &format!("{name}.block{i}"),
                        cfg.hidden,
                        cfg.heads,
                        cfg.ffn_dim,
                        cfg.ffn_kernel,
                        rng,
                    )
                })
                .collect(),
            out: out_dim.map(|d| Linear::new(store, &format!("{name}.out"), cfg.hidden, d, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let h = self.input.forward(g, store, x);
        let (rows, cols) = g.value(h).shape();
        let pe = g.constant(positional_encoding(rows, cols));
        let mut h = g.add(h, pe);
        for b in &self.blocks {
            h = b.forward(g, store, h, dropout);
        }
        match &self.out {
            Some(o) => o.forward(g, store, h),
            None => h,
        }
    }
}

/// Graph outputs of one utterance.
pub struct UtteranceOutputs {
    pub encodings: Var,
    /// `P × 1` raw duration outputs (log frames).
    pub log_durations: Var,
    /// `P × 1` per-phone `ln(1 + f0)` predictions.
    pub phone_f0: Var,
    pub decoder_input: Var,
    pub coarse: Var,
    pub fine: Var,
}

/// Inputs of one utterance in model space.
pub struct UtteranceInput<'a> {
    pub phones: &'a [u32],
    pub phone_masked: &'a [bool],
    /// Frames per phone used by the length regulator.
    pub durations: &'a [usize],
    /// Per-phone `ln(1 + f0)` broadcast to the decoder.
    pub phone_f0: &'a [f64],
    /// `T × 19` model-space context; masked frames are zeroed on assembly.
    pub context: &'a Matrix,
    pub frame_masked: &'a [bool],
    pub embedding: Option<&'a [f32]>,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub inventory: Vec<String>,
    pub norm: FeatureNorm,
    pub store: ParamStore,
    phone_table: ParamId,
    mask_table: ParamId,
    encoder: Stack,
    duration_head: VarianceHead,
    f0_head: VarianceHead,
    coarse: Stack,
    fine: Stack,
    reference: Option<ReferenceEncoder>,
}

impl AcousticModel {
    /// Builds a freshly initialised model. Parameter layout depends only on
    /// `config` and the inventory size; values only on `seed`.
    pub fn new(config: ModelConfig, inventory: Vec<String>, norm: FeatureNorm, seed: u64) -> Result<Self> {
        config.validate()?;
        if inventory.is_empty() {
            return Err(Error::invalid("phone inventory is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let phone_table = store.add_xavier("phone_embedding", inventory.len(), h, &mut rng);
        let mask_table = store.add_xavier("mask_token", 2, MASK_TOKEN_DIM, &mut rng);
        let enc_in = h + if config.mask_token_on_encoder { MASK_TOKEN_DIM } else { 0 };
        let encoder = Stack::new(&mut store, "encoder", &config, enc_in, config.encoder_blocks, None, &mut rng);
        let duration_head = VarianceHead::new(&mut store, "variance.duration", h, config.variance_kernel, &mut rng);
        let f0_head = VarianceHead::new(&mut store, "variance.f0", h, config.variance_kernel, &mut rng);
        let dec_in = config.decoder_input_width();
        let coarse = Stack::new(&mut store, "coarse", &config, dec_in, config.coarse_blocks, Some(FEATURE_DIM), &mut rng);
        let fine = Stack::new(
            &mut store,
            "fine",
            &config,
            dec_in + FEATURE_DIM,
            config.fine_blocks,
            Some(FEATURE_DIM),
            &mut rng,
        );
        let reference = match config.ref_mode {
            RefMode::None => None,
            mode => Some(ReferenceEncoder::new(&mut store, "reference", mode, FEATURE_DIM, &mut rng)?),
        };
        Ok(Self {
            config,
            inventory,
            norm,
            store,
            phone_table,
            mask_table,
            encoder,
            duration_head,
            f0_head,
            coarse,
            fine,
            reference,
        })
    }

    pub fn encoder_block_count(&self) -> usize {
        self.encoder.blocks.len()
    }

    pub fn coarse_block_count(&self) -> usize {
        self.coarse.blocks.len()
    }

    pub fn fine_block_count(&self) -> usize {
        self.fine.blocks.len()
    }

    pub fn mask_table(&self) -> &Matrix {
        self.store.value(self.mask_table)
    }

    pub fn reference_encoder(&self) -> Option<&ReferenceEncoder> {
        self.reference.as_ref()
    }

    /// Output layer of the coarse decoder (a weight on the coarse path).
    pub fn coarse_output_weight(&self) -> ParamId {
        self.coarse.out.as_ref().expect("coarse stack has an output layer").w
    }

    fn dropout(&self, g: &Graph) -> f64 {
        if g.is_training() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// One encoding per phone.
    pub fn encode_phones(&self, g: &mut Graph, phones: &[u32], phone_masked: &[bool]) -> Result<Var> {
        if phones.is_empty() {
            return Err(Error::invalid("empty phone sequence"));
        }
        if phone_masked.len() != phones.len() {
            return Err(Error::Shape("mask flags do not match phone count".into()));
        }
        if let Some(&p) = phones.iter().find(|&&p| p as usize >= self.inventory.len()) {
            return Err(Error::UnknownPhone(format!("id {p}")));
        }
        let table = g.param(&self.store, self.phone_table);
        let emb = g.gather_rows(table, phones.iter().map(|&p| Some(p as usize)).collect());
        let x = if self.config.mask_token_on_encoder {
            let mt = g.param(&self.store, self.mask_table);
            let tokens = g.gather_rows(mt, phone_masked.iter().map(|&m| Some(usize::from(m))).collect());
            g.concat_cols(&[emb, tokens])
        } else {
            emb
        };
        let dropout = self.dropout(g);
        Ok(self.encoder.forward(g, &self.store, x, dropout))
    }

    /// Raw duration outputs and per-phone log-f0, both `P × 1`.
    pub fn predict_variance(&self, g: &mut Graph, encodings: Var) -> (Var, Var) {
        let dropout = self.dropout(g);
        let d = self.duration_head.forward(g, &self.store, encodings, dropout);
        let f = self.f0_head.forward(g, &self.store, encodings, dropout);
        (d, f)
    }

    /// Coarse and fine predictions (`T × 19` each) from a decoder input.
    pub fn decode(&self, g: &mut Graph, input: Var) -> (Var, Var) {
        let dropout = self.dropout(g);
        let coarse = self.coarse.forward(g, &self.store, input, dropout);
        let fine_in = g.concat_cols(&[input, coarse]);
        let fine = self.fine.forward(g, &self.store, fine_in, dropout);
        (coarse, fine)
    }

    /// Runs the reference encoder over a batch of model-space utterances.
    pub fn encode_references(&self, g: &mut Graph, refs: &[&Matrix]) -> Result<Option<RefOutput>> {
        let Some(enc) = &self.reference else {
            return Ok(None);
        };
        if refs.iter().any(|m| m.rows() == 0) {
            return Err(Error::EmptyFrames);
        }
        let mut segments = Vec::with_capacity(refs.len());
        let mut start = 0;
        for m in refs {
            segments.push(Segment { start, len: m.rows() });
            start += m.rows();
        }
        let stacked = Matrix::concat_rows(refs);
        let x = g.constant(stacked);
        Ok(Some(enc.forward(g, &self.store, x, &segments)))
    }

    /// Full forward pass of one utterance; `reference` is this utterance's
    /// `1 × 32` reference encoding when the model uses one.
    pub fn forward(&self, g: &mut Graph, input: &UtteranceInput<'_>, reference: Option<Var>) -> Result<UtteranceOutputs> {
        let p = input.phones.len();
        if input.durations.len() != p || input.phone_f0.len() != p {
            return Err(Error::Shape("durations and f0 must have one entry per phone".into()));
        }
        let frames: usize = input.durations.iter().sum();
        if input.context.rows() != frames || input.frame_masked.len() != frames {
            return Err(Error::AlignmentMismatch {
                sum: frames,
                frames: input.context.rows(),
            });
        }
        let embedding = match (self.config.embedding_mode, input.embedding) {
            (EmbeddingMode::None, _) => None,
            (_, Some(e)) if e.len() == EMBED_DIM => {
                Some(g.constant(Matrix::row_vector(&e.iter().map(|&v| v as f64).collect::<Vec<_>>())))
            }
            _ => return Err(Error::invalid("model expects a 32-dim embedding")),
        };
        if (self.config.ref_mode == RefMode::None) != reference.is_none() {
            return Err(Error::invalid("reference encoding presence does not match the model's ref_mode"));
        }
        let encodings = self.encode_phones(g, input.phones, input.phone_masked)?;
        let (log_durations, phone_f0) = self.predict_variance(g, encodings);
        let upsampled = length_regulate_var(g, encodings, input.durations)?;
        let f0_model: Vec<f64> = input.phone_f0.iter().map(|&f| self.norm.f0_to_model(f)).collect();
        let f0_phone = g.constant(Matrix::from_vec(p, 1, f0_model));
        let f0_frames = length_regulate_var(g, f0_phone, input.durations)?;
        let table = self
            .config
            .mask_token_on_decoder
            .then(|| g.param(&self.store, self.mask_table));
        let decoder_input = assemble_decoder_input_var(
            g,
            DecoderParts {
                upsampled,
                f0_frames,
                embedding,
                reference,
                context: input.context,
                mask_flags: input.frame_masked,
            },
            table,
        )?;
        let (coarse, fine) = self.decode(g, decoder_input);
        Ok(UtteranceOutputs {
            encodings,
            log_durations,
            phone_f0,
            decoder_input,
            coarse,
            fine,
        })
    }

    /// Eval-mode reference encoding of one utterance (model space).
    pub fn reference_vector(&self, features: &Matrix) -> Result<Option<Vec<f32>>> {
        match &self.reference {
            None => Ok(None),
            Some(enc) => Ok(Some(enc.encode(&self.store, features, None)?.vector)),
        }
    }
}
