//! Masked-infilling training: mask sampling, the weighted loss, optimizer
//! steps and the training loop.

mod checkpoint;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_SCHEMA};

use crate::conditioning::{Embedding, EmbeddingMode};
use crate::error::{Error, Result};
use crate::features::{FrameRange, VocoderFeatures, FEATURE_DIM};
use crate::model::{duration_target, phone_f0_targets, AcousticModel, UtteranceInput};
use crate::nn::optim::{Adam, AdamConfig, LrSchedule};
use crate::nn::params::round_f32;
use crate::nn::{Graph, Matrix, Var};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub coarse_weight: f64,
    pub fine_weight: f64,
    pub kl_weight: f64,
    pub duration_weight: f64,
    pub f0_weight: f64,
    pub mask_rate_range: [f64; 2],
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Checkpoint interval in steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Feed the reference encoder only the unmasked frames.
    pub reference_unmasked_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            coarse_weight: 1.0,
            fine_weight: 10.0,
            kl_weight: 0.001,
            duration_weight: 1.0,
            f0_weight: 1.0,
            mask_rate_range: [0.2, 1.0],
            learning_rate: 1e-3,
            warmup_steps: 400,
            batch_size: 8,
            steps: 10_000,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 1000,
            reference_unmasked_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.coarse_weight,
            self.fine_weight,
            self.kl_weight,
            self.duration_weight,
            self.f0_weight,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        let [lo, hi] = self.mask_rate_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "mask_rate_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("batch_size and learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.learning_rate,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            clip_norm: self.grad_clip,
            ..AdamConfig::default()
        }
    }
}

/// A contiguous masked phone span and the frames it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mask_rate: f64,
    /// Half-open phone interval.
    pub phone_span: (usize, usize),
    pub frame_ranges: Vec<FrameRange>,
}

/// Masked span length for `phones` phones at `rate`:
/// `clamp(round(rate · P), 1, P)`, rounding halves away from zero.
pub fn span_length(phones: usize, rate: f64) -> usize {
    ((rate * phones as f64).round() as usize).clamp(1, phones.max(1))
}

/// Draws a rate uniformly from `range` and a span start uniformly among the
/// positions where the span fits.
pub fn sample_mask(phones: usize, rng: &mut impl Rng, range: [f64; 2]) -> MaskSpec {
    assert!(phones >= 1, "cannot mask an empty phone sequence");
    let rate = if range[0] < range[1] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    };
    let len = span_length(phones, rate);
    let start = rng.gen_range(0..=phones - len);
    MaskSpec {
        mask_rate: rate,
        phone_span: (start, start + len),
        frame_ranges: Vec::new(),
    }
}

impl MaskSpec {
    /// Fills `frame_ranges` from per-phone durations.
    pub fn with_durations(mut self, durations: &[usize]) -> Self {
        let start: usize = durations[..self.phone_span.0].iter().sum();
        let len: usize = durations[self.phone_span.0..self.phone_span.1].iter().sum();
        self.frame_ranges = vec![FrameRange::new(start, start + len)];
        self
    }

    pub fn masked_frames(&self) -> usize {
        self.frame_ranges.iter().map(FrameRange::len).sum()
    }

    pub fn frame_flags(&self, frames: usize) -> Vec<bool> {
        let mut flags = vec![false; frames];
        for r in &self.frame_ranges {
            flags[r.start..r.end].fill(true);
        }
        flags
    }

    pub fn phone_flags(&self, phones: usize) -> Vec<bool> {
        (0..phones)
            .map(|p| (self.phone_span.0..self.phone_span.1).contains(&p))
            .collect()
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub coarse: f64,
    pub fine: f64,
    pub kl: f64,
    pub duration: f64,
    pub f0: f64,
    pub total: f64,
}

/// Graph nodes of one utterance that enter the loss.
pub struct LossItem<'a> {
    pub coarse: Var,
    pub fine: Var,
    /// Model-space target, `T × 19`.
    pub target: &'a Matrix,
    pub masked: &'a [FrameRange],
    pub log_durations: Var,
    pub duration_targets: &'a [f64],
    pub phone_f0: Var,
    pub f0_targets: &'a [f64],
}

pub struct LossVars {
    pub total: Var,
    pub terms: [Var; 5],
}

fn masked_sq_sum(g: &mut Graph, pred: Var, target: &Matrix, rows: &[Option<usize>]) -> Var {
    let t = g.constant(target.gather_rows(rows));
    let p = g.gather_rows(pred, rows.to_vec());
    let d = g.sub(p, t);
    let sq = g.square(d);
    g.sum_all(sq)
}

fn column_sq_sum(g: &mut Graph, pred: Var, target: &[f64]) -> Var {
    let t = g.constant(Matrix::from_vec(target.len(), 1, target.to_vec()));
    let d = g.sub(pred, t);
    let sq = g.square(d);
    g.sum_all(sq)
}

/// Builds the pooled loss over a batch. Acoustic terms are mean squared
/// errors over (all masked frames in the batch × 19); the variance terms
/// average over every phone; `kl` is already a batch mean.
pub fn loss_graph(g: &mut Graph, items: &[LossItem<'_>], kl: Var, cfg: &TrainConfig) -> Result<LossVars> {
    let masked_frames: usize = items
        .iter()
        .map(|it| it.masked.iter().map(FrameRange::len).sum::<usize>())
        .sum();
    if masked_frames == 0 {
        return Err(Error::EmptyMask);
    }
    let phones: usize = items.iter().map(|it| it.duration_targets.len()).sum();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    let mut dur = Vec::new();
    let mut f0 = Vec::new();
    for it in items {
        let frames = it.target.rows();
        if g.value(it.coarse).shape() != (frames, FEATURE_DIM) || g.value(it.fine).shape() != (frames, FEATURE_DIM) {
            return Err(Error::Shape("prediction and target shapes differ".into()));
        }
        let rows: Vec<Option<usize>> = it
            .masked
            .iter()
            .flat_map(|r| {
                assert!(r.end <= frames, "mask range past the utterance");
                (r.start..r.end).map(Some)
            })
            .collect();
        if !rows.is_empty() {
            coarse.push(masked_sq_sum(g, it.coarse, it.target, &rows));
            fine.push(masked_sq_sum(g, it.fine, it.target, &rows));
        }
        dur.push(column_sq_sum(g, it.log_durations, it.duration_targets));
        f0.push(column_sq_sum(g, it.phone_f0, it.f0_targets));
    }
    let pooled = |g: &mut Graph, parts: Vec<Var>, denom: f64, weight: f64| {
        let first = parts[0];
        let s = parts[1..].iter().fold(first, |acc, &v| g.add(acc, v));
        g.scale(s, weight / denom)
    };
    let acoustic = (masked_frames * FEATURE_DIM) as f64;
    let coarse = pooled(g, coarse, acoustic, cfg.coarse_weight);
    let fine = pooled(g, fine, acoustic, cfg.fine_weight);
    let duration = pooled(g, dur, phones.max(1) as f64, cfg.duration_weight);
    let f0 = pooled(g, f0, phones.max(1) as f64, cfg.f0_weight);
    let kl = g.scale(kl, cfg.kl_weight);
    let terms = [coarse, fine, kl, duration, f0];
    let total = terms[1..].iter().fold(terms[0], |acc, &v| g.add(acc, v));
    Ok(LossVars { total, terms })
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).get(0, 0);
        LossBreakdown {
            coarse: v(self.terms[0]),
            fine: v(self.terms[1]),
            kl: v(self.terms[2]),
            duration: v(self.terms[3]),
            f0: v(self.terms[4]),
            total: v(self.total),
        }
    }
}

/// Variance-adaptor outputs or targets for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct VarianceValues<'a> {
    pub log_durations: &'a [f64],
    pub phone_f0: &'a [f64],
}

/// Loss of a single utterance from plain predictions (model space).
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    coarse_pred: &Matrix,
    fine_pred: &Matrix,
    target: &Matrix,
    mask: &MaskSpec,
    kl_term: f64,
    variance_preds: VarianceValues<'_>,
    variance_targets: VarianceValues<'_>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if variance_preds.log_durations.len() != variance_targets.log_durations.len()
        || variance_preds.phone_f0.len() != variance_targets.phone_f0.len()
    {
        return Err(Error::Shape("variance predictions and targets differ in length".into()));
    }
    if mask.frame_ranges.iter().any(|r| r.end > target.rows() || r.start > r.end) {
        return Err(Error::InvalidRange {
            start: mask.frame_ranges[0].start,
            end: mask.frame_ranges[0].end,
            frames: target.rows(),
        });
    }
    let mut g = Graph::eval();
    let col = |g: &mut Graph, v: &[f64]| g.constant(Matrix::from_vec(v.len(), 1, v.to_vec()));
    let item = LossItem {
        coarse: g.constant(coarse_pred.clone()),
        fine: g.constant(fine_pred.clone()),
        target,
        masked: &mask.frame_ranges,
        log_durations: col(&mut g, variance_preds.log_durations),
        duration_targets: variance_targets.log_durations,
        phone_f0: col(&mut g, variance_preds.phone_f0),
        f0_targets: variance_targets.phone_f0,
    };
    let kl = g.constant(Matrix::filled(1, 1, kl_term));
    let vars = loss_graph(&mut g, &[item], kl, cfg)?;
    Ok(vars.breakdown(&g))
}

/// One aligned training utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub phones: Vec<u32>,
    pub durations: Vec<usize>,
    pub features: VocoderFeatures,
    /// Conditioning vector for the model's embedding mode (utterance or
    /// speaker level), if it uses one.
    pub embedding: Option<Embedding>,
}

/// Training example with model-space tensors precomputed.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub phones: Vec<u32>,
    pub durations: Vec<usize>,
    pub target: Matrix,
    pub duration_targets: Vec<f64>,
    pub f0_targets: Vec<f64>,
    pub embedding: Option<Vec<f32>>,
}

impl PreparedExample {
    pub fn new(example: &TrainingExample, model: &AcousticModel) -> Result<Self> {
        let frames = example.features.frame_count();
        let sum: usize = example.durations.iter().sum();
        if sum != frames {
            return Err(Error::AlignmentMismatch { sum, frames });
        }
        if example.phones.is_empty() || example.phones.len() != example.durations.len() {
            return Err(Error::PhoneCountMismatch {
                expected: example.phones.len(),
                found: example.durations.len(),
            });
        }
        if model.config.embedding_mode != EmbeddingMode::None && example.embedding.is_none() {
            return Err(Error::invalid(format!("utterance {} has no embedding", example.id)));
        }
        Ok(Self {
            id: example.id.clone(),
            phones: example.phones.clone(),
            durations: example.durations.clone(),
            target: model.norm.to_model(&example.features),
            duration_targets: example.durations.iter().map(|&d| duration_target(d)).collect(),
            f0_targets: phone_f0_targets(&example.features, &example.durations),
            embedding: example.embedding.as_ref().map(|e| e.as_slice().to_vec()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub mask_rate_mean: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

/// Metrics log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub coarse: f64,
    pub fine: f64,
    pub kl: f64,
    pub duration: f64,
    pub f0: f64,
    pub total: f64,
    pub mask_rate_mean: f64,
}

impl From<&StepReport> for MetricsLine {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            coarse: r.loss.coarse,
            fine: r.loss.fine,
            kl: r.loss.kl,
            duration: r.loss.duration,
            f0: r.loss.f0,
            total: r.loss.total,
            mask_rate_mean: r.mask_rate_mean,
        }
    }
}

/// Forward pass plus loss for a batch under given masks, on graph `g`.
pub fn batch_loss(
    g: &mut Graph,
    model: &AcousticModel,
    batch: &[&PreparedExample],
    masks: &[MaskSpec],
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let frame_flags: Vec<Vec<bool>> = batch
        .iter()
        .zip(masks)
        .map(|(ex, m)| m.frame_flags(ex.target.rows()))
        .collect();
    let phone_flags: Vec<Vec<bool>> = batch.iter().zip(masks).map(|(ex, m)| m.phone_flags(ex.phones.len())).collect();

    let ref_inputs: Vec<Matrix> = if model.reference_encoder().is_some() {
        batch
            .iter()
            .zip(&frame_flags)
            .map(|(ex, flags)| reference_input(&ex.target, flags, cfg.reference_unmasked_only))
            .collect()
    } else {
        Vec::new()
    };
    let refs: Vec<&Matrix> = ref_inputs.iter().collect();
    let ref_out = model.encode_references(g, &refs)?;
    let kl = match &ref_out {
        Some(r) => r.kl,
        None => g.constant(Matrix::zeros(1, 1)),
    };

    let mut outputs = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let reference = ref_out.as_ref().map(|r| g.slice_rows(r.encoding, i, i + 1));
        let input = UtteranceInput {
            phones: &ex.phones,
            phone_masked: &phone_flags[i],
            durations: &ex.durations,
            phone_f0: &ex.f0_targets,
            context: &ex.target,
            frame_masked: &frame_flags[i],
            embedding: ex.embedding.as_deref(),
        };
        outputs.push(model.forward(g, &input, reference)?);
    }
    let items: Vec<LossItem<'_>> = batch
        .iter()
        .zip(masks)
        .zip(&outputs)
        .map(|((ex, m), o)| LossItem {
            coarse: o.coarse,
            fine: o.fine,
            target: &ex.target,
            masked: &m.frame_ranges,
            log_durations: o.log_durations,
            duration_targets: &ex.duration_targets,
            phone_f0: o.phone_f0,
            f0_targets: &ex.f0_targets,
        })
        .collect();
    loss_graph(g, &items, kl, cfg)
}

/// Eval-mode loss (no dropout, running batch-norm statistics) under fixed
/// masks. Nothing is updated.
pub fn evaluate_loss(model: &AcousticModel, batch: &[&PreparedExample], masks: &[MaskSpec], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.len() != masks.len() {
        return Err(Error::Shape(format!("{} examples but {} masks", batch.len(), masks.len())));
    }
    let mut g = Graph::eval();
    let vars = batch_loss(&mut g, model, batch, masks, cfg)?;
    Ok(vars.breakdown(&g))
}

/// Reference-encoder input: the full utterance, or only its unmasked
/// frames (the full utterance when everything is masked).
pub fn reference_input(features: &Matrix, masked: &[bool], unmasked_only: bool) -> Matrix {
    if !unmasked_only || masked.iter().all(|&m| m) {
        return features.clone();
    }
    let keep: Vec<Option<usize>> = masked
        .iter()
        .enumerate()
        .filter(|(_, &m)| !m)
        .map(|(t, _)| Some(t))
        .collect();
    features.gather_rows(&keep)
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: AcousticModel,
    pub optimizer: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: AcousticModel, cfg: &TrainConfig) -> Self {
        let optimizer = Adam::new(cfg.adam(), &model.store);
        Self {
            model,
            optimizer,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

/// Samples masks, runs forward/backward on `batch` and applies one Adam
/// update. Utterances are processed in id order so the result does not
/// depend on batch order.
pub fn train_step(state: &mut TrainState, batch: &[&PreparedExample], cfg: &TrainConfig) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut batch = batch.to_vec();
    batch.sort_by(|a, b| a.id.cmp(&b.id));
    let step = state.step + 1;
    let masks: Vec<MaskSpec> = batch
        .iter()
        .map(|ex| sample_mask(ex.phones.len(), &mut state.rng, cfg.mask_rate_range).with_durations(&ex.durations))
        .collect();
    let mut g = Graph::train(ChaCha8Rng::seed_from_u64(state.rng.gen()));
    let vars = batch_loss(&mut g, &state.model, &batch, &masks, cfg)?;
    let loss = vars.breakdown(&g);
    let ids = || batch.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { step, ids: ids() });
    }
    let grads = g.backward(vars.total);
    let param_grads = g.param_grads(&grads);
    if param_grads.iter().any(|(_, m)| !m.all_finite()) {
        return Err(Error::NonFiniteLoss { step, ids: ids() });
    }
    let lr = cfg.schedule().at(step);
    let grad_norm = state.optimizer.update(&mut state.model.store, &param_grads, lr);
    for stats in g.batch_stats() {
        let mean = state.model.store.value_mut(stats.running_mean);
        for (r, &m) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = round_f32((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
        }
        let var = state.model.store.value_mut(stats.running_var);
        for (r, &v) in var.data_mut().iter_mut().zip(&stats.var) {
            *r = round_f32((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
        }
    }
    state.step = step;
    Ok(StepReport {
        step,
        loss,
        mask_rate_mean: masks.iter().map(|m| m.mask_rate).sum::<f64>() / masks.len() as f64,
        grad_norm,
        learning_rate: lr,
    })
}

/// Where the training loop writes its outputs.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.tbvc")
    }

    pub fn step_checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{step:08}.tbvc"))
    }
}

/// Runs `cfg.steps − state.step` further steps over `data`, appending one
/// metrics line per step and checkpointing to `out`. `on_step` sees every report and may stop training early by
/// returning `false`.
pub fn train(
    state: &mut TrainState,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
    mut on_step: impl FnMut(&StepReport) -> bool,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    let prepared: Vec<PreparedExample> = data
        .iter()
        .map(|ex| PreparedExample::new(ex, &state.model))
        .collect::<Result<_>>()?;
    let mut metrics = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(o.metrics_path())?,
            )
        }
        None => None,
    };
    let mut reports = Vec::new();
    while state.step < cfg.steps {
        let batch: Vec<&PreparedExample> = batch_indices(prepared.len(), cfg, state.step)
            .into_iter()
            .map(|i| &prepared[i])
            .collect();
        let report = train_step(state, &batch, cfg)?;
        if let Some(f) = metrics.as_mut() {
            serde_json::to_writer(&mut *f, &MetricsLine::from(&report))?;
            f.write_all(b"\n")?;
        }
        let keep_going = on_step(&report);
        reports.push(report);
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                save_checkpoint(&Checkpoint::from_state(state, cfg), o.step_checkpoint_path(state.step))?;
            }
        }
        if !keep_going {
            break;
        }
    }
    if let Some(o) = out {
        save_checkpoint(&Checkpoint::from_state(state, cfg), o.checkpoint_path())?;
    }
    Ok(reports)
}

/// Indices of the batch used at 0-based `step`. Each epoch visits every
/// example once in an order seeded by `(cfg.seed, epoch)`, so the schedule
/// depends only on the step counter and resuming reproduces it exactly.
pub fn batch_indices(examples: usize, cfg: &TrainConfig, step: u64) -> Vec<usize> {
    let per_epoch = examples.div_ceil(cfg.batch_size) as u64;
    let epoch = step / per_epoch;
    let within = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..examples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch + 1);
    order.shuffle(&mut rng);
    let start = within * cfg.batch_size;
    order[start..(start + cfg.batch_size).min(examples)].to_vec()
}

/// Reads a metrics log written by [`train`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsLine>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
