//! Word-replacement edits: plan the new phone sequence, synthesize it with
//! the original recording as context, cut the replaced words out of the
//! synthesized utterance and crossfade them into the original audio.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::conditioning::{
    embed_utterance, speaker_embedding, ConditioningBundle, Embedding, EmbeddingMode, EmbeddingProvider, RefMode,
    ReferenceEncoding,
};
use crate::error::{Error, Result, StageExt};
use crate::eval::{evaluate_edit, RegionMetrics};
use crate::features::{BaselineVocoder, FrameRange, FrameSpec, Vocoder, VocoderFeatures, FEATURE_DIM};
use crate::frontend::{text_to_phones, words_of, Lexicon, PhoneSequence, WordAlignment};
use crate::model::{phone_f0_targets, quantize_durations, AcousticModel, UtteranceInput};
use crate::nn::{Graph, Matrix};

pub const DEFAULT_CROSSFADE_MS: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadeShape {
    Linear,
    #[default]
    RaisedCosine,
}

impl FadeShape {
    /// Gain of the incoming signal at sample `k` of an `n`-sample fade; the
    /// outgoing signal gets `1 − gain`.
    pub fn gain(self, k: usize, n: usize) -> f64 {
        let x = (k as f64 + 0.5) / n as f64;
        match self {
            FadeShape::Linear => x,
            FadeShape::RaisedCosine => 0.5 - 0.5 * (std::f64::consts::PI * x).cos(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossfadeConfig {
    pub fade_ms: f64,
    pub shape: FadeShape,
}

impl Default for CrossfadeConfig {
    fn default() -> Self {
        Self {
            fade_ms: DEFAULT_CROSSFADE_MS,
            shape: FadeShape::RaisedCosine,
        }
    }
}

impl CrossfadeConfig {
    pub fn fade_samples(&self, sample_rate: u32) -> Result<usize> {
        if !(self.fade_ms.is_finite() && self.fade_ms >= 0.0) {
            return Err(Error::invalid(format!("fade must be non-negative, got {} ms", self.fade_ms)));
        }
        Ok((self.fade_ms * sample_rate as f64 / 1000.0).round() as usize)
    }
}

/// Audio the edited region is fused into.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// The original features passed through the vocoder.
    #[default]
    Vocoded,
    /// The recording itself.
    Raw,
}

fn default_crossfade_ms() -> f64 {
    DEFAULT_CROSSFADE_MS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub utterance_id: String,
    /// Word indices `[i, j)` to replace.
    pub word_span: [usize; 2],
    pub replacement_text: String,
    /// When given, must match the recording's transcript word for word.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    /// Defaults to the checkpoint's mode; a different mode is an error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_mode: Option<EmbeddingMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_mode: Option<RefMode>,
    #[serde(default = "default_crossfade_ms")]
    pub crossfade_ms: f64,
    #[serde(default)]
    pub crossfade_shape: FadeShape,
    #[serde(default)]
    pub fusion: Fusion,
    /// Copy the replaced words' aligned durations instead of predicting
    /// them. Requires the replacement to have the same phones.
    #[serde(default)]
    pub force_durations: bool,
    /// Hide the whole utterance from the decoder, as plain synthesis would.
    #[serde(default)]
    pub tts_baseline: bool,
    #[serde(default)]
    pub seed: u64,
}

impl EditRequest {
    pub fn new(utterance_id: impl Into<String>, word_span: [usize; 2], replacement_text: impl Into<String>) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            word_span,
            replacement_text: replacement_text.into(),
            transcript: None,
            embedding_mode: None,
            ref_mode: None,
            crossfade_ms: DEFAULT_CROSSFADE_MS,
            crossfade_shape: FadeShape::default(),
            fusion: Fusion::default(),
            force_durations: false,
            tts_baseline: false,
            seed: 0,
        }
    }

    pub fn crossfade(&self) -> CrossfadeConfig {
        CrossfadeConfig {
            fade_ms: self.crossfade_ms,
            shape: self.crossfade_shape,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.word_span[0] == self.word_span[1] && words_of(&self.replacement_text).is_empty()
    }
}

/// New phone sequence for an edit and where its pieces come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub phones: PhoneSequence,
    /// Aligned duration for kept phones; `None` where the model predicts.
    pub durations: Vec<Option<usize>>,
    pub phone_masked: Vec<bool>,
    /// Replacement phones in the new sequence.
    pub replaced_phones: Range<usize>,
    /// Phones they replace in the original sequence.
    pub original_phones: Range<usize>,
    /// Frames of the replaced phones in the original features.
    pub original_frames: FrameRange,
    pub word_span: [usize; 2],
}

impl EditPlan {
    pub fn is_noop(&self) -> bool {
        self.replaced_phones.is_empty() && self.original_phones.is_empty()
    }

    pub fn prefix_frames(&self) -> usize {
        self.original_frames.start
    }
}

/// Builds the edited phone sequence. Silence phones at either edge of the
/// replaced words are kept with their aligned durations, so pauses around
/// the edit survive.
pub fn plan_edit(
    request: &EditRequest,
    phones: &PhoneSequence,
    alignment: &WordAlignment,
    lexicon: &Lexicon,
) -> Result<EditPlan> {
    let [i, j] = request.word_span;
    if i > j || j > phones.word_count() {
        return Err(Error::invalid(format!(
            "word span [{i}, {j}) out of range for {} words",
            phones.word_count()
        )));
    }
    if alignment.phone_durations.len() != phones.len() {
        return Err(Error::PhoneCountMismatch {
            expected: phones.len(),
            found: alignment.phone_durations.len(),
        });
    }
    if let Some(t) = &request.transcript {
        if words_of(t) != phones.words {
            return Err(Error::invalid("transcript does not match the recording's words"));
        }
    }
    let replacement = text_to_phones(&request.replacement_text, lexicon)?;
    if replacement.is_empty() && !request.replacement_text.trim().is_empty() {
        return Err(Error::EmptyMask);
    }

    let sil = lexicon.silence_id();
    let mut span = phones.phone_range_of_words(i, j);
    while !span.is_empty() && phones.phones[span.start] == sil {
        span.start += 1;
    }
    while !span.is_empty() && phones.phones[span.end - 1] == sil {
        span.end -= 1;
    }
    let starts = alignment.phone_starts();
    let frame_at = |p: usize| starts.get(p).copied().unwrap_or(alignment.total_frames());
    let original_frames = FrameRange::new(frame_at(span.start), frame_at(span.end));

    let forced = if request.force_durations {
        if phones.phones[span.clone()] != replacement.phones[..] {
            return Err(Error::invalid("forced durations need the replacement to keep the original phones"));
        }
        Some(alignment.phone_durations[span.clone()].to_vec())
    } else {
        None
    };

    // Word slots: kept words before i, replacement words, kept words from j.
    let new_words: Vec<String> = phones.words[..i]
        .iter()
        .chain(&replacement.words)
        .chain(&phones.words[j..])
        .cloned()
        .collect();
    let shift = |w: usize| if w < i { w } else { w + replacement.word_count() - (j - i) };
    let mut entries: Vec<(u32, Option<usize>, bool, Option<usize>)> = Vec::new();
    for p in 0..span.start {
        let w = phones.word_index[p];
        entries.push((phones.phones[p], Some(alignment.phone_durations[p]), false, (w < i || w >= j).then(|| shift(w))));
    }
    for (k, &p) in replacement.phones.iter().enumerate() {
        let d = forced.as_ref().map(|f| f[k]);
        entries.push((p, d, true, Some(i + replacement.word_index[k])));
    }
    for p in span.end..phones.len() {
        let w = phones.word_index[p];
        entries.push((phones.phones[p], Some(alignment.phone_durations[p]), false, (w < i || w >= j).then(|| shift(w))));
    }
    if entries.is_empty() {
        return Err(Error::invalid("the edit leaves no phones"));
    }
    if new_words.is_empty() {
        return Err(Error::invalid("the edit leaves no words"));
    }
    // Kept silences of replaced words join the previous word (or the next
    // one when leading).
    let mut slots: Vec<Option<usize>> = entries.iter().map(|e| e.3).collect();
    for k in 0..slots.len() {
        if slots[k].is_none() && k > 0 {
            slots[k] = slots[k - 1];
        }
    }
    for k in (0..slots.len()).rev() {
        if slots[k].is_none() {
            slots[k] = slots.get(k + 1).copied().flatten();
        }
    }
    let word_index: Vec<usize> = slots.into_iter().map(|s| s.unwrap_or(0)).collect();
    let mut is_word_boundary = Vec::with_capacity(word_index.len());
    for (k, &w) in word_index.iter().enumerate() {
        is_word_boundary.push(k == 0 || word_index[k - 1] != w);
    }
    let seq = PhoneSequence {
        phones: entries.iter().map(|e| e.0).collect(),
        word_index,
        is_word_boundary,
        words: new_words,
    };
    seq.validate(lexicon.inventory().len())?;
    let all_masked = request.tts_baseline;
    Ok(EditPlan {
        durations: entries.iter().map(|e| e.1).collect(),
        phone_masked: entries.iter().map(|e| e.2 || all_masked).collect(),
        replaced_phones: span.start..span.start + replacement.len(),
        original_phones: span,
        original_frames,
        word_span: [i, j],
        phones: seq,
    })
}

/// Conditioning computed from the recording being edited. In speaker mode
/// a known speaker vector is used when given; otherwise the recording's
/// own embedding stands in as a one-utterance mean.
pub fn conditioning_from_original(
    model: &AcousticModel,
    original: &VocoderFeatures,
    provider: &dyn EmbeddingProvider,
    speaker: Option<&Embedding>,
) -> Result<ConditioningBundle> {
    let embedding = match model.config.embedding_mode {
        EmbeddingMode::None => None,
        EmbeddingMode::Utterance => Some(embed_utterance(original, provider)?),
        EmbeddingMode::Speaker => Some(match speaker {
            Some(s) => s.clone(),
            None => speaker_embedding(&[embed_utterance(original, provider)?])?,
        }),
    };
    let reference = model
        .reference_vector(&model.norm.to_model(original))?
        .map(|vector| ReferenceEncoding { vector, kl_term: 0.0 });
    let bundle = ConditioningBundle {
        embedding_mode: model.config.embedding_mode,
        ref_mode: model.config.ref_mode,
        embedding,
        reference,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Synthesized utterance for a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// Fine decoder output, whole utterance.
    pub features: VocoderFeatures,
    pub coarse: VocoderFeatures,
    pub durations: Vec<usize>,
    /// Frames of the replacement phones.
    pub region: FrameRange,
    /// Decoder input as assembled (model space).
    pub decoder_input: Matrix,
    /// Context matrix before masking (model space, new frame layout).
    pub context: Matrix,
    pub frame_masked: Vec<bool>,
}

/// Runs the model on the edited phone sequence. Kept phones use their
/// aligned durations and measured f0. Replacement phones use the predicted
/// f0 and, unless forced, the predicted durations (at least one frame
/// each). The decoder sees the original
/// features before and after the region and zeros inside it.
pub fn synthesize_edit(
    plan: &EditPlan,
    bundle: &ConditioningBundle,
    model: &AcousticModel,
    original: &VocoderFeatures,
) -> Result<Synthesis> {
    bundle.validate()?;
    if bundle.embedding_mode != model.config.embedding_mode || bundle.ref_mode != model.config.ref_mode {
        return Err(Error::invalid(format!(
            "conditioning ({}, {}) does not match the checkpoint ({}, {})",
            bundle.embedding_mode.as_str(),
            bundle.ref_mode.as_str(),
            model.config.embedding_mode.as_str(),
            model.config.ref_mode.as_str()
        )));
    }
    if plan.original_frames.end > original.frame_count() {
        return Err(Error::InvalidRange {
            start: plan.original_frames.start,
            end: plan.original_frames.end,
            frames: original.frame_count(),
        });
    }
    let phones = &plan.phones.phones;
    let mut g = Graph::eval();
    let enc = model.encode_phones(&mut g, phones, &plan.phone_masked)?;
    let (log_d, f0_pred) = model.predict_variance(&mut g, enc);
    let predicted = quantize_durations(g.value(log_d).data());
    let durations: Vec<usize> = plan
        .durations
        .iter()
        .zip(&predicted)
        .map(|(known, &p)| known.unwrap_or(p.max(1)))
        .collect();

    let replaced = plan.replaced_phones.clone();
    let kept: Vec<usize> = plan
        .durations
        .iter()
        .enumerate()
        .map(|(p, d)| if replaced.contains(&p) { 0 } else { d.unwrap_or(0) })
        .collect();
    let measured = phone_f0_targets(&original.slice_context(plan), &kept);
    let phone_f0: Vec<f64> = (0..phones.len())
        .map(|p| {
            if replaced.contains(&p) {
                g.value(f0_pred).get(p, 0).max(0.0)
            } else {
                measured[p]
            }
        })
        .collect();

    let region_start: usize = durations[..plan.replaced_phones.start].iter().sum();
    let region_len: usize = durations[plan.replaced_phones.clone()].iter().sum();
    let region = FrameRange::new(region_start, region_start + region_len);
    let total: usize = durations.iter().sum();
    let orig_model = model.norm.to_model(original);
    let (a, b) = (plan.original_frames.start, plan.original_frames.end);
    if total != a + region_len + (original.frame_count() - b) {
        return Err(Error::AlignmentMismatch {
            sum: total,
            frames: a + region_len + original.frame_count() - b,
        });
    }
    let index: Vec<Option<usize>> = (0..a)
        .map(Some)
        .chain(std::iter::repeat(None).take(region_len))
        .chain((b..original.frame_count()).map(Some))
        .collect();
    let context = orig_model.gather_rows(&index);
    let all = plan.phone_masked.iter().all(|&m| m);
    let frame_masked: Vec<bool> = (0..total).map(|t| all || region.contains(t)).collect();

    let reference = bundle.reference.as_ref().map(|r| {
        let v: Vec<f64> = r.vector.iter().map(|&x| x as f64).collect();
        g.constant(Matrix::row_vector(&v))
    });
    let input = UtteranceInput {
        phones,
        phone_masked: &plan.phone_masked,
        durations: &durations,
        phone_f0: &phone_f0,
        context: &context,
        frame_masked: &frame_masked,
        embedding: bundle.embedding.as_ref().map(Embedding::as_slice),
    };
    let out = model.forward(&mut g, &input, reference)?;
    Ok(Synthesis {
        features: model.norm.from_model(g.value(out.fine)),
        coarse: model.norm.from_model(g.value(out.coarse)),
        durations,
        region,
        decoder_input: g.value(out.decoder_input).clone(),
        context,
        frame_masked,
    })
}

trait SliceContext {
    fn slice_context(&self, plan: &EditPlan) -> VocoderFeatures;
}

impl SliceContext for VocoderFeatures {
    /// Original frames laid out so that kept phones line up with their
    /// aligned durations (the replaced frames are dropped).
    fn slice_context(&self, plan: &EditPlan) -> VocoderFeatures {
        let r = plan.original_frames;
        let head = self.slice(FrameRange::new(0, r.start));
        let tail = self.slice(FrameRange::new(r.end, self.frame_count()));
        VocoderFeatures::concat(&[&head, &tail])
    }
}

/// Fuses `region` into `original`, replacing samples `[a, b)`. The region
/// carries `fade` extra samples at each end that overlap the original on
/// either side of the cut; over those samples the two are mixed with gains
/// summing to one.
pub fn splice_samples(
    original: &AudioClip,
    region: &AudioClip,
    cut: (usize, usize),
    fade: usize,
    shape: FadeShape,
) -> Result<AudioClip> {
    let (a, b) = cut;
    if original.sample_rate != region.sample_rate {
        return Err(Error::invalid("sample rates differ"));
    }
    if a > b || b > original.len() {
        return Err(Error::invalid(format!(
            "cut points {a}..{b} outside a clip of {} samples",
            original.len()
        )));
    }
    if fade > a || fade > original.len() - b || 2 * fade > region.len() {
        return Err(Error::invalid(format!(
            "fade of {fade} samples is longer than a fused segment (prefix {a}, suffix {}, region {})",
            original.len() - b,
            region.len().saturating_sub(2 * fade)
        )));
    }
    let core = region.len() - 2 * fade;
    let o = &original.samples;
    let r = &region.samples;
    let mut out = Vec::with_capacity(a + core + original.len() - b);
    out.extend_from_slice(&o[..a - fade]);
    for k in 0..fade {
        let w = shape.gain(k, fade);
        out.push(((1.0 - w) * o[a - fade + k] as f64 + w * r[k] as f64) as f32);
    }
    out.extend_from_slice(&r[fade..fade + core]);
    for k in 0..fade {
        let w = shape.gain(k, fade);
        out.push(((1.0 - w) * r[fade + core + k] as f64 + w * o[b + k] as f64) as f32);
    }
    out.extend_from_slice(&o[b + fade..]);
    AudioClip::new(out, original.sample_rate)
}

/// [`splice_samples`] with the fade length taken from `cfg`.
pub fn splice(original: &AudioClip, region: &AudioClip, cut: (usize, usize), cfg: &CrossfadeConfig) -> Result<AudioClip> {
    let fade = cfg.fade_samples(original.sample_rate)?;
    splice_samples(original, region, cut, fade, cfg.shape)
}

/// Sample index where frame `t` begins in audio of `len` samples.
pub fn cut_sample(spec: &FrameSpec, t: usize, len: usize) -> usize {
    if t == 0 {
        0
    } else {
        spec.frame_to_sample(t).min(len)
    }
}

/// A recording prepared for editing.
#[derive(Clone, Debug)]
pub struct EditSource {
    pub id: String,
    pub features: VocoderFeatures,
    pub phones: PhoneSequence,
    pub alignment: WordAlignment,
    pub raw_audio: Option<AudioClip>,
    pub speaker_embedding: Option<Embedding>,
}

/// Shared resources for running edits.
#[derive(Clone, Copy)]
pub struct EditContext<'a> {
    pub lexicon: &'a Lexicon,
    pub provider: &'a dyn EmbeddingProvider,
    /// Defaults to the baseline vocoder seeded from the request.
    pub vocoder: Option<&'a dyn Vocoder>,
    pub spec: FrameSpec,
    pub attach_metrics: bool,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub audio: AudioClip,
    /// Start and end of the synthesized region in `audio`.
    pub boundaries_samples: (usize, usize),
    /// Region frames in `features`.
    pub region_frames: FrameRange,
    /// Frames the region replaced in the original features.
    pub original_frames: FrameRange,
    pub features: VocoderFeatures,
    pub coarse: VocoderFeatures,
    pub region_features: VocoderFeatures,
    pub durations: Vec<usize>,
    pub fade_samples: usize,
    pub metrics: Option<RegionMetrics>,
    pub request: EditRequest,
}

/// JSON written next to the edited WAV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSidecar {
    pub boundaries_samples: [usize; 2],
    pub region_frames: [usize; 2],
    pub durations: Vec<usize>,
    pub metrics: Option<RegionMetrics>,
    pub config_echo: EditRequest,
}

impl EditResult {
    pub fn sidecar(&self) -> EditSidecar {
        EditSidecar {
            boundaries_samples: [self.boundaries_samples.0, self.boundaries_samples.1],
            region_frames: [self.region_frames.start, self.region_frames.end],
            durations: self.durations.clone(),
            metrics: self.metrics.clone(),
            config_echo: self.request.clone(),
        }
    }
}

/// Full edit: plan, condition on the original, synthesize, vocode, cut the
/// replacement out of the synthesized audio and crossfade it in. Errors
/// carry the name of the stage that produced them.
pub fn edit(request: &EditRequest, model: &AcousticModel, source: &EditSource, ctx: &EditContext<'_>) -> Result<EditResult> {
    if request.utterance_id != source.id {
        return Err(Error::invalid(format!(
            "request is for {}, source is {}",
            request.utterance_id, source.id
        ))
        .at_stage("plan_edit"));
    }
    let modes_ok = request.embedding_mode.is_none_or(|m| m == model.config.embedding_mode)
        && request.ref_mode.is_none_or(|m| m == model.config.ref_mode);
    if !modes_ok {
        return Err(Error::invalid("requested conditioning modes differ from the checkpoint's").at_stage("conditioning"));
    }
    let fade_wanted = request.crossfade().fade_samples(ctx.spec.sample_rate).stage("splice")?;
    let plan = plan_edit(request, &source.phones, &source.alignment, ctx.lexicon).stage("plan_edit")?;

    let baseline = BaselineVocoder { seed: request.seed };
    let vocoder: &dyn Vocoder = ctx.vocoder.unwrap_or(&baseline);
    let original_audio = match request.fusion {
        Fusion::Vocoded => vocoder.synthesize(&source.features, &ctx.spec).stage("vocode")?,
        Fusion::Raw => source
            .raw_audio
            .clone()
            .ok_or_else(|| Error::invalid("raw fusion needs the recording's audio"))
            .stage("vocode")?,
    };

    if plan.is_noop() && !request.tts_baseline {
        let at = cut_sample(&ctx.spec, plan.original_frames.start, original_audio.len());
        return Ok(EditResult {
            audio: original_audio,
            boundaries_samples: (at, at),
            region_frames: plan.original_frames,
            original_frames: plan.original_frames,
            features: source.features.clone(),
            coarse: source.features.clone(),
            region_features: VocoderFeatures::zeros(0),
            durations: source.alignment.phone_durations.clone(),
            fade_samples: 0,
            metrics: None,
            request: request.clone(),
        });
    }

    let bundle = conditioning_from_original(model, &source.features, ctx.provider, source.speaker_embedding.as_ref())
        .stage("conditioning")?;
    let synth = synthesize_edit(&plan, &bundle, model, &source.features).stage("synthesize_edit")?;
    let synth_audio = vocoder.synthesize(&synth.features, &ctx.spec).stage("vocode")?;

    let (a, b) = (
        cut_sample(&ctx.spec, plan.original_frames.start, original_audio.len()),
        cut_sample(&ctx.spec, plan.original_frames.end, original_audio.len()),
    );
    let (sa, sb) = (
        cut_sample(&ctx.spec, synth.region.start, synth_audio.len()),
        cut_sample(&ctx.spec, synth.region.end, synth_audio.len()),
    );
    let fade = fade_wanted
        .min(a)
        .min(sa)
        .min(original_audio.len() - b)
        .min(synth_audio.len() - sb);
    let region_audio = AudioClip::new(synth_audio.samples[sa - fade..sb + fade].to_vec(), synth_audio.sample_rate)
        .stage("extract")?;
    let audio = splice_samples(&original_audio, &region_audio, (a, b), fade, request.crossfade_shape).stage("splice")?;

    let mut result = EditResult {
        audio,
        boundaries_samples: (a, a + (sb - sa)),
        region_frames: synth.region,
        original_frames: plan.original_frames,
        region_features: synth.features.slice(synth.region),
        features: synth.features,
        coarse: synth.coarse,
        durations: synth.durations,
        fade_samples: fade,
        metrics: None,
        request: request.clone(),
    };
    if ctx.attach_metrics {
        result.metrics = Some(evaluate_edit(&result, &source.features, ctx.provider).stage("evaluate_edit")?);
    }
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct TtsResult {
    pub audio: AudioClip,
    pub features: VocoderFeatures,
    pub phones: PhoneSequence,
    pub durations: Vec<usize>,
}

/// Whole-utterance synthesis of `text`: every phone is masked and the
/// decoder context is all zeros. Conditioning comes from `reference`.
/// The phone sequence is framed by silences, as recordings are.
pub fn synthesize_text(
    text: &str,
    model: &AcousticModel,
    reference: &EditSource,
    ctx: &EditContext<'_>,
    seed: u64,
) -> Result<TtsResult> {
    let words = text_to_phones(text, ctx.lexicon).stage("plan_edit")?;
    if words.is_empty() {
        return Err(Error::invalid("nothing to synthesize").at_stage("plan_edit"));
    }
    let sil = ctx.lexicon.silence_id();
    let last = words.word_count() - 1;
    let mut phones = PhoneSequence {
        words: words.words.clone(),
        ..Default::default()
    };
    let framed = std::iter::once((sil, 0, false))
        .chain((0..words.len()).map(|p| (words.phones[p], words.word_index[p], words.is_word_boundary[p])))
        .chain(std::iter::once((sil, last, false)));
    for (i, (p, w, boundary)) in framed.enumerate() {
        phones.phones.push(p);
        phones.word_index.push(w);
        phones.is_word_boundary.push(boundary || i == 0);
    }
    phones.is_word_boundary[1] = false;
    let n = phones.len();
    let plan = EditPlan {
        durations: vec![None; n],
        phone_masked: vec![true; n],
        replaced_phones: 0..n,
        original_phones: 0..0,
        original_frames: FrameRange::new(0, 0),
        word_span: [0, phones.word_count()],
        phones,
    };

    let bundle = conditioning_from_original(model, &reference.features, ctx.provider, reference.speaker_embedding.as_ref())
        .stage("conditioning")?;
    let synth = synthesize_edit(&plan, &bundle, model, &VocoderFeatures::zeros(0)).stage("synthesize_edit")?;
    let baseline = BaselineVocoder { seed };
    let vocoder: &dyn Vocoder = ctx.vocoder.unwrap_or(&baseline);
    let audio = vocoder.synthesize(&synth.features, &ctx.spec).stage("vocode")?;
    Ok(TtsResult {
        audio,
        features: synth.features,
        phones: plan.phones,
        durations: synth.durations,
    })
}

/// Columns of the decoder input that hold the context features.
pub fn context_columns(model: &AcousticModel) -> Range<usize> {
    let start = model.config.decoder_input_width()
        - FEATURE_DIM
        - if model.config.mask_token_on_decoder { model.config.mask_token_dim } else { 0 };
    start..start + FEATURE_DIM
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::FallbackProvider;
    use crate::model::{FeatureNorm, ModelConfig};
    use proptest::prelude::*;

    fn lexicon() -> Lexicon {
        Lexicon::parse("THE DH AH0\nCAT K AE1 T\nSAT S AE1 T\nON AA1 N\nMAT M AE1 T\nDOG D AO1 G\nRAN R AE1 N\n").unwrap()
    }

    fn source_for(text: &str, durations: Vec<usize>) -> (PhoneSequence, WordAlignment, VocoderFeatures) {
        let lex = lexicon();
        let phones = text_to_phones(text, &lex).unwrap();
        assert_eq!(phones.len(), durations.len());
        let frames: usize = durations.iter().sum();
        let mut f = VocoderFeatures::zeros(frames);
        for t in 0..frames {
            let fr = f.frame_mut(t);
            fr[0] = 110.0 + (t % 9) as f32;
            fr[1] = 150.0;
            fr[2] = (t as f32 * 0.2).sin() * 5.0;
            fr[14..19].fill(0.7);
        }
        let record = crate::frontend::ManifestRecord {
            id: "u".into(),
            audio_path: String::new(),
            text: text.into(),
            phones: phones
                .phones
                .iter()
                .map(|&p| lex.phone_name(p).unwrap().to_string())
                .collect::<Vec<_>>()
                .join(" "),
            durations_frames: durations,
            speaker_id: "s".into(),
        };
        let alignment = crate::frontend::ingest_alignment(&record, &f, &phones).unwrap();
        (phones, alignment, f)
    }

    fn four_words() -> (PhoneSequence, WordAlignment, VocoderFeatures) {
        // THE(2) CAT(3) SAT(3) ON(2)
        source_for("the cat sat on", vec![3, 2, 4, 3, 5, 2, 3, 2, 4, 3])
    }

    #[test]
    fn plan_replaces_middle_words() {
        let (phones, al, _) = four_words();
        let lex = lexicon();
        let plan = plan_edit(&EditRequest::new("u", [1, 3], "dog ran"), &phones, &al, &lex).unwrap();
        assert_eq!(plan.phones.words, ["THE", "DOG", "RAN", "ON"]);
        assert_eq!(plan.original_phones, 2..8);
        assert_eq!(plan.replaced_phones, 2..8);
        assert_eq!(plan.original_frames, FrameRange::new(5, 5 + 4 + 3 + 5 + 2 + 3 + 2));
        let expected: Vec<Option<usize>> = [Some(3), Some(2)]
            .into_iter()
            .chain([None; 6])
            .chain([Some(4), Some(3)])
            .collect();
        assert_eq!(plan.durations, expected);
        assert_eq!(plan.phone_masked, expected.iter().map(Option::is_none).collect::<Vec<_>>());
        assert_eq!(plan.phones.word_index, [0, 0, 1, 1, 1, 2, 2, 2, 3, 3]);
    }

    #[test]
    fn plan_edge_cases() {
        let (phones, al, _) = four_words();
        let lex = lexicon();
        let noop = plan_edit(&EditRequest::new("u", [2, 2], ""), &phones, &al, &lex).unwrap();
        assert!(noop.is_noop());
        assert_eq!(noop.phones, phones);

        let (one, one_al, _) = source_for("cat", vec![4, 5, 6]);
        let whole = plan_edit(&EditRequest::new("u", [0, 1], "dog"), &one, &one_al, &lex).unwrap();
        assert!(whole.phone_masked.iter().all(|&m| m));
        assert_eq!(whole.original_frames, FrameRange::new(0, 15));

        assert!(matches!(
            plan_edit(&EditRequest::new("u", [1, 3], "zebra"), &phones, &al, &lex),
            Err(Error::OutOfLexicon(w)) if w == "ZEBRA"
        ));
        assert!(plan_edit(&EditRequest::new("u", [3, 5], "cat"), &phones, &al, &lex).is_err());
        assert!(plan_edit(&EditRequest::new("u", [1, 2], "?!"), &phones, &al, &lex).is_err());

        let deletion = plan_edit(&EditRequest::new("u", [1, 2], ""), &phones, &al, &lex).unwrap();
        assert_eq!(deletion.phones.words, ["THE", "SAT", "ON"]);
        assert!(deletion.replaced_phones.is_empty());

        let mut forced = EditRequest::new("u", [1, 2], "cat");
        forced.force_durations = true;
        let p = plan_edit(&forced, &phones, &al, &lex).unwrap();
        assert_eq!(p.durations[2..5], [Some(4), Some(3), Some(5)]);
        forced.replacement_text = "dog".into();
        assert!(plan_edit(&forced, &phones, &al, &lex).is_err());
    }

    #[test]
    fn edge_silences_stay_as_context() {
        let lex = lexicon();
        let (phones, al, _) = source_for("the cat, sat", vec![2, 2, 3, 3, 3, 6, 2, 2, 2]);
        assert_eq!(phones.phones[5], lex.silence_id());
        let plan = plan_edit(&EditRequest::new("u", [1, 2], "dog"), &phones, &al, &lex).unwrap();
        assert_eq!(plan.original_phones, 2..5);
        assert_eq!(plan.phones.phones[5], lex.silence_id());
        assert_eq!(plan.durations[5], Some(6));
        assert_eq!(plan.phones.word_index[5], 1);
    }

    fn tiny_model(f: &VocoderFeatures, embedding_mode: EmbeddingMode, ref_mode: RefMode) -> AcousticModel {
        let cfg = ModelConfig {
            hidden: 8,
            heads: 2,
            ffn_dim: 8,
            encoder_blocks: 1,
            coarse_blocks: 1,
            fine_blocks: 1,
            embedding_mode,
            ref_mode,
            ..ModelConfig::default()
        };
        AcousticModel::new(cfg, lexicon().inventory().to_vec(), FeatureNorm::fit([f]), 4).unwrap()
    }

    #[test]
    fn synthesis_keeps_context_and_budget() {
        let (phones, al, f) = four_words();
        let lex = lexicon();
        let model = tiny_model(&f, EmbeddingMode::Utterance, RefMode::Variational);
        let provider = FallbackProvider::default();
        let bundle = conditioning_from_original(&model, &f, &provider, None).unwrap();
        assert_eq!(bundle.embedding.as_ref().unwrap(), &embed_utterance(&f, &provider).unwrap());

        let plan = plan_edit(&EditRequest::new("u", [1, 3], "dog ran"), &phones, &al, &lex).unwrap();
        let s = synthesize_edit(&plan, &bundle, &model, &f).unwrap();
        let kept: usize = plan.durations.iter().flatten().sum();
        let predicted: usize = s.durations[plan.replaced_phones.clone()].iter().sum();
        assert_eq!(s.features.frame_count(), kept + predicted);
        assert_eq!(s.region.len(), predicted);

        let orig = model.norm.to_model(&f);
        let cols = context_columns(&model);
        let tail = f.frame_count() - plan.original_frames.end;
        for t in 0..s.features.frame_count() {
            let row = &s.decoder_input.row(t)[cols.clone()];
            if s.region.contains(t) {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                let src = if t < s.region.start { t } else { plan.original_frames.end + (t - s.region.end) };
                assert_eq!(row, orig.row(src), "frame {t}");
            }
        }
        assert_eq!(s.features.frame_count() - s.region.end, tail);

        let mut same = EditRequest::new("u", [1, 3], "cat sat");
        same.force_durations = true;
        let plan = plan_edit(&same, &phones, &al, &lex).unwrap();
        let s = synthesize_edit(&plan, &bundle, &model, &f).unwrap();
        assert_eq!(s.features.frame_count(), f.frame_count());
    }

    #[test]
    fn mismatched_bundle_is_rejected() {
        let (phones, al, f) = four_words();
        let model = tiny_model(&f, EmbeddingMode::None, RefMode::None);
        let plan = plan_edit(&EditRequest::new("u", [1, 2], "dog"), &phones, &al, &lexicon()).unwrap();
        let bundle = ConditioningBundle {
            embedding_mode: EmbeddingMode::Utterance,
            embedding: Some(Embedding::zeros()),
            ..ConditioningBundle::default()
        };
        assert!(synthesize_edit(&plan, &bundle, &model, &f).is_err());
    }

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip::new(samples, 16000).unwrap()
    }

    #[test]
    fn dc_crossfade_is_flat() {
        for shape in [FadeShape::Linear, FadeShape::RaisedCosine] {
            let out = splice_samples(&clip(vec![1.0; 400]), &clip(vec![1.0; 160]), (100, 300), 40, shape).unwrap();
            assert_eq!(out.len(), 100 + 80 + 100);
            assert!(out.samples.iter().all(|&v| (v - 1.0).abs() <= 1e-7));
            for n in [1, 7, 160] {
                for k in 0..n {
                    let w = shape.gain(k, n);
                    assert!((w + (1.0 - w) - 1.0).abs() <= 1e-7 && (0.0..=1.0).contains(&w));
                }
            }
        }
    }

    #[test]
    fn zero_fade_is_hard_concatenation() {
        let o: Vec<f32> = (0..50).map(|i| i as f32).collect();
        let out = splice_samples(&clip(o.clone()), &clip(vec![-1.0; 5]), (10, 20), 0, FadeShape::Linear).unwrap();
        assert_eq!(&out.samples[..10], &o[..10]);
        assert_eq!(&out.samples[10..15], &[-1.0; 5]);
        assert_eq!(&out.samples[15..], &o[20..]);
    }

    #[test]
    fn fade_longer_than_segment_fails() {
        let o = clip(vec![0.0; 100]);
        assert!(splice_samples(&o, &clip(vec![0.0; 30]), (10, 90), 11, FadeShape::Linear).is_err());
        assert!(splice_samples(&o, &clip(vec![0.0; 30]), (20, 85), 16, FadeShape::Linear).is_err());
        assert!(splice(&o, &clip(vec![0.0; 30]), (20, 80), &CrossfadeConfig { fade_ms: -1.0, ..Default::default() }).is_err());
    }

    proptest! {
        #[test]
        fn resplicing_an_extract_is_identity(seed in 0u64..500, a in 40usize..200, len in 0usize..200, fade in 0usize..40, cosine in any::<bool>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let o = clip((0..500).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
            let b = a + len;
            let region = clip(o.samples[a - fade..b + fade].to_vec());
            let shape = if cosine { FadeShape::RaisedCosine } else { FadeShape::Linear };
            let out = splice_samples(&o, &region, (a, b), fade, shape).unwrap();
            prop_assert_eq!(out.len(), o.len());
            for (x, y) in out.samples.iter().zip(&o.samples) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn splice_is_local(seed in 0u64..500, a in 40usize..200, len in 0usize..100, new_len in 0usize..100, fade in 0usize..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let o = clip((0..500).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
            let r = clip((0..new_len + 2 * fade).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
            let b = a + len;
            let out = splice_samples(&o, &r, (a, b), fade, FadeShape::RaisedCosine).unwrap();
            prop_assert_eq!(out.len(), o.len() - len + new_len);
            prop_assert_eq!(&out.samples[..a - fade], &o.samples[..a - fade]);
            let shift = new_len as isize - len as isize;
            let tail = (out.len() as isize - (o.len() - b - fade) as isize) as usize;
            prop_assert_eq!(&out.samples[tail..], &o.samples[b + fade..]);
            prop_assert_eq!(tail as isize, (b + fade) as isize + shift);
        }
    }

    fn context<'a>(lex: &'a Lexicon, provider: &'a FallbackProvider) -> EditContext<'a> {
        EditContext {
            lexicon: lex,
            provider,
            vocoder: None,
            spec: FrameSpec::default(),
            attach_metrics: true,
        }
    }

    fn source() -> EditSource {
        let (phones, alignment, features) = four_words();
        EditSource {
            id: "u".into(),
            features,
            phones,
            alignment,
            raw_audio: None,
            speaker_embedding: None,
        }
    }

    #[test]
    fn noop_edit_returns_vocoded_original() {
        let src = source();
        let model = tiny_model(&src.features, EmbeddingMode::None, RefMode::Standard);
        let (lex, provider) = (lexicon(), FallbackProvider::default());
        let mut req = EditRequest::new("u", [2, 2], "");
        req.seed = 5;
        let r = edit(&req, &model, &src, &context(&lex, &provider)).unwrap();
        let vocoded = BaselineVocoder { seed: 5 }.synthesize(&src.features, &FrameSpec::default()).unwrap();
        assert_eq!(r.audio, vocoded);
    }

    #[test]
    fn two_word_edit_has_expected_shape() {
        let src = source();
        let model = tiny_model(&src.features, EmbeddingMode::Speaker, RefMode::None);
        let (lex, provider) = (lexicon(), FallbackProvider::default());
        let req = EditRequest::new("u", [1, 3], "dog ran");
        let ctx = context(&lex, &provider);
        let r = edit(&req, &model, &src, &ctx).unwrap();
        let (a, b) = r.boundaries_samples;
        assert!(a < b && b <= r.audio.len());
        let hop = ctx.spec.hop as isize;
        let change = (r.region_frames.len() as isize - r.original_frames.len() as isize) * hop;
        assert_eq!(r.audio.len() as isize, (src.features.frame_count() * ctx.spec.hop) as isize + change);
        let again = edit(&req, &model, &src, &ctx).unwrap();
        assert_eq!(again.audio, r.audio);
        let m = r.metrics.as_ref().unwrap();
        assert!(m.speaker_cosine.unwrap().is_finite());
        let json = serde_json::to_string(&r.sidecar()).unwrap();
        let back: EditSidecar = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r.sidecar());
    }

    #[test]
    fn errors_carry_stage_names() {
        let src = source();
        let model = tiny_model(&src.features, EmbeddingMode::None, RefMode::None);
        let (lex, provider) = (lexicon(), FallbackProvider::default());
        let ctx = context(&lex, &provider);
        let err = edit(&EditRequest::new("u", [1, 2], "zebra"), &model, &src, &ctx).unwrap_err();
        assert_eq!(err.stage(), Some("plan_edit"));
        assert!(matches!(err.root(), Error::OutOfLexicon(_)));
        let mut raw = EditRequest::new("u", [1, 2], "dog");
        raw.fusion = Fusion::Raw;
        assert_eq!(edit(&raw, &model, &src, &ctx).unwrap_err().stage(), Some("vocode"));
        let mut modes = EditRequest::new("u", [1, 2], "dog");
        modes.ref_mode = Some(RefMode::Standard);
        assert_eq!(edit(&modes, &model, &src, &ctx).unwrap_err().stage(), Some("conditioning"));
    }

    #[test]
    fn text_synthesis_masks_everything() {
        let src = source();
        let model = tiny_model(&src.features, EmbeddingMode::Utterance, RefMode::Variational);
        let (lex, provider) = (lexicon(), FallbackProvider::default());
        let ctx = context(&lex, &provider);
        let r = synthesize_text("cat", &model, &src, &ctx, 3).unwrap();
        assert_eq!(r.phones.words, ["CAT"]);
        assert_eq!(r.phones.phones.first(), Some(&lex.silence_id()));
        assert_eq!(r.phones.phones.last(), Some(&lex.silence_id()));
        assert_eq!(r.phones.is_word_boundary, [true, false, false, false, false]);
        assert_eq!(r.audio.len(), r.durations.iter().sum::<usize>() * ctx.spec.hop);
        assert!(r.durations.iter().all(|&d| d >= 1));
        let again = synthesize_text("cat", &model, &src, &ctx, 3).unwrap();
        assert_eq!(again.audio, r.audio);
        let err = synthesize_text("zebra", &model, &src, &ctx, 3).unwrap_err();
        assert_eq!(err.stage(), Some("plan_edit"));
    }

    #[test]
    fn request_json_defaults() {
        let req: EditRequest =
            serde_json::from_str(r#"{"utterance_id":"a","word_span":[1,2],"replacement_text":"dog"}"#).unwrap();
        assert_eq!(req.crossfade(), CrossfadeConfig::default());
        assert_eq!(req.fusion, Fusion::Vocoded);
        let full: EditRequest = serde_json::from_str(
            r#"{"utterance_id":"a","word_span":[0,0],"replacement_text":"","embedding_mode":"utterance","ref_mode":"variational","crossfade_ms":5,"seed":3}"#,
        )
        .unwrap();
        assert!(full.is_noop());
        assert_eq!(full.ref_mode, Some(RefMode::Variational));
        assert!(serde_json::from_str::<EditRequest>(r#"{"utterance_id":"a","word_span":[0,0],"replacement_text":"","bogus":1}"#).is_err());
    }
}
