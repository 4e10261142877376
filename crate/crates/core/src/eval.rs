//! Objective metrics for edits: cepstral distortion, pitch error, voicing
//! agreement, embedding similarity and a splice-audibility score.

use std::io::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::conditioning::{embed_utterance, EmbeddingProvider, EMBED_DIM};
use crate::editing::EditResult;
use crate::error::{Error, Result};
use crate::exec;
use crate::features::dsp::hann;
use crate::features::{FrameRange, VocoderFeatures, MFCC_COLS};
use crate::fsutil::write_atomic;

/// `10 / ln 10 · √2`.
pub fn mcd_constant() -> f64 {
    10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2
}

/// Mean mel-cepstral distortion in dB over cepstra 1..=12 (c0 excluded).
pub fn mcd(pred: &VocoderFeatures, reference: &VocoderFeatures) -> Result<f64> {
    let n = pred.frame_count();
    if n != reference.frame_count() {
        return Err(Error::Shape(format!(
            "mcd needs equal frame counts, got {n} and {}",
            reference.frame_count()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyFrames);
    }
    let cols = MFCC_COLS.start + 1..MFCC_COLS.end;
    let total: f64 = (0..n)
        .map(|t| {
            let (p, r) = (&pred.frame(t)[cols.clone()], &reference.frame(t)[cols.clone()]);
            p.iter()
                .zip(r)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(mcd_constant() * total / n as f64)
}

/// RMSE of f0 (Hz) over frames voiced in both inputs, absent when there
/// are none, and the fraction of frames whose voicing decisions differ.
pub fn f0_rmse_and_vuv(pred: &VocoderFeatures, reference: &VocoderFeatures) -> Result<(Option<f64>, f64)> {
    let n = pred.frame_count();
    if n != reference.frame_count() {
        return Err(Error::Shape(format!(
            "f0 comparison needs equal frame counts, got {n} and {}",
            reference.frame_count()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyFrames);
    }
    let mut sq = 0.0;
    let mut both = 0usize;
    let mut disagree = 0usize;
    for t in 0..n {
        let (p, r) = (pred.f0(t) as f64, reference.f0(t) as f64);
        match (p > 0.0, r > 0.0) {
            (true, true) => {
                sq += (p - r).powi(2);
                both += 1;
            }
            (a, b) if a != b => disagree += 1,
            _ => {}
        }
    }
    let rmse = (both > 0).then(|| (sq / both as f64).sqrt());
    Ok((rmse, disagree as f64 / n as f64))
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn speaker_cosine(
    edited: &VocoderFeatures,
    unedited: &VocoderFeatures,
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    let a = embed_utterance(edited, provider)?;
    let b = embed_utterance(unedited, provider)?;
    Ok(cosine(a.as_slice(), b.as_slice()))
}

/// Length of the analysis windows on either side of a point.
pub const FLUX_FRAME_MS: f64 = 25.0;
/// Spacing of the points the change track is evaluated at.
pub const FLUX_HOP_MS: f64 = 5.0;
/// Half-width of the window searched around each boundary.
pub const BOUNDARY_WINDOW_MS: f64 = 50.0;

struct ChangeTrack {
    values: Vec<f64>,
    /// Sample position of each value.
    positions: Vec<usize>,
}

/// RMS difference of log magnitude spectra between the windows just
/// before and just after each grid point. Magnitudes are floored relative
/// to the loudest bin of the clip, so the track ignores global gain.
fn spectral_change(audio: &AudioClip) -> Result<ChangeTrack> {
    let sr = audio.sample_rate as f64;
    let frame = (FLUX_FRAME_MS * sr / 1000.0).round() as usize;
    let hop = (FLUX_HOP_MS * sr / 1000.0).round().max(1.0) as usize;
    if audio.len() < 2 * frame + hop {
        return Err(Error::TooShort {
            samples: audio.len(),
            window: 2 * frame + hop,
        });
    }
    let frames = 1 + (audio.len() - frame) / hop;
    let n_fft = frame.next_power_of_two();
    let window = hann(frame);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let spectra: Vec<Vec<f64>> = exec::map_range(frames, |k| {
        let mut buf: Vec<Complex<f64>> = (0..n_fft)
            .map(|i| {
                let v = if i < frame { audio.samples[k * hop + i] as f64 * window[i] } else { 0.0 };
                Complex::new(v, 0.0)
            })
            .collect();
        fft.process(&mut buf);
        buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect()
    });
    let peak = spectra.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let floor = (peak * 1e-6).max(f64::MIN_POSITIVE);
    let logs: Vec<Vec<f64>> = spectra
        .iter()
        .map(|s| s.iter().map(|&v| v.max(floor).ln()).collect())
        .collect();
    // Frame k covers [k·hop, k·hop + frame); the frame ending at a point p
    // and the one starting there are `frame / hop` frames apart.
    let gap = frame.div_ceil(hop);
    let mut values = Vec::new();
    let mut positions = Vec::new();
    for k in 0..frames.saturating_sub(gap) {
        let (l, r) = (&logs[k], &logs[k + gap]);
        let ms = l.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / l.len() as f64;
        values.push(ms.sqrt());
        positions.push(k * hop + frame);
    }
    Ok(ChangeTrack { values, positions })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Samples of clearance a boundary needs from either clip edge.
pub fn boundary_margin(sample_rate: u32) -> usize {
    (FLUX_FRAME_MS * sample_rate as f64 / 1000.0).round() as usize
}

/// Largest spectral change within ±50 ms of any boundary, relative to the
/// clip's median change. Around 1 for an unremarkable point; large values
/// mark an abrupt change in level or timbre.
pub fn boundary_discontinuity(audio: &AudioClip, boundaries: &[usize]) -> Result<f64> {
    let margin = boundary_margin(audio.sample_rate);
    if let Some(&b) = boundaries.iter().find(|&&b| b < margin || b + margin > audio.len()) {
        return Err(Error::invalid(format!(
            "boundary at sample {b} is within {margin} samples of the clip edge ({} samples)",
            audio.len()
        )));
    }
    let track = spectral_change(audio)?;
    let half = (BOUNDARY_WINDOW_MS * audio.sample_rate as f64 / 1000.0).round() as usize;
    let mut base = median(&track.values);
    if base == 0.0 {
        base = track.values.iter().sum::<f64>() / track.values.len().max(1) as f64;
    }
    if base == 0.0 {
        return Ok(0.0);
    }
    let peak = boundaries
        .iter()
        .map(|&b| {
            track
                .values
                .iter()
                .zip(&track.positions)
                .filter(|(_, &p)| p.abs_diff(b) <= half)
                .map(|(&v, _)| v)
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Ok(peak / base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    /// Absent when the region changed length.
    pub mcd_db: Option<f64>,
    pub f0_rmse_hz: Option<f64>,
    #[serde(rename = "vuv_error")]
    pub vuv_error_rate: Option<f64>,
    /// Absent for deletions (no synthesized region).
    pub speaker_cosine: Option<f64>,
    #[serde(rename = "boundary_score")]
    pub boundary_discontinuity: f64,
}

impl RegionMetrics {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: Option<f64>| v.is_none_or(f64::is_finite);
        let ok = finite(self.mcd_db)
            && finite(self.f0_rmse_hz)
            && self.vuv_error_rate.is_none_or(|v| (0.0..=1.0).contains(&v))
            && self.speaker_cosine.is_none_or(|v| (-1.0..=1.0).contains(&v))
            && self.boundary_discontinuity.is_finite()
            && self.boundary_discontinuity >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("metrics out of range: {self:?}")))
        }
    }
}

/// Metrics of an edit against the recording it was made from. Frame-level
/// comparisons need the region to keep its length; boundaries too close to
/// the clip edge are moved inward to the nearest admissible sample.
pub fn evaluate_edit(
    result: &EditResult,
    original: &VocoderFeatures,
    provider: &dyn EmbeddingProvider,
) -> Result<RegionMetrics> {
    if result.original_frames.end > original.frame_count() {
        return Err(Error::InvalidRange {
            start: result.original_frames.start,
            end: result.original_frames.end,
            frames: original.frame_count(),
        });
    }
    let reference = original.slice(result.original_frames);
    let region = &result.region_features;
    let (mcd_db, f0_rmse_hz, vuv_error_rate) =
        if region.frame_count() == reference.frame_count() && region.frame_count() > 0 {
            let (rmse, vuv) = f0_rmse_and_vuv(region, &reference)?;
            (Some(mcd(region, &reference)?), rmse, Some(vuv))
        } else {
            (None, None, None)
        };
    let speaker_cosine = if region.frame_count() > 0 {
        let rest = VocoderFeatures::concat(&[
            &original.slice(FrameRange::new(0, result.original_frames.start)),
            &original.slice(FrameRange::new(result.original_frames.end, original.frame_count())),
        ]);
        let unedited = if rest.frame_count() > 0 { &rest } else { original };
        Some(speaker_cosine(region, unedited, provider)?)
    } else {
        None
    };
    let audio = &result.audio;
    let margin = boundary_margin(audio.sample_rate);
    if audio.len() < 2 * margin {
        return Err(Error::TooShort {
            samples: audio.len(),
            window: 2 * margin,
        });
    }
    let (a, b) = result.boundaries_samples;
    let clamp = |s: usize| s.clamp(margin, audio.len() - margin);
    let boundary = boundary_discontinuity(audio, &[clamp(a), clamp(b)])?;
    let m = RegionMetrics {
        mcd_db,
        f0_rmse_hz,
        vuv_error_rate,
        speaker_cosine,
        boundary_discontinuity: boundary,
    };
    m.validate()?;
    Ok(m)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub edit_id: String,
    #[serde(flatten)]
    pub metrics: RegionMetrics,
}

pub fn write_metrics_jsonl(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    write_atomic(path.as_ref(), &out)
}

pub fn read_metrics_jsonl(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Per-metric mean over the records that have the metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub edits: usize,
    pub mcd_db: Option<f64>,
    pub f0_rmse_hz: Option<f64>,
    pub vuv_error: Option<f64>,
    pub speaker_cosine: Option<f64>,
    pub boundary_score: Option<f64>,
}

pub fn summarize(records: &[MetricsRecord]) -> MetricsSummary {
    let mean = |f: &dyn Fn(&RegionMetrics) -> Option<f64>| {
        let v: Vec<f64> = records.iter().filter_map(|r| f(&r.metrics)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    MetricsSummary {
        edits: records.len(),
        mcd_db: mean(&|m| m.mcd_db),
        f0_rmse_hz: mean(&|m| m.f0_rmse_hz),
        vuv_error: mean(&|m| m.vuv_error_rate),
        speaker_cosine: mean(&|m| m.speaker_cosine),
        boundary_score: mean(&|m| Some(m.boundary_discontinuity)),
    }
}

impl MetricsSummary {
    /// Plain-text table, one metric per row.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let rows = [
            ("mcd_db", self.mcd_db),
            ("f0_rmse_hz", self.f0_rmse_hz),
            ("vuv_error", self.vuv_error),
            ("speaker_cosine", self.speaker_cosine),
            ("boundary_score", self.boundary_score),
        ];
        let mut s = format!("{:<16}{:>12}\n{:<16}{:>12}\n", "metric", "mean", "edits", self.edits);
        for (name, v) in rows {
            s.push_str(&format!("{name:<16}{:>12}\n", fmt(v)));
        }
        s
    }
}

/// Utterance to embed for [`export_embeddings`].
pub struct EmbeddingItem<'a> {
    pub utterance_id: &'a str,
    pub speaker_id: &'a str,
    pub features: &'a VocoderFeatures,
}

/// CSV with a header row and one row per utterance, ordered by id:
/// `utterance_id,speaker_id,e0,…,e31`.
pub fn export_embeddings(items: &[EmbeddingItem<'_>], provider: &dyn EmbeddingProvider) -> Result<String> {
    let mut order: Vec<&EmbeddingItem<'_>> = items.iter().collect();
    order.sort_by(|a, b| a.utterance_id.cmp(b.utterance_id));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["utterance_id".to_string(), "speaker_id".to_string()];
    header.extend((0..EMBED_DIM).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for item in order {
        let e = embed_utterance(item.features, provider)?;
        let mut row = vec![item.utterance_id.to_string(), item.speaker_id.to_string()];
        row.extend(e.as_slice().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{Embedding, FallbackProvider};
    use crate::features::{synthesize_baseline, FrameSpec, FEATURE_DIM};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(rows: &[[f32; FEATURE_DIM]]) -> VocoderFeatures {
        VocoderFeatures::from_frames(rows.iter().flatten().copied().collect()).unwrap()
    }

    fn random_feats(rng: &mut ChaCha8Rng, n: usize) -> VocoderFeatures {
        let data = (0..n * FEATURE_DIM)
            .map(|i| match i % FEATURE_DIM {
                0 if rng.gen_bool(0.3) => 0.0,
                0 => rng.gen_range(80.0..300.0),
                c if c >= 14 => rng.gen_range(0.0..1.0),
                _ => rng.gen_range(-20.0..20.0),
            })
            .collect();
        VocoderFeatures::from_frames(data).unwrap()
    }

    #[test]
    fn mcd_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_feats(&mut rng, 6);
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for t in 0..6 {
            for c in 2..14 {
                b.frame_mut(t)[c] += 1.0;
            }
            // c0 changes do not count.
            b.frame_mut(t)[1] += 50.0;
        }
        let expected = 10.0 / 10f64.ln() * (2.0 * 12.0f64).sqrt();
        assert!((mcd(&a, &b).unwrap() - expected).abs() < 1e-6);
        assert!((expected - 21.28).abs() < 0.005);

        let mut one = [[0.0f32; FEATURE_DIM]; 1];
        let zero = feats(&one);
        one[0][5] = 1.0;
        let single = mcd(&zero, &feats(&one)).unwrap();
        assert!((single - 10.0 / 10f64.ln() * 2f64.sqrt()).abs() < 1e-9);
        assert!(mcd(&zero, &a).is_err());
    }

    #[test]
    fn f0_hand_cases() {
        let mut p = [[0.0f32; FEATURE_DIM]; 3];
        let mut r = [[0.0f32; FEATURE_DIM]; 3];
        p[0][0] = 103.0;
        r[0][0] = 100.0;
        p[1][0] = 204.0;
        r[1][0] = 200.0;
        r[2][0] = 150.0;
        let (rmse, vuv) = f0_rmse_and_vuv(&feats(&p), &feats(&r)).unwrap();
        assert!((rmse.unwrap() - (12.5f64).sqrt()).abs() < 1e-9);
        assert!((vuv - 1.0 / 3.0).abs() < 1e-12);

        let (same_rmse, same_vuv) = f0_rmse_and_vuv(&feats(&r), &feats(&r)).unwrap();
        assert_eq!((same_rmse, same_vuv), (Some(0.0), 0.0));

        let unvoiced = feats(&[[0.0; FEATURE_DIM]; 3]);
        let mut voiced = [[0.0f32; FEATURE_DIM]; 3];
        voiced.iter_mut().for_each(|f| f[0] = 120.0);
        assert_eq!(f0_rmse_and_vuv(&unvoiced, &feats(&voiced)).unwrap(), (None, 1.0));
    }

    #[test]
    fn cosine_hand_cases() {
        let mut a = [0.0f32; EMBED_DIM];
        a[0] = 1.0;
        let mut b = [0.0f32; EMBED_DIM];
        b[0] = std::f32::consts::FRAC_1_SQRT_2;
        b[1] = std::f32::consts::FRAC_1_SQRT_2;
        let expected = 1.0 / 2f64.sqrt();
        assert!((cosine(&a, &b) - expected).abs() < 1e-7);
        let mut c = [0.0f32; EMBED_DIM];
        c[1] = 3.0;
        assert_eq!(cosine(&a, &c), 0.0);
        assert_eq!(cosine(&a, &a), 1.0);
    }

    struct Fixed(Vec<f32>, Vec<f32>);

    impl EmbeddingProvider for Fixed {
        fn embed(&self, f: &VocoderFeatures) -> Result<Embedding> {
            Embedding::new(if f.frame_count() == 1 { self.0.clone() } else { self.1.clone() })
        }

        fn name(&self) -> String {
            "fixed".into()
        }
    }

    #[test]
    fn speaker_cosine_uses_the_provider() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_feats(&mut rng, 10);
        let provider = FallbackProvider::default();
        assert!((speaker_cosine(&f, &f, &provider).unwrap() - 1.0).abs() < 1e-9);
        let mut x = vec![0.0; EMBED_DIM];
        x[0] = 1.0;
        let mut y = vec![0.0; EMBED_DIM];
        y[5] = -2.0;
        let orth = Fixed(x, y);
        assert_eq!(speaker_cosine(&random_feats(&mut rng, 1), &f, &orth).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn metric_invariants(seed in 0u64..1000, n in 1usize..12, scale in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_feats(&mut rng, n);
            let b = random_feats(&mut rng, n);
            prop_assert_eq!(mcd(&a, &b).unwrap(), mcd(&b, &a).unwrap());
            let (rmse, vuv) = f0_rmse_and_vuv(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&vuv));
            let perm: Vec<usize> = (0..n).rev().collect();
            let permute = |f: &VocoderFeatures| VocoderFeatures::from_frames(perm.iter().flat_map(|&t| f.frame(t).to_vec()).collect()).unwrap();
            let (prmse, pvuv) = f0_rmse_and_vuv(&permute(&a), &permute(&b)).unwrap();
            prop_assert_eq!(vuv, pvuv);
            match (rmse, prmse) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0)),
                (x, y) => prop_assert_eq!(x, y),
            }
            let (_, self_vuv) = f0_rmse_and_vuv(&a, &a).unwrap();
            prop_assert_eq!(self_vuv, 0.0);

            let u: Vec<f32> = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = cosine(&u, &v);
            prop_assert!((-1.0..=1.0).contains(&c));
            let scaled: Vec<f32> = u.iter().map(|x| x * scale).collect();
            prop_assert!((cosine(&scaled, &v) - c).abs() < 1e-6);
        }
    }

    fn noise(rng: &mut ChaCha8Rng, n: usize, amp: f32) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-amp..amp)).collect()
    }

    #[test]
    fn continuous_clip_scores_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = AudioClip::new(noise(&mut rng, 16000, 0.3), 16000).unwrap();
        let s = boundary_discontinuity(&clip, &[8000]).unwrap();
        assert!((0.5..=2.0).contains(&s), "score {s}");

        let mut f = VocoderFeatures::zeros(80);
        for t in 0..80 {
            let fr = f.frame_mut(t);
            fr[0] = 120.0;
            fr[1] = 150.0;
            fr[2] = 6.0;
            fr[14..19].copy_from_slice(&[0.9, 0.8, 0.6, 0.4, 0.2]);
        }
        let vocoded = synthesize_baseline(&f, &FrameSpec::default(), 0).unwrap();
        let v = boundary_discontinuity(&vocoded, &[vocoded.len() / 2]).unwrap();
        assert!((0.5..=2.0).contains(&v), "vocoded score {v}");
    }

    #[test]
    fn hard_concatenation_stands_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut joined = noise(&mut rng, 8000, 0.05);
        joined.extend(noise(&mut rng, 8000, 0.5));
        let clip = AudioClip::new(joined, 16000).unwrap();
        let at_join = boundary_discontinuity(&clip, &[8000]).unwrap();
        let interior = boundary_discontinuity(&clip, &[12000]).unwrap();
        assert!(at_join > interior, "{at_join} vs {interior}");
    }

    #[test]
    fn score_ignores_gain_and_checks_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = noise(&mut rng, 6000, 0.1);
        s.extend(noise(&mut rng, 6000, 0.4));
        let clip = AudioClip::new(s.clone(), 16000).unwrap();
        let louder = AudioClip::new(s.iter().map(|v| v * 2.0).collect(), 16000).unwrap();
        let (a, b) = (
            boundary_discontinuity(&clip, &[6000]).unwrap(),
            boundary_discontinuity(&louder, &[6000]).unwrap(),
        );
        assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
        assert!(boundary_discontinuity(&clip, &[10]).is_err());
        assert!(boundary_discontinuity(&clip, &[11990]).is_err());
    }

    #[test]
    fn metrics_jsonl_round_trips_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records: Vec<MetricsRecord> = (0..3)
            .map(|i| MetricsRecord {
                edit_id: format!("e{i}"),
                metrics: RegionMetrics {
                    mcd_db: Some(1.0 / 3.0 + i as f64),
                    f0_rmse_hz: (i != 1).then_some(0.1),
                    vuv_error_rate: Some(0.25),
                    speaker_cosine: Some(0.987654321),
                    boundary_discontinuity: 1.2345678901234567,
                },
            })
            .collect();
        write_metrics_jsonl(&path, &records).unwrap();
        assert_eq!(read_metrics_jsonl(&path).unwrap(), records);
        let line = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["edit_id", "mcd_db", "f0_rmse_hz", "vuv_error", "speaker_cosine", "boundary_score"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        let summary = summarize(&records);
        assert_eq!(summary.edits, 3);
        assert_eq!(summary.f0_rmse_hz, Some(0.1));
        assert!(summary.table().contains("boundary_score"));
    }

    #[test]
    fn embedding_export_is_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fs: Vec<VocoderFeatures> = (0..3).map(|_| random_feats(&mut rng, 5)).collect();
        let items = [
            EmbeddingItem { utterance_id: "c", speaker_id: "s1", features: &fs[0] },
            EmbeddingItem { utterance_id: "a", speaker_id: "s2", features: &fs[1] },
            EmbeddingItem { utterance_id: "b", speaker_id: "s1", features: &fs[2] },
        ];
        let csv_text = export_embeddings(&items, &FallbackProvider::default()).unwrap();
        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        assert_eq!(reader.headers().unwrap().len(), 2 + EMBED_DIM);
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 3);
        let ids: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(rows.iter().all(|r| r.len() == 2 + EMBED_DIM));
    }
}
