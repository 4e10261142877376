//! Deterministic source-filter synthesizer used as the baseline vocoder.
//!
//! Excitation is a phase-continuous pulse train at f0 plus white noise,
//! mixed per periodicity band; the spectral envelope comes from the MFCCs
//! (inverse DCT to log mel energies, interpolated onto linear frequency).
//! Frames are rendered as Hann-windowed segments of two hops and
//! overlap-added, each centred where the analysis frame was centred.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::dsp::{self, MelBank, LOG_FLOOR, MEL_BANDS};
use super::{FrameSpec, VocoderFeatures, MFCC_COLS, PERIODICITY_BAND_EDGES, PERIODICITY_COLS};
use crate::audio::AudioClip;
use crate::error::Result;

/// Anything that turns vocoder features into audio. The baseline
/// implementation is [`BaselineVocoder`]; neural vocoders plug in here.
pub trait Vocoder: Send + Sync {
    fn synthesize(&self, features: &VocoderFeatures, spec: &FrameSpec) -> Result<AudioClip>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BaselineVocoder {
    pub seed: u64,
}

impl Vocoder for BaselineVocoder {
    fn synthesize(&self, features: &VocoderFeatures, spec: &FrameSpec) -> Result<AudioClip> {
        synthesize_baseline(features, spec, self.seed)
    }
}

/// Renders `T·hop` samples from `features`.
pub fn synthesize_baseline(features: &VocoderFeatures, spec: &FrameSpec, seed: u64) -> Result<AudioClip> {
    spec.validate()?;
    features.validate()?;
    let frames = features.frame_count();
    let hop = spec.hop;
    let out_len = frames * hop;
    if frames == 0 {
        return AudioClip::new(Vec::new(), spec.sample_rate);
    }
    let seg = 2 * hop;
    let sr = spec.sample_rate as f64;
    // Segment of (virtual) frame t starts at t·hop + offset.
    let offset = spec.window as isize / 2 - hop as isize;
    let first = (-(seg as isize) - offset).div_euclid(hop as isize);
    let last = (out_len as isize - offset).div_euclid(hop as isize) + 1;
    let ext_start = first * hop as isize + offset;
    let ext_len = ((last - first) as usize + 1) * hop + seg;

    let frame_of = |t: isize| t.clamp(0, frames as isize - 1) as usize;

    // Excitation over the extended range.
    let mut pulses = vec![0.0f64; ext_len];
    let mut phase = 0.0f64;
    for (i, p) in pulses.iter_mut().enumerate() {
        let n = ext_start + i as isize;
        let t = ((n - spec.window as isize / 2) as f64 / hop as f64).round() as isize;
        let f0 = features.f0(frame_of(t)) as f64;
        if f0 > 0.0 {
            phase += f0 / sr;
            if phase >= 1.0 {
                phase -= phase.floor();
                *p = (sr / f0).sqrt();
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..ext_len).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mel = MelBank::new(MEL_BANDS, spec.window.next_power_of_two(), sr);
    let analysis_energy: f64 = dsp::hann(spec.window).iter().map(|w| w * w).sum();
    let window = dsp::hann_periodic(seg);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(seg);
    let inv = planner.plan_fft_inverse(seg);
    let bin_hz = sr / seg as f64;
    let band_of = |k: usize| {
        let f = k.min(seg - k) as f64 * bin_hz;
        PERIODICITY_BAND_EDGES.iter().rposition(|&e| f >= e).unwrap_or(0)
    };

    let mut out = vec![0.0f64; out_len];
    for t in first..=last {
        let frame = features.frame(frame_of(t));
        let start = t * hop as isize + offset;
        if start >= out_len as isize || start + seg as isize <= 0 {
            continue;
        }
        let local = (start - ext_start) as usize;

        let cep: Vec<f64> = frame[MFCC_COLS].iter().map(|&c| c as f64).collect();
        let log_gain: Vec<f64> = dsp::idct2(&cep, MEL_BANDS)
            .iter()
            .zip(&mel.weight_sums)
            .map(|(lm, ws)| lm + LOG_FLOOR.ln() - (analysis_energy * ws).ln())
            .collect();
        let voiced = frame[0] > 0.0;
        let per = &frame[PERIODICITY_COLS];

        let mut p: Vec<Complex<f64>> = (0..seg)
            .map(|i| Complex::new(pulses[local + i] * window[i], 0.0))
            .collect();
        let mut w: Vec<Complex<f64>> = (0..seg)
            .map(|i| Complex::new(noise[local + i] * window[i], 0.0))
            .collect();
        fwd.process(&mut p);
        fwd.process(&mut w);
        let mut y: Vec<Complex<f64>> = (0..seg)
            .map(|k| {
                let f = k.min(seg - k) as f64 * bin_hz;
                let amp = (0.5 * mel.interpolate(&log_gain, f)).exp();
                let (gv, gn) = if voiced {
                    let v = per[band_of(k)] as f64;
                    (v.sqrt(), (1.0 - v).sqrt())
                } else {
                    (0.0, 1.0)
                };
                (p[k] * gv + w[k] * gn) * amp
            })
            .collect();
        inv.process(&mut y);
        for (i, v) in y.iter().enumerate() {
            let n = start + i as isize;
            if n >= 0 && (n as usize) < out_len {
                out[n as usize] += v.re / seg as f64;
            }
        }
    }
    AudioClip::new(out.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(), spec.sample_rate)
}
