use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::dsp::{self, MelBank, LOG_FLOOR, MEL_BANDS};
use super::{FrameSpec, VocoderFeatures, FEATURE_DIM, MFCC_DIM, PERIODICITY_BAND_EDGES, PERIODICITY_DIM};
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::exec;

pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 500.0;
/// Peak normalised autocorrelation below which a frame is unvoiced.
pub const VOICING_THRESHOLD: f64 = 0.3;
/// Candidate lags within this fraction of the best peak are preferred when
/// shorter, which suppresses octave-down errors.
const OCTAVE_TOLERANCE: f64 = 0.85;
/// Mean-square level treated as digital silence.
const SILENCE_POWER: f64 = 1e-10;

struct Analyzer {
    spec: FrameSpec,
    window: Vec<f64>,
    mel: MelBank,
    mfcc_fft: Arc<dyn Fft<f64>>,
    mfcc_size: usize,
    band_fwd: Arc<dyn Fft<f64>>,
    band_inv: Arc<dyn Fft<f64>>,
    band_size: usize,
    lag_min: usize,
    lag_max: usize,
}

impl Analyzer {
    fn new(spec: FrameSpec) -> Self {
        let mut planner = FftPlanner::new();
        let mfcc_size = spec.window.next_power_of_two();
        let band_size = (2 * spec.window).next_power_of_two();
        let sr = spec.sample_rate as f64;
        let lag_min = (sr / F0_MAX_HZ).ceil() as usize;
        let lag_max = ((sr / F0_MIN_HZ).floor() as usize).min(spec.window.saturating_sub(2));
        Self {
            spec,
            window: dsp::hann(spec.window),
            mel: MelBank::new(MEL_BANDS, mfcc_size, sr),
            mfcc_fft: planner.plan_fft_forward(mfcc_size),
            mfcc_size,
            band_fwd: planner.plan_fft_forward(band_size),
            band_inv: planner.plan_fft_inverse(band_size),
            band_size,
            lag_min: lag_min.max(2),
            lag_max,
        }
    }

    fn frame(&self, x: &[f32]) -> [f32; FEATURE_DIM] {
        let mut out = [0.0f32; FEATURE_DIM];
        let raw: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mfcc = self.mfcc(&raw);
        for (o, c) in out[1..1 + MFCC_DIM].iter_mut().zip(&mfcc) {
            *o = *c as f32;
        }

        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let centred: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        let power = centred.iter().map(|v| v * v).sum::<f64>() / n;
        if power < SILENCE_POWER {
            return out;
        }
        let (lag, peak) = self.best_lag(&centred);
        if peak >= VOICING_THRESHOLD {
            out[0] = (self.spec.sample_rate as f64 / lag) as f32;
        }
        let per = self.band_periodicity(&centred, lag.round() as usize);
        for (o, p) in out[14..].iter_mut().zip(&per) {
            *o = *p as f32;
        }
        out
    }

    fn mfcc(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.mfcc_size];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.mfcc_fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.mfcc_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let logmel: Vec<f64> = self
            .mel
            .apply(&power)
            .into_iter()
            .map(|e| e.max(LOG_FLOOR).ln() - LOG_FLOOR.ln())
            .collect();
        dsp::dct2(&logmel, MFCC_DIM)
    }

    /// Best pitch lag (fractional, samples) and its correlation peak.
    fn best_lag(&self, x: &[f64]) -> (f64, f64) {
        let lo = self.lag_min - 1;
        let hi = self.lag_max + 1;
        let r: Vec<f64> = (lo..=hi).map(|lag| dsp::normalized_autocorr(x, lag)).collect();
        let at = |lag: usize| r[lag - lo];
        let best = (self.lag_min..=self.lag_max)
            .map(at)
            .fold(f64::NEG_INFINITY, f64::max);
        let chosen = (self.lag_min..=self.lag_max)
            .find(|&l| at(l) >= OCTAVE_TOLERANCE * best && at(l) >= at(l - 1) && at(l) >= at(l + 1))
            .unwrap_or_else(|| {
                (self.lag_min..=self.lag_max)
                    .max_by(|&a, &b| at(a).total_cmp(&at(b)))
                    .unwrap_or(self.lag_min)
            });
        let (a, b, c) = (at(chosen - 1), at(chosen), at(chosen + 1));
        let denom = a - 2.0 * b + c;
        let delta = if denom.abs() > 1e-12 {
            (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        (chosen as f64 + delta, b)
    }

    fn band_periodicity(&self, x: &[f64], lag: usize) -> [f64; PERIODICITY_DIM] {
        let size = self.band_size;
        let mut spectrum: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); size];
        for (b, &v) in spectrum.iter_mut().zip(x) {
            b.re = v;
        }
        self.band_fwd.process(&mut spectrum);
        let total: f64 = x.iter().map(|v| v * v).sum();
        let bin_hz = self.spec.sample_rate as f64 / size as f64;
        let nyquist = self.spec.sample_rate as f64 / 2.0;
        let mut out = [0.0; PERIODICITY_DIM];
        for (b, o) in out.iter_mut().enumerate() {
            let lo = PERIODICITY_BAND_EDGES[b];
            let hi = PERIODICITY_BAND_EDGES.get(b + 1).copied().unwrap_or(nyquist + bin_hz);
            let mut band = spectrum.clone();
            for (k, c) in band.iter_mut().enumerate() {
                let f = k.min(size - k) as f64 * bin_hz;
                if f < lo || f >= hi {
                    *c = Complex::new(0.0, 0.0);
                }
            }
            self.band_inv.process(&mut band);
            let sig: Vec<f64> = band[..x.len()].iter().map(|c| c.re / size as f64).collect();
            let energy: f64 = sig.iter().map(|v| v * v).sum();
            if energy <= 1e-6 * total {
                continue;
            }
            *o = dsp::normalized_autocorr(&sig, lag).clamp(0.0, 1.0);
        }
        out
    }
}

/// Frame-rate analysis: autocorrelation f0 (50–500 Hz, unvoiced below a
/// 0.3 peak), 13 MFCCs from a 40-band mel filterbank, and per-band
/// periodicity at the pitch lag.
pub fn extract_features(audio: &AudioClip, spec: &FrameSpec) -> Result<VocoderFeatures> {
    spec.validate()?;
    if audio.sample_rate != spec.sample_rate {
        return Err(Error::invalid(format!(
            "sample rate {} does not match the configured {}",
            audio.sample_rate, spec.sample_rate
        )));
    }
    let frames = spec.frame_count(audio.len()).ok_or(Error::TooShort {
        samples: audio.len(),
        window: spec.window,
    })?;
    let analyzer = Analyzer::new(*spec);
    let rows = exec::map_range(frames, |t| {
        let start = t * spec.hop;
        analyzer.frame(&audio.samples[start..start + spec.window])
    });
    Ok(VocoderFeatures::from_frames_unchecked(rows.concat()))
}
