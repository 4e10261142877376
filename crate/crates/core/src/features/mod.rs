//! Frame-rate vocoder features: per frame one f0 value (Hz, 0 = unvoiced),
//! 13 MFCCs (c0..c12) and 5 band periodicities in `[0, 1]`.

pub(crate) mod dsp;
mod extract;
mod tbvf;
mod vocoder;

use serde::{Deserialize, Serialize};

pub use extract::{extract_features, F0_MAX_HZ, F0_MIN_HZ, VOICING_THRESHOLD};
pub use tbvf::{read_tbvf, read_tbvf_file, write_tbvf, write_tbvf_file, TBVF_MAGIC, TBVF_VERSION};
pub use vocoder::{synthesize_baseline, BaselineVocoder, Vocoder};

use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 19;
pub const MFCC_DIM: usize = 13;
pub const PERIODICITY_DIM: usize = 5;
pub const F0_COL: usize = 0;
pub const MFCC_COLS: std::ops::Range<usize> = 1..14;
pub const PERIODICITY_COLS: std::ops::Range<usize> = 14..19;

/// Lower edges (Hz) of the periodicity bands; the last band runs to Nyquist.
pub const PERIODICITY_BAND_EDGES: [f64; PERIODICITY_DIM] = [0.0, 500.0, 1000.0, 2000.0, 4000.0];

/// Framing convention. Frame `t` analyses samples `[t·hop, t·hop + window)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            hop: 200,
            window: 800,
        }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop == 0 || self.hop > self.window || self.window > 4 * self.hop {
            return Err(Error::invalid(format!(
                "invalid frame spec: need 0 < hop <= window <= 4*hop, got hop {} window {}",
                self.hop, self.window
            )));
        }
        Ok(())
    }

    /// Number of analysis frames for `samples` input samples.
    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        (samples >= self.window).then(|| 1 + (samples - self.window) / self.hop)
    }

    /// First sample "owned" by frame `t` in synthesized audio: frames are
    /// centred at `t·hop + window/2` and own one hop around that centre.
    pub fn frame_to_sample(&self, t: usize) -> usize {
        t * self.hop + (self.window - self.hop) / 2
    }

    pub fn ms_to_samples(&self, ms: f64) -> usize {
        (ms * self.sample_rate as f64 / 1000.0).round() as usize
    }
}

/// Half-open frame interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl FrameRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }
}

/// `T × 19` frame-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct VocoderFeatures {
    data: Vec<f32>,
}

impl VocoderFeatures {
    pub fn zeros(frames: usize) -> Self {
        Self {
            data: vec![0.0; frames * FEATURE_DIM],
        }
    }

    /// Builds from frame-major data, validating the invariants.
    pub fn from_frames(data: Vec<f32>) -> Result<Self> {
        if data.len() % FEATURE_DIM != 0 {
            return Err(Error::Shape(format!(
                "feature data length {} is not a multiple of {FEATURE_DIM}",
                data.len()
            )));
        }
        let f = Self { data };
        f.validate()?;
        Ok(f)
    }

    pub(crate) fn from_frames_unchecked(data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len() % FEATURE_DIM, 0);
        Self { data }
    }

    pub fn validate(&self) -> Result<()> {
        for t in 0..self.frame_count() {
            let fr = self.frame(t);
            if fr.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite feature in frame {t}")));
            }
            if fr[F0_COL] < 0.0 {
                return Err(Error::invalid(format!("negative f0 in frame {t}")));
            }
            if fr[PERIODICITY_COLS].iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("periodicity outside [0,1] in frame {t}")));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.data.len() / FEATURE_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }

    pub fn f0(&self, t: usize) -> f32 {
        self.frame(t)[F0_COL]
    }

    pub fn mfcc(&self, t: usize) -> &[f32] {
        &self.frame(t)[MFCC_COLS]
    }

    pub fn periodicity(&self, t: usize) -> &[f32] {
        &self.frame(t)[PERIODICITY_COLS]
    }

    pub fn f0_track(&self) -> Vec<f32> {
        (0..self.frame_count()).map(|t| self.f0(t)).collect()
    }

    /// Copy of frames in `range`.
    pub fn slice(&self, range: FrameRange) -> Self {
        Self {
            data: self.data[range.start * FEATURE_DIM..range.end * FEATURE_DIM].to_vec(),
        }
    }

    pub fn concat(parts: &[&Self]) -> Self {
        Self {
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        }
    }
}

/// Zeroes all 19 dims on every frame inside `ranges`.
pub fn mask_frames(features: &VocoderFeatures, ranges: &[FrameRange]) -> Result<VocoderFeatures> {
    let frames = features.frame_count();
    let mut sorted: Vec<FrameRange> = ranges.to_vec();
    for r in &sorted {
        if r.start > r.end || r.end > frames {
            return Err(Error::InvalidRange {
                start: r.start,
                end: r.end,
                frames,
            });
        }
    }
    sorted.sort_by_key(|r| (r.start, r.end));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end && !pair[0].is_empty() && !pair[1].is_empty() {
            return Err(Error::OverlappingRanges {
                first: (pair[0].start, pair[0].end),
                second: (pair[1].start, pair[1].end),
            });
        }
    }
    let mut out = features.clone();
    for r in sorted {
        out.data[r.start * FEATURE_DIM..r.end * FEATURE_DIM].fill(0.0);
    }
    Ok(out)
}
