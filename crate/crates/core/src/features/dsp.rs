use std::f64::consts::PI;

pub const MEL_BANDS: usize = 40;
/// Mel-energy floor; log energies are stored relative to it so digital
/// silence maps to all-zero cepstra.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Periodic Hann window; overlap-adds to exactly 1 at 50% overlap.
pub fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Triangular HTK-style mel filterbank over `n_fft/2 + 1` bins.
pub struct MelBank {
    pub filters: Vec<Vec<(usize, f64)>>,
    /// Centre frequencies (mel) per filter.
    pub centres_mel: Vec<f64>,
    /// Sum of each filter's weights.
    pub weight_sums: Vec<f64>,
}

impl MelBank {
    pub fn new(bands: usize, n_fft: usize, sample_rate: f64) -> Self {
        let nyquist = sample_rate / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let points: Vec<f64> = (0..bands + 2)
            .map(|i| lo + (hi - lo) * i as f64 / (bands + 1) as f64)
            .collect();
        let hz: Vec<f64> = points.iter().map(|&m| mel_to_hz(m)).collect();
        let bin_hz = sample_rate / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let mut filters = Vec::with_capacity(bands);
        for j in 0..bands {
            let (l, c, r) = (hz[j], hz[j + 1], hz[j + 2]);
            let mut taps = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((k, w));
                }
            }
            filters.push(taps);
        }
        let weight_sums = filters
            .iter()
            .map(|t| t.iter().map(|(_, w)| w).sum::<f64>().max(1e-12))
            .collect();
        Self {
            filters,
            centres_mel: points[1..=bands].to_vec(),
            weight_sums,
        }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|taps| taps.iter().map(|&(k, w)| w * power[k]).sum())
            .collect()
    }

    /// Linearly interpolates a per-filter quantity at `hz`, clamped at the
    /// outermost centres.
    pub fn interpolate(&self, values: &[f64], hz: f64) -> f64 {
        let m = hz_to_mel(hz);
        let c = &self.centres_mel;
        if m <= c[0] {
            return values[0];
        }
        if m >= c[c.len() - 1] {
            return values[c.len() - 1];
        }
        let j = c.partition_point(|&x| x <= m) - 1;
        let t = (m - c[j]) / (c[j + 1] - c[j]);
        values[j] * (1.0 - t) + values[j + 1] * t
    }
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|i| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(j, v)| v * (PI * i as f64 * (j as f64 + 0.5) / n).cos())
                .sum();
            let norm = if i == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * norm
        })
        .collect()
}

/// Inverse of [`dct2`] for a truncated coefficient vector (missing
/// coefficients treated as zero).
pub fn idct2(c: &[f64], n: usize) -> Vec<f64> {
    let nf = n as f64;
    (0..n)
        .map(|j| {
            c.iter()
                .enumerate()
                .map(|(i, v)| {
                    let norm = if i == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
                    v * norm * (PI * i as f64 * (j as f64 + 0.5) / nf).cos()
                })
                .sum()
        })
        .collect()
}

/// Normalised autocorrelation of `x` at `lag`, using the energies of the
/// two overlapping segments.
pub fn normalized_autocorr(x: &[f64], lag: usize) -> f64 {
    if lag >= x.len() {
        return 0.0;
    }
    let n = x.len() - lag;
    let (a, b) = (&x[..n], &x[lag..]);
    let num = crate::nn::matrix::dot(a, b);
    let ea = crate::nn::matrix::dot(a, a);
    let eb = crate::nn::matrix::dot(b, b);
    let den = (ea * eb).sqrt();
    if den <= 1e-20 {
        0.0
    } else {
        num / den
    }
}
