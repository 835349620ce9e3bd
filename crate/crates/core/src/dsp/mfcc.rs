use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::stft::power_spectrogram;
use super::{AudioClip, FeatureKind, FeatureMatrix, HOP, SAMPLE_RATE};
use crate::error::{CoreError, Result};

/// Floor applied to mel energies before the log.
const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub include_deltas: bool,
    pub delta_width: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            n_coeffs: 13,
            fft_size: 1024,
            hop: HOP,
            include_deltas: true,
            delta_width: 5,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(CoreError::invalid(d));
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return bad(format!("n_coeffs {} must be in 1..={}", self.n_coeffs, self.n_mels));
        }
        if self.hop == 0 || SAMPLE_RATE as usize % self.hop != 0 {
            return bad(format!("hop {} must divide the sample rate", self.hop));
        }
        if self.fft_size < 2 {
            return bad("fft_size too small".into());
        }
        if self.delta_width < 3 || self.delta_width % 2 == 0 {
            return bad(format!("delta_width {} must be odd and >= 3", self.delta_width));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= SAMPLE_RATE as f64 / 2.0) {
            return bad(format!("mel range {}..{} Hz", self.fmin, self.fmax));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        if self.include_deltas {
            3 * self.n_coeffs
        } else {
            self.n_coeffs
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale over `n_fft / 2 + 1` bins.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, rate: f64, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * rate / n_fft as f64;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct_ii(x: &[f64], n_out: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum();
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * scale
        })
        .collect()
}

/// Floored log mel energies per frame.
pub fn log_mel(clip: &AudioClip, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(CoreError::invalid(format!(
            "mfcc expects {SAMPLE_RATE} Hz input, got {}",
            clip.sample_rate()
        )));
    }
    let spec = power_spectrogram(clip.samples(), cfg.fft_size, cfg.fft_size, cfg.hop);
    let bank = mel_filterbank(cfg.n_mels, cfg.fft_size, SAMPLE_RATE as f64, cfg.fmin, cfg.fmax);
    Ok(spec
        .iter()
        .map(|p| {
            bank.iter()
                .map(|filt| {
                    let e: f64 = filt.iter().zip(p).map(|(w, v)| w * v).sum();
                    e.max(LOG_FLOOR).ln()
                })
                .collect()
        })
        .collect())
}

/// MFCCs at `sample_rate / hop` frames per second, optionally with deltas
/// and delta-deltas appended. Clips shorter than one window give `T = 0`.
pub fn mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    let frames = log_mel(clip, cfg)?;
    let t = frames.len();
    let rate = SAMPLE_RATE as f32 / cfg.hop as f32;
    let mut values = Vec::with_capacity(t * cfg.n_coeffs);
    for lm in &frames {
        values.extend(dct_ii(lm, cfg.n_coeffs).into_iter().map(|v| v as f32));
    }
    let base = FeatureMatrix::new(values, t, cfg.n_coeffs, rate, FeatureKind::Mfcc)?;
    if !cfg.include_deltas {
        return Ok(base);
    }
    let d1 = deltas(&base, cfg.delta_width)?;
    let d2 = deltas(&d1, cfg.delta_width)?;
    base.hstack(&d1)?.hstack(&d2)
}

/// Regression-slope deltas over `width` frames with replicated edges:
/// `d_t = sum_n n (c_{t+n} - c_{t-n}) / (2 sum_n n^2)`.
pub fn deltas(f: &FeatureMatrix, width: usize) -> Result<FeatureMatrix> {
    if width < 3 || width % 2 == 0 {
        return Err(CoreError::invalid(format!("delta width {width} must be odd and >= 3")));
    }
    let n = (width - 1) / 2;
    let (t, d) = (f.frames(), f.dims());
    let denom = 2.0 * (1..=n).map(|k| (k * k) as f64).sum::<f64>();
    let mut values = vec![0.0f32; t * d];
    for ti in 0..t {
        for j in 0..d {
            let mut acc = 0.0f64;
            for k in 1..=n {
                let fwd = (ti + k).min(t - 1);
                let back = ti.saturating_sub(k);
                acc += k as f64 * (f.row(fwd)[j] as f64 - f.row(back)[j] as f64);
            }
            values[ti * d + j] = (acc / denom) as f32;
        }
    }
    FeatureMatrix::new(values, t, d, f.frame_rate(), f.kind())
}
