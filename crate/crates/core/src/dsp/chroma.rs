use serde::{Deserialize, Serialize};

use super::stft::power_spectrogram;
use super::{AudioClip, FeatureKind, FeatureMatrix, HOP, SAMPLE_RATE};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChromaConfig {
    pub window: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for ChromaConfig {
    fn default() -> Self {
        Self {
            window: 1024,
            n_fft: 4096,
            hop: HOP,
            fmin: 60.0,
            fmax: 5000.0,
        }
    }
}

/// Pitch class (C = 0) nearest to `freq` in equal temperament at A4 = 440 Hz.
pub(crate) fn pitch_class(freq: f64) -> usize {
    let semis = (12.0 * (freq / 440.0).log2()).round() as i64 + 9;
    semis.rem_euclid(12) as usize
}

/// 12-bin chroma with each nonzero frame L1-normalized. Uses the same
/// frame grid as the default MFCC.
pub fn chroma(clip: &AudioClip, cfg: &ChromaConfig) -> Result<FeatureMatrix> {
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(CoreError::invalid(format!(
            "chroma expects {SAMPLE_RATE} Hz input, got {}",
            clip.sample_rate()
        )));
    }
    if cfg.n_fft < cfg.window || cfg.hop == 0 || cfg.window == 0 {
        return Err(CoreError::invalid("chroma window/fft/hop"));
    }
    let spec = power_spectrogram(clip.samples(), cfg.window, cfg.n_fft, cfg.hop);
    let bins: Vec<Option<usize>> = (0..=cfg.n_fft / 2)
        .map(|k| {
            let f = k as f64 * SAMPLE_RATE as f64 / cfg.n_fft as f64;
            (f >= cfg.fmin && f <= cfg.fmax).then(|| pitch_class(f))
        })
        .collect();
    let t = spec.len();
    let mut values = Vec::with_capacity(t * 12);
    for p in &spec {
        let mut acc = [0.0f64; 12];
        for (pc, v) in bins.iter().zip(p) {
            if let Some(pc) = pc {
                acc[*pc] += v;
            }
        }
        let total: f64 = acc.iter().sum();
        for a in acc {
            values.push(if total > 0.0 { (a / total) as f32 } else { 0.0 });
        }
    }
    FeatureMatrix::new(values, t, 12, SAMPLE_RATE as f32 / cfg.hop as f32, FeatureKind::Chroma)
}
