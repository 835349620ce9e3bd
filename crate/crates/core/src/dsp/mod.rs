//! Audio ingestion and handcrafted frame features.

mod audio;
mod chroma;
mod mfcc;
mod stft;

pub use audio::{load_audio, resample, write_wav};
pub use chroma::{chroma, ChromaConfig};
pub use mfcc::{dct_ii, deltas, log_mel, mel_filterbank, mfcc, MfccConfig};
pub use stft::{frame_count, power_spectrogram};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// The model input rate.
pub const SAMPLE_RATE: u32 = 16_000;
/// Samples between frames; 50 frames per second at 16 kHz.
pub const HOP: usize = 320;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(CoreError::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(CoreError::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Samples `[start, start + len)` as a new clip.
    pub fn slice(&self, start: usize, len: usize) -> Result<AudioClip> {
        if start + len > self.samples.len() {
            return Err(CoreError::invalid(format!(
                "slice {start}+{len} exceeds clip length {}",
                self.samples.len()
            )));
        }
        Ok(AudioClip {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Chroma,
    Deep,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Mfcc => 0,
            FeatureKind::Chroma => 1,
            FeatureKind::Deep => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Mfcc),
            1 => Some(FeatureKind::Chroma),
            2 => Some(FeatureKind::Deep),
            _ => None,
        }
    }
}

/// Time-major `T x D` frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f32>,
    frames: usize,
    dims: usize,
    frame_rate: f32,
    kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(
        values: Vec<f32>,
        frames: usize,
        dims: usize,
        frame_rate: f32,
        kind: FeatureKind,
    ) -> Result<Self> {
        if values.len() != frames * dims {
            return Err(CoreError::invalid(format!(
                "feature matrix {frames}x{dims} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("non-finite feature value"));
        }
        Ok(Self {
            values,
            frames,
            dims,
            frame_rate,
            kind,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn frame_rate(&self) -> f32 {
        self.frame_rate
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    /// Concatenates the columns of `other` to the right of `self`.
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.frames != other.frames {
            return Err(CoreError::invalid("hstack: frame counts differ"));
        }
        let dims = self.dims + other.dims;
        let mut values = Vec::with_capacity(self.frames * dims);
        for t in 0..self.frames {
            values.extend_from_slice(self.row(t));
            values.extend_from_slice(other.row(t));
        }
        FeatureMatrix::new(values, self.frames, dims, self.frame_rate, self.kind)
    }
}
