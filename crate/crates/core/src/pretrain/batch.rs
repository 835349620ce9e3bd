use mirssl_autodiff::mix64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::HOP;
use crate::error::{CoreError, Result};

/// One crop: clip index into the caller's clip list and a sample offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPlan {
    pub clip: usize,
    pub offset: usize,
}

/// Deterministic crop schedule. Batch `step` depends only on the seed and
/// the step, so a resumed run sees the same data as an uninterrupted one.
#[derive(Debug, Clone)]
pub struct Batcher {
    usable: Vec<usize>,
    lens: Vec<usize>,
    crop: usize,
    per_batch: usize,
    seed: u64,
}

impl Batcher {
    /// Clips shorter than the crop are skipped with a warning.
    pub fn new(lens: &[usize], crop_samples: usize, token_budget: usize, seed: u64) -> Result<Self> {
        if crop_samples == 0 {
            return Err(CoreError::invalid("crop length must be positive"));
        }
        let per_batch = token_budget / crop_samples;
        if per_batch == 0 {
            return Err(CoreError::invalid(format!(
                "token budget {token_budget} is smaller than one crop of {crop_samples} samples"
            )));
        }
        let mut usable = Vec::with_capacity(lens.len());
        for (i, &n) in lens.iter().enumerate() {
            if n >= crop_samples {
                usable.push(i);
            } else {
                log::warn!("clip {i} has {n} samples, shorter than the {crop_samples}-sample crop; skipped");
            }
        }
        if usable.is_empty() {
            return Err(CoreError::invalid(format!(
                "no clip is at least {crop_samples} samples long"
            )));
        }
        Ok(Self {
            usable,
            lens: lens.to_vec(),
            crop: crop_samples,
            per_batch,
            seed,
        })
    }

    pub fn per_batch(&self) -> usize {
        self.per_batch
    }

    pub fn crop_samples(&self) -> usize {
        self.crop
    }

    pub fn usable(&self) -> &[usize] {
        &self.usable
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.usable.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(epoch ^ 0xB47C_4E5)));
        order.shuffle(&mut rng);
        order
    }

    /// Crops of 0-based batch `step`. Offsets are multiples of the encoder
    /// hop so crop frames line up with whole-clip frames.
    pub fn batch(&self, step: u64) -> Vec<CropPlan> {
        let n = self.usable.len() as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..self.per_batch as u64)
            .map(|j| {
                let slot = step * self.per_batch as u64 + j;
                let epoch = slot / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, self.epoch_order(epoch)));
                }
                let clip = cached.as_ref().unwrap().1[(slot % n) as usize];
                let positions = (self.lens[clip] - self.crop) / HOP + 1;
                let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(slot.wrapping_add(0x0FF5E7))));
                CropPlan {
                    clip,
                    offset: HOP * rng.gen_range(0..positions),
                }
            })
            .collect()
    }
}

/// Maps whole-clip labels onto `enc_frames` encoder frames. The two
/// sequences are centred on each other and edge frames are clamped; they
/// may differ by at most two frames (one per side).
pub fn align_labels(labels: &[u32], enc_frames: usize) -> Result<Vec<u32>> {
    if labels.is_empty() {
        return Err(CoreError::invalid("empty label sequence"));
    }
    let diff = enc_frames as i64 - labels.len() as i64;
    if diff.abs() > 2 {
        return Err(CoreError::Mismatch(format!(
            "{} label frames cannot be aligned to {enc_frames} encoder frames",
            labels.len()
        )));
    }
    let shift = diff.div_euclid(2);
    let last = labels.len() as i64 - 1;
    Ok((0..enc_frames as i64)
        .map(|k| labels[(k - shift).clamp(0, last) as usize])
        .collect())
}

/// Labels of the `frames` encoder frames of a crop starting at sample
/// `offset` (a multiple of the hop).
pub fn crop_labels(aligned: &[u32], offset: usize, frames: usize) -> Result<&[u32]> {
    let start = offset / HOP;
    if offset % HOP != 0 || start + frames > aligned.len() {
        return Err(CoreError::Mismatch(format!(
            "crop at sample {offset} with {frames} frames exceeds {} labelled frames",
            aligned.len()
        )));
    }
    Ok(&aligned[start..start + frames])
}
