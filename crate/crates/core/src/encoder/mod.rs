//! Convolutional frontend, span masking, transformer stack and the two
//! pre-training heads.

mod ema;
mod network;

pub use ema::{ema_update, TauSchedule};
pub use network::{
    apply_mask, conv_frontend, discrete_logits, encode, regression_head, teacher_targets, Encoded,
};

use mirssl_autodiff::{Graph, ParamStore, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, FeatureKind, FeatureMatrix, SAMPLE_RATE};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub conv_layers: Vec<ConvSpec>,
    pub n_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    /// Length of the learned position table in frames.
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let strides = [5, 2, 2, 2, 2, 2, 2];
        let kernels = [10, 3, 3, 3, 3, 2, 2];
        Self {
            conv_layers: strides
                .iter()
                .zip(kernels)
                .map(|(&stride, kernel)| ConvSpec {
                    channels: 64,
                    kernel,
                    stride,
                })
                .collect(),
            n_layers: 2,
            hidden: 64,
            heads: 4,
            ff_dim: 256,
            dropout: 0.1,
            max_positions: 1500,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| {
            Err(CoreError::Config {
                path: "encoder".into(),
                detail: d,
            })
        };
        if self.conv_layers.is_empty() {
            return bad("at least one conv layer is required".into());
        }
        if self.conv_layers.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("conv channels, kernels and strides must be positive".into());
        }
        if self.total_stride() != 320 {
            return bad(format!(
                "conv strides multiply to {}, expected 320 (16 kHz to 50 Hz)",
                self.total_stride()
            ));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.ff_dim == 0 || self.max_positions == 0 {
            return bad("ff_dim and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|c| c.stride).product()
    }

    /// Samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for c in &self.conv_layers {
            field += (c.kernel - 1) * jump;
            jump *= c.stride;
        }
        field
    }

    /// Output frames for `samples` input samples, or `None` if the input is
    /// shorter than the receptive field.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        let mut t = samples;
        for c in &self.conv_layers {
            if t < c.kernel {
                return None;
            }
            t = (t - c.kernel) / c.stride + 1;
        }
        Some(t)
    }

    pub fn frame_rate(&self) -> f32 {
        SAMPLE_RATE as f32 / self.total_stride() as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub span: usize,
    pub prob: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            span: 10,
            prob: 0.65,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.span == 0 || !(0.0..=1.0).contains(&self.prob) {
            return Err(CoreError::Config {
                path: "pretrain.mask".into(),
                detail: format!("span {} must be >= 1 and prob {} in [0, 1]", self.span, self.prob),
            });
        }
        Ok(())
    }

    /// Number of span starts for `t` frames: `floor(prob * t / span)`,
    /// capped by the number of valid start positions.
    pub fn num_starts(&self, t: usize) -> usize {
        if t < self.span {
            return 0;
        }
        let n = (self.prob * t as f64 / self.span as f64 + 1e-9).floor() as usize;
        n.min(t - self.span + 1)
    }

    /// Draws a frame mask: span starts sampled uniformly without
    /// replacement, each covering `span` frames.
    pub fn sample<R: Rng>(&self, t: usize, rng: &mut R) -> Vec<bool> {
        let mut mask = vec![false; t];
        for start in self.sample_starts(t, rng) {
            mask[start..start + self.span].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// The distinct span starts behind [`MaskSpec::sample`].
    pub fn sample_starts<R: Rng>(&self, t: usize, rng: &mut R) -> Vec<usize> {
        let n = self.num_starts(t);
        if n == 0 {
            return Vec::new();
        }
        sample(rng, t - self.span + 1, n).into_vec()
    }
}

/// Which teacher layers form the continuous target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetLayers {
    Top(usize),
    All,
}

impl TargetLayers {
    /// Indices into the encoder output list (1-based transformer layers).
    pub fn indices(self, n_layers: usize) -> Result<Vec<usize>> {
        let k = match self {
            TargetLayers::All => n_layers,
            TargetLayers::Top(k) => k,
        };
        if k == 0 || k > n_layers {
            return Err(CoreError::invalid(format!(
                "target layers {k} outside 1..={n_layers}"
            )));
        }
        Ok((n_layers - k + 1..=n_layers).collect())
    }
}

impl Serialize for TargetLayers {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetLayers::Top(k) => s.serialize_u64(*k as u64),
            TargetLayers::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for TargetLayers {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(TargetLayers::Top(k)),
            Raw::Word(w) if w == "all" => Ok(TargetLayers::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a layer count or \"all\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Discrete,
    Continuous,
}

impl Paradigm {
    pub fn code(self) -> u8 {
        match self {
            Paradigm::Discrete => 0,
            Paradigm::Continuous => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Paradigm::Discrete),
            1 => Some(Paradigm::Continuous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Codebook size for the discrete head.
    pub num_codes: usize,
    pub proj_dim: usize,
    pub temperature: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_codes: 500,
            proj_dim: 512,
            temperature: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub paradigm: Paradigm,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.head.temperature > 0.0) {
            return Err(CoreError::Config {
                path: "head.temperature".into(),
                detail: "must be positive".into(),
            });
        }
        if self.paradigm == Paradigm::Discrete && (self.head.num_codes < 2 || self.head.proj_dim == 0) {
            return Err(CoreError::Config {
                path: "head".into(),
                detail: "discrete head needs num_codes >= 2 and proj_dim >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Student parameters (encoder plus the paradigm's head).
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore<f32>,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

fn add_linear(
    store: &mut ParamStore<f32>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.add(
        format!("{name}.w"),
        normal_tensor(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
    )?;
    store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn add_norm(store: &mut ParamStore<f32>, name: &str, dim: usize) -> Result<()> {
    store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
    store.add(format!("{name}.b"), Tensor::zeros(&[dim]))?;
    Ok(())
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = &cfg.encoder;
        let mut c_in = 1;
        for (i, c) in e.conv_layers.iter().enumerate() {
            let std = (2.0 / (c.kernel * c_in) as f64).sqrt();
            p.add(
                format!("enc.conv{i}.w"),
                normal_tensor(&[c.kernel, c_in, c.channels], std, &mut rng),
            )?;
            p.add(format!("enc.conv{i}.b"), Tensor::zeros(&[c.channels]))?;
            c_in = c.channels;
        }
        let h = e.hidden;
        add_linear(&mut p, "enc.proj", c_in, h, &mut rng)?;
        p.add("enc.mask_emb", normal_tensor(&[h], 1.0, &mut rng))?;
        p.add("enc.pos", normal_tensor(&[e.max_positions, h], 0.1, &mut rng))?;
        add_norm(&mut p, "enc.ln", h)?;
        for l in 0..e.n_layers {
            for part in ["q", "k", "v", "o"] {
                add_linear(&mut p, &format!("enc.layer{l}.{part}"), h, h, &mut rng)?;
            }
            add_norm(&mut p, &format!("enc.layer{l}.ln1"), h)?;
            add_linear(&mut p, &format!("enc.layer{l}.ff1"), h, e.ff_dim, &mut rng)?;
            add_linear(&mut p, &format!("enc.layer{l}.ff2"), e.ff_dim, h, &mut rng)?;
            add_norm(&mut p, &format!("enc.layer{l}.ln2"), h)?;
        }
        match cfg.paradigm {
            Paradigm::Discrete => {
                let pd = cfg.head.proj_dim;
                p.add(
                    "disc.proj.w",
                    normal_tensor(&[h, pd], (1.0 / h as f64).sqrt(), &mut rng),
                )?;
                p.add("disc.codes", normal_tensor(&[cfg.head.num_codes, pd], 1.0, &mut rng))?;
            }
            Paradigm::Continuous => add_linear(&mut p, "reg", h, h, &mut rng)?,
        }
        Ok(Self { cfg, params: p })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against the configuration.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let reference = Model::new(cfg.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(CoreError::Mismatch(format!(
                "checkpoint has {} parameters, configuration expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        for r in reference.params.iter() {
            let p = params
                .by_name(&r.name)
                .map_err(|_| CoreError::Mismatch(format!("checkpoint lacks parameter {}", r.name)))?;
            if p.value.shape() != r.value.shape() {
                return Err(CoreError::Mismatch(format!(
                    "parameter {} has shape {:?}, configuration expects {:?}",
                    r.name,
                    p.value.shape(),
                    r.value.shape()
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<f32> {
        self.params
    }

    /// A store holding copies of the encoder parameters only.
    pub fn encoder_params(&self) -> Result<ParamStore<f32>> {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with("enc.")) {
            out.add(p.name.clone(), p.value.clone())?;
        }
        Ok(out)
    }

    /// All `L + 1` layer outputs for equal-length waveforms, without
    /// masking or dropout. Each entry is `[batch, frames, hidden]`.
    pub fn layer_outputs_batch(&self, waves: &[&[f32]]) -> Result<Vec<Tensor<f32>>> {
        layer_outputs_with(&self.params, &self.cfg.encoder, waves)
    }

    /// All layer outputs of a single clip, each `[frames, hidden]`.
    pub fn layer_outputs(&self, clip: &AudioClip) -> Result<Vec<Tensor<f32>>> {
        if clip.sample_rate() != SAMPLE_RATE {
            return Err(CoreError::invalid(format!(
                "encoder expects {SAMPLE_RATE} Hz audio, got {}",
                clip.sample_rate()
            )));
        }
        let out = self.layer_outputs_batch(&[clip.samples()])?;
        out.into_iter()
            .map(|t| {
                let s = t.shape().to_vec();
                Ok(t.reshaped(&[s[1], s[2]])?)
            })
            .collect()
    }

    /// One layer's activations as a feature matrix.
    pub fn layer_features(&self, clip: &AudioClip, layer: usize) -> Result<FeatureMatrix> {
        let outs = self.layer_outputs(clip)?;
        let t = outs
            .get(layer)
            .ok_or_else(|| CoreError::invalid(format!("layer {layer} out of range")))?;
        let s = t.shape();
        FeatureMatrix::new(
            t.data().to_vec(),
            s[0],
            s[1],
            self.cfg.encoder.frame_rate(),
            FeatureKind::Deep,
        )
    }
}

/// Inference forward with an arbitrary store holding `enc.*` parameters.
pub fn layer_outputs_with(
    params: &ParamStore<f32>,
    cfg: &EncoderConfig,
    waves: &[&[f32]],
) -> Result<Vec<Tensor<f32>>> {
    let n = waves.first().map_or(0, |w| w.len());
    if waves.is_empty() || waves.iter().any(|w| w.len() != n) {
        return Err(CoreError::invalid("batch waveforms must be non-empty and equal length"));
    }
    let data: Vec<f32> = waves.iter().flat_map(|w| w.iter().copied()).collect();
    let mut g = Graph::inference();
    let wave = g.constant(Tensor::new(&[waves.len(), n], data)?)?;
    let out = encode(&mut g, params, cfg, wave, None)?;
    Ok(out.layers.iter().map(|&v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests;
