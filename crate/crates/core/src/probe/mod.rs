//! Frozen-encoder probing: windowed layer embeddings, a learned softmax
//! layer weighting and a one-hidden-layer MLP per task.

use std::path::Path;

use mirssl_autodiff::{mix64, Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::encoder::{layer_outputs_with, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::formats::{read_file, ByteReader, ByteWriter, PROBE_MAGIC, VERSION};
use crate::metrics::{accuracy, roc_auc_macro};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
    Regression,
    Framewise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowPolicy {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub aggregate: Aggregate,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self {
            window_seconds: 5.0,
            hop_seconds: 5.0,
            aggregate: Aggregate::Mean,
        }
    }
}

impl WindowPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_seconds > 0.0 && self.hop_seconds > 0.0) {
            return Err(CoreError::Config {
                path: "probe.window".into(),
                detail: "window_seconds and hop_seconds must be positive".into(),
            });
        }
        Ok(())
    }

    /// `(start, len)` sample spans of the windows over `n` samples. A clip
    /// shorter than one window is a single full-clip window.
    pub fn spans(&self, n: usize) -> Vec<(usize, usize)> {
        let win = (self.window_seconds * SAMPLE_RATE as f64).round() as usize;
        let hop = ((self.hop_seconds * SAMPLE_RATE as f64).round() as usize).max(1);
        if n <= win {
            return vec![(0, n)];
        }
        (0..)
            .map(|i| i * hop)
            .take_while(|&s| s + win <= n)
            .map(|s| (s, win))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Inferred from the label file when absent.
    pub task_kind: Option<TaskKind>,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub window: WindowPolicy,
    /// Standardize each input entry with training-set statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            task_kind: None,
            hidden: 512,
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            patience: 10,
            window: WindowPolicy::default(),
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, d: &str| {
            Err(CoreError::Config {
                path: format!("probe.{key}"),
                detail: d.into(),
            })
        };
        if self.hidden == 0 {
            return bad("hidden", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs", "epochs and batch_size must be >= 1");
        }
        self.window.validate()
    }
}

/// SHA-256 over the names, shapes and bytes of the `enc.*` parameters.
pub fn encoder_hash(params: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for p in params.iter().filter(|p| p.name.starts_with("enc.")) {
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Per-layer clip embeddings (`L + 1` vectors of `H`): the temporal mean of
/// each window, averaged over windows. No masking, no dropout.
pub fn extract_layer_embeddings(
    params: &ParamStore<f32>,
    enc: &EncoderConfig,
    clip: &AudioClip,
    policy: &WindowPolicy,
) -> Result<Vec<Vec<f32>>> {
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(CoreError::invalid(format!("expected {SAMPLE_RATE} Hz audio")));
    }
    let spans = policy.spans(clip.len());
    let windows: Vec<&[f32]> = spans.iter().map(|&(s, l)| &clip.samples()[s..s + l]).collect();
    let layers = layer_outputs_with(params, enc, &windows)?;
    let h = enc.hidden;
    let mut out = Vec::with_capacity(layers.len());
    for t in &layers {
        let s = t.shape();
        let (b, frames) = (s[0], s[1]);
        let mut acc = vec![0.0f64; h];
        for w in 0..b {
            let mut win = vec![0.0f64; h];
            for f in 0..frames {
                let row = &t.data()[(w * frames + f) * h..(w * frames + f + 1) * h];
                win.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
            }
            acc.iter_mut().zip(&win).for_each(|(a, v)| *a += v / frames as f64);
        }
        out.push(acc.into_iter().map(|v| (v / b as f64) as f32).collect());
    }
    Ok(out)
}

/// Per-layer frame activations of the whole clip, each `[T, H]`.
pub fn extract_frame_embeddings(
    params: &ParamStore<f32>,
    enc: &EncoderConfig,
    clip: &AudioClip,
) -> Result<Vec<Tensor<f32>>> {
    let out = layer_outputs_with(params, enc, &[clip.samples()])?;
    out.into_iter()
        .map(|t| {
            let s = t.shape().to_vec();
            Ok(t.reshaped(&[s[1], s[2]])?)
        })
        .collect()
}

pub fn softmax(w: &[f32]) -> Vec<f32> {
    let mx = w.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = w.iter().map(|&x| ((x - mx) as f64).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| (v / z) as f32).collect()
}

/// `softmax(w)`-weighted sum of per-layer vectors.
pub fn weighted_features(layers: &[Vec<f32>], w: &[f32]) -> Result<Vec<f32>> {
    if layers.len() != w.len() || layers.is_empty() {
        return Err(CoreError::invalid(format!(
            "{} layer vectors for {} weights",
            layers.len(),
            w.len()
        )));
    }
    let h = layers[0].len();
    if layers.iter().any(|l| l.len() != h) {
        return Err(CoreError::invalid("layer vectors differ in length"));
    }
    let a = softmax(w);
    let mut out = vec![0.0f64; h];
    for (l, &al) in layers.iter().zip(&a) {
        out.iter_mut().zip(l).for_each(|(o, &v)| *o += al as f64 * v as f64);
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Binary beat targets at `frame_rate`: the frame nearest each beat and its
/// two neighbours, clipped to `[0, t)`.
pub fn framewise_probe_targets(beats: &[f64], t: usize, frame_rate: f64) -> Vec<f32> {
    let mut out = vec![0.0; t];
    for &b in beats {
        let c = (b * frame_rate).round() as i64;
        for f in c - 1..=c + 1 {
            if f >= 0 && (f as usize) < t {
                out[f as usize] = 1.0;
            }
        }
    }
    out
}

/// Packs per-layer vectors dimension-major: entry `h * n_layers + l`.
pub fn pack_layers(layers: &[Vec<f32>]) -> Vec<f32> {
    let (n, h) = (layers.len(), layers.first().map_or(0, Vec::len));
    let mut out = vec![0.0; n * h];
    for (l, v) in layers.iter().enumerate() {
        for (d, &x) in v.iter().enumerate() {
            out[d * n + l] = x;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `[rows, out_dim]` in `[0, 1]`.
    Binary(Vec<f32>),
    /// Row-major `[rows, out_dim]`.
    Real(Vec<f32>),
}

/// Probe inputs: `rows` samples of `[hidden, n_layers]` packed with
/// [`pack_layers`], and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub inputs: Vec<f32>,
    pub rows: usize,
    pub targets: Targets,
}

impl ProbeData {
    fn check(&self, width: usize, out_dim: usize, task: TaskKind) -> Result<()> {
        if self.rows == 0 {
            return Err(CoreError::invalid("empty probe split"));
        }
        if self.inputs.len() != self.rows * width {
            return Err(CoreError::invalid("probe inputs do not match the row count"));
        }
        let ok = match (&self.targets, task) {
            (Targets::Classes(c), TaskKind::Multiclass) => {
                c.len() == self.rows && c.iter().all(|&x| x < out_dim)
            }
            (Targets::Binary(y), TaskKind::Multilabel | TaskKind::Framewise) => {
                y.len() == self.rows * out_dim
            }
            (Targets::Real(y), TaskKind::Regression) => y.len() == self.rows * out_dim,
            _ => false,
        };
        if !ok {
            return Err(CoreError::Mismatch(format!("probe targets do not fit a {task:?} task")));
        }
        Ok(())
    }

    fn subset(&self, idx: &[usize], width: usize, out_dim: usize) -> (Vec<f32>, Targets) {
        let mut x = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * width..(i + 1) * width]);
        }
        let pick = |y: &[f32]| -> Vec<f32> {
            idx.iter()
                .flat_map(|&i| y[i * out_dim..(i + 1) * out_dim].iter().copied())
                .collect()
        };
        let t = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Binary(y) => Targets::Binary(pick(y)),
            Targets::Real(y) => Targets::Real(pick(y)),
        };
        (x, t)
    }
}

/// Metadata stored with a trained probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeMeta {
    pub config: ProbeConfig,
    pub task: TaskKind,
    pub n_layers: usize,
    pub dim: usize,
    pub out_dim: usize,
    pub encoder_hash: String,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub meta: ProbeMeta,
    /// Per-entry mean and std of the packed inputs, when standardizing.
    pub norm: Option<(Vec<f32>, Vec<f32>)>,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHistory {
    pub train_loss: Vec<f32>,
    pub valid_score: Vec<f64>,
    pub best_epoch: usize,
}

impl ProbeModel {
    fn width(&self) -> usize {
        self.meta.n_layers * self.meta.dim
    }

    /// Softmax-normalized layer weights.
    pub fn layer_weights(&self) -> Vec<f32> {
        softmax(self.params.by_name("probe.w").expect("probe weights").value.data())
    }

    fn normalized(&self, x: &[f32]) -> Vec<f32> {
        match &self.norm {
            None => x.to_vec(),
            Some((m, s)) => {
                let w = self.width();
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| (v - m[i % w]) / s[i % w])
                    .collect()
            }
        }
    }

    fn forward(&self, g: &mut Graph<f32>, x: &[f32], rows: usize) -> Result<Var> {
        let (n, d) = (self.meta.n_layers, self.meta.dim);
        let x = g.constant(Tensor::new(&[rows, d, n], self.normalized(x))?)?;
        let w = g.param_by_name(&self.params, "probe.w")?;
        let a = g.softmax(w, 0)?;
        let a = g.reshape(a, &[n, 1])?;
        let mixed = g.matmul(x, a)?;
        let mixed = g.reshape(mixed, &[rows, d])?;
        let w1 = g.param_by_name(&self.params, "mlp.fc1.w")?;
        let b1 = g.param_by_name(&self.params, "mlp.fc1.b")?;
        let h = g.matmul(mixed, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h)?;
        let w2 = g.param_by_name(&self.params, "mlp.fc2.w")?;
        let b2 = g.param_by_name(&self.params, "mlp.fc2.b")?;
        let o = g.matmul(h, w2)?;
        Ok(g.add(o, b2)?)
    }

    fn loss(&self, g: &mut Graph<f32>, out: Var, t: &Targets, rows: usize) -> Result<Var> {
        let all = vec![true; rows];
        let od = self.meta.out_dim;
        Ok(match t {
            Targets::Classes(c) => g.cross_entropy(out, c, &all)?,
            Targets::Binary(y) => g.bce_with_logits(out, &Tensor::new(&[rows, od], y.clone())?, &all)?,
            Targets::Real(y) => g.mse(out, &Tensor::new(&[rows, od], y.clone())?, &all)?,
        })
    }

    /// Raw outputs (`[rows, out_dim]`): logits, or values for regression.
    pub fn outputs(&self, x: &[f32], rows: usize) -> Result<Vec<f32>> {
        if x.len() != rows * self.width() {
            return Err(CoreError::invalid("probe input width mismatch"));
        }
        let mut g = Graph::inference();
        let o = self.forward(&mut g, x, rows)?;
        Ok(g.value(o).data().to_vec())
    }

    /// Validation score; higher is better.
    fn score(&self, data: &ProbeData) -> Result<f64> {
        let od = self.meta.out_dim;
        let out = self.outputs(&data.inputs, data.rows)?;
        Ok(match (&data.targets, self.meta.task) {
            (Targets::Classes(c), _) => {
                let pred: Vec<usize> = out.chunks_exact(od).map(argmax).collect();
                accuracy(&pred, c)?
            }
            (Targets::Binary(y), TaskKind::Multilabel) => {
                let scores: Vec<Vec<f64>> = (0..od)
                    .map(|j| out.iter().skip(j).step_by(od).map(|&v| v as f64).collect())
                    .collect();
                let labels: Vec<Vec<bool>> = (0..od)
                    .map(|j| y.iter().skip(j).step_by(od).map(|&v| v > 0.5).collect())
                    .collect();
                match roc_auc_macro(&scores, &labels) {
                    Ok(m) => m.mean,
                    Err(_) => -bce(&out, y),
                }
            }
            (Targets::Binary(y), _) => -bce(&out, y),
            (Targets::Real(y), _) => {
                -out.iter().zip(y).map(|(&p, &t)| ((p - t) as f64).powi(2)).sum::<f64>() / y.len() as f64
            }
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = serde_json::to_vec(&self.meta).map_err(|e| CoreError::invalid(e.to_string()))?;
        let mut w = ByteWriter::new(PROBE_MAGIC);
        w.u32(VERSION);
        w.bytes(&blob);
        match &self.norm {
            Some((m, s)) => {
                w.u8(1);
                w.f32s(m);
                w.f32s(s);
            }
            None => w.u8(0),
        }
        w.param_values(&self.params);
        Ok(w.finish())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = read_file(path)?;
        let mut r = ByteReader::new(&buf, PROBE_MAGIC, path)?;
        r.version()?;
        let meta: ProbeMeta =
            serde_json::from_slice(r.bytes()?).map_err(|e| r.err(format!("probe metadata: {e}")))?;
        let width = meta.n_layers * meta.dim;
        let norm = match r.u8()? {
            0 => None,
            1 => Some((r.f32s(width)?, r.f32s(width)?)),
            _ => return Err(r.err("bad normalization flag")),
        };
        let params = r.param_values()?;
        r.finish()?;
        let expect = init_params(&meta, 0)?;
        for p in expect.iter() {
            let got = params.by_name(&p.name).map_err(|_| r.err(format!("missing {}", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(r.err(format!("{} has the wrong shape", p.name)));
            }
        }
        Ok(Self { meta, norm, params })
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn bce(logits: &[f32], y: &[f32]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(y)
        .map(|(&z, &t)| {
            let z = z as f64;
            z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / n
}

fn init_params(meta: &ProbeMeta, seed: u64) -> Result<ParamStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x9B0B_E5));
    let mut normal = |shape: &[usize], std: f64| {
        let d = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| d.sample(&mut rng) as f32)
    };
    let hid = meta.config.hidden;
    let mut p = ParamStore::new();
    p.add("probe.w", Tensor::zeros(&[meta.n_layers]))?;
    p.add("mlp.fc1.w", normal(&[meta.dim, hid], (2.0 / meta.dim as f64).sqrt()))?;
    p.add("mlp.fc1.b", Tensor::zeros(&[hid]))?;
    p.add("mlp.fc2.w", normal(&[hid, meta.out_dim], (1.0 / hid as f64).sqrt()))?;
    p.add("mlp.fc2.b", Tensor::zeros(&[meta.out_dim]))?;
    Ok(p)
}

/// Trains the layer weights and MLP with Adam, keeping the snapshot with
/// the best validation score and stopping after `patience` epochs without
/// improvement. The encoder is not involved: inputs are precomputed.
pub fn train_probe(
    train: &ProbeData,
    valid: &ProbeData,
    meta: ProbeMeta,
    seed: u64,
) -> Result<(ProbeModel, ProbeHistory)> {
    meta.config.validate()?;
    if meta.n_layers == 0 || meta.dim == 0 || meta.out_dim == 0 {
        return Err(CoreError::invalid("probe dimensions must be positive"));
    }
    let width = meta.n_layers * meta.dim;
    train.check(width, meta.out_dim, meta.task)?;
    valid.check(width, meta.out_dim, meta.task)?;
    let norm = meta.config.standardize.then(|| {
        let n = train.rows as f64;
        let mut mean = vec![0.0f64; width];
        let mut sq = vec![0.0f64; width];
        for row in train.inputs.chunks_exact(width) {
            for (i, &v) in row.iter().enumerate() {
                mean[i] += v as f64;
                sq[i] += v as f64 * v as f64;
            }
        }
        let m: Vec<f32> = mean.iter().map(|v| (v / n) as f32).collect();
        let s: Vec<f32> = mean
            .iter()
            .zip(&sq)
            .map(|(&a, &b)| {
                let var = (b / n - (a / n) * (a / n)).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-6 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        (m, s)
    });
    let params = init_params(&meta, seed)?;
    let lr = meta.config.lr as f32;
    let cfg = meta.config.clone();
    let mut model = ProbeModel { meta, norm, params };
    let adam = Adam::new(lr);
    let mut history = ProbeHistory {
        train_loss: Vec::new(),
        valid_score: Vec::new(),
        best_epoch: 0,
    };
    let mut best = (model.score(valid)?, model.params.clone());
    let mut since_best = 0;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.rows).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(epoch as u64 + 1)));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, t) = train.subset(chunk, width, model.meta.out_dim);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &x, chunk.len())?;
            let loss = model.loss(&mut g, out, &t, chunk.len())?;
            epoch_loss += g.value(loss).data()[0] as f64 * chunk.len() as f64;
            g.backward(loss)?;
            model.params.zero_grad();
            g.accumulate_param_grads(&mut model.params);
            step += 1;
            adam.step(&mut model.params, step)?;
        }
        history.train_loss.push((epoch_loss / train.rows as f64) as f32);
        let score = model.score(valid)?;
        history.valid_score.push(score);
        if score > best.0 {
            best = (score, model.params.clone());
            history.best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, history))
}

/// A task-typed probe output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Class(u32),
    Scores(Vec<f64>),
    Values(Vec<f64>),
    Activation(Vec<f64>),
}

fn sigmoid(z: f32) -> f64 {
    1.0 / (1.0 + (-(z as f64)).exp())
}

/// Runs the frozen encoder and the probe on one clip.
pub fn predict(
    probe: &ProbeModel,
    encoder: &ParamStore<f32>,
    enc: &EncoderConfig,
    clip: &AudioClip,
) -> Result<Prediction> {
    if encoder_hash(encoder) != probe.meta.encoder_hash {
        return Err(CoreError::Mismatch("probe was trained on a different encoder".into()));
    }
    if enc.n_layers + 1 != probe.meta.n_layers || enc.hidden != probe.meta.dim {
        return Err(CoreError::Mismatch("probe shape does not match the encoder".into()));
    }
    if probe.meta.task == TaskKind::Framewise {
        let frames = extract_frame_embeddings(encoder, enc, clip)?;
        return probe.predict_packed(&pack_frames(&frames), frames[0].shape()[0]);
    }
    let emb = extract_layer_embeddings(encoder, enc, clip, &probe.meta.config.window)?;
    probe.predict_packed(&pack_layers(&emb), 1)
}

/// Packs every frame of per-layer `[T, H]` outputs, one row per frame.
pub fn pack_frames(frames: &[Tensor<f32>]) -> Vec<f32> {
    let t = frames.first().map_or(0, |f| f.shape()[0]);
    let mut x = Vec::with_capacity(t * frames.len() * frames.first().map_or(0, |f| f.shape()[1]));
    for f in 0..t {
        let layers: Vec<Vec<f32>> = frames.iter().map(|l| l.row(f).to_vec()).collect();
        x.extend(pack_layers(&layers));
    }
    x
}

impl ProbeModel {
    /// Task-typed output for packed inputs: `rows` frames for a framewise
    /// probe, otherwise a single clip row.
    pub fn predict_packed(&self, x: &[f32], rows: usize) -> Result<Prediction> {
        let out = self.outputs(x, rows)?;
        Ok(match self.meta.task {
            TaskKind::Framewise => Prediction::Activation(out.iter().map(|&z| sigmoid(z)).collect()),
            _ if rows != 1 => return Err(CoreError::invalid("clip-level prediction takes one row")),
            TaskKind::Multiclass => Prediction::Class(argmax(&out) as u32),
            TaskKind::Multilabel => Prediction::Scores(out.iter().map(|&z| sigmoid(z)).collect()),
            TaskKind::Regression => Prediction::Values(out.iter().map(|&v| v as f64).collect()),
        })
    }
}
