use mirssl_autodiff::{Graph, ParamStore, Tensor, Var};

use super::{EncoderConfig, TargetLayers};
use crate::error::{CoreError, Result};

const LN_EPS: f32 = 1e-5;

/// Graph handles of every encoder output, each `[batch, frames, hidden]`.
/// Index 0 is the projected conv output, 1..=L the transformer layers.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub layers: Vec<Var>,
    pub batch: usize,
    pub frames: usize,
}

impl Encoded {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the conv output")
    }
}

fn param(g: &mut Graph<f32>, store: &ParamStore<f32>, name: &str) -> Result<Var> {
    Ok(g.param_by_name(store, name)?)
}

fn linear(g: &mut Graph<f32>, store: &ParamStore<f32>, x: Var, name: &str) -> Result<Var> {
    let w = param(g, store, &format!("{name}.w"))?;
    let b = param(g, store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn norm_affine(g: &mut Graph<f32>, store: &ParamStore<f32>, x: Var, name: &str) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let y = g.layer_norm(x, axis, LN_EPS)?;
    let gain = param(g, store, &format!("{name}.g"))?;
    let bias = param(g, store, &format!("{name}.b"))?;
    let y = g.mul(y, gain)?;
    Ok(g.add(y, bias)?)
}

/// Waveforms `[batch, samples]` to projected frames `[batch, frames, hidden]`.
pub fn conv_frontend(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    cfg: &EncoderConfig,
    wave: Var,
) -> Result<Var> {
    let s = g.shape(wave).to_vec();
    if s.len() != 2 {
        return Err(CoreError::invalid(format!("waveform batch must be 2-D, got {s:?}")));
    }
    if cfg.frames_for(s[1]).is_none() {
        return Err(CoreError::invalid(format!(
            "clip of {} samples is shorter than the receptive field of {} samples",
            s[1],
            cfg.receptive_field()
        )));
    }
    let mut x = g.reshape(wave, &[s[0], s[1], 1])?;
    for (i, c) in cfg.conv_layers.iter().enumerate() {
        let w = param(g, store, &format!("enc.conv{i}.w"))?;
        let b = param(g, store, &format!("enc.conv{i}.b"))?;
        x = g.conv1d(x, w, b, c.stride)?;
        x = g.layer_norm(x, 2, LN_EPS)?;
        x = g.gelu(x)?;
    }
    let x = g.layer_norm(x, 2, LN_EPS)?;
    linear(g, store, x, "enc.proj")
}

/// Replaces masked frames (`mask` over `batch * frames` rows) with the
/// learned mask embedding.
pub fn apply_mask(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    frames: Var,
    mask: &[bool],
) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Ok(frames);
    }
    let emb = param(g, store, "enc.mask_emb")?;
    Ok(g.replace_rows(frames, emb, mask)?)
}

fn transformer_layer(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    cfg: &EncoderConfig,
    x: Var,
    l: usize,
) -> Result<Var> {
    let name = |part: &str| format!("enc.layer{l}.{part}");
    let q = linear(g, store, x, &name("q"))?;
    let k = linear(g, store, x, &name("k"))?;
    let v = linear(g, store, x, &name("v"))?;
    let dh = cfg.hidden / cfg.heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice(q, 2, h * dh, dh)?;
        let kh = g.slice(k, 2, h * dh, dh)?;
        let vh = g.slice(v, 2, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 2)?;
        let attn = g.dropout(attn, cfg.dropout)?;
        ctx.push(g.matmul(attn, vh)?);
    }
    let ctx = g.concat(&ctx, 2)?;
    let o = linear(g, store, ctx, &name("o"))?;
    let o = g.dropout(o, cfg.dropout)?;
    let a = g.add(x, o)?;
    let a = norm_affine(g, store, a, &name("ln1"))?;
    let f = linear(g, store, a, &name("ff1"))?;
    let f = g.gelu(f)?;
    let f = linear(g, store, f, &name("ff2"))?;
    let f = g.dropout(f, cfg.dropout)?;
    let y = g.add(a, f)?;
    norm_affine(g, store, y, &name("ln2"))
}

/// Full encoder forward. `mask`, when given, selects frames (row-major over
/// `batch * frames`) to replace with the mask embedding.
pub fn encode(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    cfg: &EncoderConfig,
    wave: Var,
    mask: Option<&[bool]>,
) -> Result<Encoded> {
    let x0 = conv_frontend(g, store, cfg, wave)?;
    let s = g.shape(x0).to_vec();
    let (batch, frames) = (s[0], s[1]);
    if frames > cfg.max_positions {
        return Err(CoreError::invalid(format!(
            "{frames} frames exceed the position table of {}",
            cfg.max_positions
        )));
    }
    let x0 = match mask {
        Some(m) => {
            if m.len() != batch * frames {
                return Err(CoreError::invalid(format!(
                    "mask covers {} frames, batch has {}",
                    m.len(),
                    batch * frames
                )));
            }
            apply_mask(g, store, x0, m)?
        }
        None => x0,
    };
    let mut layers = vec![x0];
    let table = param(g, store, "enc.pos")?;
    let pos = g.slice(table, 0, 0, frames)?;
    let h = g.add(x0, pos)?;
    let h = norm_affine(g, store, h, "enc.ln")?;
    let mut h = g.dropout(h, cfg.dropout)?;
    for l in 0..cfg.n_layers {
        h = transformer_layer(g, store, cfg, h, l)?;
        layers.push(h);
    }
    Ok(Encoded {
        layers,
        batch,
        frames,
    })
}

/// Cosine similarity between projected frames and code embeddings divided
/// by `temperature`. Frames whose projection is zero score 0 against every
/// code.
pub fn discrete_logits(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    hidden: Var,
    temperature: f32,
) -> Result<Var> {
    let w = param(g, store, "disc.proj.w")?;
    let codes = param(g, store, "disc.codes")?;
    let proj = g.matmul(hidden, w)?;
    let pn = g.normalize_rows(proj)?;
    let cn = g.normalize_rows(codes)?;
    let ct = g.transpose(cn)?;
    let cos = g.matmul(pn, ct)?;
    Ok(g.scale(cos, 1.0 / temperature)?)
}

/// Linear regression head used by the continuous objective.
pub fn regression_head(g: &mut Graph<f32>, store: &ParamStore<f32>, hidden: Var) -> Result<Var> {
    linear(g, store, hidden, "reg")
}

/// Average of the selected teacher layers, each optionally normalized per
/// frame to zero mean and unit variance. `layers` holds all `L + 1` outputs.
pub fn teacher_targets(
    layers: &[Tensor<f32>],
    target: TargetLayers,
    normalize: bool,
) -> Result<Tensor<f32>> {
    if layers.is_empty() {
        return Err(CoreError::invalid("no encoder outputs"));
    }
    let picks = target.indices(layers.len() - 1)?;
    let shape = layers[0].shape().to_vec();
    let h = *shape.last().unwrap();
    let mut acc = vec![0.0f64; layers[0].numel()];
    for &i in &picks {
        let src = layers[i].data();
        for (frame, out) in src.chunks_exact(h).zip(acc.chunks_exact_mut(h)) {
            if normalize {
                let mean = frame.iter().map(|&v| v as f64).sum::<f64>() / h as f64;
                let var = frame
                    .iter()
                    .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                    .sum::<f64>()
                    / h as f64;
                let r = 1.0 / (var + LN_EPS as f64).sqrt();
                for (o, &v) in out.iter_mut().zip(frame) {
                    *o += (v as f64 - mean) * r;
                }
            } else {
                for (o, &v) in out.iter_mut().zip(frame) {
                    *o += v as f64;
                }
            }
        }
    }
    let n = picks.len() as f64;
    Ok(Tensor::new(&shape, acc.into_iter().map(|v| (v / n) as f32).collect())?)
}
