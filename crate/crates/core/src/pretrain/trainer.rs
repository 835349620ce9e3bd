use mirssl_autodiff::{mix64, Adam, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LossFrames, LossKind, TrainConfig};
use crate::encoder::{
    discrete_logits, ema_update, encode, layer_outputs_with, regression_head, teacher_targets,
    EncoderConfig, Model, ModelConfig, Paradigm,
};
use crate::error::{CoreError, Result};

const MASK_STREAM: u64 = 0x4D41_534B;
const DROPOUT_STREAM: u64 = 0x4452_4F50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
    /// Teacher decay applied after the step; 1 for the discrete paradigm.
    pub tau: f64,
    pub masked_frames: usize,
}

/// Student, optional EMA teacher and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    student: Model,
    teacher: Option<ParamStore<f32>>,
    step: u64,
    seed: u64,
}

impl Trainer {
    pub fn new(encoder: EncoderConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = ModelConfig {
            encoder,
            paradigm: cfg.paradigm,
            head: cfg.head.clone(),
        };
        let student = Model::new(model_cfg, seed)?;
        let teacher = match cfg.paradigm {
            Paradigm::Continuous => Some(student.encoder_params()?),
            Paradigm::Discrete => None,
        };
        Ok(Self {
            cfg,
            student,
            teacher,
            step: 0,
            seed,
        })
    }

    /// Reassembles a trainer from saved state.
    pub fn from_state(
        cfg: TrainConfig,
        student: Model,
        teacher: Option<ParamStore<f32>>,
        step: u64,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if student.config().paradigm != cfg.paradigm {
            return Err(CoreError::Mismatch("checkpoint paradigm differs from configuration".into()));
        }
        if teacher.is_some() != (cfg.paradigm == Paradigm::Continuous) {
            return Err(CoreError::Mismatch("teacher presence does not match the paradigm".into()));
        }
        Ok(Self {
            cfg,
            student,
            teacher,
            step,
            seed,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn student(&self) -> &Model {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut Model {
        &mut self.student
    }

    pub fn teacher(&self) -> Option<&ParamStore<f32>> {
        self.teacher.as_ref()
    }

    pub fn teacher_mut(&mut self) -> Option<&mut ParamStore<f32>> {
        self.teacher.as_mut()
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Span mask for the next step over `crops` crops of `frames` frames.
    /// An all-false draw is redrawn once from a second stream.
    pub fn next_mask(&self, crops: usize, frames: usize, allow_empty: bool) -> Result<Vec<bool>> {
        let next = self.step + 1;
        for attempt in 0..2u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(
                self.seed ^ mix64(MASK_STREAM ^ mix64(next)) ^ attempt,
            ));
            let mut mask = Vec::with_capacity(crops * frames);
            for _ in 0..crops {
                mask.extend(self.cfg.mask.sample(frames, &mut rng));
            }
            if allow_empty || mask.iter().any(|&m| m) {
                return Ok(mask);
            }
        }
        Err(CoreError::invalid(format!(
            "mask over {frames} frames is empty after one redraw (span {}, prob {})",
            self.cfg.mask.span, self.cfg.mask.prob
        )))
    }

    fn frames(&self, waves: &[&[f32]]) -> Result<usize> {
        let n = waves.first().map_or(0, |w| w.len());
        if waves.is_empty() || waves.iter().any(|w| w.len() != n) {
            return Err(CoreError::invalid("a batch needs equal-length crops"));
        }
        self.student
            .config()
            .encoder
            .frames_for(n)
            .ok_or_else(|| CoreError::invalid(format!("crop of {n} samples yields no frames")))
    }

    fn graph(&self, waves: &[&[f32]]) -> Result<(Graph<f32>, mirssl_autodiff::Var)> {
        let n = waves[0].len();
        let data: Vec<f32> = waves.iter().flat_map(|w| w.iter().copied()).collect();
        let mut g = Graph::new().with_rng(mix64(self.seed ^ DROPOUT_STREAM), self.step + 1);
        let wave = g.constant(Tensor::new(&[waves.len(), n], data)?)?;
        Ok((g, wave))
    }

    /// Backward pass, clipping and an Adam update at the scheduled rate.
    fn apply(&mut self, mut g: Graph<f32>, loss: mirssl_autodiff::Var) -> Result<(f32, f64)> {
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(CoreError::invalid(format!("non-finite loss at step {}", self.step + 1)));
        }
        g.backward(loss)?;
        let params = self.student.params_mut();
        params.zero_grad();
        g.accumulate_param_grads(params);
        if self.cfg.grad_clip > 0.0 {
            params.clip_grad_norm(self.cfg.grad_clip);
        }
        let next = self.step + 1;
        let lr = self.cfg.lr_at(next);
        Adam::new(lr as f32).step(params, next)?;
        self.step = next;
        Ok((value, lr))
    }

    /// Masked pseudo-label prediction. `labels[b]` holds one code per
    /// encoder frame of crop `b`.
    pub fn discrete_step(&mut self, waves: &[&[f32]], labels: &[&[u32]]) -> Result<StepStats> {
        if self.cfg.paradigm != Paradigm::Discrete {
            return Err(CoreError::invalid("discrete step on a continuous trainer"));
        }
        let frames = self.frames(waves)?;
        if labels.len() != waves.len() {
            return Err(CoreError::invalid(format!(
                "{} label sequences for {} crops",
                labels.len(),
                waves.len()
            )));
        }
        for l in labels {
            if (l.len() as i64 - frames as i64).abs() > 1 {
                return Err(CoreError::Mismatch(format!(
                    "{} labels for {frames} encoder frames",
                    l.len()
                )));
            }
        }
        let k = self.cfg.head.num_codes;
        let mut targets = Vec::with_capacity(waves.len() * frames);
        for l in labels {
            // one-frame slack is absorbed by repeating or dropping the last label
            targets.extend((0..frames).map(|t| l[t.min(l.len() - 1)] as usize));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(CoreError::invalid(format!("label {bad} outside the {k}-code head")));
        }
        let mask = self.next_mask(waves.len(), frames, !self.cfg.masked_only)?;
        let (mut g, wave) = self.graph(waves)?;
        let enc = encode(&mut g, self.student.params(), &self.student.config().encoder, wave, Some(&mask))?;
        let h = self.student.config().encoder.hidden;
        let flat = g.reshape(enc.last(), &[waves.len() * frames, h])?;
        let logits = discrete_logits(&mut g, self.student.params(), flat, self.cfg.head.temperature)?;
        let loss = if self.cfg.masked_only {
            let masked = g.cross_entropy(logits, &targets, &mask)?;
            let unmasked: Vec<bool> = mask.iter().map(|&m| !m).collect();
            if self.cfg.unmasked_weight > 0.0 && unmasked.iter().any(|&u| u) {
                let u = g.cross_entropy(logits, &targets, &unmasked)?;
                let u = g.scale(u, self.cfg.unmasked_weight)?;
                g.add(masked, u)?
            } else {
                masked
            }
        } else {
            g.cross_entropy(logits, &targets, &vec![true; targets.len()])?
        };
        let masked_frames = mask.iter().filter(|&&m| m).count();
        let (loss, lr) = self.apply(g, loss)?;
        Ok(StepStats {
            step: self.step,
            loss,
            lr,
            tau: 1.0,
            masked_frames,
        })
    }

    /// Regression of the student's masked frames onto the teacher's
    /// averaged top layers, followed by the EMA teacher update.
    pub fn continuous_step(&mut self, waves: &[&[f32]]) -> Result<StepStats> {
        let teacher = match (&self.teacher, self.cfg.paradigm) {
            (Some(t), Paradigm::Continuous) => t,
            _ => return Err(CoreError::invalid("continuous step on a discrete trainer")),
        };
        let frames = self.frames(waves)?;
        let enc_cfg = self.student.config().encoder.clone();
        let h = enc_cfg.hidden;
        let rows = waves.len() * frames;
        let layers = layer_outputs_with(teacher, &enc_cfg, waves)?;
        let targets = teacher_targets(&layers, self.cfg.target_layers, self.cfg.normalize_targets)?
            .reshaped(&[rows, h])?;
        let all = self.cfg.loss_frames == LossFrames::All;
        let mask = self.next_mask(waves.len(), frames, all)?;
        let (mut g, wave) = self.graph(waves)?;
        let enc = encode(&mut g, self.student.params(), &enc_cfg, wave, Some(&mask))?;
        let flat = g.reshape(enc.last(), &[rows, h])?;
        let pred = regression_head(&mut g, self.student.params(), flat)?;
        let sel = if all { vec![true; rows] } else { mask.clone() };
        let loss = match self.cfg.loss_kind {
            LossKind::Mse => g.mse(pred, &targets, &sel)?,
            LossKind::SmoothL1 => g.smooth_l1(pred, &targets, self.cfg.smooth_l1_beta, &sel)?,
        };
        let masked_frames = mask.iter().filter(|&&m| m).count();
        let (loss, lr) = self.apply(g, loss)?;
        let tau = self.cfg.tau.at(self.step, self.cfg.steps);
        let teacher = self.teacher.as_mut().expect("checked above");
        ema_update(teacher, self.student.params(), tau)?;
        Ok(StepStats {
            step: self.step,
            loss,
            lr,
            tau,
            masked_frames,
        })
    }

    /// Euclidean distance between teacher and student encoder parameters.
    pub fn teacher_distance(&self) -> Option<f64> {
        let t = self.teacher.as_ref()?;
        let mut acc = 0.0f64;
        for p in t.iter() {
            let s = self.student.params().by_name(&p.name).ok()?;
            for (&a, &b) in p.value.data().iter().zip(s.value.data()) {
                acc += ((a - b) as f64).powi(2);
            }
        }
        Some(acc.sqrt())
    }
}
