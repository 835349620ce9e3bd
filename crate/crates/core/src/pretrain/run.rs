use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{align_labels, crop_labels, Batcher, Checkpoint, StepStats, TrainConfig, Trainer};
use crate::dsp::{AudioClip, FeatureMatrix};
use crate::encoder::{EncoderConfig, Paradigm};
use crate::error::{CoreError, Result};
use crate::formats::{write_codebook, write_labels};
use crate::quantize::{assign, fit_kmeans, fit_second_iteration, stack_rows, KMeansConfig, LabelSequence};

pub const LOSS_LOG: &str = "loss.tsv";
pub const FINAL_CHECKPOINT: &str = "final.sslc";

/// Configuration of one pre-training run.
#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    /// Periodic checkpoints in step order; the last one is at the final step.
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    /// Stats of the steps run by this call (not those before a resume).
    pub stats: Vec<StepStats>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.sslc")
}

fn log_line(s: &StepStats) -> String {
    format!("{}\t{}\t{}\t{}\n", s.step, s.loss, s.lr, s.tau)
}

/// Keeps the log lines up to and including `step`.
fn truncated_log(path: &Path, step: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(CoreError::io(path, e)),
    };
    let mut out = String::new();
    for line in text.lines() {
        let s: u64 = line
            .split('\t')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::format(path, format!("bad loss log line `{line}`")))?;
        if s <= step {
            let _ = writeln!(out, "{line}");
        }
    }
    Ok(out)
}

/// Trains for `run.train.steps` steps, writing a checkpoint whenever the
/// step is a multiple of `checkpoint_every` and at the last step, then a
/// copy tagged `final.sslc`. `resume` continues from a saved state.
pub fn run_pretraining(
    run: &PretrainRun,
    clips: &[AudioClip],
    labels: Option<&[LabelSequence]>,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<PretrainOutput> {
    let cfg = &run.train;
    cfg.validate()?;
    run.encoder.validate()?;
    let lens: Vec<usize> = clips.iter().map(AudioClip::len).collect();
    let batcher = Batcher::new(&lens, cfg.crop_samples(), cfg.token_budget, run.seed)?;
    let frames = run
        .encoder
        .frames_for(cfg.crop_samples())
        .ok_or_else(|| CoreError::invalid("crop is shorter than the encoder's receptive field"))?;

    let aligned: Vec<Vec<u32>> = match (cfg.paradigm, labels) {
        (Paradigm::Discrete, None) => {
            return Err(CoreError::invalid("discrete pre-training needs pseudo-label files"))
        }
        (Paradigm::Discrete, Some(ls)) => {
            if ls.len() != clips.len() {
                return Err(CoreError::Mismatch(format!(
                    "{} label sequences for {} clips",
                    ls.len(),
                    clips.len()
                )));
            }
            let rate = run.encoder.frame_rate();
            let mut out = Vec::with_capacity(ls.len());
            for (i, (l, c)) in ls.iter().zip(clips).enumerate() {
                if (l.frame_rate - rate).abs() > 1e-3 {
                    return Err(CoreError::Mismatch(format!(
                        "labels of clip {i} run at {} Hz, encoder at {rate} Hz",
                        l.frame_rate
                    )));
                }
                match run.encoder.frames_for(c.len()) {
                    Some(t) if batcher.usable().contains(&i) => out.push(align_labels(&l.ids, t)?),
                    _ => out.push(Vec::new()),
                }
            }
            out
        }
        (Paradigm::Continuous, _) => Vec::new(),
    };

    let mut trainer = match resume {
        Some(ck) => {
            if ck.train != *cfg || ck.model.encoder != run.encoder || ck.seed != run.seed {
                return Err(CoreError::Mismatch(
                    "checkpoint configuration differs from this run".into(),
                ));
            }
            ck.into_trainer()?
        }
        None => Trainer::new(run.encoder.clone(), cfg.clone(), run.seed)?,
    };
    if trainer.step() > cfg.steps {
        return Err(CoreError::invalid(format!(
            "checkpoint step {} is past the configured {} steps",
            trainer.step(),
            cfg.steps
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = truncated_log(&log_path, trainer.step())?;
    let mut checkpoints: Vec<PathBuf> = (1..=trainer.step())
        .filter(|s| s % cfg.checkpoint_every == 0)
        .map(|s| out_dir.join(checkpoint_name(s)))
        .collect();
    let mut stats = Vec::new();
    let budget = batcher.per_batch() * batcher.crop_samples();

    while trainer.step() < cfg.steps {
        let plan = batcher.batch(trainer.step());
        let waves: Vec<&[f32]> = plan
            .iter()
            .map(|p| &clips[p.clip].samples()[p.offset..p.offset + batcher.crop_samples()])
            .collect();
        assert_eq!(waves.iter().map(|w| w.len()).sum::<usize>(), budget);
        let s = match cfg.paradigm {
            Paradigm::Discrete => {
                let crop_l = plan
                    .iter()
                    .map(|p| crop_labels(&aligned[p.clip], p.offset, frames))
                    .collect::<Result<Vec<_>>>()?;
                trainer.discrete_step(&waves, &crop_l)?
            }
            Paradigm::Continuous => trainer.continuous_step(&waves)?,
        };
        log.push_str(&log_line(&s));
        if s.step % 50 == 0 || s.step == 1 {
            log::info!("step {} loss {:.4} lr {:.2e} tau {:.5}", s.step, s.loss, s.lr, s.tau);
        }
        stats.push(s);
        if s.step % cfg.checkpoint_every == 0 || s.step == cfg.steps {
            let path = out_dir.join(checkpoint_name(s.step));
            Checkpoint::from_trainer(&trainer, &run.config_hash).save(&path)?;
            fs::write(&log_path, &log).map_err(|e| CoreError::io(&log_path, e))?;
            checkpoints.push(path);
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    Checkpoint::from_trainer(&trainer, &run.config_hash).save(&final_checkpoint)?;
    fs::write(&log_path, &log).map_err(|e| CoreError::io(&log_path, e))?;
    if checkpoints.last() != Some(&out_dir.join(checkpoint_name(cfg.steps))) {
        checkpoints.push(out_dir.join(checkpoint_name(cfg.steps)));
    }
    Ok(PretrainOutput {
        checkpoints,
        final_checkpoint,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub codebooks: Vec<PathBuf>,
    pub label_dirs: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Label file of a manifest entry under `dir`.
pub fn label_path(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel).with_extension("ssll")
}

/// Discrete pre-training over `n` pseudo-label iterations. Iteration 1
/// clusters `features` (MFCC or chroma); each later iteration clusters a
/// hidden layer of the previous iteration's final model and retrains from
/// a fresh initialization with the same seed. Artifacts go to
/// `out_dir/iter{i}/`.
pub fn run_iteration_pipeline(
    n: usize,
    base: &PretrainRun,
    clips: &[AudioClip],
    names: &[String],
    features: &[FeatureMatrix],
    kmeans: &KMeansConfig,
    out_dir: &Path,
) -> Result<IterationOutput> {
    if n == 0 {
        return Err(CoreError::invalid("at least one iteration is required"));
    }
    if base.train.paradigm != Paradigm::Discrete {
        return Err(CoreError::invalid("pseudo-label iterations need the discrete paradigm"));
    }
    if names.len() != clips.len() || features.len() != clips.len() {
        return Err(CoreError::Mismatch("clips, names and features differ in count".into()));
    }
    let mut run = base.clone();
    run.train.head.num_codes = kmeans.k;
    let layer = base
        .train
        .iteration_layer
        .unwrap_or(base.encoder.n_layers.div_ceil(2));
    let mut out = IterationOutput {
        codebooks: Vec::new(),
        label_dirs: Vec::new(),
        final_checkpoint: PathBuf::new(),
    };
    for i in 1..=n {
        let dir = out_dir.join(format!("iter{i}"));
        let (codebook, labels) = if i == 1 {
            let (rows, dims) = stack_rows(features, kmeans.frame_budget, base.seed)?;
            let kind = features[0].kind();
            let fit = fit_kmeans(&rows, dims, kmeans, base.seed, kind)?;
            let labels = features
                .iter()
                .map(|f| assign(&fit.codebook, f))
                .collect::<Result<Vec<_>>>()?;
            (fit.codebook, labels)
        } else {
            let model = Checkpoint::load(&out.final_checkpoint)?.model()?;
            fit_second_iteration(&model, clips, layer, kmeans, base.seed)?
        };
        let cb_path = dir.join("codebook.sslk");
        write_codebook(&cb_path, &codebook)?;
        let label_dir = dir.join("labels");
        for (name, l) in names.iter().zip(&labels) {
            write_labels(&label_path(&label_dir, name), l)?;
        }
        let trained = run_pretraining(&run, clips, Some(&labels), &dir.join("train"), None)?;
        out.codebooks.push(cb_path);
        out.label_dirs.push(label_dir);
        out.final_checkpoint = trained.final_checkpoint;
    }
    Ok(out)
}
