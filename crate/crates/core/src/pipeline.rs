//! Stage functions behind the command-line tool. Each stage reads its
//! inputs from disk, writes its artifacts under one output directory and
//! removes what it created if it fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{FeatureChoice, RunConfig};
use crate::dsp::{chroma, load_audio, mfcc, resample, AudioClip, FeatureMatrix, SAMPLE_RATE};
use crate::error::{CoreError, Result};
use crate::formats::{read_codebook, read_features, read_labels, write_codebook, write_features, write_labels};
use crate::manifest::{LabelFile, LabelKind, Manifest, ManifestRow, Split, TaskLabel};
use crate::metrics::{
    accuracy, average_precision_macro, beat_f_measure, dbn_decode, r2, refined_key_score,
    roc_auc_macro, BeatGrid, KeyLabel, MetricReport,
};
use crate::pretrain::{
    label_path, run_iteration_pipeline, run_pretraining, Checkpoint, PretrainRun, FINAL_CHECKPOINT,
};
use crate::probe::{
    encoder_hash, extract_frame_embeddings, extract_layer_embeddings, framewise_probe_targets,
    pack_frames, pack_layers, train_probe, Prediction, ProbeData, ProbeMeta, ProbeModel, TaskKind,
    Targets,
};
use crate::quantize::{assign, fit_kmeans, fit_second_iteration, stack_rows, LabelSequence};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CODEBOOK_FILE: &str = "codebook.sslk";
pub const LABEL_DIR: &str = "labels";
pub const PROBE_FILE: &str = "probe.sslp";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Removes files and directories created under `root` unless committed.
/// Files that existed before are left in place.
pub struct OutputGuard {
    root: PathBuf,
    existed: bool,
    before: BTreeSet<PathBuf>,
    armed: bool,
}

fn walk(root: &Path, out: &mut BTreeSet<PathBuf>) {
    if let Ok(entries) = fs::read_dir(root) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(&p, out);
            }
            out.insert(p);
        }
    }
}

impl OutputGuard {
    pub fn new(root: &Path) -> Self {
        let mut before = BTreeSet::new();
        walk(root, &mut before);
        Self {
            root: root.to_path_buf(),
            existed: root.exists(),
            before,
            armed: true,
        }
    }

    pub fn commit(mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        if !self.existed {
            let _ = fs::remove_dir_all(&self.root);
            return;
        }
        let mut now = BTreeSet::new();
        walk(&self.root, &mut now);
        // children sort after their parents, so reverse order empties dirs first
        let created: Vec<&PathBuf> = now.difference(&self.before).collect();
        for p in created.into_iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// Runs `f` with a guard over `out`, committing on success.
pub fn guarded<T>(out: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let guard = OutputGuard::new(out);
    let v = f()?;
    guard.commit();
    Ok(v)
}

/// Maps `f` over `items` on `workers` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Which run produced the artifacts of a directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub manifest_hash: String,
    pub seed: u64,
}

impl Provenance {
    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(PROVENANCE_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CoreError::invalid(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CoreError::io(&path, e))
    }
}

fn provenance(stage: &str, cfg: &RunConfig, manifest: &Manifest) -> Provenance {
    Provenance {
        stage: stage.into(),
        config_hash: cfg.hash(),
        manifest_hash: manifest.hash(),
        seed: cfg.seed,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))
}

/// Loads a manifest entry, resampling to the working rate when needed.
pub fn load_clip(manifest: &Manifest, row: &ManifestRow) -> Result<AudioClip> {
    let path = manifest.audio_path(row);
    let clip = load_audio(&path)?;
    if clip.sample_rate() == SAMPLE_RATE {
        Ok(clip)
    } else {
        resample(&clip, SAMPLE_RATE)
    }
}

pub fn feature_path(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel).with_extension("sslf")
}

pub fn compute_features(clip: &AudioClip, cfg: &RunConfig) -> Result<FeatureMatrix> {
    match cfg.dsp.feature {
        FeatureChoice::Mfcc => mfcc(clip, &cfg.dsp.mfcc),
        FeatureChoice::Chroma => chroma(clip, &cfg.dsp.chroma),
    }
}

/// Writes one feature dump per manifest entry, mirroring its path.
pub fn extract_features(manifest_path: &Path, cfg: &RunConfig, out: &Path, workers: usize) -> Result<usize> {
    let manifest = Manifest::read(manifest_path)?;
    guarded(out, || {
        create_dir(out)?;
        par_map(manifest.rows(), workers, |row| {
            let f = compute_features(&load_clip(&manifest, row)?, cfg)?;
            write_features(&feature_path(out, &row.path), &f)
        })?;
        provenance("features", cfg, &manifest).write(out)?;
        Ok(manifest.len())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSummary {
    pub k: usize,
    pub iterations: usize,
    pub inertia: f64,
}

fn write_label_dir(out: &Path, manifest: &Manifest, labels: &[LabelSequence]) -> Result<()> {
    let dir = out.join(LABEL_DIR);
    for (row, l) in manifest.rows().iter().zip(labels) {
        write_labels(&label_path(&dir, &row.path), l)?;
    }
    Ok(())
}

/// Fits the first-iteration codebook on feature dumps and writes it with
/// one pseudo-label file per entry.
pub fn fit_codebook(
    manifest_path: &Path,
    features_dir: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<CodebookSummary> {
    let manifest = Manifest::read(manifest_path)?;
    let feats = manifest
        .rows()
        .iter()
        .map(|r| read_features(&feature_path(features_dir, &r.path)))
        .collect::<Result<Vec<_>>>()?;
    guarded(out, || {
        create_dir(out)?;
        let (rows, dims) = stack_rows(&feats, cfg.quantize.frame_budget, cfg.seed)?;
        let fit = fit_kmeans(&rows, dims, &cfg.quantize, cfg.seed, feats[0].kind())?;
        let labels = feats
            .iter()
            .map(|f| assign(&fit.codebook, f))
            .collect::<Result<Vec<_>>>()?;
        write_codebook(&out.join(CODEBOOK_FILE), &fit.codebook)?;
        write_label_dir(out, &manifest, &labels)?;
        provenance("kmeans", cfg, &manifest).write(out)?;
        Ok(CodebookSummary {
            k: fit.codebook.k(),
            iterations: fit.iterations,
            inertia: fit.final_inertia(),
        })
    })
}

fn load_clips(manifest: &Manifest, workers: usize) -> Result<Vec<AudioClip>> {
    par_map(manifest.rows(), workers, |r| load_clip(manifest, r))
}

/// Second-iteration codebook on a hidden layer of a trained checkpoint.
/// The layer defaults to the middle of the stack.
pub fn fit_codebook_from_checkpoint(
    manifest_path: &Path,
    checkpoint: &Path,
    layer: Option<usize>,
    cfg: &RunConfig,
    out: &Path,
    workers: usize,
) -> Result<CodebookSummary> {
    let manifest = Manifest::read(manifest_path)?;
    let model = Checkpoint::load(checkpoint)?.model()?;
    let layer = layer
        .or(cfg.pretrain.iteration_layer)
        .unwrap_or(model.config().encoder.n_layers.div_ceil(2));
    let clips = load_clips(&manifest, workers)?;
    guarded(out, || {
        create_dir(out)?;
        let (codebook, labels) = fit_second_iteration(&model, &clips, layer, &cfg.quantize, cfg.seed)?;
        write_codebook(&out.join(CODEBOOK_FILE), &codebook)?;
        write_label_dir(out, &manifest, &labels)?;
        provenance("kmeans", cfg, &manifest).write(out)?;
        Ok(CodebookSummary {
            k: codebook.k(),
            iterations: 0,
            inertia: f64::NAN,
        })
    })
}

/// Pre-trains from scratch or from `resume`, returning the final
/// checkpoint path. Discrete runs read pseudo-labels from `labels_dir`;
/// with more than one iteration they cluster `features_dir` themselves.
pub fn pretrain(
    manifest_path: &Path,
    labels_dir: Option<&Path>,
    features_dir: Option<&Path>,
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    workers: usize,
) -> Result<PathBuf> {
    let manifest = Manifest::read(manifest_path)?;
    let mut run = PretrainRun {
        encoder: cfg.encoder.clone(),
        train: cfg.pretrain.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    // the head predicts codes of the codebook that produced the labels,
    // falling back to the configured K
    run.train.head.num_codes = match labels_dir.and_then(Path::parent).map(|d| d.join(CODEBOOK_FILE)) {
        Some(cb) if cb.exists() => read_codebook(&cb)?.k(),
        _ => cfg.quantize.k,
    };
    let resume = resume.map(Checkpoint::load).transpose()?;
    let clips = load_clips(&manifest, workers)?;
    let discrete = cfg.pretrain.paradigm == crate::encoder::Paradigm::Discrete;
    guarded(out, || {
        create_dir(out)?;
        provenance("pretrain", cfg, &manifest).write(out)?;
        if discrete && cfg.pretrain.iterations > 1 {
            if resume.is_some() {
                return Err(CoreError::invalid("multi-iteration runs cannot resume"));
            }
            let dir = features_dir.ok_or_else(|| {
                CoreError::invalid("multi-iteration pre-training needs --features")
            })?;
            let feats = manifest
                .rows()
                .iter()
                .map(|r| read_features(&feature_path(dir, &r.path)))
                .collect::<Result<Vec<_>>>()?;
            let names: Vec<String> = manifest.rows().iter().map(|r| r.path.clone()).collect();
            let it = run_iteration_pipeline(
                cfg.pretrain.iterations,
                &run,
                &clips,
                &names,
                &feats,
                &cfg.quantize,
                out,
            )?;
            let last = out.join(FINAL_CHECKPOINT);
            fs::copy(&it.final_checkpoint, &last).map_err(|e| CoreError::io(&last, e))?;
            return Ok(last);
        }
        let labels = match (discrete, labels_dir) {
            (true, Some(dir)) => Some(
                manifest
                    .rows()
                    .iter()
                    .map(|r| read_labels(&label_path(dir, &r.path)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            (true, None) => return Err(CoreError::invalid("discrete pre-training needs --labels")),
            (false, _) => None,
        };
        let res = run_pretraining(&run, &clips, labels.as_deref(), out, resume)?;
        Ok(res.final_checkpoint)
    })
}

/// Probe task implied by a label kind.
pub fn task_for(kind: LabelKind, configured: Option<TaskKind>) -> Result<TaskKind> {
    let derived = match kind {
        LabelKind::Multiclass | LabelKind::Key => TaskKind::Multiclass,
        LabelKind::Multilabel { .. } => TaskKind::Multilabel,
        LabelKind::Regression => TaskKind::Regression,
        LabelKind::Beat => TaskKind::Framewise,
    };
    match configured {
        Some(t) if t != derived => Err(CoreError::Config {
            path: "probe.task_kind".into(),
            detail: format!("{t:?} does not fit {kind} labels"),
        }),
        _ => Ok(derived),
    }
}

fn out_dim(labels: &LabelFile) -> usize {
    match labels.kind {
        LabelKind::Multiclass => labels
            .labels
            .values()
            .filter_map(|l| match l {
                TaskLabel::Class(c) => Some(*c as usize + 1),
                _ => None,
            })
            .max()
            .unwrap_or(1),
        LabelKind::Key => 24,
        LabelKind::Multilabel { n_tags } => n_tags,
        LabelKind::Regression => 2,
        LabelKind::Beat => 1,
    }
}

/// One manifest entry's probe inputs: a single packed row, or one per frame.
struct Embedded {
    inputs: Vec<f32>,
    rows: usize,
}

fn collect(items: &[(&ManifestRow, &Embedded)], labels: &LabelFile, n_out: usize, frame_rate: f64) -> Result<ProbeData> {
    let mut inputs = Vec::new();
    let mut rows = 0;
    let mut classes = Vec::new();
    let mut ys = Vec::new();
    for (row, e) in items {
        inputs.extend_from_slice(&e.inputs);
        rows += e.rows;
        match labels.get(&row.path)? {
            TaskLabel::Class(c) => classes.push(*c as usize),
            TaskLabel::Key(k) => classes.push(k.index()),
            TaskLabel::Tags(bits) => ys.extend((0..n_out).map(|j| ((bits >> j) & 1) as f32)),
            TaskLabel::Pair(a, b) => ys.extend([*a as f32, *b as f32]),
            TaskLabel::Beats(ts) => ys.extend(framewise_probe_targets(ts, e.rows, frame_rate)),
        }
    }
    let targets = match labels.kind {
        LabelKind::Multiclass | LabelKind::Key => Targets::Classes(classes),
        LabelKind::Regression => Targets::Real(ys),
        _ => Targets::Binary(ys),
    };
    Ok(ProbeData { inputs, rows, targets })
}

/// Probe outputs over one split, keyed by manifest path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predictions {
    pub task: String,
    pub kind: String,
    pub split: Split,
    pub config_hash: String,
    pub manifest_hash: String,
    pub labels_hash: String,
    pub encoder_hash: String,
    pub rows: Vec<PredictionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRow {
    pub path: String,
    pub prediction: Prediction,
}

impl Predictions {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CoreError::invalid(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOutput {
    pub probe: PathBuf,
    pub predictions: PathBuf,
    pub best_valid: f64,
}

/// Default task name: the directory holding the label file.
pub fn task_name(labels_path: &Path) -> String {
    labels_path
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "task".into())
}

/// Trains a probe on the frozen checkpoint encoder (train split, early
/// stopping on valid) and writes it with predictions for the test split.
pub fn probe(
    checkpoint: &Path,
    manifest_path: &Path,
    labels_path: &Path,
    task: &str,
    cfg: &RunConfig,
    out: &Path,
    workers: usize,
) -> Result<ProbeOutput> {
    let ck = Checkpoint::load(checkpoint)?;
    let enc = ck.model.encoder.clone();
    let params = ck.student;
    let hash = encoder_hash(&params);
    let manifest = Manifest::read(manifest_path)?;
    let labels = LabelFile::read(labels_path)?;
    labels.check_covers(&manifest)?;
    let task_kind = task_for(labels.kind, cfg.probe.task_kind)?;
    let n_out = out_dim(&labels);
    let frame_rate = enc.frame_rate() as f64;

    let rows = manifest.rows();
    let embedded = par_map(rows, workers, |row| {
        let clip = load_clip(&manifest, row)?;
        if task_kind == TaskKind::Framewise {
            let frames = extract_frame_embeddings(&params, &enc, &clip)?;
            Ok(Embedded {
                rows: frames[0].shape()[0],
                inputs: pack_frames(&frames),
            })
        } else {
            let emb = extract_layer_embeddings(&params, &enc, &clip, &cfg.probe.window)?;
            Ok(Embedded {
                rows: 1,
                inputs: pack_layers(&emb),
            })
        }
    })?;
    let split_of = |s: Split| -> Vec<(&ManifestRow, &Embedded)> {
        rows.iter()
            .zip(&embedded)
            .filter(|(r, _)| r.split.unwrap_or(Split::Train) == s)
            .collect()
    };
    let (train, valid, test) = (split_of(Split::Train), split_of(Split::Valid), split_of(Split::Test));
    for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if part.is_empty() {
            return Err(CoreError::invalid(format!("the manifest has no {name} rows")));
        }
    }
    let meta = ProbeMeta {
        config: cfg.probe.clone(),
        task: task_kind,
        n_layers: enc.n_layers + 1,
        dim: enc.hidden,
        out_dim: n_out,
        encoder_hash: hash.clone(),
        config_hash: cfg.hash(),
    };
    let train_data = collect(&train, &labels, n_out, frame_rate)?;
    let valid_data = collect(&valid, &labels, n_out, frame_rate)?;
    let (model, history) = train_probe(&train_data, &valid_data, meta, cfg.seed)?;
    if encoder_hash(&params) != hash {
        return Err(CoreError::Mismatch("encoder parameters changed during probing".into()));
    }
    let preds = test
        .iter()
        .map(|(r, e)| {
            Ok(PredictionRow {
                path: r.path.clone(),
                prediction: model.predict_packed(&e.inputs, e.rows)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_valid = history
        .valid_score
        .get(history.best_epoch.saturating_sub(1))
        .copied()
        .unwrap_or(f64::NAN);
    guarded(out, || {
        create_dir(out)?;
        let probe_path = out.join(PROBE_FILE);
        model.save(&probe_path)?;
        let pred_path = out.join(PREDICTIONS_FILE);
        Predictions {
            task: task.into(),
            kind: labels.kind.to_string(),
            split: Split::Test,
            config_hash: cfg.hash(),
            manifest_hash: manifest.hash(),
            labels_hash: labels.hash(),
            encoder_hash: hash,
            rows: preds,
        }
        .write(&pred_path)?;
        Ok(ProbeOutput {
            probe: probe_path,
            predictions: pred_path,
            best_valid,
        })
    })
}

/// Re-runs a saved probe on a checkpoint for every entry of `split`.
pub fn predict_split(
    probe_path: &Path,
    checkpoint: &Path,
    manifest_path: &Path,
    split: Split,
) -> Result<Vec<PredictionRow>> {
    let model = ProbeModel::load(probe_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    let manifest = Manifest::read(manifest_path)?;
    manifest
        .rows_in(split)
        .into_iter()
        .map(|r| {
            let clip = load_clip(&manifest, r)?;
            Ok(PredictionRow {
                path: r.path.clone(),
                prediction: crate::probe::predict(&model, &ck.student, &ck.model.encoder, &clip)?,
            })
        })
        .collect()
}

fn wrong_prediction(path: &str) -> CoreError {
    CoreError::Mismatch(format!("{path}: prediction type does not fit the labels"))
}

/// Scores predictions against reference labels. Config, label and
/// manifest hashes must match the predictions unless `force` is set.
pub fn evaluate(
    predictions_path: &Path,
    labels_path: &Path,
    manifest_path: Option<&Path>,
    cfg: &RunConfig,
    force: bool,
) -> Result<MetricReport> {
    let preds = Predictions::read(predictions_path)?;
    let labels = LabelFile::read(labels_path)?;
    if preds.kind != labels.kind.to_string() {
        return Err(CoreError::Mismatch(format!(
            "predictions are {} but labels are {}",
            preds.kind, labels.kind
        )));
    }
    let mut checks = vec![
        ("configuration", preds.config_hash.clone(), cfg.hash()),
        ("label file", preds.labels_hash.clone(), labels.hash()),
    ];
    if let Some(m) = manifest_path {
        checks.push(("manifest", preds.manifest_hash.clone(), Manifest::read(m)?.hash()));
    }
    for (what, theirs, ours) in checks {
        if theirs != ours {
            if !force {
                return Err(CoreError::Mismatch(format!(
                    "{what} hash differs from the one the predictions were made with (use --force to override)"
                )));
            }
            log::warn!("{what} hash mismatch ignored");
        }
    }
    if preds.rows.is_empty() {
        return Err(CoreError::invalid("no predictions to evaluate"));
    }
    let mut metrics = BTreeMap::new();
    let mut per_tag = BTreeMap::new();
    let mut excluded_tags = Vec::new();
    let pairs = preds
        .rows
        .iter()
        .map(|r| Ok((r.path.as_str(), &r.prediction, labels.get(&r.path)?)))
        .collect::<Result<Vec<_>>>()?;
    match labels.kind {
        LabelKind::Multiclass => {
            let mut p = Vec::new();
            let mut t = Vec::new();
            for (path, pred, label) in &pairs {
                match (pred, label) {
                    (Prediction::Class(a), TaskLabel::Class(b)) => {
                        p.push(*a);
                        t.push(*b);
                    }
                    _ => return Err(wrong_prediction(path)),
                }
            }
            metrics.insert("accuracy".to_string(), accuracy(&p, &t)?);
        }
        LabelKind::Key => {
            let mut hits = 0.0;
            let mut refined = 0.0;
            for (path, pred, label) in &pairs {
                let (Prediction::Class(a), TaskLabel::Key(r)) = (pred, label) else {
                    return Err(wrong_prediction(path));
                };
                let est = KeyLabel::from_index(*a as usize)?;
                hits += f64::from(u8::from(est == *r));
                refined += refined_key_score(est, *r, cfg.metric.bidirectional_fifth);
            }
            let n = pairs.len() as f64;
            metrics.insert("accuracy".to_string(), hits / n);
            metrics.insert("refined_accuracy".to_string(), refined / n);
        }
        LabelKind::Multilabel { n_tags } => {
            let mut scores = vec![Vec::new(); n_tags];
            let mut truth = vec![Vec::new(); n_tags];
            for (path, pred, label) in &pairs {
                match (pred, label) {
                    (Prediction::Scores(s), TaskLabel::Tags(bits)) if s.len() == n_tags => {
                        for j in 0..n_tags {
                            scores[j].push(s[j]);
                            truth[j].push((bits >> j) & 1 == 1);
                        }
                    }
                    _ => return Err(wrong_prediction(path)),
                }
            }
            let auc = roc_auc_macro(&scores, &truth)?;
            let ap = average_precision_macro(&scores, &truth)?;
            metrics.insert("roc_auc".to_string(), auc.mean);
            metrics.insert("average_precision".to_string(), ap.mean);
            for (j, v) in auc.per_tag.iter().enumerate() {
                if let Some(v) = v {
                    per_tag.insert(format!("roc_auc/{j}"), *v);
                }
            }
            for (j, v) in ap.per_tag.iter().enumerate() {
                if let Some(v) = v {
                    per_tag.insert(format!("average_precision/{j}"), *v);
                }
            }
            excluded_tags = auc.excluded.clone();
        }
        LabelKind::Regression => {
            let mut p = [Vec::new(), Vec::new()];
            let mut t = [Vec::new(), Vec::new()];
            for (path, pred, label) in &pairs {
                match (pred, label) {
                    (Prediction::Values(v), TaskLabel::Pair(a, b)) if v.len() == 2 => {
                        p[0].push(v[0]);
                        p[1].push(v[1]);
                        t[0].push(*a);
                        t[1].push(*b);
                    }
                    _ => return Err(wrong_prediction(path)),
                }
            }
            let rv = r2(&p[0], &t[0])?;
            let ra = r2(&p[1], &t[1])?;
            metrics.insert("r2_valence".to_string(), rv);
            metrics.insert("r2_arousal".to_string(), ra);
            metrics.insert("r2".to_string(), 0.5 * (rv + ra));
        }
        LabelKind::Beat => {
            let mut total = 0.0;
            for (path, pred, label) in &pairs {
                let (Prediction::Activation(a), TaskLabel::Beats(b)) = (pred, label) else {
                    return Err(wrong_prediction(path));
                };
                let est = dbn_decode(a, &cfg.metric.dbn)?;
                let reference = BeatGrid::new(b.clone())?;
                total += beat_f_measure(&est, &reference, cfg.metric.beat_tolerance);
            }
            metrics.insert("f_measure".to_string(), total / pairs.len() as f64);
        }
    }
    let report = MetricReport {
        task: preds.task,
        split: preds.split.as_str().to_string(),
        metrics,
        per_tag,
        excluded_tags,
        config_hash: preds.config_hash,
        manifest_hash: preds.manifest_hash,
    };
    report.validate()?;
    Ok(report)
}

/// Writes `report.json` and `report.txt` into `out`.
pub fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    guarded(out, || {
        create_dir(out)?;
        let json = out.join(REPORT_JSON);
        fs::write(&json, report.to_json()? + "\n").map_err(|e| CoreError::io(&json, e))?;
        let text = out.join(REPORT_TEXT);
        fs::write(&text, report.to_text()).map_err(|e| CoreError::io(&text, e))
    })
}

/// A results table: one row per run (configuration hash), one column per
/// task and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub columns: Vec<String>,
    pub rows: Vec<ResultsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub run: String,
    pub values: Vec<Option<f64>>,
}

pub fn consolidate(reports: &[MetricReport]) -> ResultsTable {
    let col = |r: &MetricReport, m: &str| format!("{} {}", r.task, m);
    let columns: BTreeSet<String> = reports
        .iter()
        .flat_map(|r| r.metrics.keys().map(move |m| col(r, m)))
        .collect();
    let columns: Vec<String> = columns.into_iter().collect();
    let mut runs: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in reports {
        let run = r.config_hash.chars().take(12).collect::<String>();
        let entry = runs.entry(run).or_default();
        for (m, v) in &r.metrics {
            entry.insert(col(r, m), *v);
        }
    }
    ResultsTable {
        rows: runs
            .into_iter()
            .map(|(run, vals)| ResultsRow {
                run,
                values: columns.iter().map(|c| vals.get(c).copied()).collect(),
            })
            .collect(),
        columns,
    }
}

impl ResultsTable {
    /// Fixed-width text table.
    pub fn to_text(&self) -> String {
        let mut header = vec!["run".to_string()];
        header.extend(self.columns.iter().cloned());
        let mut lines = vec![header];
        for r in &self.rows {
            let mut line = vec![r.run.clone()];
            line.extend(r.values.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.4}"))));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (n, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
            if n == 0 {
                s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                s.push('\n');
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

#[cfg(test)]
mod tests;
