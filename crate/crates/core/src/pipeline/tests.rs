use super::*;
use crate::encoder::Paradigm;
use crate::synth::{gen_corpus, SynthSpec, SynthTask, LABEL_FILE};
use proptest::prelude::*;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 11;
    c.encoder.conv_layers.iter_mut().for_each(|l| l.channels = 8);
    c.encoder.hidden = 16;
    c.encoder.heads = 2;
    c.encoder.ff_dim = 32;
    c.encoder.dropout = 0.0;
    c.encoder.max_positions = 128;
    c.quantize.k = 4;
    c.pretrain.steps = 4;
    c.pretrain.crop_seconds = 0.5;
    c.pretrain.token_budget = 16000;
    c.pretrain.checkpoint_every = 2;
    c.pretrain.head.proj_dim = 16;
    c.pretrain.mask.span = 3;
    c.pretrain.mask.prob = 0.5;
    c.probe.hidden = 16;
    c.probe.epochs = 3;
    c.probe.window.window_seconds = 1.0;
    c.probe.window.hop_seconds = 1.0;
    c
}

fn corpus(task: SynthTask, n: usize, dir: &Path) -> PathBuf {
    let spec = SynthSpec {
        task,
        n_clips: n,
        duration: 2.0,
        seed: 5,
        sample_rate: 16000,
    };
    gen_corpus(&spec, dir).unwrap()
}

/// synth -> features -> kmeans -> pretrain -> probe -> eval
fn run_all(task: SynthTask, cfg: &RunConfig, dir: &Path) -> MetricReport {
    let manifest = corpus(task, 20, &dir.join("corpus"));
    extract_features(&manifest, cfg, &dir.join("features"), 2).unwrap();
    fit_codebook(&manifest, &dir.join("features"), cfg, &dir.join("kmeans")).unwrap();
    let ck = pretrain(
        &manifest,
        Some(&dir.join("kmeans").join(LABEL_DIR)),
        None,
        cfg,
        &dir.join("train"),
        None,
        1,
    )
    .unwrap();
    let labels = dir.join("corpus").join(LABEL_FILE);
    let out = probe(&ck, &manifest, &labels, "t", cfg, &dir.join("probe"), 2).unwrap();
    evaluate(&out.predictions, &labels, Some(&manifest), cfg, false).unwrap()
}

#[test]
fn pipeline_runs_for_every_task_and_reruns_identically() {
    let cfg = tiny_config();
    for task in [SynthTask::Pitch, SynthTask::Beat, SynthTask::Key, SynthTask::Tags, SynthTask::Emotion] {
        let a = tempfile::tempdir().unwrap();
        let r = run_all(task, &cfg, a.path());
        assert!(!r.metrics.is_empty(), "{task:?}");
        assert_eq!(r.config_hash, cfg.hash());
        if task == SynthTask::Pitch {
            let b = tempfile::tempdir().unwrap();
            assert_eq!(run_all(task, &cfg, b.path()).to_json().unwrap(), r.to_json().unwrap());
            for f in ["train/final.sslc", "kmeans/codebook.sslk", "probe/probe.sslp"] {
                assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
            }
        }
    }
}

#[test]
fn saved_probe_reproduces_its_predictions() {
    let cfg = tiny_config();
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    run_all(SynthTask::Tags, &cfg, dir);
    let preds = Predictions::read(&dir.join("probe").join(PREDICTIONS_FILE)).unwrap();
    let again = predict_split(
        &dir.join("probe").join(PROBE_FILE),
        &dir.join("train").join(FINAL_CHECKPOINT),
        &dir.join("corpus").join("manifest.tsv"),
        Split::Test,
    )
    .unwrap();
    assert_eq!(again, preds.rows);
}

#[test]
fn eval_of_perfect_predictions_and_hash_checks() {
    let cfg = tiny_config();
    let d = tempfile::tempdir().unwrap();
    let manifest_path = corpus(SynthTask::Pitch, 10, d.path());
    let labels_path = d.path().join(LABEL_FILE);
    let labels = LabelFile::read(&labels_path).unwrap();
    let manifest = Manifest::read(&manifest_path).unwrap();
    let rows = manifest
        .rows()
        .iter()
        .map(|r| {
            let TaskLabel::Class(c) = labels.get(&r.path).unwrap() else { unreachable!() };
            PredictionRow {
                path: r.path.clone(),
                prediction: Prediction::Class(*c),
            }
        })
        .collect();
    let mut preds = Predictions {
        task: "pitch".into(),
        kind: "multiclass".into(),
        split: Split::Test,
        config_hash: cfg.hash(),
        manifest_hash: manifest.hash(),
        labels_hash: labels.hash(),
        encoder_hash: String::new(),
        rows,
    };
    let p = d.path().join("p.json");
    preds.write(&p).unwrap();
    let r = evaluate(&p, &labels_path, Some(&manifest_path), &cfg, false).unwrap();
    assert_eq!(r.metrics["accuracy"], 1.0);

    preds.config_hash = "other".into();
    preds.write(&p).unwrap();
    assert!(matches!(
        evaluate(&p, &labels_path, None, &cfg, false),
        Err(CoreError::Mismatch(_))
    ));
    assert_eq!(evaluate(&p, &labels_path, None, &cfg, true).unwrap().metrics["accuracy"], 1.0);

    preds.kind = "regression".into();
    preds.write(&p).unwrap();
    assert!(evaluate(&p, &labels_path, None, &cfg, true).is_err());
}

#[test]
fn report_rows_share_columns() {
    let mk = |hash: &str, acc: f64| MetricReport {
        task: "pitch".into(),
        split: "test".into(),
        metrics: [("accuracy".to_string(), acc)].into_iter().collect(),
        per_tag: BTreeMap::new(),
        excluded_tags: vec![],
        config_hash: hash.into(),
        manifest_hash: "m".into(),
    };
    let mut beat = mk("aaaa", 0.0);
    beat.task = "beat".into();
    beat.metrics = [("f_measure".to_string(), 0.5)].into_iter().collect();
    let t = consolidate(&[mk("aaaa", 0.9), mk("bbbb", 0.7), beat]);
    assert_eq!(t.columns, vec!["beat f_measure", "pitch accuracy"]);
    assert_eq!(t.rows.len(), 2);
    assert!(t.rows.iter().all(|r| r.values.len() == 2));
    assert_eq!(t.rows[1].values, vec![None, Some(0.7)]);
    let text = t.to_text();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("0.9000") && text.contains('-'));
}

#[test]
fn failed_stage_removes_its_partial_output() {
    let cfg = tiny_config();
    let d = tempfile::tempdir().unwrap();
    let manifest = corpus(SynthTask::Pitch, 6, &d.path().join("c"));
    // one missing audio file fails extraction after others were written
    fs::remove_file(d.path().join("c/audio/00005.wav")).unwrap();
    let out = d.path().join("features");
    assert!(extract_features(&manifest, &cfg, &out, 1).is_err());
    assert!(!out.exists());

    // an existing directory keeps its old files but loses the new ones
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    assert!(extract_features(&manifest, &cfg, &out, 1).is_err());
    let left: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("keep.txt")]);
}

#[test]
fn continuous_pretraining_and_second_iteration() {
    let mut cfg = tiny_config();
    let d = tempfile::tempdir().unwrap();
    let manifest = corpus(SynthTask::Pitch, 6, &d.path().join("c"));
    cfg.pretrain.paradigm = Paradigm::Continuous;
    let ck = pretrain(&manifest, None, None, &cfg, &d.path().join("cont"), None, 1).unwrap();
    let s = fit_codebook_from_checkpoint(&manifest, &ck, None, &cfg, &d.path().join("iter2"), 1).unwrap();
    assert_eq!(s.k, 4);
    assert!(d.path().join("iter2/labels/audio/00000.ssll").exists());

    cfg.pretrain.paradigm = Paradigm::Discrete;
    cfg.pretrain.iterations = 2;
    extract_features(&manifest, &cfg, &d.path().join("f"), 1).unwrap();
    let ck = pretrain(&manifest, None, Some(&d.path().join("f")), &cfg, &d.path().join("it"), None, 1).unwrap();
    assert!(ck.ends_with(FINAL_CHECKPOINT) && ck.exists());
    assert!(d.path().join("it/iter2/codebook.sslk").exists());
    // discrete single-iteration without labels is a usage problem of the inputs
    cfg.pretrain.iterations = 1;
    assert!(pretrain(&manifest, None, None, &cfg, &d.path().join("x"), None, 1).is_err());
    assert!(!d.path().join("x").exists());
}

#[test]
fn task_kind_must_fit_labels() {
    assert_eq!(task_for(LabelKind::Key, None).unwrap(), TaskKind::Multiclass);
    assert_eq!(task_for(LabelKind::Beat, None).unwrap(), TaskKind::Framewise);
    assert!(task_for(LabelKind::Beat, Some(TaskKind::Multiclass)).unwrap_err().is_usage());
}

proptest! {
    #[test]
    fn par_map_keeps_order(v in proptest::collection::vec(0u32..1000, 0..50), workers in 1usize..6) {
        let out = par_map(&v, workers, |x| Ok(x * 2)).unwrap();
        prop_assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
