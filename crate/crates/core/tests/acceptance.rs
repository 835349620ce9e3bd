//! End-to-end acceptance checks. Everything runs inside one test so the
//! timed training stages do not compete for cores with each other.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mirssl_autodiff::gradcheck::{check_gradients, op_catalog};
use mirssl_core::config::RunConfig;
use mirssl_core::dsp::FeatureKind;
use mirssl_core::encoder::{ema_update, EncoderConfig, MaskSpec, Model, ModelConfig, Paradigm};
use mirssl_core::metrics::{
    average_precision_macro, beat_f_measure, dbn_decode, refined_key_score, roc_auc_macro,
    BeatGrid, DbnConfig, KeyLabel, Mode, BEAT_TOLERANCE,
};
use mirssl_core::pipeline::{evaluate, extract_features, fit_codebook, pretrain, probe, LABEL_DIR};
use mirssl_core::pretrain::{Checkpoint, LOSS_LOG};
use mirssl_core::quantize::{fit_kmeans, KMeansConfig};
use mirssl_core::synth::{gen_corpus, SynthSpec, SynthTask, LABEL_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn gradients() -> Verdict {
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    let cases = op_catalog();
    for case in &cases {
        for inst in 0..10u64 {
            let inputs = (case.inputs)(inst * 7 + 1);
            let err = match check_gradients(&inputs, 1e-5, case.build) {
                Ok(r) => r.max_rel_err(),
                Err(_) => f64::INFINITY,
            };
            if err > worst.0 {
                worst = (err, case.name);
            }
            if !(err <= 1e-4) {
                failed.push(format!("{}#{inst}", case.name));
            }
        }
    }
    verdict(
        failed.is_empty(),
        format!(
            "{} ops x 10, worst rel err {:.2e} ({}){}",
            cases.len(),
            worst.0,
            worst.1,
            if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Expected fraction of masked frames when `n` distinct starts are drawn
/// uniformly from the valid positions: a frame stays unmasked only if none
/// of the starts covering it is drawn.
fn expected_coverage(t: usize, span: usize, n: usize) -> f64 {
    let positions = t - span + 1;
    let mut total = 0.0;
    for f in 0..t {
        let hi = f.min(positions - 1);
        let lo = f.saturating_sub(span - 1);
        let w = hi - lo + 1;
        let mut p_clear = 1.0;
        for i in 0..n {
            p_clear *= (positions - w - i) as f64 / (positions - i) as f64;
        }
        total += 1.0 - p_clear;
    }
    total / t as f64
}

fn masking() -> Verdict {
    let spec = MaskSpec { span: 10, prob: 0.65 };
    let (t, draws) = (1000, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad_counts = 0;
    let mut covered = 0usize;
    for _ in 0..draws {
        let starts = spec.sample_starts(t, &mut rng);
        if starts.len() != 65 {
            bad_counts += 1;
        }
        let mut mask = vec![false; t];
        for s in starts {
            mask[s..s + 10].iter_mut().for_each(|m| *m = true);
        }
        covered += mask.iter().filter(|&&m| m).count();
    }
    let mc = covered as f64 / (t * draws) as f64;
    let exact = expected_coverage(t, 10, 65);
    let rel = (mc - exact).abs() / exact;
    verdict(
        bad_counts == 0 && rel <= 0.01,
        format!("{bad_counts} draws without 65 starts; coverage {mc:.5} vs {exact:.5} (rel {rel:.2e})"),
    )
}

// ---------------------------------------------------------------- 3

fn same_partition(a: &[u32], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

fn kmeans() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rising = 0;
    for inst in 0..100u64 {
        let dims = rng.gen_range(1..6);
        let n = rng.gen_range(20..200);
        let k = rng.gen_range(1..8);
        let rows: Vec<f32> = (0..n * dims).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let cfg = KMeansConfig {
            k,
            tol: 0.0,
            ..KMeansConfig::default()
        };
        let fit = fit_kmeans(&rows, dims, &cfg, inst, FeatureKind::Mfcc).unwrap();
        if fit.inertia_history.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
            rising += 1;
        }
    }

    // blobs of unit spread whose centres are 100 apart
    let mut lost = 0;
    for inst in 0..20u64 {
        let (k, dims, per) = (5, 3, 40);
        let centres: Vec<Vec<f32>> = (0..k)
            .map(|c| (0..dims).map(|d| if d == c % dims { 100.0 * (c + 1) as f32 } else { 0.0 }).collect())
            .collect();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..k * per {
            let c = (i * 7 + inst as usize) % k;
            truth.push(c);
            rows.extend(centres[c].iter().map(|&m| m + rng.gen_range(-1.0..1.0f32)));
        }
        let cfg = KMeansConfig {
            k,
            ..KMeansConfig::default()
        };
        let fit = fit_kmeans(&rows, dims, &cfg, inst, FeatureKind::Mfcc).unwrap();
        if !same_partition(&fit.assignments, &truth) {
            lost += 1;
        }
    }

    let mut mean_err = 0.0f64;
    for inst in 0..20u64 {
        let dims = 4;
        let n = rng.gen_range(2..300);
        let rows: Vec<f32> = (0..n * dims).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let cfg = KMeansConfig {
            k: 1,
            standardize: false,
            ..KMeansConfig::default()
        };
        let fit = fit_kmeans(&rows, dims, &cfg, inst, FeatureKind::Mfcc).unwrap();
        for d in 0..dims {
            let mean = (0..n).map(|i| rows[i * dims + d] as f64).sum::<f64>() / n as f64;
            mean_err = mean_err.max((fit.centroids[d] - mean).abs());
        }
        // standardized with the stored f32 statistics, so the mean is zero
        // only up to their rounding
        let std_cfg = KMeansConfig {
            standardize: true,
            ..cfg
        };
        let fit = fit_kmeans(&rows, dims, &std_cfg, inst, FeatureKind::Mfcc).unwrap();
        let norm = fit.codebook.norm().expect("standardized codebook");
        for d in 0..dims {
            let (m, s) = (norm.mean[d] as f64, norm.std[d] as f64);
            let mean = (0..n).map(|i| (rows[i * dims + d] as f64 - m) / s).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-6);
            mean_err = mean_err.max((fit.centroids[d] - mean).abs());
        }
    }
    verdict(
        rising == 0 && lost == 0 && mean_err <= 1e-9,
        format!("{rising}/100 with rising inertia; {lost}/20 blob sets missed; K=1 mean err {mean_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
fn auc_oracle(s: &[f64], l: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Step-wise area under the precision-recall curve, one point per
/// distinct score threshold.
fn ap_oracle(s: &[f64], l: &[bool]) -> Option<f64> {
    let pos = l.iter().filter(|&&x| x).count();
    if pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut last_recall) = (0.0, 0.0);
    for th in thresholds {
        let picked: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= th).collect();
        let tp = picked.iter().filter(|&&i| l[i]).count();
        let recall = tp as f64 / pos as f64;
        ap += (recall - last_recall) * tp as f64 / picked.len() as f64;
        last_recall = recall;
    }
    Some(ap)
}

fn macro_oracle(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    f: fn(&[f64], &[bool]) -> Option<f64>,
) -> Option<f64> {
    let mut vals = Vec::new();
    for tag in 0..scores[0].len() {
        let s: Vec<f64> = scores.iter().map(|r| r[tag]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[tag]).collect();
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            vals.push(f(&s, &l)?);
        }
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Largest one-to-one matching within tolerance, by exhaustive search.
fn max_matching(est: &[f64], reference: &[f64], used: &mut Vec<bool>, tol: f64) -> usize {
    let Some((&first, rest)) = est.split_first() else {
        return 0;
    };
    let mut best = max_matching(rest, reference, used, tol);
    for j in 0..reference.len() {
        if !used[j] && (first - reference[j]).abs() <= tol + 1e-9 {
            used[j] = true;
            best = best.max(1 + max_matching(rest, reference, used, tol));
            used[j] = false;
        }
    }
    best
}

fn f_oracle(est: &[f64], reference: &[f64], tol: f64) -> f64 {
    if est.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let m = max_matching(est, reference, &mut vec![false; reference.len()], tol) as f64;
    if m == 0.0 {
        return 0.0;
    }
    2.0 * m / (est.len() + reference.len()) as f64
}

fn random_grid(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.gen_range(0..=8);
    // a 5 ms lattice puts many pairs right at the tolerance
    let mut ticks: Vec<u32> = (0..n).map(|_| rng.gen_range(0..60)).collect();
    ticks.sort();
    ticks.dedup();
    ticks.into_iter().map(|t| t as f64 * 0.005).collect()
}

/// Score from the relation rules, written against pitch names.
fn key_rule(est: KeyLabel, reference: KeyLabel) -> f64 {
    let (e, r) = (est.tonic() as usize, reference.tonic() as usize);
    let same_mode = est.mode() == reference.mode();
    let dominant = (r + 7) % 12;
    let relative = match reference.mode() {
        Mode::Major => (r + 9) % 12,
        Mode::Minor => (r + 3) % 12,
    };
    if same_mode && e == r {
        1.0
    } else if same_mode && e == dominant {
        0.5
    } else if !same_mode && e == relative {
        0.3
    } else if !same_mode && e == r {
        0.2
    } else {
        0.0
    }
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rank_err = 0.0f64;
    let mut rank_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let tags = rng.gen_range(1..=4);
        // coarse scores so ties are common
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..tags).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect())
            .collect();
        let labels: Vec<Vec<bool>> = (0..n).map(|_| (0..tags).map(|_| rng.gen_bool(0.4)).collect()).collect();
        for (got, want) in [
            (roc_auc_macro(&scores, &labels).ok().map(|m| m.mean), macro_oracle(&scores, &labels, auc_oracle)),
            (
                average_precision_macro(&scores, &labels).ok().map(|m| m.mean),
                macro_oracle(&scores, &labels, ap_oracle),
            ),
        ] {
            match (got, want) {
                (Some(g), Some(w)) => rank_err = rank_err.max((g - w).abs()),
                (None, None) => {}
                _ => rank_mismatch += 1,
            }
        }
    }

    let mut beat_err = 0.0f64;
    for _ in 0..3000 {
        let (e, r) = (random_grid(&mut rng), random_grid(&mut rng));
        let got = beat_f_measure(
            &BeatGrid::new(e.clone()).unwrap(),
            &BeatGrid::new(r.clone()).unwrap(),
            BEAT_TOLERANCE,
        );
        beat_err = beat_err.max((got - f_oracle(&e, &r, BEAT_TOLERANCE)).abs());
    }

    let keys: Vec<KeyLabel> = [Mode::Major, Mode::Minor]
        .into_iter()
        .flat_map(|m| (0..12).map(move |t| KeyLabel::new(t, m).unwrap()))
        .collect();
    let mut key_bad = 0;
    for &e in &keys {
        for &r in &keys {
            if refined_key_score(e, r, false) != key_rule(e, r) {
                key_bad += 1;
            }
        }
    }
    // every reference has one cell for each partial-credit relation
    let rows_ok = keys
        .iter()
        .all(|&r| (keys.iter().map(|&e| refined_key_score(e, r, false)).sum::<f64>() - 2.0).abs() < 1e-12);

    verdict(
        rank_err <= 1e-12 && rank_mismatch == 0 && beat_err <= 1e-12 && key_bad == 0 && rows_ok,
        format!(
            "rank err {rank_err:.1e} ({rank_mismatch} definedness mismatches); beat err {beat_err:.1e}; \
             {key_bad}/576 key cells wrong"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn impulse_train(bpm: f64, seconds: f64, fps: f64) -> (Vec<f64>, BeatGrid) {
    let n = (seconds * fps) as usize;
    let period = 60.0 / bpm;
    let mut act = vec![0.02; n];
    let mut times = Vec::new();
    for k in 0.. {
        let t = k as f64 * period;
        let f = (t * fps).round() as usize;
        if f >= n {
            break;
        }
        act[f] = 0.95;
        times.push(t);
    }
    (act, BeatGrid::new(times).unwrap())
}

fn dbn() -> Verdict {
    let cfg = DbnConfig::default();
    let f1 = |bpm: f64| {
        let (act, truth) = impulse_train(bpm, 20.0, cfg.fps);
        beat_f_measure(&dbn_decode(&act, &cfg).unwrap(), &truth, BEAT_TOLERANCE)
    };
    let at120 = f1(120.0);
    let sweep: Vec<(u32, f64)> = (6..=20).map(|b| (b * 10, f1(b as f64 * 10.0))).collect();
    let worst = sweep.iter().copied().fold((0, 1.0), |a, b| if b.1 < a.1 { b } else { a });
    verdict(
        at120 == 1.0 && worst.1 >= 0.95,
        format!("F1 at 120 bpm {at120:.3}; sweep minimum {:.3} at {} bpm", worst.1, worst.0),
    )
}

// ---------------------------------------------------------------- 6

fn small_model(seed: u64) -> Model {
    let cfg = RunConfig::default();
    Model::new(
        ModelConfig {
            encoder: cfg.encoder,
            paradigm: Paradigm::Continuous,
            head: cfg.pretrain.head,
        },
        seed,
    )
    .unwrap()
}

fn distance(a: &mirssl_autodiff::ParamStore<f32>, b: &mirssl_autodiff::ParamStore<f32>) -> f64 {
    a.iter()
        .map(|p| {
            let q = b.by_name(&p.name).unwrap();
            p.value.data().iter().zip(q.value.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

fn ema() -> Verdict {
    let student = small_model(1).params().clone();
    let teacher0 = small_model(2).params().clone();

    let mut t = teacher0.clone();
    ema_update(&mut t, &student, 1.0).unwrap();
    let keep = distance(&t, &teacher0) == 0.0;
    ema_update(&mut t, &student, 0.0).unwrap();
    let copy = distance(&t, &student) == 0.0;

    let mut t = teacher0.clone();
    let mut worst_elem = 0.0f64;
    let mut ratios = Vec::new();
    for _ in 0..5 {
        let before = t.clone();
        ema_update(&mut t, &student, 0.5).unwrap();
        ratios.push(distance(&t, &student) / distance(&before, &student));
        for p in t.iter() {
            let old = before.by_name(&p.name).unwrap().value.data();
            let s = student.by_name(&p.name).unwrap().value.data();
            for ((&now, &o), &st) in p.value.data().iter().zip(old).zip(s) {
                let want = (o as f64 - st as f64) / 2.0;
                let got = now as f64 - st as f64;
                let scale = o.abs().max(st.abs()).max(f32::MIN_POSITIVE) as f64;
                worst_elem = worst_elem.max((got - want).abs() / (scale * f32::EPSILON as f64));
            }
        }
    }
    let halves = ratios.iter().all(|r| (r - 0.5).abs() < 1e-6) && worst_elem <= 1.0;
    verdict(
        keep && copy && halves,
        format!("tau=1 identical {keep}; tau=0 copies {copy}; ratios {ratios:.7?}, worst element {worst_elem:.2} ulp"),
    )
}

// ---------------------------------------------------------------- shared corpus

/// Setting shared by the training criteria: the desk-scale encoder on
/// one-second crops of the 200-clip pitch corpus.
fn training_config(k: usize, steps: u64, paradigm: Paradigm) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 1;
    c.quantize.k = k;
    c.pretrain.paradigm = paradigm;
    c.pretrain.steps = steps;
    c.pretrain.crop_seconds = 1.0;
    c.pretrain.token_budget = 64_000;
    c.pretrain.checkpoint_every = 50;
    c.probe.window.window_seconds = 2.0;
    c.probe.window.hop_seconds = 2.0;
    c
}

fn pitch_corpus(dir: &Path, n: usize) -> PathBuf {
    let spec = SynthSpec {
        task: SynthTask::Pitch,
        n_clips: n,
        duration: 2.0,
        seed: 3,
        sample_rate: 16_000,
    };
    gen_corpus(&spec, dir).unwrap()
}

fn read_losses(dir: &Path) -> Vec<f64> {
    std::fs::read_to_string(dir.join(LOSS_LOG))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Initial loss (mean of the first 5 steps), final loss (mean of the last
/// 50) and the relative drop between them.
fn loss_drop(losses: &[f64]) -> (f64, f64, f64) {
    let start = mean(&losses[..5]);
    let end = mean(&losses[losses.len() - 50..]);
    (start, end, 1.0 - end / start)
}

fn discrete_run(manifest: &Path, cfg: &RunConfig, dir: &Path) -> PathBuf {
    extract_features(manifest, cfg, &dir.join("features"), 1).unwrap();
    fit_codebook(manifest, &dir.join("features"), cfg, &dir.join("kmeans")).unwrap();
    pretrain(manifest, Some(&dir.join("kmeans").join(LABEL_DIR)), None, cfg, &dir.join("train"), None, 1).unwrap()
}

// ---------------------------------------------------------------- 7

fn discrete_sanity(manifest: &Path, work: &Path) -> Verdict {
    let cfg = training_config(8, 500, Paradigm::Discrete);
    let dir = work.join("c7");
    discrete_run(manifest, &cfg, &dir);
    let losses = read_losses(&dir.join("train"));
    let (start, end, drop) = loss_drop(&losses);
    let ln8 = 8f64.ln();
    let start_ok = (losses[0] - ln8).abs() <= 0.1 * ln8;
    verdict(
        start_ok && drop >= 0.4 && losses.len() == 500,
        format!(
            "first loss {:.3} vs ln 8 = {ln8:.3}; loss {start:.3} -> {end:.3} (drop {:.0}%)",
            losses[0],
            100.0 * drop
        ),
    )
}

// ---------------------------------------------------------------- 8

fn continuous_sanity(manifest: &Path, work: &Path) -> Verdict {
    let cfg = training_config(8, 500, Paradigm::Continuous);
    let dir = work.join("c8");
    pretrain(manifest, None, None, &cfg, &dir, None, 1).unwrap();
    let losses = read_losses(&dir);
    let (start, end, drop) = loss_drop(&losses);
    let mut dists = Vec::new();
    for step in (50..=500).step_by(50) {
        let ck = Checkpoint::load(&dir.join(mirssl_core::pretrain::checkpoint_name(step))).unwrap();
        dists.push(ck.into_trainer().unwrap().teacher_distance().unwrap_or(f64::NAN));
    }
    let dist_ok = dists.iter().all(|d| d.is_finite() && *d > 0.0);
    verdict(
        drop >= 0.5 && dist_ok,
        format!(
            "loss {start:.3} -> {end:.3} (drop {:.0}%); teacher distance {:.3e}..{:.3e}",
            100.0 * drop,
            dists.iter().copied().fold(f64::INFINITY, f64::min),
            dists.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
    )
}

// ---------------------------------------------------------------- 9

fn transfer(manifest: &Path, work: &Path) -> Verdict {
    let cfg = training_config(8, 2000, Paradigm::Discrete);
    let dir = work.join("c9");
    let ck = discrete_run(manifest, &cfg, &dir);
    let labels = manifest.parent().unwrap().join(LABEL_FILE);
    let accuracy = |ck: &Path, cfg: &RunConfig, name: &str| {
        let out = probe(ck, manifest, &labels, "pitch", cfg, &dir.join(name), 1).unwrap();
        evaluate(&out.predictions, &labels, None, cfg, false).unwrap().metrics["accuracy"]
    };
    let (mut trained, mut random) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let mut pc = cfg.clone();
        pc.seed = 100 + seed;
        trained.push(accuracy(&ck, &pc, &format!("probe{seed}")));

        let mut rnd = Checkpoint::load(&ck).unwrap();
        rnd.student = Model::new(rnd.model.clone(), 500 + seed).unwrap().params().clone();
        let path = dir.join(format!("random{seed}.sslc"));
        rnd.save(&path).unwrap();
        random.push(accuracy(&path, &pc, &format!("random{seed}")));
    }
    let pct = |v: &[f64]| 100.0 * mean(v);
    let gap = pct(&trained) - pct(&random);
    verdict(
        gap >= 10.0,
        format!(
            "pre-trained {:.1}% vs random {:.1}% (gap {gap:.1} points; per seed {trained:.3?} vs {random:.3?})",
            pct(&trained),
            pct(&random)
        ),
    )
}

// ---------------------------------------------------------------- 10

fn protocol() -> Verdict {
    use mirssl_core::probe::{
        encoder_hash, pack_layers, softmax, train_probe, ProbeConfig, ProbeData, ProbeMeta, TaskKind,
        Targets,
    };
    let model = small_model(9);
    let before = encoder_hash(model.params());

    // three classes, each lifting its own dimension in every layer
    let (layers, dim, classes) = (3, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut make = |n: usize| {
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % classes;
            let per_layer: Vec<Vec<f32>> = (0..layers)
                .map(|l| {
                    (0..dim)
                        .map(|d| rng.gen_range(-1.0..1.0f32) + if d == c { 3.0 * (l + 1) as f32 } else { 0.0 })
                        .collect()
                })
                .collect();
            rows.push(per_layer);
            ys.push(c);
        }
        let inputs = rows.iter().flat_map(|r| pack_layers(r)).collect();
        ProbeData {
            inputs,
            rows: n,
            targets: Targets::Classes(ys),
        }
    };
    let (train, valid) = (make(150), make(60));
    let cfg = ProbeConfig {
        task_kind: Some(TaskKind::Multiclass),
        epochs: 30,
        ..ProbeConfig::default()
    };
    let paper_values = cfg.hidden == 512 && cfg.lr == 1e-3;
    let meta = ProbeMeta {
        config: cfg,
        task: TaskKind::Multiclass,
        n_layers: layers,
        dim,
        out_dim: classes,
        encoder_hash: before.clone(),
        config_hash: String::new(),
    };
    let (p, _) = train_probe(&train, &valid, meta, 4).unwrap();
    let logits = p.outputs(&valid.inputs, valid.rows).unwrap();
    let Targets::Classes(truth) = &valid.targets else { unreachable!() };
    let hits = logits
        .chunks(classes)
        .zip(truth)
        .filter(|(row, &c)| (0..classes).all(|j| j == c || row[j] < row[c]))
        .count();
    let acc = hits as f64 / valid.rows as f64;
    let w = p.layer_weights();
    let normalized = (w.iter().sum::<f32>() - 1.0).abs() < 1e-6 && w.iter().all(|&x| x > 0.0);
    let matches_softmax = {
        let raw = p.params.by_name("probe.w").unwrap().value.data().to_vec();
        softmax(&raw).iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-7)
    };
    let after = encoder_hash(model.params());
    verdict(
        paper_values && acc == 1.0 && normalized && matches_softmax && before == after,
        format!(
            "hidden 512 lr 1e-3 accuracy {acc:.3}; weights {w:.3?} sum to 1; encoder hash unchanged {}",
            before == after
        ),
    )
}

// ---------------------------------------------------------------- 11

fn reproducibility(work: &Path) -> Verdict {
    let mut cfg = training_config(4, 200, Paradigm::Discrete);
    cfg.seed = 21;
    let enc: &mut EncoderConfig = &mut cfg.encoder;
    enc.conv_layers.iter_mut().for_each(|l| l.channels = 16);
    enc.hidden = 32;
    enc.heads = 2;
    enc.ff_dim = 64;
    cfg.pretrain.crop_seconds = 0.5;
    cfg.pretrain.token_budget = 32_000;
    cfg.pretrain.head.proj_dim = 32;
    cfg.probe.hidden = 64;
    cfg.probe.epochs = 10;
    let run = |name: &str| {
        let dir = work.join(name);
        let manifest = pitch_corpus(&dir.join("corpus"), 40);
        let ck = discrete_run(&manifest, &cfg, &dir);
        let labels = dir.join("corpus").join(LABEL_FILE);
        let out = probe(&ck, &manifest, &labels, "pitch", &cfg, &dir.join("probe"), 1).unwrap();
        evaluate(&out.predictions, &labels, Some(&manifest), &cfg, false).unwrap().to_json().unwrap()
    };
    let (a, b) = (run("r11a"), run("r11b"));
    verdict(a == b, format!("reports of {} bytes identical: {}", a.len(), a == b))
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut record = |id: u32, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let v = f();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("[{status}] {id:>2} {name}: {} ({:.1}s)", v.detail, t0.elapsed().as_secs_f64());
        if !v.pass {
            failures.push(id);
        }
    };
    record(1, "gradient check", &mut gradients);
    record(2, "masking statistics", &mut masking);
    record(3, "k-means", &mut kmeans);
    record(4, "metric oracles", &mut metric_oracles);
    record(5, "dbn decoding", &mut dbn);
    record(6, "ema contract", &mut ema);
    let manifest = pitch_corpus(&work.path().join("pitch"), 200);
    record(7, "discrete pre-training", &mut || discrete_sanity(&manifest, work.path()));
    record(8, "continuous pre-training", &mut || continuous_sanity(&manifest, work.path()));
    record(9, "transfer over random init", &mut || transfer(&manifest, work.path()));
    record(10, "probe protocol", &mut protocol);
    record(11, "reproducibility", &mut || reproducibility(work.path()));
    assert!(failures.is_empty(), "failing criteria: {failures:?}");
}
