use mirssl_autodiff::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn small(n_layers: usize, paradigm: Paradigm) -> ModelConfig {
    let mut encoder = EncoderConfig::default();
    for c in &mut encoder.conv_layers {
        c.channels = 16;
    }
    encoder.n_layers = n_layers;
    encoder.hidden = 32;
    encoder.ff_dim = 64;
    encoder.dropout = 0.0;
    encoder.max_positions = 300;
    ModelConfig {
        encoder,
        paradigm,
        head: HeadConfig {
            num_codes: 8,
            ..HeadConfig::default()
        },
    }
}

fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()
}

#[test]
fn frame_counts_follow_the_conv_chain() {
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.total_stride(), 320);
    assert_eq!(cfg.receptive_field(), 400);
    let chained = |n: usize| {
        cfg.conv_layers
            .iter()
            .fold(n, |t, c| (t - c.kernel) / c.stride + 1)
    };
    assert_eq!(cfg.frames_for(16000), Some(49));
    assert_eq!(cfg.frames_for(16000), Some(chained(16000)));
    assert_eq!(cfg.frames_for(80000), Some(chained(80000)));
    assert_eq!(cfg.frames_for(80000), Some(249));
    assert_eq!(cfg.frames_for(399), None);
    assert_eq!(cfg.frames_for(400), Some(1));
    for n in [1000usize, 5000, 16000, 40000] {
        let (a, b) = (cfg.frames_for(n).unwrap(), cfg.frames_for(2 * n).unwrap());
        assert!(b >= 2 * a - 1);
    }
}

#[test]
fn validation_rejects_bad_shapes() {
    let mut cfg = EncoderConfig::default();
    cfg.conv_layers[0].stride = 4;
    assert!(cfg.validate().is_err());
    let cfg = EncoderConfig {
        heads: 5,
        ..EncoderConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn model_outputs_have_expected_shapes() {
    let model = Model::new(small(2, Paradigm::Discrete), 1).unwrap();
    let clip = AudioClip::new(noise(16000, 2), 16000).unwrap();
    let outs = model.layer_outputs(&clip).unwrap();
    assert_eq!(outs.len(), 3);
    for o in &outs {
        assert_eq!(o.shape(), &[49, 32]);
    }
    let zero = Model::new(small(0, Paradigm::Continuous), 1).unwrap();
    assert_eq!(zero.layer_outputs(&clip).unwrap().len(), 1);
    assert!(model
        .layer_outputs(&AudioClip::new(vec![0.0; 300], 16000).unwrap())
        .is_err());
}

#[test]
fn batch_order_does_not_leak() {
    let model = Model::new(small(2, Paradigm::Discrete), 3).unwrap();
    let (a, b) = (noise(4000, 1), noise(4000, 2));
    let ab = model.layer_outputs_batch(&[&a, &b]).unwrap();
    let ba = model.layer_outputs_batch(&[&b, &a]).unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        let half = x.numel() / 2;
        assert_eq!(&x.data()[..half], &y.data()[half..]);
        assert_eq!(&x.data()[half..], &y.data()[..half]);
    }
}

#[test]
fn forward_is_deterministic_without_dropout() {
    let model = Model::new(small(2, Paradigm::Discrete), 3).unwrap();
    let a = noise(6000, 4);
    assert_eq!(
        model.layer_outputs_batch(&[&a]).unwrap(),
        model.layer_outputs_batch(&[&a]).unwrap()
    );
}

#[test]
fn mask_counts() {
    let spec = MaskSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(spec.num_starts(100), 6);
    assert_eq!(spec.num_starts(1000), 65);
    for _ in 0..200 {
        let m = spec.sample(100, &mut rng);
        let c = m.iter().filter(|&&x| x).count();
        assert!((10..=60).contains(&c));
    }
    let none = MaskSpec { prob: 0.0, ..spec };
    assert!(!none.sample(100, &mut rng).iter().any(|&x| x));
    assert!(!spec.sample(5, &mut rng).iter().any(|&x| x));
}

#[test]
fn zero_mask_leaves_frames_unchanged() {
    let model = Model::new(small(1, Paradigm::Discrete), 5).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::from_fn(&[1, 4, 32], |i| i as f32)).unwrap();
    let y = apply_mask(&mut g, model.params(), x, &[false; 4]).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let z = apply_mask(&mut g, model.params(), x, &[false, true, false, false]).unwrap();
    let emb = model.params().by_name("enc.mask_emb").unwrap().value.data().to_vec();
    assert_eq!(&g.value(z).data()[32..64], emb.as_slice());
    assert_eq!(&g.value(z).data()[..32], &g.value(x).data()[..32]);
}

#[test]
fn cosine_logits_pick_matching_code_and_ignore_scale() {
    let cfg = small(1, Paradigm::Discrete);
    let mut model = Model::new(cfg, 7).unwrap();
    // Identity projection and one-hot codes.
    let (h, p) = (32, model.config().head.proj_dim);
    let proj = model.params().id("disc.proj.w").unwrap();
    model.params_mut().get_mut(proj).value = Tensor::from_fn(&[h, p], |i| {
        if i / p == i % p {
            1.0
        } else {
            0.0
        }
    });
    let codes = model.params().id("disc.codes").unwrap();
    model.params_mut().get_mut(codes).value =
        Tensor::from_fn(&[8, p], |i| if i / p == i % p { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let x = g
        .input(Tensor::from_fn(&[2, h], |i| if i == 5 || i == h + 5 { 1.0 } else { 0.0 }))
        .unwrap();
    let l = discrete_logits(&mut g, model.params(), x, 0.1).unwrap();
    let row = &g.value(l).data()[..8];
    let best = (0..8).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(best, 5);

    let big = g.scale(x, 10.0).unwrap();
    let l2 = discrete_logits(&mut g, model.params(), big, 0.1).unwrap();
    for (a, b) in g.value(l).data().iter().zip(g.value(l2).data()) {
        assert!((a - b).abs() < 1e-5);
    }
    let zero = g.input(Tensor::zeros(&[1, h])).unwrap();
    let lz = discrete_logits(&mut g, model.params(), zero, 0.1).unwrap();
    assert!(g.value(lz).data().iter().all(|&v| v == 0.0));
}

#[test]
fn initial_cross_entropy_is_near_uniform() {
    let mut cfg = small(2, Paradigm::Discrete);
    cfg.head.num_codes = 64;
    let model = Model::new(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let waves: Vec<Vec<f32>> = (0..8).map(|i| noise(16000, 100 + i)).collect();
    let refs: Vec<&[f32]> = waves.iter().map(|w| w.as_slice()).collect();
    let mut g = Graph::inference();
    let data: Vec<f32> = waves.concat();
    let wave = g.constant(Tensor::new(&[8, 16000], data).unwrap()).unwrap();
    let enc = encode(&mut g, model.params(), &model.config().encoder, wave, None).unwrap();
    let last = enc.last();
    let logits = discrete_logits(&mut g, model.params(), last, 0.1).unwrap();
    let n = enc.batch * enc.frames;
    let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..64)).collect();
    let flat = g.reshape(logits, &[n, 64]).unwrap();
    let ce = g.cross_entropy(flat, &targets, &vec![true; n]).unwrap();
    let v = g.value(ce).data()[0] as f64;
    assert!((v / 64f64.ln() - 1.0).abs() < 0.05, "{v}");
    assert_eq!(refs.len(), 8);
}

#[test]
fn code_embeddings_receive_gradient() {
    let model = Model::new(small(1, Paradigm::Discrete), 13).unwrap();
    let mut store = model.params().clone();
    let mut g = Graph::new();
    let wave = g.input(Tensor::new(&[1, 4000], noise(4000, 1)).unwrap()).unwrap();
    let enc = encode(&mut g, &store, &model.config().encoder, wave, None).unwrap();
    let last = enc.last();
    let logits = discrete_logits(&mut g, &store, last, 0.1).unwrap();
    let n = enc.frames;
    let flat = g.reshape(logits, &[n, 8]).unwrap();
    let loss = g.cross_entropy(flat, &vec![3; n], &vec![true; n]).unwrap();
    g.backward(loss).unwrap();
    store.zero_grad();
    g.accumulate_param_grads(&mut store);
    let codes = store.by_name("disc.codes").unwrap();
    assert!(codes.grad.iter().any(|&v| v != 0.0));
}

#[test]
fn teacher_layer_selection() {
    assert_eq!(TargetLayers::Top(8).indices(12).unwrap(), (5..=12).collect::<Vec<_>>());
    assert_eq!(TargetLayers::All.indices(12).unwrap(), (1..=12).collect::<Vec<_>>());
    assert!(TargetLayers::Top(13).indices(12).is_err());
    assert!(TargetLayers::Top(0).indices(12).is_err());

    let layers: Vec<Tensor<f32>> = (0..3)
        .map(|l| Tensor::from_fn(&[2, 4], |i| (i * (l + 1)) as f32))
        .collect();
    let top1 = teacher_targets(&layers, TargetLayers::Top(1), true).unwrap();
    for row in top1.data().chunks(4) {
        let mean: f32 = row.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }
    let raw = teacher_targets(&layers, TargetLayers::Top(1), false).unwrap();
    assert_eq!(raw, layers[2]);
    let both = teacher_targets(&layers, TargetLayers::All, false).unwrap();
    for i in 0..8 {
        assert!((both.data()[i] - 0.5 * (layers[1].data()[i] + layers[2].data()[i])).abs() < 1e-6);
    }
}

#[test]
fn target_layer_serde() {
    let t: TargetLayers = serde_json::from_str("\"all\"").unwrap();
    assert_eq!(t, TargetLayers::All);
    let t: TargetLayers = serde_json::from_str("8").unwrap();
    assert_eq!(t, TargetLayers::Top(8));
    assert!(serde_json::from_str::<TargetLayers>("\"some\"").is_err());
}

#[test]
fn ema_contract() {
    let student = Model::new(small(1, Paradigm::Continuous), 1).unwrap();
    let other = Model::new(small(1, Paradigm::Continuous), 2).unwrap();
    let base = other.encoder_params().unwrap();

    let mut t = base.clone();
    ema_update(&mut t, student.params(), 1.0).unwrap();
    for (a, b) in t.iter().zip(base.iter()) {
        assert_eq!(a.value, b.value);
    }
    let mut t = base.clone();
    ema_update(&mut t, student.params(), 0.0).unwrap();
    for a in t.iter() {
        assert_eq!(a.value, student.params().by_name(&a.name).unwrap().value);
    }
    assert!(ema_update(&mut t, student.params(), 1.5).is_err());
}

#[test]
fn tau_schedule_anneals_then_holds() {
    let s = TauSchedule::default();
    assert_eq!(s.at(0, 1000), 0.999);
    assert!((s.at(150, 1000) - 0.99945).abs() < 1e-12);
    assert_eq!(s.at(300, 1000), 0.9999);
    assert_eq!(s.at(900, 1000), 0.9999);
    let frozen = TauSchedule {
        start: 1.0,
        end: 1.0,
        anneal_frac: 0.3,
    };
    assert!((0..50).all(|i| frozen.at(i, 50) == 1.0));
}

#[test]
fn from_parts_checks_shapes() {
    let model = Model::new(small(1, Paradigm::Discrete), 1).unwrap();
    let mut cfg = small(1, Paradigm::Discrete);
    cfg.head.num_codes = 9;
    assert!(Model::from_parts(cfg, model.params().clone()).is_err());
    assert!(Model::from_parts(small(1, Paradigm::Continuous), model.params().clone()).is_err());
    assert!(Model::from_parts(small(1, Paradigm::Discrete), model.params().clone()).is_ok());
}

#[test]
fn inference_graph_params_need_no_grad() {
    let model = Model::new(small(1, Paradigm::Continuous), 1).unwrap();
    let teacher = model.encoder_params().unwrap();
    let mut g = Graph::<f32>::inference();
    let wave = g.constant(Tensor::new(&[1, 2000], noise(2000, 3)).unwrap()).unwrap();
    let enc = encode(&mut g, &teacher, &model.config().encoder, wave, None).unwrap();
    assert!(enc.layers.iter().all(|&v| !g.requires_grad(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn masks_stay_in_range(t in 1usize..400, span in 1usize..20, prob in 0.0f64..1.0, seed in 0u64..1000) {
        let spec = MaskSpec { span, prob };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = spec.sample(t, &mut rng);
        prop_assert_eq!(m.len(), t);
        let covered = m.iter().filter(|&&x| x).count();
        let starts = spec.num_starts(t);
        prop_assert!(covered <= starts * span);
        if starts > 0 {
            prop_assert!(covered >= span);
        }
    }

    #[test]
    fn ema_half_steps_halve_distance(seed in 0u64..50) {
        let student = Model::new(small(0, Paradigm::Continuous), seed).unwrap();
        let mut teacher = Model::new(small(0, Paradigm::Continuous), seed + 1000).unwrap().encoder_params().unwrap();
        let dist = |t: &mirssl_autodiff::ParamStore<f32>| -> f64 {
            t.iter().map(|p| {
                let s = student.params().by_name(&p.name).unwrap();
                p.value.data().iter().zip(s.value.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
            }).sum::<f64>().sqrt()
        };
        let d0 = dist(&teacher);
        ema_update(&mut teacher, student.params(), 0.5).unwrap();
        let d1 = dist(&teacher);
        ema_update(&mut teacher, student.params(), 0.5).unwrap();
        let d2 = dist(&teacher);
        prop_assert!((d1 / d0 - 0.5).abs() < 1e-6);
        prop_assert!((d2 / d0 - 0.25).abs() < 1e-6);
    }
}
