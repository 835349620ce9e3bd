use crate::gradcheck::{check_gradients, op_catalog};
use crate::{AutodiffError, Graph, ParamStore, Tensor};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn every_op_passes_finite_differences() {
    for case in op_catalog() {
        for seed in 0..10u64 {
            let inputs = (case.inputs)(seed * 7 + 1);
            let report = check_gradients(&inputs, 1e-5, case.build).unwrap();
            assert!(
                report.max_rel_err() <= 1e-4,
                "{} seed {seed}: rel err {:e}",
                case.name,
                report.max_rel_err()
            );
        }
    }
}

#[test]
fn matmul_with_identity() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
    let x = g.input(a.clone()).unwrap();
    let i = g.constant(Tensor::eye(4)).unwrap();
    let y = g.matmul(x, i).unwrap();
    assert_eq!(g.value(y).data(), a.data());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::<f32>::new();
    let x = g
        .input(Tensor::from_fn(&[4, 7], |i| (i as f32 * 1.3).sin() * 20.0))
        .unwrap();
    let y = g.softmax(x, 1).unwrap();
    for r in 0..4 {
        let s: f32 = g.value(y).data()[r * 7..(r + 1) * 7].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn conv_output_length() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 100, 2])).unwrap();
    let w = g.input(Tensor::zeros(&[10, 2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[3])).unwrap();
    let y = g.conv1d(x, w, b, 5).unwrap();
    assert_eq!(g.shape(y), &[1, 19, 3]);
}

#[test]
fn conv_rejects_short_input() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 4, 1])).unwrap();
    let w = g.input(Tensor::zeros(&[5, 1, 1])).unwrap();
    let b = g.input(Tensor::zeros(&[1])).unwrap();
    assert!(g.conv1d(x, w, b, 1).is_err());
}

#[test]
fn cross_entropy_limits() {
    let k = 13;
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[5, k])).unwrap();
    let l = g.cross_entropy(x, &[0, 1, 2, 3, 4], &[true; 5]).unwrap();
    assert!(close(g.value(l).data()[0], (k as f64).ln(), 1e-12));

    let targets = [3usize, 0, 7];
    let logits = Tensor::from_fn(&[3, k], |i| {
        if i % k == targets[i / k] {
            1e6
        } else {
            0.0
        }
    });
    let x = g.input(logits).unwrap();
    let l = g.cross_entropy(x, &targets, &[true; 3]).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-9);
}

#[test]
fn masked_loss_ignores_unmasked_rows() {
    let mut g = Graph::<f64>::new();
    let x = g
        .input(Tensor::new(&[2, 2], vec![1.0, 2.0, 100.0, -100.0]).unwrap())
        .unwrap();
    let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
    let l = g.mse(x, &t, &[true, false]).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn empty_mask_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(
        g.cross_entropy(x, &[0, 1], &[false, false]),
        Err(AutodiffError::EmptyMask { .. })
    ));
}

#[test]
fn square_sum_gradient() {
    let mut g = Graph::<f64>::new();
    let v = vec![0.5, -1.5, 3.0];
    let x = g.input(Tensor::new(&[3], v.clone()).unwrap()).unwrap();
    let sq = g.mul(x, x).unwrap();
    let l = g.sum_all(sq).unwrap();
    g.backward(l).unwrap();
    let gr = g.grad(x).unwrap();
    for (a, b) in gr.iter().zip(&v) {
        assert!(close(*a, 2.0 * b, 1e-15));
    }
}

#[test]
fn backward_twice_and_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(g.backward(x), Err(AutodiffError::NotScalar(_))));
    let l = g.sum_all(x).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(AutodiffError::BackwardTwice)));
}

#[test]
fn layer_norm_output_statistics() {
    let mut g = Graph::<f64>::new();
    let x = g
        .input(Tensor::from_fn(&[3, 16], |i| ((i * 37) % 11) as f64 - 4.0))
        .unwrap();
    let y = g.layer_norm(x, 1, 1e-5).unwrap();
    for r in 0..3 {
        let row = &g.value(y).data()[r * 16..(r + 1) * 16];
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!(close(var, 1.0, 1e-3));
    }
}

#[test]
fn dropout_is_deterministic_and_inactive_in_inference() {
    let run = |seed, step| {
        let mut g = Graph::<f32>::new().with_rng(seed, step);
        let x = g.input(Tensor::full(&[64], 1.0)).unwrap();
        let y = g.dropout(x, 0.5).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(3, 9), run(3, 9));
    assert_ne!(run(3, 9), run(3, 10));
    assert!(run(3, 9).iter().all(|&v| v == 0.0 || v == 2.0));

    let mut g = Graph::<f32>::inference();
    let x = g.input(Tensor::full(&[8], 1.0)).unwrap();
    let y = g.dropout(x, 0.5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    assert!(g.dropout(x, 1.0).is_err());
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full(&[2], 2.0)).unwrap();
    store.add("unused", Tensor::full(&[2], 5.0)).unwrap();
    let mut g = Graph::new();
    let va = g.param(&store, a).unwrap();
    let l = g.sum_all(va).unwrap();
    g.backward(l).unwrap();
    store.zero_grad();
    g.accumulate_param_grads(&mut store);
    assert_eq!(store.by_name("a").unwrap().grad, vec![1.0, 1.0]);
    assert_eq!(store.by_name("unused").unwrap().grad, vec![0.0, 0.0]);
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a", Tensor::full(&[2], 2.0)).unwrap();
    let mut g = Graph::inference();
    let va = g.param(&store, a).unwrap();
    assert!(!g.requires_grad(va));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(v in prop::collection::vec(-5.0f64..5.0, 2..12), c in -50.0f64..50.0) {
            let n = v.len();
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::new(&[1, n], v.clone()).unwrap()).unwrap();
            let y = g.softmax(x, 1).unwrap();
            let xs = g.add_scalar(x, c).unwrap();
            let ys = g.softmax(xs, 1).unwrap();
            for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn transpose_twice_is_identity(b in 1usize..3, r in 1usize..5, c in 1usize..5) {
            let mut g = Graph::<f64>::new();
            let t = Tensor::from_fn(&[b, r, c], |i| i as f64);
            let x = g.input(t.clone()).unwrap();
            let y = g.transpose(x).unwrap();
            let z = g.transpose(y).unwrap();
            prop_assert_eq!(g.shape(y), &[b, c, r][..]);
            prop_assert_eq!(g.value(z).data(), t.data());
        }

        #[test]
        fn concat_then_slice_recovers_parts(n1 in 1usize..4, n2 in 1usize..4) {
            let mut g = Graph::<f64>::new();
            let a = Tensor::from_fn(&[2, n1], |i| i as f64);
            let b = Tensor::from_fn(&[2, n2], |i| 100.0 + i as f64);
            let va = g.input(a.clone()).unwrap();
            let vb = g.input(b.clone()).unwrap();
            let c = g.concat(&[va, vb], 1).unwrap();
            let sa = g.slice(c, 1, 0, n1).unwrap();
            let sb = g.slice(c, 1, n1, n2).unwrap();
            prop_assert_eq!(g.value(sa).data(), a.data());
            prop_assert_eq!(g.value(sb).data(), b.data());
        }
    }
}
