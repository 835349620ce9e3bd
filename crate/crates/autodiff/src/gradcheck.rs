//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{mix64, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input: `|a - n| / max(|a|, |n|, 1e-6)` in L2.
    pub rel_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Deterministic weights in [-1, 1] used to reduce an op output to a scalar.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let u = (mix64(seed.wrapping_mul(0x100_0000_01B3).wrapping_add(i as u64)) >> 11) as f64
            / (1u64 << 53) as f64;
        2.0 * u - 1.0
    })
}

/// Compares reverse-mode gradients of `sum(build(inputs) * W)` against
/// central differences with step `h`, where `W` is a fixed pseudo-random
/// weighting of the output.
pub fn check_gradients<B>(inputs: &[Tensor<f64>], h: f64, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let vars = vals
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let w = g.constant(probe_weights(g.shape(out), 17))?;
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod)?;
        let value = g.value(loss).data()[0];
        let mut grads = Vec::new();
        if want_grads {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(vals) {
                grads.push(
                    g.grad(*v)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.numel()]),
                );
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[j];
            work[idx].data_mut()[j] = x0 + h;
            let (fp, _) = eval(&work, false)?;
            work[idx].data_mut()[j] = x0 - h;
            let (fm, _) = eval(&work, false)?;
            work[idx].data_mut()[j] = x0;
            *num = (fp - fm) / (2.0 * h);
        }
        let a = &analytic[idx];
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        rel_err.push(diff / na.max(nn).max(1e-6));
    }
    Ok(GradCheckReport { rel_err })
}

/// One differentiable op exercised with random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(u64) -> Vec<Tensor<f64>>,
    pub build: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    probe_weights(shape, seed.wrapping_add(0x5EED))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, seed).map(|u| u.signum() * (0.1 + 0.9 * u.abs()))
}

/// Every differentiable op of the engine with a representative input shape.
pub fn op_catalog() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |s| vec![uniform(&[3, 4], s), uniform(&[4, 5], s + 1)],
            build: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_batched",
            inputs: |s| vec![uniform(&[2, 3, 4], s), uniform(&[2, 4, 2], s + 1)],
            build: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_shared_rhs",
            inputs: |s| vec![uniform(&[2, 3, 4], s), uniform(&[4, 5], s + 1)],
            build: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "add_broadcast",
            inputs: |s| vec![uniform(&[3, 4], s), uniform(&[4], s + 1)],
            build: |g, v| g.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            inputs: |s| vec![uniform(&[3, 4], s), uniform(&[3, 4], s + 1)],
            build: |g, v| g.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul_broadcast",
            inputs: |s| vec![uniform(&[2, 3, 4], s), uniform(&[3, 4], s + 1)],
            build: |g, v| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            inputs: |s| vec![uniform(&[5], s)],
            build: |g, v| g.scale(v[0], -1.7),
        },
        OpCase {
            name: "add_scalar",
            inputs: |s| vec![uniform(&[5], s)],
            build: |g, v| g.add_scalar(v[0], 0.3),
        },
        OpCase {
            name: "transpose",
            inputs: |s| vec![uniform(&[2, 3, 4], s)],
            build: |g, v| g.transpose(v[0]),
        },
        OpCase {
            name: "reshape",
            inputs: |s| vec![uniform(&[2, 6], s)],
            build: |g, v| g.reshape(v[0], &[3, 4]),
        },
        OpCase {
            name: "concat",
            inputs: |s| vec![uniform(&[2, 3, 2], s), uniform(&[2, 1, 2], s + 1)],
            build: |g, v| g.concat(&[v[0], v[1]], 1),
        },
        OpCase {
            name: "slice",
            inputs: |s| vec![uniform(&[3, 5, 2], s)],
            build: |g, v| g.slice(v[0], 1, 1, 3),
        },
        OpCase {
            name: "sum_axis",
            inputs: |s| vec![uniform(&[3, 4, 2], s)],
            build: |g, v| g.sum_axis(v[0], 1),
        },
        OpCase {
            name: "mean_axis",
            inputs: |s| vec![uniform(&[3, 4, 2], s)],
            build: |g, v| g.mean_axis(v[0], 0),
        },
        OpCase {
            name: "sum_all",
            inputs: |s| vec![uniform(&[3, 4], s)],
            build: |g, v| g.sum_all(v[0]),
        },
        OpCase {
            name: "mean_all",
            inputs: |s| vec![uniform(&[3, 4], s)],
            build: |g, v| g.mean_all(v[0]),
        },
        OpCase {
            name: "conv1d",
            inputs: |s| {
                vec![
                    uniform(&[2, 11, 3], s),
                    uniform(&[3, 3, 4], s + 1),
                    uniform(&[4], s + 2),
                ]
            },
            build: |g, v| g.conv1d(v[0], v[1], v[2], 2),
        },
        OpCase {
            // stride past the kernel leaves input frames without gradient
            name: "conv1d_gapped",
            inputs: |s| {
                vec![
                    uniform(&[2, 12, 2], s),
                    uniform(&[2, 2, 3], s + 1),
                    uniform(&[3], s + 2),
                ]
            },
            build: |g, v| g.conv1d(v[0], v[1], v[2], 3),
        },
        OpCase {
            name: "layer_norm_last",
            inputs: |s| vec![uniform(&[3, 6], s)],
            build: |g, v| g.layer_norm(v[0], 1, 1e-5),
        },
        OpCase {
            name: "layer_norm_axis0",
            inputs: |s| vec![uniform(&[5, 3], s)],
            build: |g, v| g.layer_norm(v[0], 0, 1e-5),
        },
        OpCase {
            name: "gelu",
            inputs: |s| vec![uniform(&[4, 5], s).map(|x| 3.0 * x)],
            build: |g, v| g.gelu(v[0]),
        },
        OpCase {
            name: "relu",
            inputs: |s| vec![off_zero(&[4, 5], s)],
            build: |g, v| g.relu(v[0]),
        },
        OpCase {
            name: "sigmoid",
            inputs: |s| vec![uniform(&[4, 5], s).map(|x| 4.0 * x)],
            build: |g, v| g.sigmoid(v[0]),
        },
        OpCase {
            name: "tanh",
            inputs: |s| vec![uniform(&[4, 5], s).map(|x| 2.0 * x)],
            build: |g, v| g.tanh(v[0]),
        },
        OpCase {
            name: "softmax",
            inputs: |s| vec![uniform(&[3, 5], s).map(|x| 3.0 * x)],
            build: |g, v| g.softmax(v[0], 1),
        },
        OpCase {
            name: "softmax_axis0",
            inputs: |s| vec![uniform(&[4, 3], s).map(|x| 3.0 * x)],
            build: |g, v| g.softmax(v[0], 0),
        },
        OpCase {
            name: "log_softmax",
            inputs: |s| vec![uniform(&[3, 5], s).map(|x| 3.0 * x)],
            build: |g, v| g.log_softmax(v[0], 1),
        },
        OpCase {
            name: "dropout",
            inputs: |s| vec![uniform(&[6, 5], s)],
            build: |g, v| g.dropout(v[0], 0.3),
        },
        OpCase {
            name: "embedding",
            inputs: |s| vec![uniform(&[5, 3], s)],
            build: |g, v| g.embedding(v[0], &[4, 0, 4, 2]),
        },
        OpCase {
            name: "normalize_rows",
            inputs: |s| vec![off_zero(&[4, 3], s)],
            build: |g, v| g.normalize_rows(v[0]),
        },
        OpCase {
            name: "replace_rows",
            inputs: |s| vec![uniform(&[4, 3], s), uniform(&[3], s + 1)],
            build: |g, v| g.replace_rows(v[0], v[1], &[true, false, true, false]),
        },
        OpCase {
            name: "cross_entropy",
            inputs: |s| vec![uniform(&[5, 4], s).map(|x| 2.0 * x)],
            build: |g, v| g.cross_entropy(v[0], &[0, 3, 1, 2, 2], &[true, true, false, true, true]),
        },
        OpCase {
            name: "mse",
            inputs: |s| vec![uniform(&[4, 3], s)],
            build: |g, v| {
                let t = uniform(&[4, 3], 99);
                g.mse(v[0], &t, &[true, false, true, true])
            },
        },
        OpCase {
            name: "smooth_l1",
            inputs: |s| vec![uniform(&[4, 3], s).map(|x| 2.0 * x)],
            build: |g, v| {
                let t = uniform(&[4, 3], 98);
                g.smooth_l1(v[0], &t, 0.5, &[true, true, false, true])
            },
        },
        OpCase {
            name: "bce_with_logits",
            inputs: |s| vec![uniform(&[4, 3], s).map(|x| 3.0 * x)],
            build: |g, v| {
                let t = uniform(&[4, 3], 97).map(|x| 0.5 * (x + 1.0));
                g.bce_with_logits(v[0], &t, &[true, true, true, false])
            },
        },
    ]
}
