//! Central finite-difference gradient checking for graphs in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ConvGeometry, Graph64, Reduction, Tensor64, Var};

/// Norm-wise relative error ‖a−b‖ / (‖a‖+‖b‖), zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 =
        a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares analytic gradients of `build` with central finite differences
/// (step 1e-5) for every input marked `requires_grad`. Returns the worst
/// relative error over inputs.
pub fn grad_check<F>(inputs: &[Tensor64], build: F) -> f64
where
    F: Fn(&mut Graph64, &[Var]) -> Var,
{
    let h = 1e-5;
    let eval = |ins: &[Tensor64]| -> f64 {
        let mut g = Graph64::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).expect("finite-difference graph");
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic = g
            .grad(vars[k])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric: Vec<f64> = (0..t.numel())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Reduces `out` to a scalar through a fixed random weighting so every
/// output element contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph64, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = g.constant(Tensor64::new(&shape, w).expect("finite-difference graph"));
    let prod = g.mul(out, wv).expect("finite-difference graph");
    g.sum_all(prod).expect("finite-difference graph")
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor64::new(shape, data)
        .expect("primitive graph")
        .with_requires_grad(true)
}

/// Every differentiable graph op with its own backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prim {
    MatMul,
    MatMulNt,
    Add,
    AddBias,
    Mul,
    Scale,
    Gelu,
    Relu,
    Softmax,
    CausalSoftmax,
    LayerNorm,
    Gather,
    Concat0,
    Concat1,
    Slice,
    Mean,
    CrossEntropy,
    Transpose,
    Im2Col,
    L2Normalize,
    SelectCols,
    Reshape,
}

impl Prim {
    pub const ALL: [Prim; 22] = [
        Prim::MatMul,
        Prim::MatMulNt,
        Prim::Add,
        Prim::AddBias,
        Prim::Mul,
        Prim::Scale,
        Prim::Gelu,
        Prim::Relu,
        Prim::Softmax,
        Prim::CausalSoftmax,
        Prim::LayerNorm,
        Prim::Gather,
        Prim::Concat0,
        Prim::Concat1,
        Prim::Slice,
        Prim::Mean,
        Prim::CrossEntropy,
        Prim::Transpose,
        Prim::Im2Col,
        Prim::L2Normalize,
        Prim::SelectCols,
        Prim::Reshape,
    ];
}

/// Gradient check of `p` on random shapes and values drawn from `rng`;
/// returns the worst relative error.
pub fn check_primitive(p: Prim, rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let r = rng.random_range(1..6);
    let c = rng.random_range(1..6);
    let k = rng.random_range(1..6);
    match p {
        Prim::MatMul => grad_check(
            &[rand_tensor(rng, &[r, k]), rand_tensor(rng, &[k, c])],
            |g, v| {
                let o = g.matmul(v[0], v[1]).expect("primitive graph");
                weighted_sum(g, o, seed)
            },
        ),
        Prim::MatMulNt => grad_check(
            &[rand_tensor(rng, &[r, k]), rand_tensor(rng, &[c, k])],
            |g, v| {
                let o = g.matmul_nt(v[0], v[1]).expect("primitive graph");
                weighted_sum(g, o, seed)
            },
        ),
        Prim::Add => grad_check(
            &[rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])],
            |g, v| {
                let o = g.add(v[0], v[1]).expect("primitive graph");
                weighted_sum(g, o, seed)
            },
        ),
        Prim::AddBias => grad_check(
            &[rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c])],
            |g, v| {
                let o = g.add_bias(v[0], v[1]).expect("primitive graph");
                weighted_sum(g, o, seed)
            },
        ),
        Prim::Mul => grad_check(
            &[rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])],
            |g, v| {
                let o = g.mul(v[0], v[1]).expect("primitive graph");
                weighted_sum(g, o, seed)
            },
        ),
        Prim::Scale => grad_check(&[rand_tensor(rng, &[r, c])], |g, v| {
            let o = g.scale(v[0], -1.7).expect("primitive graph");
            weighted_sum(g, o, seed)
        }),
        Prim::Gelu => grad_check(&[rand_tensor(rng, &[r, c])], |g, v| {
            let o = g.gelu(v[0]).expect("primitive graph");
            weighted_sum(g, o, seed)
        }),
        Prim::Relu => {
            // keep inputs away from the kink
            let mut t = rand_tensor(rng, &[r, c]);
            t.data_mut().iter_mut().for_each(|x| {
                if x.abs() < 0.05 {
                    *x += 0.1
                }
            });
            grad_check(&[t], |g, v| {
                let o = g.relu(v[0]).expect("primitive graph");
                weighted_sum(g, o, seed)
            })
        }
        Prim::Softmax => grad_check(&[rand_tensor(rng, &[r, c])], |g, v| {
            let o = g.softmax(v[0]).expect("primitive graph");
            weighted_sum(g, o, seed)
        }),
        Prim::CausalSoftmax => grad_check(&[rand_tensor(rng, &[r, r])], |g, v| {
            let o = g.causal_softmax(v[0]).expect("primitive graph");
            weighted_sum(g, o, seed)
        }),
        Prim::LayerNorm => {
            let c = c.max(2);
            grad_check(
                &[
                    rand_tensor(rng, &[r, c]),
                    rand_tensor(rng, &[c]),
                    rand_tensor(rng, &[c]),
                ],
                |g, v| {
                    let o = g.layernorm(v[0], v[1], v[2]).expect("primitive graph");
                    weighted_sum(g, o, seed)
                },
            )
        }
        Prim::Gather => {
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.random_range(0..r)).collect();
            grad_check(&[rand_tensor(rng, &[r, c])], move |g, v| {
                let o = g.gather(v[0], &ids).expect("primitive graph");
                weighted_sum(g, o, seed)
            })
        }
        Prim::Concat0 => grad_check(
            &[rand_tensor(rng, &[r, c]), rand_tensor(rng, &[k, c])],
            |g, v| {
                let o = g.concat(&[v[0], v[1], v[0]], 0).expect("primitive graph");
                weighted_sum(g, o, seed)
            },
        ),
        Prim::Concat1 => grad_check(
            &[rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, k])],
            |g, v| {
                let o = g.concat(&[v[0], v[1]], 1).expect("primitive graph");
                weighted_sum(g, o, seed)
            },
        ),
        Prim::Slice => {
            let axis = rng.random_range(0..2);
            let extent = if axis == 0 { r } else { c };
            let start = rng.random_range(0..extent);
            let len = rng.random_range(1..=extent - start);
            grad_check(&[rand_tensor(rng, &[r, c])], move |g, v| {
                let o = g.slice(v[0], axis, start, len).expect("primitive graph");
                weighted_sum(g, o, seed)
            })
        }
        Prim::Mean => grad_check(&[rand_tensor(rng, &[r, c])], |g, v| {
            let m = g.mean_rows(v[0]).expect("primitive graph");
            let a = weighted_sum(g, m, seed);
            let b = g.mean_all(v[0]).expect("primitive graph");
            let ab = g.add(a, b).expect("primitive graph");
            g.sum_all(ab).expect("primitive graph")
        }),
        Prim::CrossEntropy => {
            let c = c.max(2);
            let targets: Vec<Option<usize>> = (0..r)
                .map(|i| {
                    if i % 3 == 2 {
                        None
                    } else {
                        Some(rng.random_range(0..c))
                    }
                })
                .collect();
            let reduction = if seed.is_multiple_of(2) {
                Reduction::Mean
            } else {
                Reduction::Sum
            };
            grad_check(&[rand_tensor(rng, &[r, c])], move |g, v| {
                let mut t = targets.clone();
                t[0] = Some(0);
                g.cross_entropy(v[0], &t, reduction)
                    .expect("primitive graph")
            })
        }
        Prim::Transpose => grad_check(&[rand_tensor(rng, &[r, c])], |g, v| {
            let o = g.transpose(v[0]).expect("primitive graph");
            weighted_sum(g, o, seed)
        }),
        Prim::Im2Col => {
            let geom = ConvGeometry {
                height: rng.random_range(2..6),
                width: rng.random_range(2..6),
                channels: rng.random_range(1..3),
                kernel: rng.random_range(1..4),
                stride: rng.random_range(1..3),
                pad: rng.random_range(0..2),
            };
            let geom = ConvGeometry {
                kernel: geom
                    .kernel
                    .min(geom.height + 2 * geom.pad)
                    .min(geom.width + 2 * geom.pad),
                ..geom
            };
            grad_check(
                &[rand_tensor(rng, &[geom.height * geom.width, geom.channels])],
                move |g, v| {
                    let o = g.im2col(v[0], geom).expect("primitive graph");
                    weighted_sum(g, o, seed)
                },
            )
        }
        // a single column normalizes to ±1 with a vanishing gradient
        Prim::L2Normalize => grad_check(&[rand_tensor(rng, &[r, c.max(2)])], |g, v| {
            let o = g.l2_normalize_rows(v[0]).expect("primitive graph");
            weighted_sum(g, o, seed)
        }),
        Prim::SelectCols => {
            let cols: Vec<usize> = (0..k).map(|_| rng.random_range(0..c)).collect();
            grad_check(&[rand_tensor(rng, &[r, c])], move |g, v| {
                let o = g.select_cols(v[0], &cols).expect("primitive graph");
                weighted_sum(g, o, seed)
            })
        }
        Prim::Reshape => grad_check(&[rand_tensor(rng, &[r, c])], move |g, v| {
            let o = g.reshape(v[0], &[c, r]).expect("primitive graph");
            let t = g.transpose(o).expect("primitive graph");
            weighted_sum(g, t, seed)
        }),
    }
}
