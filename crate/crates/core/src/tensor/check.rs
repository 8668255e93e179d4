//! Finite-difference verification of reverse-mode gradients.
//!
//! `grad_check` compares every input coordinate; `grad_check_sampled` caps
//! the number of probed coordinates for large parameter sets. Both reject
//! non-finite losses outright. The op-level suite at the bottom is shipped as
//! a diagnostic so integration tests can run the same battery the unit tests
//! use.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorId};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Relative error as used throughout: absolute difference normalized by the
/// larger magnitude, floored at 1 so tiny gradients compare absolutely.
pub fn rel_err(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / fd.abs().max(ad.abs()).max(1.0)
}

/// Checks reverse-mode gradients of `build` against central differences for
/// every coordinate of every input. `eps` is the half-step; 1e-5 is a good
/// default for values of order 1.
pub fn grad_check<F>(build: &F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    Ok(grad_check_sampled(build, inputs, eps, None, 0)?.max_rel_err)
}

/// Like [`grad_check`], probing at most `max_coords` coordinates chosen
/// deterministically from `seed`. `None` probes everything.
pub fn grad_check_sampled<F>(
    build: &F,
    inputs: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    // Reverse-mode pass with gradients enabled on every input.
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut g = Graph::new();
    let ids: Vec<TensorId> = tracked.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &ids)?;
    if g.shape(loss) != (1, 1) {
        let (r, c) = g.shape(loss);
        return Err(Error::GradCheck(format!("loss must be scalar, got {r}x{c}")));
    }
    let l0 = g.scalar_value(loss);
    if !l0.is_finite() {
        return Err(Error::GradCheck(format!("non-finite loss {l0}")));
    }
    g.backward(loss)?;
    let ad: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(g);

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if let Some(cap) = max_coords {
        if cap < coords.len() {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            coords.shuffle(&mut rng);
            coords.truncate(cap);
            coords.sort_unstable();
        }
    }

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = probe.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::GradCheck(format!("non-finite loss {v} during probe")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: coords.len(),
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, j) in coords {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let up = eval(&probe)?;
        probe[i].data_mut()[j] = orig - eps;
        let down = eval(&probe)?;
        probe[i].data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * eps);
        let err = rel_err(fd, ad[i][j]);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}

/// One named case of the operation battery: builds a scalar loss from leaf
/// inputs so the whole pipeline (op forward, op backward, reductions) is
/// exercised.
type BuildFn = Box<dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId>>;

fn weighted_loss(g: &mut Graph, out: TensorId, seed: u64) -> Result<TensorId> {
    // A fixed random weighting makes every output element influence the loss
    // differently, which catches transposition and indexing mistakes that a
    // plain mean would miss.
    let (r, c) = g.shape(out);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x77ee);
    let w: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wid = g.constant(r, c, w)?;
    let prod = g.mul(out, wid)?;
    Ok(g.sum_all(prod))
}

fn tensor(rng: &mut ChaCha20Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    let v: Vec<f64> = (0..r * c).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(r, c, v).unwrap()
}

/// Tensor whose entries keep a margin away from zero, for kinked ops.
fn tensor_off_zero(rng: &mut ChaCha20Rng, r: usize, c: usize, margin: f64) -> Tensor {
    let v: Vec<f64> = (0..r * c)
        .map(|_| {
            let mag = rng.gen_range(margin..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(r, c, v).unwrap()
}

/// The full operation battery. Returns `(name, max rel err over instances)`
/// per case; every case samples fresh shapes-compatible inputs each instance.
pub fn op_gradient_suite(instances: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut results = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cases: Vec<(&str, Box<dyn Fn(&mut ChaCha20Rng, u64) -> (Vec<Tensor>, BuildFn)>)> = vec![
        (
            "matmul",
            Box::new(|rng, s| {
                let a = tensor(rng, 3, 4, -2.0, 2.0);
                let b = tensor(rng, 4, 5, -2.0, 2.0);
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let out = g.matmul(ids[0], ids[1])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "matmul_nt",
            Box::new(|rng, s| {
                let a = tensor(rng, 3, 4, -2.0, 2.0);
                let b = tensor(rng, 5, 4, -2.0, 2.0);
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let out = g.matmul_nt(ids[0], ids[1])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "add",
            Box::new(|rng, s| {
                let a = tensor(rng, 4, 3, -2.0, 2.0);
                let b = tensor(rng, 4, 3, -2.0, 2.0);
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let out = g.add(ids[0], ids[1])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "sub",
            Box::new(|rng, s| {
                let a = tensor(rng, 4, 3, -2.0, 2.0);
                let b = tensor(rng, 4, 3, -2.0, 2.0);
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let out = g.sub(ids[0], ids[1])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "mul",
            Box::new(|rng, s| {
                let a = tensor(rng, 4, 3, -2.0, 2.0);
                let b = tensor(rng, 4, 3, -2.0, 2.0);
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let out = g.mul(ids[0], ids[1])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "div",
            Box::new(|rng, s| {
                let a = tensor(rng, 4, 3, -2.0, 2.0);
                let b = tensor_off_zero(rng, 4, 3, 0.4);
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let out = g.div(ids[0], ids[1])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "add_row",
            Box::new(|rng, s| {
                let a = tensor(rng, 5, 4, -2.0, 2.0);
                let b = tensor(rng, 1, 4, -2.0, 2.0);
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let out = g.add_row(ids[0], ids[1])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "scale",
            Box::new(|rng, s| {
                let a = tensor(rng, 4, 4, -2.0, 2.0);
                let f = rng.gen_range(-3.0..3.0);
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let out = g.scale(ids[0], f);
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "relu",
            Box::new(|rng, s| {
                let a = tensor_off_zero(rng, 4, 5, 0.05);
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let out = g.relu(ids[0]);
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "sigmoid",
            Box::new(|rng, s| {
                let a = tensor(rng, 4, 5, -3.0, 3.0);
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let out = g.sigmoid(ids[0]);
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "abs",
            Box::new(|rng, s| {
                let a = tensor_off_zero(rng, 4, 5, 0.05);
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let out = g.abs(ids[0]);
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "min2_max2",
            Box::new(|rng, s| {
                // Keep the two operands separated so eps never flips a branch.
                let a = tensor(rng, 4, 3, -2.0, 2.0);
                let off = tensor_off_zero(rng, 4, 3, 0.1);
                let b = Tensor::from_vec(
                    4,
                    3,
                    a.data().iter().zip(off.data()).map(|(x, o)| x + o).collect(),
                )
                .unwrap();
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let mn = g.min2(ids[0], ids[1])?;
                        let mx = g.max2(ids[0], ids[1])?;
                        let both = g.concat_cols(&[mn, mx])?;
                        weighted_loss(g, both, s)
                    }),
                )
            }),
        ),
        (
            "softmax_rows",
            Box::new(|rng, s| {
                let a = tensor(rng, 4, 6, -2.0, 2.0);
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let out = g.softmax_rows(ids[0], None)?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "softmax_rows_masked",
            Box::new(|rng, s| {
                let a = tensor(rng, 4, 6, -2.0, 2.0);
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let mask = Arc::new(vec![false, false, true, false, true, false]);
                        let out = g.softmax_rows(ids[0], Some(mask))?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "layer_norm",
            Box::new(|rng, s| {
                let a = tensor(rng, 5, 8, -2.0, 2.0);
                let gain = tensor(rng, 1, 8, 0.5, 1.5);
                let bias = tensor(rng, 1, 8, -0.5, 0.5);
                (
                    vec![a, gain, bias],
                    Box::new(move |g, ids| {
                        let out = g.layer_norm(ids[0], ids[1], ids[2])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "cosine_rows",
            Box::new(|rng, s| {
                let a = tensor_off_zero(rng, 4, 6, 0.3);
                let b = tensor_off_zero(rng, 3, 6, 0.3);
                (
                    vec![a, b],
                    Box::new(move |g, ids| {
                        let out = g.cosine_rows(ids[0], ids[1])?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "slice_concat",
            Box::new(|rng, s| {
                let a = tensor(rng, 6, 6, -2.0, 2.0);
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let top = g.slice_rows(ids[0], 1, 3)?;
                        let left = g.slice_cols(top, 0, 2)?;
                        let right = g.slice_cols(top, 2, 4)?;
                        let back = g.concat_cols(&[left, right])?;
                        let stacked = g.concat_rows(&[back, back])?;
                        weighted_loss(g, stacked, s)
                    }),
                )
            }),
        ),
        (
            "dropout",
            Box::new(|rng, s| {
                let a = tensor(rng, 5, 4, -2.0, 2.0);
                let keep = 0.8;
                let mask: Vec<f64> = (0..20)
                    .map(|_| {
                        if rng.gen_bool(keep) {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let out = g.dropout(ids[0], Arc::new(mask.clone()))?;
                        weighted_loss(g, out, s)
                    }),
                )
            }),
        ),
        (
            "reductions",
            Box::new(|rng, _| {
                let a = tensor(rng, 4, 5, -2.0, 2.0);
                (
                    vec![a],
                    Box::new(move |g, ids| {
                        let m = g.mean_all(ids[0]);
                        let sm = g.sum_all(ids[0]);
                        let e = g.get(ids[0], 2, 3)?;
                        let t = g.add(m, sm)?;
                        g.add(t, e)
                    }),
                )
            }),
        ),
        (
            "nll_mean",
            Box::new(|rng, _| {
                let logits = tensor(rng, 5, 4, -2.0, 2.0);
                (
                    vec![logits],
                    Box::new(move |g, ids| {
                        let p = g.softmax_rows(ids[0], None)?;
                        g.nll_mean(p, vec![0, 3, 1, 2, 2])
                    }),
                )
            }),
        ),
    ];

    for (name, make) in cases {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let case_seed = seed ^ ((i as u64) << 16);
            let (inputs, build) = make(&mut rng, case_seed);
            let err = grad_check(&build, &inputs, 1e-5)?;
            if err > worst {
                worst = err;
            }
        }
        results.push((name.to_string(), worst));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_within_tolerance() {
        for (name, err) in op_gradient_suite(10, 42).unwrap() {
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn rejects_non_finite_loss() {
        let a = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        let build = |g: &mut Graph, ids: &[TensorId]| {
            let z = g.scalar(0.0);
            g.div(ids[0], z)
        };
        assert!(matches!(
            grad_check(&build, &[a], 1e-5),
            Err(Error::GradCheck(_))
        ));
    }

    #[test]
    fn sampled_check_probes_subset() {
        let a = Tensor::from_vec(10, 10, vec![0.5; 100]).unwrap();
        let build = |g: &mut Graph, ids: &[TensorId]| {
            let s = g.sigmoid(ids[0]);
            Ok(g.mean_all(s))
        };
        let rep = grad_check_sampled(&build, &[a], 1e-5, Some(7), 3).unwrap();
        assert_eq!(rep.coords_checked, 7);
        assert!(rep.max_rel_err < 1e-6);
    }

    #[test]
    fn flags_subgradient_disagreement_at_kink() {
        // relu at exactly 0: reverse mode takes the 0 branch while the
        // central difference straddles the kink and reports 0.5. The checker
        // must surface that disagreement rather than smooth over it.
        let a = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        let build = |g: &mut Graph, ids: &[TensorId]| {
            let r = g.relu(ids[0]);
            Ok(g.sum_all(r))
        };
        let err = grad_check(&build, &[a], 1e-5).unwrap();
        assert!(err > 0.4, "kink disagreement should be visible, got {err}");
    }
}
