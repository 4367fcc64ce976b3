//! Verification of reverse-mode gradients against central finite differences.
//!
//! Each check builds the op under test twice per perturbed element, reduces
//! the output against a fixed random cotangent so arbitrary output shapes
//! collapse to a scalar, and compares the tape gradient elementwise against
//! `(f(x+h) - f(x-h)) / 2h`.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{Shape, Tape, Tensor, Var};

/// Outcome of one finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:32} max_rel_err {:>12.3e}  tol {:>8.1e}  {}",
            self.op,
            self.max_rel_err,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

/// Check the reverse-mode gradient of `f` w.r.t. every element of `inputs`.
///
/// `f` receives leaves in the order of `inputs` and returns the output node;
/// the harness reduces it with a fixed random cotangent. Inputs are expected
/// to be 64-bit and small (the probe runs `2 * numel` forward evaluations).
pub fn grad_check<F>(op: &str, inputs: &[Tensor<f64>], tolerance: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let forward = |values: &[Tensor<f64>]| -> (Tape<f64>, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        (tape, out, vars)
    };

    let (tape, out, vars) = forward(inputs);
    let out_shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ op.len() as u64);
    let cotangent: Vec<f64> = (0..out_shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();

    // analytic: backprop the cotangent through the tape
    let loss = {
        let mut tape = tape;
        let cot = Tensor::from_vec(out_shape, cotangent.clone());
        let cvar = tape.constant(cot);
        let prod = dot_op(&mut tape, out, cvar);
        (tape, prod)
    };
    let (tape, loss_var) = loss;
    let store = tape.backward(loss_var);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| store.grad(&tape, v)).collect();

    let mut max_rel = 0.0f64;
    let mut finite = true;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.shape().numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            minus[i].data_mut()[e] -= FD_STEP;
            let (tp, op_, _) = forward(&plus);
            let (tm, om, _) = forward(&minus);
            // project the output difference rather than differencing two
            // projections: outputs untouched by the perturbation cancel
            // bitwise instead of leaving O(eps * |loss|) noise
            let numeric: f64 = tp
                .value(op_)
                .data()
                .iter()
                .zip(tm.value(om).data())
                .zip(&cotangent)
                .map(|((&p, &m), &c)| (p - m) * c)
                .sum::<f64>()
                / (2.0 * FD_STEP);
            let a = analytic[i].data()[e];
            if !a.is_finite() || !numeric.is_finite() {
                finite = false;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
        }
    }
    if !finite {
        max_rel = f64::INFINITY;
    }
    GradCheckReport {
        op: op.to_string(),
        max_rel_err: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    }
}

/// Scalar product <a, b> as a tape op so the cotangent projection is itself
/// differentiable.
fn dot_op(tape: &mut Tape<f64>, a: Var, b: Var) -> Var {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    assert_eq!(av.shape(), bv.shape());
    let s: f64 = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).sum();
    let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![s]);
    tape.push_op(
        out,
        &[a, b],
        Box::new(move |go, ctx| {
            let g = go[0];
            if let Some(ga) = ctx.grad_mut(a) {
                for (gi, &y) in ga.iter_mut().zip(bv.data()) {
                    *gi += g * y;
                }
            }
            if let Some(gb) = ctx.grad_mut(b) {
                for (gi, &x) in gb.iter_mut().zip(av.data()) {
                    *gi += g * x;
                }
            }
        }),
    )
}

/// Uniform tensor in `(lo, hi)`, seeded.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(
        shape,
        (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect(),
    )
}

/// Random `(B, 2N, h, w)` displacements with magnitude in `(0.15, 0.85)`
/// whose sample coordinates stay strictly inside the image: away from both
/// the bilinear lattice kinks and the clamp saturation zone at the border.
fn interior_offsets(rng: &mut ChaCha8Rng, b: usize, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let shape = Shape::new(b, 2 * n, h, w);
    Tensor::from_fn(shape, |_, c, y, x| {
        let mag = rng.random_range(0.15..0.85);
        let along_x = c % 2 == 0;
        let pos = if along_x { x } else { y };
        let extent = if along_x { w } else { h };
        if pos + 1 == extent {
            -mag
        } else {
            mag
        }
    })
}

/// The whole-library gradient suite: every differentiable op on randomized
/// small instances. Linear ops are held to 1e-6, piecewise-smooth ops to
/// 1e-4, with inputs kept away from their non-smooth points.
pub fn standard_suite(instances: usize) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    let mut worst = |name: &str, mut one: Box<dyn FnMut(&mut ChaCha8Rng) -> GradCheckReport>| {
        let mut agg: Option<GradCheckReport> = None;
        for _ in 0..instances {
            let r = one(&mut rng);
            agg = Some(match agg {
                None => r,
                Some(prev) => {
                    if r.max_rel_err > prev.max_rel_err {
                        r
                    } else {
                        prev
                    }
                }
            });
        }
        let mut r = agg.expect("instances >= 1");
        r.op = name.to_string();
        reports.push(r);
    };

    worst(
        "conv2d",
        Box::new(|rng| {
            let x = random_tensor(rng, Shape::new(1, 2, 5, 5), -1.0, 1.0);
            let w = random_tensor(rng, Shape::new(3, 2, 3, 3), -1.0, 1.0);
            let b = random_tensor(rng, Shape::new(1, 3, 1, 1), -1.0, 1.0);
            grad_check("conv2d", &[x, w, b], 1e-6, |t, v| {
                t.conv2d(v[0], v[1], v[2], 1, 1)
            })
        }),
    );
    worst(
        "conv2d_stride2",
        Box::new(|rng| {
            let x = random_tensor(rng, Shape::new(1, 2, 6, 6), -1.0, 1.0);
            let w = random_tensor(rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
            let b = random_tensor(rng, Shape::new(1, 2, 1, 1), -1.0, 1.0);
            grad_check("conv2d_stride2", &[x, w, b], 1e-6, |t, v| {
                t.conv2d(v[0], v[1], v[2], 2, 1)
            })
        }),
    );
    worst(
        "transposed_conv2d",
        Box::new(|rng| {
            let x = random_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
            let w = random_tensor(rng, Shape::new(2, 2, 4, 4), -1.0, 1.0);
            let b = random_tensor(rng, Shape::new(1, 2, 1, 1), -1.0, 1.0);
            grad_check("transposed_conv2d", &[x, w, b], 1e-6, |t, v| {
                t.transposed_conv2d(v[0], v[1], v[2], 2)
            })
        }),
    );
    worst(
        "prelu",
        Box::new(|rng| {
            // inputs bounded away from the kink at 0
            let x = random_tensor(rng, Shape::new(1, 3, 4, 4), 0.1, 1.0);
            let neg = random_tensor(rng, Shape::new(1, 3, 4, 4), 0.1, 1.0).map(|v| -v);
            let x = Tensor::from_vec(
                x.shape(),
                x.data()
                    .iter()
                    .zip(neg.data())
                    .enumerate()
                    .map(|(i, (&p, &n))| if i % 2 == 0 { p } else { n })
                    .collect(),
            );
            let s = random_tensor(rng, Shape::new(1, 3, 1, 1), 0.05, 0.5);
            grad_check("prelu", &[x, s], 1e-6, |t, v| t.prelu(v[0], v[1]))
        }),
    );
    worst(
        "channel_softmax",
        Box::new(|rng| {
            let x = random_tensor(rng, Shape::new(1, 5, 3, 3), -2.0, 2.0);
            grad_check("channel_softmax", &[x], 1e-5, |t, v| {
                t.channel_softmax(v[0], 2..5)
            })
        }),
    );
    worst(
        "bilinear_resize",
        Box::new(|rng| {
            let x = random_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
            grad_check("bilinear_resize", &[x], 1e-6, |t, v| {
                t.bilinear_resize(v[0], 7, 6)
            })
        }),
    );
    worst(
        "fft2",
        Box::new(|rng| {
            let x = random_tensor(rng, Shape::new(1, 1, 6, 4), -1.0, 1.0);
            grad_check("fft2", &[x], 1e-6, |t, v| t.fft2(v[0]))
        }),
    );
    worst(
        "reduce_loss_l2",
        Box::new(|rng| {
            let a = random_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
            let b = random_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
            grad_check("reduce_loss_l2", &[a, b], 1e-6, |t, v| {
                t.reduce_loss(v[0], v[1], super::LossKind::L2)
            })
        }),
    );
    // sampling ops: offsets bounded away from the integer lattice where the
    // bilinear interpolant has its kinks
    worst(
        "warp",
        Box::new(|rng| {
            let img = random_tensor(rng, Shape::new(1, 2, 5, 5), 0.0, 1.0);
            let off = interior_offsets(rng, 1, 1, 5, 5);
            grad_check("warp", &[img, off], 1e-5, |t, v| t.warp(v[0], v[1]))
        }),
    );
    worst(
        "reblur",
        Box::new(|rng| {
            let img = random_tensor(rng, Shape::new(1, 2, 5, 5), 0.0, 1.0);
            let off = interior_offsets(rng, 1, 2, 5, 5);
            let logits = random_tensor(rng, Shape::new(1, 2, 5, 5), -1.0, 1.0);
            grad_check("reblur", &[img, off, logits], 1e-5, |t, v| {
                let weights = t.channel_softmax(v[2], 0..2);
                t.reblur(
                    v[0],
                    crate::pmpb::FieldVars {
                        offsets: v[1],
                        weights,
                    },
                )
            })
        }),
    );
    worst(
        "apply_inverse_kernels",
        Box::new(|rng| {
            let img = random_tensor(rng, Shape::new(1, 2, 4, 4), 0.0, 1.0);
            let off = interior_offsets(rng, 1, 3, 4, 4);
            let wts = random_tensor(rng, Shape::new(1, 3, 4, 4), -1.0, 1.0);
            grad_check("apply_inverse_kernels", &[img, off, wts], 1e-5, |t, v| {
                crate::cdcr::apply_inverse_kernels(
                    t,
                    v[0],
                    crate::cdcr::InverseFieldVars {
                        offsets: v[1],
                        weights: v[2],
                    },
                )
            })
        }),
    );
    worst(
        "cdcr_forward",
        Box::new(|rng| {
            // tiny composed block, 4x4 with 2 channels, N = M = 2; conv1
            // biases push the offsets off the lattice
            let f_in = random_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
            let conv1_w = random_tensor(rng, Shape::new(6, 2, 3, 3), -0.1, 0.1);
            let conv1_b = Tensor::from_vec(
                Shape::new(1, 6, 1, 1),
                vec![0.31, 0.47, -0.29, 0.55, 0.13, -0.41],
            );
            let conv2_w = random_tensor(rng, Shape::new(4, 6, 3, 3), -0.2, 0.2);
            let conv2_b = random_tensor(rng, Shape::new(1, 4, 1, 1), -0.2, 0.2);
            let conv3_w = random_tensor(rng, Shape::new(6, 4, 3, 3), -0.2, 0.2);
            let conv3_b = random_tensor(rng, Shape::new(1, 6, 1, 1), -0.3, 0.3);
            let s1 = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.25]);
            let s2 = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.2]);
            let inputs = vec![f_in, conv1_w, conv1_b, s1, conv2_w, conv2_b, s2, conv3_w, conv3_b];
            grad_check("cdcr_forward", &inputs, 1e-4, |t, v| {
                let p = crate::cdcr::CdcrParams {
                    conv1: crate::model::Conv {
                        weight: v[1],
                        bias: v[2],
                    },
                    inverse: Some(crate::cdcr::InversePath {
                        pre_offsets: v[3],
                        conv2: crate::model::Conv {
                            weight: v[4],
                            bias: v[5],
                        },
                        pre_mid: v[6],
                        conv3: crate::model::Conv {
                            weight: v[7],
                            bias: v[8],
                        },
                        inverse_taps: 2,
                    }),
                    blur_taps: 2,
                };
                let (features, _) = crate::cdcr::cdcr_forward(t, v[0], &p);
                features
            })
        }),
    );
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LossKind;

    #[test]
    fn linear_op_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
        let w = random_tensor(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
        let b = random_tensor(&mut rng, Shape::new(1, 2, 1, 1), -1.0, 1.0);
        let r = grad_check("conv2d", &[x, w, b], 1e-7, |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 1)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn prelu_away_from_kink_passes() {
        let x = Tensor::from_vec(
            Shape::new(1, 1, 1, 4),
            vec![-1.5, -0.4, 0.3, 2.0],
        );
        let s = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.25]);
        let r = grad_check("prelu", &[x, s], 1e-6, |t, v| t.prelu(v[0], v[1]));
        assert!(r.passed, "{r}");
    }

    #[test]
    fn prelu_probed_at_kink_is_flagged() {
        // x = 0 sits on the subgradient point excluded by the precondition;
        // the checker must report the mismatch rather than mask it.
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 1.0]);
        let s = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.25]);
        let r = grad_check("prelu_at_zero", &[x, s], 1e-6, |t, v| t.prelu(v[0], v[1]));
        assert!(!r.passed);
    }

    #[test]
    fn reduce_loss_l1_away_from_ties() {
        let a = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.3, -0.7, 1.2, 0.4]);
        let b = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![-0.2, 0.5, 0.9, -0.1]);
        let r = grad_check("reduce_loss_l1", &[a, b], 1e-6, |t, v| {
            t.reduce_loss(v[0], v[1], LossKind::L1)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn suite_all_pass() {
        for r in standard_suite(3) {
            assert!(r.passed, "{r}");
        }
    }
}
