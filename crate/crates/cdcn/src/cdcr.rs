//! Constrained deformable convolution reblurring block: predicts the blur
//! kernel field from features, derives per-pixel inverse kernels from it and
//! applies them to the features with one deformable convolution.
//!
//! The deformable convolution is depthwise: per-pixel taps and weights are
//! shared across channels and there is no cross-channel mixing, matching the
//! spatial nature of a blur operator. Inverse-kernel weights stay
//! unnormalized (no softmax on that head).

use crate::model::Conv;
use crate::pmpb::FieldVars;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Per-pixel deconvolution kernel: `M` displacements plus `M` unnormalized
/// (possibly negative) weights.
#[derive(Clone, Debug)]
pub struct InverseKernelField<T> {
    pub offsets: Tensor<T>,
    pub weights: Tensor<T>,
}

impl<T: Scalar> InverseKernelField<T> {
    pub fn taps(&self) -> usize {
        self.weights.shape().c
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.offsets.all_finite() || !self.weights.all_finite() {
            return Err("non-finite inverse kernel".into());
        }
        if self.taps() < 1 {
            return Err("M must be >= 1".into());
        }
        Ok(())
    }
}

/// Inverse kernel field as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct InverseFieldVars {
    pub offsets: Var,
    pub weights: Var,
}

/// The inverse-kernel prediction path: PReLU/concat/conv pipeline ending in
/// the `3M`-channel head. Absent in the no-CDCR ablation.
#[derive(Clone, Debug)]
pub struct InversePath<H> {
    pub pre_offsets: H,
    pub conv2: Conv<H>,
    pub pre_mid: H,
    pub conv3: Conv<H>,
    pub inverse_taps: usize,
}

impl<A> InversePath<A> {
    pub fn map<B>(&self, f: &mut impl FnMut(&A) -> B) -> InversePath<B> {
        InversePath {
            pre_offsets: f(&self.pre_offsets),
            conv2: self.conv2.map(f),
            pre_mid: f(&self.pre_mid),
            conv3: self.conv3.map(f),
            inverse_taps: self.inverse_taps,
        }
    }
}

/// Parameters of one CDCR module: the `3N`-channel kernel head plus the
/// optional inverse path.
#[derive(Clone, Debug)]
pub struct CdcrParams<H> {
    pub conv1: Conv<H>,
    pub inverse: Option<InversePath<H>>,
    pub blur_taps: usize,
}

impl<A> CdcrParams<A> {
    pub fn map<B>(&self, f: &mut impl FnMut(&A) -> B) -> CdcrParams<B> {
        CdcrParams {
            conv1: self.conv1.map(f),
            inverse: self.inverse.as_ref().map(|p| p.map(f)),
            blur_taps: self.blur_taps,
        }
    }
}

/// Estimate the blur kernel field: `conv1` emits `3N` channels, split into
/// `2N` raw offsets and `N` weight logits normalized per pixel by softmax.
pub fn predict_blur_kernels<T: Scalar>(
    tape: &mut Tape<T>,
    f_in: Var,
    params: &CdcrParams<Var>,
) -> FieldVars {
    let n = params.blur_taps;
    let head = tape.conv2d(f_in, params.conv1.weight, params.conv1.bias, 1, 1);
    assert_eq!(
        tape.shape(head).c,
        3 * n,
        "conv1 must emit 3N channels"
    );
    let parts = tape.split_channels(head, &[2 * n, n]);
    let weights = tape.channel_softmax(parts[1], 0..n);
    FieldVars {
        offsets: parts[0],
        weights,
    }
}

/// Predict the inverse kernels from the estimated field:
/// `conv3(PReLU(conv2(PReLU(offsets) (+) weights)))`, split `[2M, M]`,
/// weights left unnormalized.
pub fn predict_inverse_kernels<T: Scalar>(
    tape: &mut Tape<T>,
    field: FieldVars,
    path: &InversePath<Var>,
) -> InverseFieldVars {
    let m = path.inverse_taps;
    let pre = tape.prelu(field.offsets, path.pre_offsets);
    let cat = tape.concat_channels(&[pre, field.weights]);
    let mid = tape.conv2d(cat, path.conv2.weight, path.conv2.bias, 1, 1);
    let act = tape.prelu(mid, path.pre_mid);
    let head = tape.conv2d(act, path.conv3.weight, path.conv3.bias, 1, 1);
    assert_eq!(tape.shape(head).c, 3 * m, "conv3 must emit 3M channels");
    let parts = tape.split_channels(head, &[2 * m, m]);
    InverseFieldVars {
        offsets: parts[0],
        weights: parts[1],
    }
}

/// Deblur features with the predicted inverse kernels (one deformable
/// convolution, taps shared across channels).
pub fn apply_inverse_kernels<T: Scalar>(tape: &mut Tape<T>, f_in: Var, inv: InverseFieldVars) -> Var {
    tape.field_apply(f_in, inv.offsets, inv.weights)
}

/// Full CDCR block. Returns the deblurred features and the kernel field for
/// the reblurring loss. Under the no-CDCR ablation (no inverse path) the
/// features pass through unchanged while the field is still estimated.
pub fn cdcr_forward<T: Scalar>(
    tape: &mut Tape<T>,
    f_in: Var,
    params: &CdcrParams<Var>,
) -> (Var, FieldVars) {
    let field = predict_blur_kernels(tape, f_in, params);
    let features = match &params.inverse {
        Some(path) => {
            let inv = predict_inverse_kernels(tape, field, path);
            apply_inverse_kernels(tape, f_in, inv)
        }
        None => f_in,
    };
    (features, field)
}

/// Plain-text export of a kernel field on a pixel grid: one row
/// `x y n dx dy w` per sampling point, consumed by the overlay renderer.
pub fn kernel_field_table<T: Scalar>(
    field: &crate::pmpb::BlurKernelField<T>,
    stride: usize,
) -> String {
    assert!(stride >= 1, "stride must be positive");
    let ws = field.weights.shape();
    let n = ws.c;
    let mut out = String::new();
    for y in (0..ws.h).step_by(stride) {
        for x in (0..ws.w).step_by(stride) {
            for t in 0..n {
                out.push_str(&format!(
                    "{} {} {} {} {} {}\n",
                    x,
                    y,
                    t,
                    field.offsets.at(0, 2 * t, y, x).lift(),
                    field.offsets.at(0, 2 * t + 1, y, x).lift(),
                    field.weights.at(0, t, y, x).lift(),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::pmpb::{dense_oracle_reblur, BlurKernelField};
    use crate::tensor::{grad_check, Shape, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rnd(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
        Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Standalone CDCR parameter set on a fresh tape, values seeded or zero.
    fn bound_cdcr(
        tape: &mut Tape<f64>,
        cin: usize,
        n: usize,
        m: usize,
        cmid: usize,
        zero_conv1: bool,
        zero_all: bool,
        rng: &mut ChaCha8Rng,
    ) -> CdcrParams<Var> {
        let mut conv = |cout: usize, cin: usize, zero: bool| {
            let ws = Shape::new(cout, cin, 3, 3);
            let bs = Shape::new(1, cout, 1, 1);
            let (w, b) = if zero {
                (Tensor::zeros(ws), Tensor::zeros(bs))
            } else {
                (rnd(rng, ws).map(|v| v * 0.2), rnd(rng, bs).map(|v| v * 0.2))
            };
            Conv {
                weight: tape.leaf(w, true),
                bias: tape.leaf(b, true),
            }
        };
        let conv1 = conv(3 * n, cin, zero_conv1 || zero_all);
        let conv2 = conv(cmid, 3 * n, zero_all);
        let conv3 = conv(3 * m, cmid, zero_all);
        drop(conv);
        let slope_t = Tensor::full(Shape::new(1, 1, 1, 1), 0.25);
        let pre_offsets = tape.leaf(slope_t.clone(), true);
        let pre_mid = tape.leaf(slope_t, true);
        CdcrParams {
            conv1,
            inverse: Some(InversePath {
                pre_offsets,
                conv2,
                pre_mid,
                conv3,
                inverse_taps: m,
            }),
            blur_taps: n,
        }
    }

    #[test]
    fn zero_conv1_gives_identity_like_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape: Tape<f64> = Tape::new();
        let f_in = tape.constant(rnd(&mut rng, Shape::new(1, 4, 6, 6)));
        let p = bound_cdcr(&mut tape, 4, 3, 7, 16, true, false, &mut rng);
        let field = predict_blur_kernels(&mut tape, f_in, &p);
        assert!(tape.value(field.offsets).data().iter().all(|&v| v == 0.0));
        for &w in tape.value(field.weights).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_counts_match_n_and_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape: Tape<f64> = Tape::new();
        let f_in = tape.constant(rnd(&mut rng, Shape::new(1, 4, 4, 4)));
        let p = bound_cdcr(&mut tape, 4, 3, 7, 16, false, false, &mut rng);
        let field = predict_blur_kernels(&mut tape, f_in, &p);
        // N=3: conv1 emits 9 channels split [6, 3]
        assert_eq!(tape.shape(field.offsets).c, 6);
        assert_eq!(tape.shape(field.weights).c, 3);
        let inv = predict_inverse_kernels(&mut tape, field, p.inverse.as_ref().unwrap());
        // M=7: conv3 emits 21 channels split [14, 7]
        assert_eq!(tape.shape(inv.offsets).c, 14);
        assert_eq!(tape.shape(inv.weights).c, 7);
    }

    #[test]
    fn weights_sum_to_one_for_any_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let mut tape: Tape<f64> = Tape::new();
            let f_in = tape.constant(rnd(&mut rng, Shape::new(2, 4, 5, 5)));
            let p = bound_cdcr(&mut tape, 4, 3, 7, 8, false, false, &mut rng);
            let field = predict_blur_kernels(&mut tape, f_in, &p);
            let w = tape.value(field.weights);
            let s = w.shape();
            for b in 0..s.b {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let sum: f64 = (0..s.c).map(|c| w.at(b, c, y, x)).sum();
                        assert!((sum - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_parameters_give_zero_inverse_and_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape: Tape<f64> = Tape::new();
        let f_in = tape.constant(rnd(&mut rng, Shape::new(1, 4, 4, 4)));
        let p = bound_cdcr(&mut tape, 4, 2, 3, 8, true, true, &mut rng);
        let (features, _) = cdcr_forward(&mut tape, f_in, &p);
        assert!(tape.value(features).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f_in_v = rnd(&mut rng, Shape::new(1, 4, 5, 5));
        let run = |f_in_v: &Tensor<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape: Tape<f64> = Tape::new();
            let f_in = tape.constant(f_in_v.clone());
            let p = bound_cdcr(&mut tape, 4, 2, 3, 8, false, false, &mut rng);
            let (features, _) = cdcr_forward(&mut tape, f_in, &p);
            tape.value(features).data().to_vec()
        };
        assert_eq!(run(&f_in_v), run(&f_in_v));
    }

    #[test]
    fn apply_identity_and_coincident_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f_in_v = rnd(&mut rng, Shape::new(1, 3, 4, 4));
        let mut tape: Tape<f64> = Tape::new();
        let f_in = tape.constant(f_in_v.clone());
        // M=1, zero offset, weight 1
        let inv1 = InverseFieldVars {
            offsets: tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4))),
            weights: tape.constant(Tensor::full(Shape::new(1, 1, 4, 4), 1.0)),
        };
        let y1 = apply_inverse_kernels(&mut tape, f_in, inv1);
        assert_eq!(tape.value(y1).data(), f_in_v.data());

        // M=2, both taps at (0,0), weights 0.3/0.7
        let mut w2 = Tensor::zeros(Shape::new(1, 2, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                w2.set(0, 0, y, x, 0.3);
                w2.set(0, 1, y, x, 0.7);
            }
        }
        let inv2 = InverseFieldVars {
            offsets: tape.constant(Tensor::zeros(Shape::new(1, 4, 4, 4))),
            weights: tape.constant(w2),
        };
        let y2 = apply_inverse_kernels(&mut tape, f_in, inv2);
        assert!(tape.value(y2).max_abs_diff(&f_in_v) < 1e-12);
    }

    #[test]
    fn apply_matches_dense_oracle_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let m = rng.random_range(1..=8usize);
            let (h, w) = (rng.random_range(2..=8usize), rng.random_range(2..=8usize));
            let img = rnd(&mut rng, Shape::new(1, 3, h, w));
            let offsets = rnd(&mut rng, Shape::new(1, 2 * m, h, w)).map(|v| v * 3.0);
            let weights = rnd(&mut rng, Shape::new(1, m, h, w)); // unnormalized, may be negative
            let mut tape: Tape<f64> = Tape::new();
            let iv = tape.constant(img.clone());
            let inv = InverseFieldVars {
                offsets: tape.constant(offsets.clone()),
                weights: tape.constant(weights.clone()),
            };
            let y = apply_inverse_kernels(&mut tape, iv, inv);
            let taps = BlurKernelField::new(offsets, weights).to_taps(0);
            let want = dense_oracle_reblur(&img, &taps);
            assert!(tape.value(y).max_abs_diff(&want) < 1e-6);
        }
    }

    #[test]
    fn apply_is_linear_in_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fa = rnd(&mut rng, Shape::new(1, 2, 5, 5));
        let fb = rnd(&mut rng, Shape::new(1, 2, 5, 5));
        let offsets = rnd(&mut rng, Shape::new(1, 4, 5, 5)).map(|v| v * 2.0);
        let weights = rnd(&mut rng, Shape::new(1, 2, 5, 5));
        let (a, b) = (1.3, -0.6);
        let run = |img: &Tensor<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let iv = tape.constant(img.clone());
            let inv = InverseFieldVars {
                offsets: tape.constant(offsets.clone()),
                weights: tape.constant(weights.clone()),
            };
            let y = apply_inverse_kernels(&mut tape, iv, inv);
            tape.value(y).clone()
        };
        let comb = Tensor::from_vec(
            fa.shape(),
            fa.data().iter().zip(fb.data()).map(|(&p, &q)| a * p + b * q).collect(),
        );
        let (ya, yb, yc) = (run(&fa), run(&fb), run(&comb));
        for i in 0..ya.shape().numel() {
            assert!((yc.data()[i] - (a * ya.data()[i] + b * yb.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn composed_cdcr_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // tiny instance, offsets kept off the integer lattice by bias choice
        let f_in = rnd(&mut rng, Shape::new(1, 2, 4, 4));
        let n = 2;
        let m = 2;
        let cmid = 4;
        let conv1_w = rnd(&mut rng, Shape::new(3 * n, 2, 3, 3)).map(|v| v * 0.1);
        let conv1_b = Tensor::from_vec(
            Shape::new(1, 3 * n, 1, 1),
            vec![0.31, 0.47, -0.29, 0.55, 0.13, -0.41],
        );
        let conv2_w = rnd(&mut rng, Shape::new(cmid, 3 * n, 3, 3)).map(|v| v * 0.2);
        let conv2_b = rnd(&mut rng, Shape::new(1, cmid, 1, 1)).map(|v| v * 0.2);
        let conv3_w = rnd(&mut rng, Shape::new(3 * m, cmid, 3, 3)).map(|v| v * 0.2);
        let conv3_b = rnd(&mut rng, Shape::new(1, 3 * m, 1, 1)).map(|v| v * 0.3);
        let s1 = Tensor::full(Shape::new(1, 1, 1, 1), 0.25);
        let s2 = Tensor::full(Shape::new(1, 1, 1, 1), 0.2);
        let inputs = vec![
            f_in, conv1_w, conv1_b, s1, conv2_w, conv2_b, s2, conv3_w, conv3_b,
        ];
        let r = grad_check("cdcr_forward", &inputs, 1e-4, |tape, v| {
            let p = CdcrParams {
                conv1: Conv {
                    weight: v[1],
                    bias: v[2],
                },
                inverse: Some(InversePath {
                    pre_offsets: v[3],
                    conv2: Conv {
                        weight: v[4],
                        bias: v[5],
                    },
                    pre_mid: v[6],
                    conv3: Conv {
                        weight: v[7],
                        bias: v[8],
                    },
                    inverse_taps: 2,
                }),
                blur_taps: 2,
            };
            let (features, _) = cdcr_forward(tape, v[0], &p);
            features
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn no_cdcr_bypasses_features_but_keeps_field() {
        let cfg = ModelConfig {
            no_cdcr: true,
            base_channels: 4,
            resblocks: 1,
            ..ModelConfig::default()
        };
        let params = build_model::<f64>(&cfg, 1).unwrap();
        // no conv2/conv3/slope parameters exist in the no-CDCR variant
        assert!(!params
            .parameters()
            .iter()
            .any(|p| p.name.contains("conv2") || p.name.contains("conv3") || p.name.contains("pre")));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape: Tape<f64> = Tape::new();
        let f_in_v = rnd(&mut rng, Shape::new(1, 4, 4, 4));
        let f_in = tape.constant(f_in_v.clone());
        let mut conv = |cout: usize, cin: usize| Conv {
            weight: tape.leaf(rnd(&mut rng, Shape::new(cout, cin, 3, 3)), true),
            bias: tape.leaf(rnd(&mut rng, Shape::new(1, cout, 1, 1)), true),
        };
        let p = CdcrParams {
            conv1: conv(6, 4),
            inverse: None,
            blur_taps: 2,
        };
        let (features, field) = cdcr_forward(&mut tape, f_in, &p);
        assert_eq!(tape.value(features).data(), f_in_v.data());
        assert_eq!(tape.shape(field.weights).c, 2);
    }

    #[test]
    fn shape_preserved_through_cdcr() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape: Tape<f64> = Tape::new();
        let f_in = tape.constant(rnd(&mut rng, Shape::new(2, 4, 8, 6)));
        let p = bound_cdcr(&mut tape, 4, 3, 7, 8, false, false, &mut rng);
        let (features, _) = cdcr_forward(&mut tape, f_in, &p);
        assert_eq!(tape.shape(features), Shape::new(2, 4, 8, 6));
    }

    #[test]
    fn kernel_table_rows() {
        let mut offsets = Tensor::<f64>::zeros(Shape::new(1, 4, 4, 4));
        offsets.set(0, 0, 2, 2, 1.5);
        offsets.set(0, 1, 2, 2, -0.5);
        let field = BlurKernelField::new(offsets, Tensor::full(Shape::new(1, 2, 4, 4), 0.5));
        let table = kernel_field_table(&field, 2);
        // grid pixels at (0,0), (0,2), (2,0), (2,2), two taps each
        assert_eq!(table.lines().count(), 8);
        assert!(table.lines().any(|l| l.starts_with("2 2 0 1.5 -0.5 0.5")));
        let parsed = crate::eval::parse_kernel_table(&table).unwrap();
        assert_eq!(parsed.len(), 8);
    }
}
