//! Projective-motion-path blur: the per-pixel warp, the kernel-field reblur
//! operator, a brute-force dense-tap oracle, and a synthetic blur generator
//! that records ground-truth kernels.
//!
//! Kernel-field layout, fixed project-wide: offsets `(B, 2N, h, w)` hold the
//! x- and y-displacement of tap `n` in channels `2n` and `2n+1`, in pixels at
//! field resolution, relative to the pixel's own center; weights `(B, N, h, w)`
//! hold the fraction of exposure time per tap. All sampling clamps to the
//! image edge.

use std::io::Read;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdcnError, Result};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Per-pixel blur kernel: `N` sampling-point displacements plus `N`
/// softmax-normalized weights.
#[derive(Clone, Debug)]
pub struct BlurKernelField<T> {
    pub offsets: Tensor<T>,
    pub weights: Tensor<T>,
}

impl<T: Scalar> BlurKernelField<T> {
    pub fn new(offsets: Tensor<T>, weights: Tensor<T>) -> Self {
        let (os, ws) = (offsets.shape(), weights.shape());
        assert_eq!(os.c % 2, 0, "offset channels must be 2N");
        assert_eq!(
            os.c,
            2 * ws.c,
            "weight channel count {} does not match N implied by offsets ({})",
            ws.c,
            os.c / 2
        );
        assert!(
            os.b == ws.b && os.h == ws.h && os.w == ws.w,
            "offset/weight extent mismatch"
        );
        BlurKernelField { offsets, weights }
    }

    pub fn taps(&self) -> usize {
        self.weights.shape().c
    }

    /// Identity kernel: one tap, zero displacement, unit weight.
    pub fn identity(b: usize, h: usize, w: usize) -> Self {
        BlurKernelField {
            offsets: Tensor::zeros(Shape::new(b, 2, h, w)),
            weights: Tensor::full(Shape::new(b, 1, h, w), T::one()),
        }
    }

    /// Check the type invariants: finite offsets, weights >= 0 summing to 1
    /// per pixel within `tol`.
    pub fn check_invariants(&self, tol: f64) -> std::result::Result<(), String> {
        if !self.offsets.all_finite() {
            return Err("non-finite offset".into());
        }
        let ws = self.weights.shape();
        for b in 0..ws.b {
            for y in 0..ws.h {
                for x in 0..ws.w {
                    let mut sum = 0.0;
                    for n in 0..ws.c {
                        let v = self.weights.at(b, n, y, x).lift();
                        if v < -tol {
                            return Err(format!("negative weight {v} at ({b},{n},{y},{x})"));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > tol {
                        return Err(format!("weights sum to {sum} at ({b},{y},{x})"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Dense-tap view of batch element `b` (for the oracle and alignment).
    pub fn to_taps(&self, b: usize) -> TapField {
        let ws = self.weights.shape();
        let n = ws.c;
        let mut taps = Vec::with_capacity(ws.h * ws.w * n);
        for y in 0..ws.h {
            for x in 0..ws.w {
                for t in 0..n {
                    taps.push(Tap {
                        dx: self.offsets.at(b, 2 * t, y, x).lift(),
                        dy: self.offsets.at(b, 2 * t + 1, y, x).lift(),
                        weight: self.weights.at(b, t, y, x).lift(),
                    });
                }
            }
        }
        TapField {
            h: ws.h,
            w: ws.w,
            taps_per_px: n,
            taps,
        }
    }
}

/// Kernel field as nodes on a tape, for differentiable composition.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub offsets: Var,
    pub weights: Var,
}

/// One sampling tap: displacement in pixels plus its exposure fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub dx: f64,
    pub dy: f64,
    pub weight: f64,
}

/// Dense per-pixel tap list, the ground-truth kernel representation.
/// Row-major by pixel, tap-minor.
#[derive(Clone, Debug)]
pub struct TapField {
    pub h: usize,
    pub w: usize,
    pub taps_per_px: usize,
    pub taps: Vec<Tap>,
}

impl TapField {
    pub fn at(&self, y: usize, x: usize) -> &[Tap] {
        let base = (y * self.w + x) * self.taps_per_px;
        &self.taps[base..base + self.taps_per_px]
    }

    /// Tap field at `1/factor` resolution: taps sampled at each coarse
    /// pixel's center, displacements rescaled into coarse-pixel units.
    pub fn downsample(&self, factor: usize) -> TapField {
        assert!(factor >= 1 && self.h % factor == 0 && self.w % factor == 0);
        let (h, w) = (self.h / factor, self.w / factor);
        let mut taps = Vec::with_capacity(h * w * self.taps_per_px);
        for y in 0..h {
            for x in 0..w {
                let sy = (((y as f64 + 0.5) * factor as f64 - 0.5).round() as usize).min(self.h - 1);
                let sx = (((x as f64 + 0.5) * factor as f64 - 0.5).round() as usize).min(self.w - 1);
                for t in self.at(sy, sx) {
                    taps.push(Tap {
                        dx: t.dx / factor as f64,
                        dy: t.dy / factor as f64,
                        weight: t.weight,
                    });
                }
            }
        }
        TapField {
            h,
            w,
            taps_per_px: self.taps_per_px,
            taps,
        }
    }

    const MAGIC: &'static [u8; 4] = b"PMPB";
    const VERSION: u32 = 1;

    /// Binary record: magic "PMPB", version u32, h, w, T, then row-major
    /// float32 triples (dx, dy, w). Little-endian throughout.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.taps.len() * 12);
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&Self::VERSION.to_le_bytes());
        for v in [self.h as u32, self.w as u32, self.taps_per_px as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.taps {
            buf.extend_from_slice(&(t.dx as f32).to_le_bytes());
            buf.extend_from_slice(&(t.dy as f32).to_le_bytes());
            buf.extend_from_slice(&(t.weight as f32).to_le_bytes());
        }
        std::fs::write(path, &buf).map_err(|e| CdcnError::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bad = |reason: &str| CdcnError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut file = std::fs::File::open(path).map_err(|e| CdcnError::io(path, e))?;
        let mut header = [0u8; 20];
        file.read_exact(&mut header)
            .map_err(|_| bad("truncated header"))?;
        if &header[0..4] != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        if u32_at(4) != Self::VERSION {
            return Err(bad("unsupported version"));
        }
        let (h, w, t) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let mut rest = Vec::new();
        file.read_to_end(&mut rest).map_err(|e| CdcnError::io(path, e))?;
        if rest.len() != h * w * t * 12 {
            return Err(bad("payload length does not match extents"));
        }
        let mut taps = Vec::with_capacity(h * w * t);
        for chunk in rest.chunks_exact(12) {
            let f = |i: usize| f32::from_le_bytes(chunk[i..i + 4].try_into().expect("4 bytes")) as f64;
            taps.push(Tap {
                dx: f(0),
                dy: f(4),
                weight: f(8),
            });
        }
        Ok(TapField {
            h,
            w,
            taps_per_px: t,
            taps,
        })
    }
}

/// Clamped bilinear tap at real coordinates; derivative terms are zero in a
/// clamped axis (the sample saturates at the edge).
struct Bilerp {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    live_x: bool,
    live_y: bool,
}

#[inline]
fn bilerp_at(h: usize, w: usize, x: f64, y: f64) -> Bilerp {
    let (x0, x1, fx, live_x) = axis_tap(w, x);
    let (y0, y1, fy, live_y) = axis_tap(h, y);
    Bilerp {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        live_x,
        live_y,
    }
}

#[inline]
fn axis_tap(extent: usize, coord: f64) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    if coord <= 0.0 {
        (0, 0, 0.0, false)
    } else if coord >= max {
        (extent - 1, extent - 1, 0.0, false)
    } else {
        let lo = coord.floor() as usize;
        (lo, lo + 1, coord - lo as f64, true)
    }
}

impl Bilerp {
    #[inline]
    fn value<T: Scalar>(&self, plane: &[T], w: usize) -> T {
        let v00 = plane[self.y0 * w + self.x0].lift();
        let v01 = plane[self.y0 * w + self.x1].lift();
        let v10 = plane[self.y1 * w + self.x0].lift();
        let v11 = plane[self.y1 * w + self.x1].lift();
        let top = v00 + self.fx * (v01 - v00);
        let bot = v10 + self.fx * (v11 - v10);
        T::of(top + self.fy * (bot - top))
    }

    /// (value, d/dx, d/dy) in one pass.
    #[inline]
    fn value_and_grad<T: Scalar>(&self, plane: &[T], w: usize) -> (f64, f64, f64) {
        let v00 = plane[self.y0 * w + self.x0].lift();
        let v01 = plane[self.y0 * w + self.x1].lift();
        let v10 = plane[self.y1 * w + self.x0].lift();
        let v11 = plane[self.y1 * w + self.x1].lift();
        let top = v00 + self.fx * (v01 - v00);
        let bot = v10 + self.fx * (v11 - v10);
        let val = top + self.fy * (bot - top);
        let ddx = if self.live_x {
            (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10)
        } else {
            0.0
        };
        let ddy = if self.live_y { bot - top } else { 0.0 };
        (val, ddx, ddy)
    }

    /// Scatter `g` into the four corners of a gradient plane.
    #[inline]
    fn scatter<T: Scalar>(&self, gplane: &mut [T], w: usize, g: f64) {
        gplane[self.y0 * w + self.x0] += T::of((1.0 - self.fy) * (1.0 - self.fx) * g);
        gplane[self.y0 * w + self.x1] += T::of((1.0 - self.fy) * self.fx * g);
        gplane[self.y1 * w + self.x0] += T::of(self.fy * (1.0 - self.fx) * g);
        gplane[self.y1 * w + self.x1] += T::of(self.fy * self.fx * g);
    }
}

impl<T: Scalar> Tape<T> {
    /// Backward warp: `out(p) = image(p + offset(p))` with clamped bilinear
    /// sampling. `offset_plane` is `(B, 2, h, w)`, x-displacement first.
    pub fn warp(&mut self, image: Var, offset_plane: Var) -> Var {
        let img = self.value(image).clone();
        let off = self.value(offset_plane).clone();
        let is = img.shape();
        let os = off.shape();
        assert_eq!(os.c, 2, "offset plane must have 2 channels");
        assert!(
            is.b == os.b && is.h == os.h && is.w == os.w,
            "warp: extent mismatch {is} vs {os}"
        );
        let out = field_apply_forward(&img, &off, None);
        self.push_op(
            out,
            &[image, offset_plane],
            Box::new(move |go, ctx| {
                field_apply_backward(go, &img, &off, None, image, offset_plane, None, ctx);
            }),
        )
    }

    /// Spatially-variant blur in gather form:
    /// `out_c(p) = sum_n weights_n(p) * image_c(p + offset_n(p))`.
    /// Shared by the PMPB reblur and the inverse-kernel application.
    pub fn field_apply(&mut self, image: Var, offsets: Var, weights: Var) -> Var {
        let img = self.value(image).clone();
        let off = self.value(offsets).clone();
        let wgt = self.value(weights).clone();
        let is = img.shape();
        let os = off.shape();
        let ws = wgt.shape();
        assert_eq!(os.c % 2, 0, "offsets must have 2N channels");
        assert_eq!(
            ws.c,
            os.c / 2,
            "weight channel count {} does not match N implied by offsets ({})",
            ws.c,
            os.c / 2
        );
        assert!(
            is.b == os.b && is.h == os.h && is.w == os.w && os.h == ws.h && os.w == ws.w && os.b == ws.b,
            "field_apply: resolution mismatch (image {is}, offsets {os}, weights {ws})"
        );
        let out = field_apply_forward(&img, &off, Some(&wgt));
        self.push_op(
            out,
            &[image, offsets, weights],
            Box::new(move |go, ctx| {
                field_apply_backward(go, &img, &off, Some(&wgt), image, offsets, Some(weights), ctx);
            }),
        )
    }

    /// PMPB reblur of a sharp image by a kernel field (Eq-level contract:
    /// weights are expected normalized; this is not re-checked here because
    /// the softmax upstream guarantees it).
    pub fn reblur(&mut self, sharp: Var, field: FieldVars) -> Var {
        self.field_apply(sharp, field.offsets, field.weights)
    }
}

/// Forward kernel shared by warp (no weights: single tap, weight 1) and
/// field_apply.
fn field_apply_forward<T: Scalar>(
    img: &Tensor<T>,
    off: &Tensor<T>,
    wgt: Option<&Tensor<T>>,
) -> Tensor<T> {
    let is = img.shape();
    let n = off.shape().c / 2;
    let plane = is.plane();
    let mut out = vec![T::zero(); is.numel()];
    for b in 0..is.b {
        for t in 0..n {
            let offx = &off.data()[(b * 2 * n + 2 * t) * plane..][..plane];
            let offy = &off.data()[(b * 2 * n + 2 * t + 1) * plane..][..plane];
            let wplane = wgt.map(|w| &w.data()[(b * n + t) * plane..][..plane]);
            for y in 0..is.h {
                for x in 0..is.w {
                    let p = y * is.w + x;
                    let weight = wplane.map_or(1.0, |w| w[p].lift());
                    let tap = bilerp_at(
                        is.h,
                        is.w,
                        x as f64 + offx[p].lift(),
                        y as f64 + offy[p].lift(),
                    );
                    for c in 0..is.c {
                        let ip = &img.data()[(b * is.c + c) * plane..][..plane];
                        let v = tap.value(ip, is.w).lift();
                        out[(b * is.c + c) * plane + p] += T::of(weight * v);
                    }
                }
            }
        }
    }
    Tensor::from_vec(is, out)
}

/// VJP for image, offsets and (optionally) weights, one pass per target.
#[allow(clippy::too_many_arguments)]
fn field_apply_backward<T: Scalar>(
    go: &[T],
    img: &Tensor<T>,
    off: &Tensor<T>,
    wgt: Option<&Tensor<T>>,
    image_var: Var,
    offsets_var: Var,
    weights_var: Option<Var>,
    ctx: &mut crate::tensor::BackwardCtx<'_, T>,
) {
    let is = img.shape();
    let n = off.shape().c / 2;
    let plane = is.plane();
    let tap_at = |b: usize, t: usize, p: usize, y: usize, x: usize| {
        let ox = off.data()[(b * 2 * n + 2 * t) * plane + p].lift();
        let oy = off.data()[(b * 2 * n + 2 * t + 1) * plane + p].lift();
        bilerp_at(is.h, is.w, x as f64 + ox, y as f64 + oy)
    };
    let weight_at = |b: usize, t: usize, p: usize| -> f64 {
        wgt.map_or(1.0, |w| w.data()[(b * n + t) * plane + p].lift())
    };

    if let Some(gi) = ctx.grad_mut(image_var) {
        for b in 0..is.b {
            for t in 0..n {
                for y in 0..is.h {
                    for x in 0..is.w {
                        let p = y * is.w + x;
                        let tap = tap_at(b, t, p, y, x);
                        let weight = weight_at(b, t, p);
                        for c in 0..is.c {
                            let g = go[(b * is.c + c) * plane + p].lift();
                            let gp = &mut gi[(b * is.c + c) * plane..(b * is.c + c + 1) * plane];
                            tap.scatter(gp, is.w, g * weight);
                        }
                    }
                }
            }
        }
    }

    if let Some(goff) = ctx.grad_mut(offsets_var) {
        for b in 0..is.b {
            for t in 0..n {
                for y in 0..is.h {
                    for x in 0..is.w {
                        let p = y * is.w + x;
                        let tap = tap_at(b, t, p, y, x);
                        let weight = weight_at(b, t, p);
                        let mut acc_dx = 0.0;
                        let mut acc_dy = 0.0;
                        for c in 0..is.c {
                            let ip = &img.data()[(b * is.c + c) * plane..][..plane];
                            let g = go[(b * is.c + c) * plane + p].lift();
                            let (_, ddx, ddy) = tap.value_and_grad(ip, is.w);
                            acc_dx += g * ddx;
                            acc_dy += g * ddy;
                        }
                        goff[(b * 2 * n + 2 * t) * plane + p] += T::of(weight * acc_dx);
                        goff[(b * 2 * n + 2 * t + 1) * plane + p] += T::of(weight * acc_dy);
                    }
                }
            }
        }
    }

    if let Some(wv) = weights_var {
        if let Some(gw) = ctx.grad_mut(wv) {
            for b in 0..is.b {
                for t in 0..n {
                    for y in 0..is.h {
                        for x in 0..is.w {
                            let p = y * is.w + x;
                            let tap = tap_at(b, t, p, y, x);
                            let mut acc_w = 0.0;
                            for c in 0..is.c {
                                let ip = &img.data()[(b * is.c + c) * plane..][..plane];
                                let g = go[(b * is.c + c) * plane + p].lift();
                                acc_w += g * tap.value(ip, is.w).lift();
                            }
                            gw[(b * n + t) * plane + p] += T::of(acc_w);
                        }
                    }
                }
            }
        }
    }
}

/// Brute-force reblur over an explicit tap list: a triple-nested scalar loop
/// with the same clamp convention, kept free of the tape machinery so it can
/// stand as the independent oracle.
pub fn dense_oracle_reblur<T: Scalar>(sharp: &Tensor<T>, taps: &TapField) -> Tensor<T> {
    let is = sharp.shape();
    assert!(
        is.h == taps.h && is.w == taps.w,
        "oracle: extent mismatch ({},{}) vs ({},{})",
        is.h,
        is.w,
        taps.h,
        taps.w
    );
    assert!(taps.taps_per_px >= 1, "oracle: empty tap list");
    let mut out = Tensor::zeros(is);
    for b in 0..is.b {
        for c in 0..is.c {
            for y in 0..is.h {
                for x in 0..is.w {
                    let mut acc = 0.0f64;
                    for tap in taps.at(y, x) {
                        let sx = x as f64 + tap.dx;
                        let sy = y as f64 + tap.dy;
                        // inline clamped bilinear, written out longhand
                        let cx = sx.clamp(0.0, (is.w - 1) as f64);
                        let cy = sy.clamp(0.0, (is.h - 1) as f64);
                        let x0 = cx.floor() as usize;
                        let y0 = cy.floor() as usize;
                        let x1 = (x0 + 1).min(is.w - 1);
                        let y1 = (y0 + 1).min(is.h - 1);
                        let fx = cx - x0 as f64;
                        let fy = cy - y0 as f64;
                        let v = |yy: usize, xx: usize| sharp.at(b, c, yy, xx).lift();
                        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                        acc += tap.weight * (top * (1.0 - fy) + bot * fy);
                    }
                    out.set(b, c, y, x, T::of(acc));
                }
            }
        }
    }
    out
}

/// Families of synthetic camera-motion trajectories with analytic ground
/// truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionFamily {
    GlobalLinear,
    GlobalPolyline,
    RotationAboutCenter,
}

/// Recipe for one synthetic blur trajectory.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrajectorySpec {
    /// Number of time samples along the exposure (T >= 2).
    pub time_samples: usize,
    /// Trajectory extent in pixels.
    pub max_displacement: f64,
    pub family: MotionFamily,
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.time_samples < 2 {
            return Err(CdcnError::Config("trajectory needs T >= 2".into()));
        }
        if self.max_displacement < 0.0 {
            return Err(CdcnError::Config("max displacement must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sharp/blurred pair plus the dense ground-truth kernel field.
#[derive(Clone, Debug)]
pub struct SyntheticSample<T> {
    pub sharp: Tensor<T>,
    pub blurred: Tensor<T>,
    pub true_field: TapField,
}

/// Render a blurred image by integrating the sharp image along a sampled
/// trajectory; the recorded field holds the T taps with weight 1/T each.
/// Deterministic per seed.
pub fn synthesize_blur<T: Scalar>(sharp: &Tensor<T>, spec: &TrajectorySpec) -> Result<SyntheticSample<T>> {
    spec.validate()?;
    let is = sharp.shape();
    if spec.max_displacement >= (is.h.min(is.w)) as f64 {
        return Err(CdcnError::Config(format!(
            "displacement {} exceeds image extents {}x{}",
            spec.max_displacement, is.h, is.w
        )));
    }
    let t = spec.time_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let uniform_w = 1.0 / t as f64;

    // per-time global displacement for the translation families
    let path: Vec<(f64, f64)> = match spec.family {
        MotionFamily::GlobalLinear => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            (0..t)
                .map(|i| {
                    let s = (i as f64 / (t - 1) as f64 - 0.5) * spec.max_displacement;
                    (s * dx, s * dy)
                })
                .collect()
        }
        MotionFamily::GlobalPolyline => {
            let theta1 = rng.random_range(0.0..std::f64::consts::TAU);
            let turn = rng.random_range(0.5..2.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let theta2 = theta1 + turn;
            let half = spec.max_displacement / 2.0;
            let w1 = (theta1.cos() * half, theta1.sin() * half);
            let w2 = (w1.0 + theta2.cos() * half, w1.1 + theta2.sin() * half);
            let mut pts: Vec<(f64, f64)> = (0..t)
                .map(|i| {
                    let s = i as f64 / (t - 1) as f64 * 2.0; // arc parameter in [0, 2]
                    if s <= 1.0 {
                        (w1.0 * s, w1.1 * s)
                    } else {
                        (w1.0 + (w2.0 - w1.0) * (s - 1.0), w1.1 + (w2.1 - w1.1) * (s - 1.0))
                    }
                })
                .collect();
            let cx = pts.iter().map(|p| p.0).sum::<f64>() / t as f64;
            let cy = pts.iter().map(|p| p.1).sum::<f64>() / t as f64;
            for p in &mut pts {
                p.0 -= cx;
                p.1 -= cy;
            }
            pts
        }
        MotionFamily::RotationAboutCenter => Vec::new(),
    };

    let mut taps = Vec::with_capacity(is.h * is.w * t);
    match spec.family {
        MotionFamily::GlobalLinear | MotionFamily::GlobalPolyline => {
            for _y in 0..is.h {
                for _x in 0..is.w {
                    for &(dx, dy) in &path {
                        taps.push(Tap {
                            dx,
                            dy,
                            weight: uniform_w,
                        });
                    }
                }
            }
        }
        MotionFamily::RotationAboutCenter => {
            let cx = (is.w - 1) as f64 / 2.0;
            let cy = (is.h - 1) as f64 / 2.0;
            let r_max = (cx * cx + cy * cy).sqrt().max(1.0);
            let total_angle = spec.max_displacement / r_max;
            for y in 0..is.h {
                for x in 0..is.w {
                    let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                    for i in 0..t {
                        let ang = (i as f64 / (t - 1) as f64 - 0.5) * total_angle;
                        let (s, c) = ang.sin_cos();
                        taps.push(Tap {
                            dx: c * rx - s * ry - rx,
                            dy: s * rx + c * ry - ry,
                            weight: uniform_w,
                        });
                    }
                }
            }
        }
    }
    let true_field = TapField {
        h: is.h,
        w: is.w,
        taps_per_px: t,
        taps,
    };
    let blurred = dense_oracle_reblur(sharp, &true_field);
    Ok(SyntheticSample {
        sharp: sharp.clone(),
        blurred,
        true_field,
    })
}

/// Symmetric Chamfer distance in pixels between the estimated sampling
/// points and the true taps, averaged over pixels. Zero iff the point sets
/// coincide; lower is better.
pub fn kernel_alignment<T: Scalar>(estimated: &BlurKernelField<T>, truth: &TapField) -> f64 {
    kernel_alignment_where(estimated, truth, |_, _| true)
}

/// Chamfer alignment restricted to pixels selected by `mask(y, x)`.
pub fn kernel_alignment_where<T: Scalar>(
    estimated: &BlurKernelField<T>,
    truth: &TapField,
    mask: impl Fn(usize, usize) -> bool,
) -> f64 {
    let ws = estimated.weights.shape();
    assert!(
        ws.h == truth.h && ws.w == truth.w,
        "alignment: resolution mismatch"
    );
    assert!(truth.taps_per_px >= 1, "alignment: empty tap list");
    let n = ws.c;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..ws.h {
        for x in 0..ws.w {
            if !mask(y, x) {
                continue;
            }
            let est: Vec<(f64, f64)> = (0..n)
                .map(|t| {
                    (
                        estimated.offsets.at(0, 2 * t, y, x).lift(),
                        estimated.offsets.at(0, 2 * t + 1, y, x).lift(),
                    )
                })
                .collect();
            let tru: Vec<(f64, f64)> = truth.at(y, x).iter().map(|t| (t.dx, t.dy)).collect();
            let dist = |a: &(f64, f64), b: &(f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            let fwd: f64 = est
                .iter()
                .map(|a| tru.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / est.len() as f64;
            let bwd: f64 = tru
                .iter()
                .map(|b| est.iter().map(|a| dist(a, b)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / tru.len() as f64;
            total += fwd + bwd;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
