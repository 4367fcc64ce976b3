//! Differentiable operations recorded on the tape.
//!
//! Convolution kernels are written as shift-and-accumulate row loops so the
//! inner loop runs over contiguous slices. Parallel sections split the work
//! by output plane; every element is produced by exactly one task with a
//! fixed inner summation order, so results are bitwise deterministic for any
//! thread count.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Scalar, Shape, Tape, Tensor, Var};

/// Reduction applied by [`Tape::reduce_loss`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LossKind {
    L1,
    L2,
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    let n = input + 2 * pad;
    assert!(n >= k, "kernel {k} larger than padded extent {n}");
    let o = (n - k) / stride + 1;
    assert!(o >= 1, "output extent < 1");
    o
}

/// Valid output-x range for `ix = ox*stride + off` with `ix in [0, iw)`.
/// Returns `(ox_start, ox_end_exclusive, ix_start)`.
#[inline]
fn ox_range(ow: usize, iw: usize, stride: usize, off: isize) -> (usize, usize, usize) {
    let ox0 = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi = iw as isize - 1 - off;
    if hi < 0 || ox0 >= ow {
        return (0, 0, 0);
    }
    let ox1 = std::cmp::min(ow - 1, hi as usize / stride);
    if ox1 < ox0 {
        return (0, 0, 0);
    }
    (ox0, ox1 + 1, (ox0 as isize * stride as isize + off) as usize)
}

impl<T: Scalar> Tape<T> {
    /// Elementwise sum of two equally-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        self.push_op(
            out,
            &[a, b],
            Box::new(move |go, ctx| {
                for v in [a, b] {
                    if let Some(g) = ctx.grad_mut(v) {
                        for (gi, &o) in g.iter_mut().zip(go) {
                            *gi += o;
                        }
                    }
                }
            }),
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kv = T::of(k);
        let out = self.value(a).map(|v| v * kv);
        self.push_op(
            out,
            &[a],
            Box::new(move |go, ctx| {
                if let Some(g) = ctx.grad_mut(a) {
                    for (gi, &o) in g.iter_mut().zip(go) {
                        *gi += kv * o;
                    }
                }
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let out = xv.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(
            out,
            &[x],
            Box::new(move |go, ctx| {
                if let Some(g) = ctx.grad_mut(x) {
                    for ((gi, &o), &v) in g.iter_mut().zip(go).zip(xv.data()) {
                        if v > T::zero() {
                            *gi += o;
                        }
                    }
                }
            }),
        )
    }

    /// Parametric ReLU: `y = x` for `x >= 0`, else `slope * x`.
    /// The slope is per-channel `(1,C,1,1)` or a scalar `(1,1,1,1)`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let xv = self.value(x).clone();
        let sv = self.value(slope).clone();
        let xs = xv.shape();
        let ss = sv.shape();
        assert!(
            ss.b == 1 && ss.h == 1 && ss.w == 1 && (ss.c == 1 || ss.c == xs.c),
            "prelu: slope shape {ss} incompatible with input {xs}"
        );
        let per_channel = ss.c == xs.c;
        let plane = xs.plane();
        let mut data = Vec::with_capacity(xs.numel());
        for (i, &v) in xv.data().iter().enumerate() {
            let c = if per_channel { (i / plane) % xs.c } else { 0 };
            data.push(if v >= T::zero() { v } else { sv.data()[c] * v });
        }
        let out = Tensor::from_vec(xs, data);
        self.push_op(
            out,
            &[x, slope],
            Box::new(move |go, ctx| {
                if let Some(gx) = ctx.grad_mut(x) {
                    for (i, (gi, &o)) in gx.iter_mut().zip(go).enumerate() {
                        let v = xv.data()[i];
                        if v >= T::zero() {
                            *gi += o;
                        } else {
                            let c = if per_channel { (i / plane) % xs.c } else { 0 };
                            *gi += sv.data()[c] * o;
                        }
                    }
                }
                if let Some(gs) = ctx.grad_mut(slope) {
                    for (i, &o) in go.iter().enumerate() {
                        let v = xv.data()[i];
                        if v < T::zero() {
                            let c = if per_channel { (i / plane) % xs.c } else { 0 };
                            gs[c] += v * o;
                        }
                    }
                }
            }),
        )
    }

    /// 2-D convolution. `weight` is `(Cout, Cin, k, k)`, `bias` is `(1, Cout, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        assert!(stride >= 1, "conv2d: stride must be positive");
        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let bv = self.value(bias).clone();
        let xs = xv.shape();
        let ws = wv.shape();
        let (cout, cin, k) = (ws.b, ws.c, ws.h);
        assert_eq!(ws.h, ws.w, "conv2d: kernel must be square");
        assert_eq!(
            xs.c, cin,
            "conv2d: channel mismatch, input has {} channels, weight expects {}",
            xs.c, cin
        );
        assert_eq!(bv.shape(), Shape::new(1, cout, 1, 1), "conv2d: bad bias shape");
        let oh = conv_out_extent(xs.h, k, stride, pad);
        let ow = conv_out_extent(xs.w, k, stride, pad);
        let out = conv2d_forward(&xv, &wv, &bv, stride, pad, oh, ow);
        let oshape = out.shape();
        self.push_op(
            out,
            &[x, weight, bias],
            Box::new(move |go, ctx| {
                if let Some(gx) = ctx.grad_mut(x) {
                    conv2d_backward_input(gx, go, &wv, xs, oshape, stride, pad);
                }
                if let Some(gw) = ctx.grad_mut(weight) {
                    conv2d_backward_weight(gw, go, &xv, ws, xs, oshape, stride, pad);
                }
                if let Some(gb) = ctx.grad_mut(bias) {
                    let plane = oshape.plane();
                    for bi in 0..oshape.b {
                        for co in 0..cout {
                            let base = (bi * cout + co) * plane;
                            let mut acc = T::zero();
                            for &g in &go[base..base + plane] {
                                acc += g;
                            }
                            gb[co] += acc;
                        }
                    }
                }
            }),
        )
    }

    /// Transposed 2-D convolution with stride 2, kernel 4, padding 1: exact
    /// ×2 spatial upsampling. `weight` is `(Cin, Cout, 4, 4)`.
    pub fn transposed_conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Var {
        assert_eq!(stride, 2, "transposed_conv2d supports stride 2 only");
        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let bv = self.value(bias).clone();
        let xs = xv.shape();
        let ws = wv.shape();
        assert_eq!((ws.h, ws.w), (4, 4), "transposed_conv2d: kernel must be 4x4");
        assert_eq!(xs.c, ws.b, "transposed_conv2d: channel mismatch");
        let cout = ws.c;
        assert_eq!(bv.shape(), Shape::new(1, cout, 1, 1));
        let out = tconv2d_forward(&xv, &wv, &bv);
        let oshape = out.shape();
        self.push_op(
            out,
            &[x, weight, bias],
            Box::new(move |go, ctx| {
                if let Some(gx) = ctx.grad_mut(x) {
                    tconv2d_backward_input(gx, go, &wv, xs, oshape);
                }
                if let Some(gw) = ctx.grad_mut(weight) {
                    tconv2d_backward_weight(gw, go, &xv, ws, xs, oshape);
                }
                if let Some(gb) = ctx.grad_mut(bias) {
                    let plane = oshape.plane();
                    for bi in 0..oshape.b {
                        for co in 0..cout {
                            let base = (bi * cout + co) * plane;
                            let mut acc = T::zero();
                            for &g in &go[base..base + plane] {
                                acc += g;
                            }
                            gb[co] += acc;
                        }
                    }
                }
            }),
        )
    }

    /// Softmax over a contiguous channel group, per pixel; channels outside
    /// the group pass through unchanged. Shifted-exponential evaluation keeps
    /// extreme logits finite.
    pub fn channel_softmax(&mut self, x: Var, group: std::ops::Range<usize>) -> Var {
        let xv = self.value(x).clone();
        let xs = xv.shape();
        assert!(!group.is_empty(), "channel_softmax: empty group");
        assert!(group.end <= xs.c, "channel_softmax: group out of range");
        let plane = xs.plane();
        let mut data = xv.data().to_vec();
        for bi in 0..xs.b {
            for p in 0..plane {
                let at = |c: usize| (bi * xs.c + c) * plane + p;
                let mut m = T::neg_infinity();
                for c in group.clone() {
                    m = m.max(data[at(c)]);
                }
                let mut sum = T::zero();
                for c in group.clone() {
                    let e = (data[at(c)] - m).exp();
                    data[at(c)] = e;
                    sum += e;
                }
                for c in group.clone() {
                    data[at(c)] = data[at(c)] / sum;
                }
            }
        }
        let out = Tensor::from_vec(xs, data);
        let ov = out.clone();
        let group_b = group;
        self.push_op(
            out,
            &[x],
            Box::new(move |go, ctx| {
                let Some(gx) = ctx.grad_mut(x) else { return };
                // identity for channels outside the group
                for c in 0..xs.c {
                    if group_b.contains(&c) {
                        continue;
                    }
                    for bi in 0..xs.b {
                        let base = (bi * xs.c + c) * plane;
                        for p in 0..plane {
                            gx[base + p] += go[base + p];
                        }
                    }
                }
                for bi in 0..xs.b {
                    for p in 0..plane {
                        let at = |c: usize| (bi * xs.c + c) * plane + p;
                        let mut dot = T::zero();
                        for c in group_b.clone() {
                            dot += go[at(c)] * ov.data()[at(c)];
                        }
                        for c in group_b.clone() {
                            let s = ov.data()[at(c)];
                            gx[at(c)] += s * (go[at(c)] - dot);
                        }
                    }
                }
            }),
        )
    }

    /// Split into contiguous channel slices; `sizes` must sum to the channel
    /// extent. Concatenating the outputs reproduces the input.
    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Vec<Var> {
        let xv = self.value(x).clone();
        let xs = xv.shape();
        assert!(sizes.iter().all(|&s| s > 0), "split_channels: zero-size part");
        assert_eq!(
            sizes.iter().sum::<usize>(),
            xs.c,
            "split_channels: sizes sum {} != channels {}",
            sizes.iter().sum::<usize>(),
            xs.c
        );
        let plane = xs.plane();
        let mut outs = Vec::with_capacity(sizes.len());
        let mut start = 0usize;
        for &len in sizes {
            let oshape = Shape::new(xs.b, len, xs.h, xs.w);
            let mut data = Vec::with_capacity(oshape.numel());
            for bi in 0..xs.b {
                let base = (bi * xs.c + start) * plane;
                data.extend_from_slice(&xv.data()[base..base + len * plane]);
            }
            let out = Tensor::from_vec(oshape, data);
            let (cs, cc) = (start, len);
            let v = self.push_op(
                out,
                &[x],
                Box::new(move |go, ctx| {
                    let Some(gx) = ctx.grad_mut(x) else { return };
                    for bi in 0..xs.b {
                        let src = bi * cc * plane;
                        let dst = (bi * xs.c + cs) * plane;
                        for i in 0..cc * plane {
                            gx[dst + i] += go[src + i];
                        }
                    }
                }),
            );
            outs.push(v);
            start += len;
        }
        outs
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let shapes: Vec<Shape> = parts.iter().map(|&v| self.shape(v)).collect();
        let s0 = shapes[0];
        for s in &shapes {
            assert!(
                s.b == s0.b && s.h == s0.h && s.w == s0.w,
                "concat_channels: extent mismatch {s} vs {s0}"
            );
        }
        let ctotal: usize = shapes.iter().map(|s| s.c).sum();
        let oshape = Shape::new(s0.b, ctotal, s0.h, s0.w);
        let plane = s0.plane();
        let mut data = Vec::with_capacity(oshape.numel());
        for bi in 0..s0.b {
            for (i, &p) in parts.iter().enumerate() {
                let pv = self.value(p);
                let base = bi * shapes[i].c * plane;
                data.extend_from_slice(&pv.data()[base..base + shapes[i].c * plane]);
            }
        }
        let out = Tensor::from_vec(oshape, data);
        let parts_b = parts.to_vec();
        self.push_op(
            out,
            parts,
            Box::new(move |go, ctx| {
                let mut cstart = 0usize;
                for (i, &p) in parts_b.iter().enumerate() {
                    let cc = shapes[i].c;
                    if let Some(gp) = ctx.grad_mut(p) {
                        for bi in 0..s0.b {
                            let src = (bi * ctotal + cstart) * plane;
                            let dst = bi * cc * plane;
                            for j in 0..cc * plane {
                                gp[dst + j] += go[src + j];
                            }
                        }
                    }
                    cstart += cc;
                }
            }),
        )
    }

    /// Bilinear resampling to a new spatial size. Sample centers follow the
    /// `(i + 0.5) * src/dst - 0.5` convention with clamp-to-edge, the one
    /// convention used project-wide for every sampling op.
    pub fn bilinear_resize(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let xv = self.value(x).clone();
        let xs = xv.shape();
        let ys = axis_table::<T>(xs.h, th);
        let xsx = axis_table::<T>(xs.w, tw);
        let plane_in = xs.plane();
        let plane_out = th * tw;
        let out = resize_bilinear(&xv, th, tw);
        self.push_op(
            out,
            &[x],
            Box::new(move |go, ctx| {
                let Some(gx) = ctx.grad_mut(x) else { return };
                for (pi, gp) in gx.chunks_mut(plane_in).enumerate() {
                    let gop = &go[pi * plane_out..(pi + 1) * plane_out];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xsx.iter().enumerate() {
                            let g = gop[oy * tw + ox];
                            let one = T::one();
                            gp[y0 * xs.w + x0] += (one - fy) * (one - fx) * g;
                            gp[y0 * xs.w + x1] += (one - fy) * fx * g;
                            gp[y1 * xs.w + x0] += fy * (one - fx) * g;
                            gp[y1 * xs.w + x1] += fy * fx * g;
                        }
                    }
                }
            }),
        )
    }

    /// Unnormalized forward 2-D DFT per channel. The output stacks the real
    /// planes first and the imaginary planes second: `(B, 2C, H, W)`.
    pub fn fft2(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let xs = xv.shape();
        let oshape = Shape::new(xs.b, 2 * xs.c, xs.h, xs.w);
        let plane = xs.plane();
        let mut data = vec![T::zero(); oshape.numel()];
        {
            let mut planner = FftPlanner::<T>::new();
            let row = planner.plan_fft_forward(xs.w);
            let col = planner.plan_fft_forward(xs.h);
            let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
            let mut colbuf = vec![Complex::new(T::zero(), T::zero()); xs.h];
            for bi in 0..xs.b {
                for c in 0..xs.c {
                    let xp = &xv.data()[(bi * xs.c + c) * plane..(bi * xs.c + c + 1) * plane];
                    for (dst, &src) in buf.iter_mut().zip(xp) {
                        *dst = Complex::new(src, T::zero());
                    }
                    for r in buf.chunks_mut(xs.w) {
                        row.process(r);
                    }
                    for cx in 0..xs.w {
                        for y in 0..xs.h {
                            colbuf[y] = buf[y * xs.w + cx];
                        }
                        col.process(&mut colbuf);
                        for y in 0..xs.h {
                            buf[y * xs.w + cx] = colbuf[y];
                        }
                    }
                    let re_base = (bi * 2 * xs.c + c) * plane;
                    let im_base = (bi * 2 * xs.c + xs.c + c) * plane;
                    for (i, v) in buf.iter().enumerate() {
                        data[re_base + i] = v.re;
                        data[im_base + i] = v.im;
                    }
                }
            }
        }
        let out = Tensor::from_vec(oshape, data);
        self.push_op(
            out,
            &[x],
            Box::new(move |go, ctx| {
                let Some(gx) = ctx.grad_mut(x) else { return };
                // VJP of a linear map is its transpose: the real part of the
                // unnormalized inverse DFT of the complex output gradient.
                let mut planner = FftPlanner::<T>::new();
                let row = planner.plan_fft_inverse(xs.w);
                let col = planner.plan_fft_inverse(xs.h);
                let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
                let mut colbuf = vec![Complex::new(T::zero(), T::zero()); xs.h];
                for bi in 0..xs.b {
                    for c in 0..xs.c {
                        let re_base = (bi * 2 * xs.c + c) * plane;
                        let im_base = (bi * 2 * xs.c + xs.c + c) * plane;
                        for i in 0..plane {
                            buf[i] = Complex::new(go[re_base + i], go[im_base + i]);
                        }
                        for r in buf.chunks_mut(xs.w) {
                            row.process(r);
                        }
                        for cx in 0..xs.w {
                            for y in 0..xs.h {
                                colbuf[y] = buf[y * xs.w + cx];
                            }
                            col.process(&mut colbuf);
                            for y in 0..xs.h {
                                buf[y * xs.w + cx] = colbuf[y];
                            }
                        }
                        let dst = (bi * xs.c + c) * plane;
                        for i in 0..plane {
                            gx[dst + i] += buf[i].re;
                        }
                    }
                }
            }),
        )
    }

    /// Mean absolute (`L1`) or mean squared (`L2`) difference over all
    /// elements, returned as a `(1,1,1,1)` scalar.
    pub fn reduce_loss(&mut self, a: Var, b: Var, kind: LossKind) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.shape(), bv.shape(), "reduce_loss: shape mismatch");
        let n = T::of(av.shape().numel() as f64);
        let mut acc = T::zero();
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            let d = x - y;
            acc += match kind {
                LossKind::L1 => d.abs(),
                LossKind::L2 => d * d,
            };
        }
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![acc / n]);
        self.push_op(
            out,
            &[a, b],
            Box::new(move |go, ctx| {
                let g = go[0] / n;
                let two = T::of(2.0);
                for (v, sign) in [(a, T::one()), (b, -T::one())] {
                    if let Some(gv) = ctx.grad_mut(v) {
                        for (i, gi) in gv.iter_mut().enumerate() {
                            let d = av.data()[i] - bv.data()[i];
                            let dd = match kind {
                                LossKind::L1 => {
                                    if d > T::zero() {
                                        T::one()
                                    } else if d < T::zero() {
                                        -T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                LossKind::L2 => two * d,
                            };
                            *gi += sign * dd * g;
                        }
                    }
                }
            }),
        )
    }
}

/// Value-level bilinear resize (the forward of [`Tape::bilinear_resize`]),
/// usable outside the tape for pyramid construction.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, th: usize, tw: usize) -> Tensor<T> {
    assert!(th >= 1 && tw >= 1, "resize: target extents must be >= 1");
    let xs = x.shape();
    let ys = axis_table::<T>(xs.h, th);
    let xsx = axis_table::<T>(xs.w, tw);
    let oshape = Shape::new(xs.b, xs.c, th, tw);
    let plane_in = xs.plane();
    let plane_out = th * tw;
    let mut data = vec![T::zero(); oshape.numel()];
    for (pi, op) in data.chunks_mut(plane_out).enumerate() {
        let xp = &x.data()[pi * plane_in..(pi + 1) * plane_in];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xsx.iter().enumerate() {
                let v00 = xp[y0 * xs.w + x0];
                let v01 = xp[y0 * xs.w + x1];
                let v10 = xp[y1 * xs.w + x0];
                let v11 = xp[y1 * xs.w + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                op[oy * tw + ox] = top + fy * (bot - top);
            }
        }
    }
    Tensor::from_vec(oshape, data)
}

/// Per-axis resampling table: `(lo index, hi index, fraction)`.
fn axis_table<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, T::of(s - lo as f64))
        })
        .collect()
}

/// `out[x] += w0*in[x-1] + w1*in[x] + w2*in[x+1]` with zero padding; the
/// single fused pass is what the 3x3 kernels build on.
#[inline]
fn acc_row3<T: Scalar>(out_row: &mut [T], in_row: &[T], w0: T, w1: T, w2: T) {
    let n = out_row.len();
    if n == 1 {
        out_row[0] += w1 * in_row[0];
        return;
    }
    out_row[0] += w1 * in_row[0] + w2 * in_row[1];
    let (left, mid, right) = (&in_row[..n - 2], &in_row[1..n - 1], &in_row[2..n]);
    for (((o, &l), &m), &r) in out_row[1..n - 1].iter_mut().zip(left).zip(mid).zip(right) {
        *o += w0 * l + w1 * m + w2 * r;
    }
    out_row[n - 1] += w0 * in_row[n - 2] + w1 * in_row[n - 1];
}

/// The three shifted dot products of one row pair (zero padding):
/// `(sum g[x]*r[x-1], sum g[x]*r[x], sum g[x]*r[x+1])`.
#[inline]
fn dot_row3<T: Scalar>(g: &[T], r: &[T]) -> (T, T, T) {
    let n = g.len();
    let (mut a, mut b, mut c) = (T::zero(), T::zero(), T::zero());
    b += g[0] * r[0];
    if n == 1 {
        return (a, b, c);
    }
    c += g[0] * r[1];
    let (left, mid, right) = (&r[..n - 2], &r[1..n - 1], &r[2..n]);
    for (((&gi, &l), &m), &ri) in g[1..n - 1].iter().zip(left).zip(mid).zip(right) {
        a += gi * l;
        b += gi * m;
        c += gi * ri;
    }
    a += g[n - 1] * r[n - 2];
    b += g[n - 1] * r[n - 1];
    (a, b, c)
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (cout, cin, k) = (ws.b, ws.c, ws.h);
    let oshape = Shape::new(xs.b, cout, oh, ow);
    let plane_in = xs.plane();
    let plane_out = oh * ow;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let fused = stride == 1 && k == 3 && pad == 1;
    let mut out = vec![T::zero(); oshape.numel()];
    out.par_chunks_mut(plane_out).enumerate().for_each(|(pi, op)| {
        let bi = pi / cout;
        let co = pi % cout;
        op.fill(bd[co]);
        for ci in 0..cin {
            let xp = &xd[(bi * cin + ci) * plane_in..(bi * cin + ci + 1) * plane_in];
            if fused {
                let wb = &wd[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                for (ky, wrow) in wb.chunks_exact(3).enumerate() {
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < 1 || iy > xs.h {
                            continue;
                        }
                        let irow = &xp[(iy - 1) * xs.w..iy * xs.w];
                        let orow = &mut op[oy * ow..(oy + 1) * ow];
                        acc_row3(orow, irow, wrow[0], wrow[1], wrow[2]);
                    }
                }
                continue;
            }
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                    let offx = kx as isize - pad as isize;
                    let (o0, o1, i0) = ox_range(ow, xs.w, stride, offx);
                    if o1 == o0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let irow = &xp[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        let orow = &mut op[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            for (o, &i) in orow[o0..o1].iter_mut().zip(&irow[i0..i0 + (o1 - o0)]) {
                                *o += wv * i;
                            }
                        } else {
                            let mut ix = i0;
                            for o in orow[o0..o1].iter_mut() {
                                *o += wv * irow[ix];
                                ix += stride;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(oshape, out)
}

fn conv2d_backward_input<T: Scalar>(
    gx: &mut [T],
    go: &[T],
    w: &Tensor<T>,
    xs: Shape,
    os: Shape,
    stride: usize,
    pad: usize,
) {
    let ws = w.shape();
    let (cout, cin, k) = (ws.b, ws.c, ws.h);
    let wd = w.data();
    let plane_in = xs.plane();
    let plane_out = os.plane();
    let fused = stride == 1 && k == 3 && pad == 1;
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(pi, gxp)| {
        let bi = pi / cin;
        let ci = pi % cin;
        for co in 0..cout {
            let gop = &go[(bi * cout + co) * plane_out..(bi * cout + co + 1) * plane_out];
            if fused {
                // dx is the correlation of go with the flipped kernel:
                // x row iy feeds go row iy - ky + 1 under tap row ky
                let wb = &wd[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                for (ky, wrow) in wb.chunks_exact(3).enumerate() {
                    for iy in 0..xs.h {
                        let Some(gy) = (iy + 1).checked_sub(ky) else {
                            continue;
                        };
                        if gy >= os.h {
                            continue;
                        }
                        let grow = &gop[gy * os.w..(gy + 1) * os.w];
                        let xrow = &mut gxp[iy * xs.w..(iy + 1) * xs.w];
                        acc_row3(xrow, grow, wrow[2], wrow[1], wrow[0]);
                    }
                }
                continue;
            }
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                    let offx = kx as isize - pad as isize;
                    let (o0, o1, i0) = ox_range(os.w, xs.w, stride, offx);
                    if o1 == o0 {
                        continue;
                    }
                    for oy in 0..os.h {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let grow = &gop[oy * os.w..(oy + 1) * os.w];
                        let xrow = &mut gxp[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        if stride == 1 {
                            for (i, &g) in xrow[i0..i0 + (o1 - o0)].iter_mut().zip(&grow[o0..o1]) {
                                *i += wv * g;
                            }
                        } else {
                            let mut ix = i0;
                            for &g in &grow[o0..o1] {
                                xrow[ix] += wv * g;
                                ix += stride;
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward_weight<T: Scalar>(
    gw: &mut [T],
    go: &[T],
    x: &Tensor<T>,
    ws: Shape,
    xs: Shape,
    os: Shape,
    stride: usize,
    pad: usize,
) {
    let (cout, cin, k) = (ws.b, ws.c, ws.h);
    let xd = x.data();
    let plane_in = xs.plane();
    let plane_out = os.plane();
    let fused = stride == 1 && k == 3 && pad == 1;
    gw.par_chunks_mut(cin * k * k).enumerate().for_each(|(co, gwc)| {
        if co >= cout {
            return;
        }
        for bi in 0..xs.b {
            let gop = &go[(bi * cout + co) * plane_out..(bi * cout + co + 1) * plane_out];
            for ci in 0..cin {
                let xp = &xd[(bi * cin + ci) * plane_in..(bi * cin + ci + 1) * plane_in];
                if fused {
                    // dw[ky][kx] = sum over rows of shifted dot products
                    for ky in 0..3usize {
                        let (mut a, mut b, mut c) = (T::zero(), T::zero(), T::zero());
                        for oy in 0..os.h {
                            let iy = oy + ky;
                            if iy < 1 || iy > xs.h {
                                continue;
                            }
                            let grow = &gop[oy * os.w..(oy + 1) * os.w];
                            let xrow = &xp[(iy - 1) * xs.w..iy * xs.w];
                            let (da, db, dc) = dot_row3(grow, xrow);
                            a += da;
                            b += db;
                            c += dc;
                        }
                        gwc[ci * 9 + ky * 3] += a;
                        gwc[ci * 9 + ky * 3 + 1] += b;
                        gwc[ci * 9 + ky * 3 + 2] += c;
                    }
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let offx = kx as isize - pad as isize;
                        let (o0, o1, i0) = ox_range(os.w, xs.w, stride, offx);
                        if o1 == o0 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in 0..os.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let grow = &gop[oy * os.w..(oy + 1) * os.w];
                            let xrow = &xp[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                            if stride == 1 {
                                for (&g, &v) in grow[o0..o1].iter().zip(&xrow[i0..i0 + (o1 - o0)]) {
                                    acc += g * v;
                                }
                            } else {
                                let mut ix = i0;
                                for &g in &grow[o0..o1] {
                                    acc += g * xrow[ix];
                                    ix += stride;
                                }
                            }
                        }
                        gwc[(ci * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
}

// Transposed convolution, fixed at kernel 4 / stride 2 / padding 1:
// out[oy, ox] += x[iy, ix] * w[ci, co, ky, kx] with oy = 2*iy + ky - 1.

fn tconv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, cout) = (ws.b, ws.c);
    let (oh, ow) = (2 * xs.h, 2 * xs.w);
    let oshape = Shape::new(xs.b, cout, oh, ow);
    let plane_in = xs.plane();
    let plane_out = oh * ow;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); oshape.numel()];
    out.par_chunks_mut(plane_out).enumerate().for_each(|(pi, op)| {
        let bi = pi / cout;
        let co = pi % cout;
        op.fill(bd[co]);
        for ci in 0..cin {
            let xp = &xd[(bi * cin + ci) * plane_in..(bi * cin + ci + 1) * plane_in];
            for ky in 0..4usize {
                for kx in 0..4usize {
                    let wv = wd[((ci * cout + co) * 4 + ky) * 4 + kx];
                    for iy in 0..xs.h {
                        let oy = (2 * iy + ky) as isize - 1;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let orow = &mut op[oy as usize * ow..(oy as usize + 1) * ow];
                        let xrow = &xp[iy * xs.w..(iy + 1) * xs.w];
                        for (ix, &v) in xrow.iter().enumerate() {
                            let ox = (2 * ix + kx) as isize - 1;
                            if ox >= 0 && ox < ow as isize {
                                orow[ox as usize] += wv * v;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(oshape, out)
}

fn tconv2d_backward_input<T: Scalar>(gx: &mut [T], go: &[T], w: &Tensor<T>, xs: Shape, os: Shape) {
    let ws = w.shape();
    let (cin, cout) = (ws.b, ws.c);
    let wd = w.data();
    let plane_in = xs.plane();
    let plane_out = os.plane();
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(pi, gxp)| {
        let bi = pi / cin;
        let ci = pi % cin;
        for co in 0..cout {
            let gop = &go[(bi * cout + co) * plane_out..(bi * cout + co + 1) * plane_out];
            for ky in 0..4usize {
                for kx in 0..4usize {
                    let wv = wd[((ci * cout + co) * 4 + ky) * 4 + kx];
                    for iy in 0..xs.h {
                        let oy = (2 * iy + ky) as isize - 1;
                        if oy < 0 || oy >= os.h as isize {
                            continue;
                        }
                        let grow = &gop[oy as usize * os.w..(oy as usize + 1) * os.w];
                        let xrow = &mut gxp[iy * xs.w..(iy + 1) * xs.w];
                        for (ix, gi) in xrow.iter_mut().enumerate() {
                            let ox = (2 * ix + kx) as isize - 1;
                            if ox >= 0 && ox < os.w as isize {
                                *gi += wv * grow[ox as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

fn tconv2d_backward_weight<T: Scalar>(gw: &mut [T], go: &[T], x: &Tensor<T>, ws: Shape, xs: Shape, os: Shape) {
    let (cin, cout) = (ws.b, ws.c);
    let xd = x.data();
    let plane_in = xs.plane();
    let plane_out = os.plane();
    gw.par_chunks_mut(cout * 16).enumerate().for_each(|(ci, gwc)| {
        if ci >= cin {
            return;
        }
        for bi in 0..xs.b {
            let xp = &xd[(bi * cin + ci) * plane_in..(bi * cin + ci + 1) * plane_in];
            for co in 0..cout {
                let gop = &go[(bi * cout + co) * plane_out..(bi * cout + co + 1) * plane_out];
                for ky in 0..4usize {
                    for kx in 0..4usize {
                        let mut acc = T::zero();
                        for iy in 0..xs.h {
                            let oy = (2 * iy + ky) as isize - 1;
                            if oy < 0 || oy >= os.h as isize {
                                continue;
                            }
                            let grow = &gop[oy as usize * os.w..(oy as usize + 1) * os.w];
                            let xrow = &xp[iy * xs.w..(iy + 1) * xs.w];
                            for (ix, &v) in xrow.iter().enumerate() {
                                let ox = (2 * ix + kx) as isize - 1;
                                if ox >= 0 && ox < os.w as isize {
                                    acc += v * grow[ox as usize];
                                }
                            }
                        }
                        gwc[(co * 4 + ky) * 4 + kx] += acc;
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data)
    }

    fn rnd(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
        Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv2d_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let w = tape.constant(Tensor::zeros(Shape::new(16, 3, 3, 3)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 16, 1, 1)));
        let y1 = tape.conv2d(x, w, b, 1, 1);
        assert_eq!(tape.shape(y1), Shape::new(1, 16, 8, 8));
        let y2 = tape.conv2d(x, w, b, 2, 1);
        assert_eq!(tape.shape(y2), Shape::new(1, 16, 4, 4));
    }

    #[test]
    fn conv2d_1x1_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let xv = t((1, 1, 3, 3), (1..=9).map(|v| v as f64).collect());
        let x = tape.constant(xv.clone());
        let w = tape.constant(t((1, 1, 1, 1), vec![1.0]));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d(x, w, b, 1, 0);
        assert_eq!(tape.value(y).data(), xv.data());
    }

    #[test]
    #[should_panic(expected = "channel mismatch")]
    fn conv2d_channel_mismatch_panics() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w = tape.constant(Tensor::zeros(Shape::new(4, 3, 3, 3)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        tape.conv2d(x, w, b, 1, 1);
    }

    #[test]
    fn tconv_shape_and_constant() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 16, 4, 4), 0.7));
        let w = tape.constant(Tensor::zeros(Shape::new(16, 8, 4, 4)));
        let b = tape.constant(Tensor::full(Shape::new(1, 8, 1, 1), 3.5));
        let y = tape.transposed_conv2d(x, w, b, 2);
        assert_eq!(tape.shape(y), Shape::new(1, 8, 8, 8));
        // zero weight, bias c -> constant output c
        assert!(tape.value(y).data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn tconv_upsample_then_downsample_restores_extents() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 4, 6, 10)));
        let wd = tape.constant(Tensor::zeros(Shape::new(8, 4, 3, 3)));
        let bd = tape.constant(Tensor::zeros(Shape::new(1, 8, 1, 1)));
        let down = tape.conv2d(x, wd, bd, 2, 1);
        assert_eq!(tape.shape(down), Shape::new(1, 8, 3, 5));
        let wu = tape.constant(Tensor::zeros(Shape::new(8, 4, 4, 4)));
        let bu = tape.constant(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let up = tape.transposed_conv2d(down, wu, bu, 2);
        assert_eq!(tape.shape(up), Shape::new(1, 4, 6, 10));
    }

    /// <tconv(x; w), y> == <x, conv(y; w-with-roles-flipped)> on random data.
    #[test]
    fn tconv_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let xv = rnd(&mut rng, Shape::new(1, 3, 4, 5));
            let wv = rnd(&mut rng, Shape::new(3, 2, 4, 4));
            let yv = rnd(&mut rng, Shape::new(1, 2, 8, 10));
            let zero_b2 = Tensor::zeros(Shape::new(1, 2, 1, 1));
            let zero_b3 = Tensor::zeros(Shape::new(1, 3, 1, 1));

            let mut tape: Tape<f64> = Tape::new();
            let x = tape.constant(xv.clone());
            let w = tape.constant(wv.clone());
            let b = tape.constant(zero_b2);
            let tx = tape.transposed_conv2d(x, w, b, 2);
            let lhs: f64 = tape
                .value(tx)
                .data()
                .iter()
                .zip(yv.data())
                .map(|(&a, &b)| a * b)
                .sum();

            // conv2d with the same weight buffer read as (Cout=3, Cin=2, 4, 4)
            let w_flip = Tensor::from_vec(Shape::new(3, 2, 4, 4), wv.data().to_vec());
            let mut tape2: Tape<f64> = Tape::new();
            let y = tape2.constant(yv);
            let wf = tape2.constant(w_flip);
            let b3 = tape2.constant(zero_b3);
            let cy = tape2.conv2d(y, wf, b3, 2, 1);
            let rhs: f64 = tape2
                .value(cy)
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&a, &b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn prelu_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t((1, 1, 1, 3), vec![-2.0, 0.0, 3.0]));
        let s = tape.constant(t((1, 1, 1, 1), vec![0.25]));
        let y = tape.prelu(x, s);
        assert_eq!(tape.value(y).data(), &[-0.5, 0.0, 3.0]);

        let s1 = tape.constant(t((1, 1, 1, 1), vec![1.0]));
        let y1 = tape.prelu(x, s1);
        assert_eq!(tape.value(y1).data(), &[-2.0, 0.0, 3.0]);

        let x2 = tape.constant(t((1, 1, 1, 2), vec![-1.0, 2.0]));
        let s0 = tape.constant(t((1, 1, 1, 1), vec![0.0]));
        let y0 = tape.prelu(x2, s0);
        assert_eq!(tape.value(y0).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 3, 2, 2), 1.7));
        let y = tape.channel_softmax(x, 0..3);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x2 = tape.constant(t(
            (1, 3, 1, 1),
            vec![1.0f64.ln(), 2.0f64.ln(), 7.0f64.ln()],
        ));
        let y2 = tape.channel_softmax(x2, 0..3);
        let d = tape.value(y2).data();
        assert!((d[0] - 0.1).abs() < 1e-12 && (d[1] - 0.2).abs() < 1e-12 && (d[2] - 0.7).abs() < 1e-12);

        let x3 = tape.constant(t((1, 3, 1, 1), vec![1000.0, 0.0, 0.0]));
        let y3 = tape.channel_softmax(x3, 0..3);
        let d3 = tape.value(y3).data();
        assert!((d3[0] - 1.0).abs() < 1e-6 && d3[1] < 1e-6 && d3[2] < 1e-6);
        assert!(d3.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_untouched_channels() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t((1, 4, 1, 1), vec![5.0, 1.0, 1.0, -3.0]));
        let y = tape.channel_softmax(x, 1..3);
        let d = tape.value(y).data();
        assert_eq!(d[0], 5.0);
        assert_eq!(d[3], -3.0);
        assert!((d[1] - 0.5).abs() < 1e-12 && (d[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn split_channels_cases() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = rnd(&mut rng, Shape::new(1, 9, 4, 4));
        let x = tape.constant(xv.clone());
        let parts = tape.split_channels(x, &[6, 3]);
        assert_eq!(tape.shape(parts[0]), Shape::new(1, 6, 4, 4));
        assert_eq!(tape.shape(parts[1]), Shape::new(1, 3, 4, 4));

        let single = tape.split_channels(x, &[9]);
        assert_eq!(tape.value(single[0]).data(), xv.data());

        let rejoined = tape.concat_channels(&parts);
        assert_eq!(tape.value(rejoined).data(), xv.data());
    }

    #[test]
    #[should_panic(expected = "sizes sum")]
    fn split_channels_bad_sizes() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 9, 2, 2)));
        tape.split_channels(x, &[5, 3]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rnd(&mut rng, Shape::new(1, 2, 5, 7));
        let x = tape.constant(xv.clone());
        let same = tape.bilinear_resize(x, 5, 7);
        assert_eq!(tape.value(same).data(), xv.data());

        let c = tape.constant(Tensor::full(Shape::new(1, 1, 4, 4), 0.42));
        for (th, tw) in [(8, 8), (3, 5), (1, 1), (9, 2)] {
            let y = tape.bilinear_resize(c, th, tw);
            for &v in tape.value(y).data() {
                assert!((v - 0.42).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_linear_ramp_stays_linear_in_interior() {
        let mut tape: Tape<f64> = Tape::new();
        let src = Tensor::from_fn(Shape::new(1, 1, 1, 8), |_, _, _, x| x as f64);
        let x = tape.constant(src);
        let y = tape.bilinear_resize(x, 1, 16);
        let d = tape.value(y).data().to_vec();
        // interior samples of a x2 upsample of the ramp step by exactly 0.5
        for i in 2..14 {
            assert!(
                (d[i + 1] - d[i] - 0.5).abs() < 1e-12,
                "non-linear step at {i}: {} -> {}",
                d[i],
                d[i + 1]
            );
        }
    }

    #[test]
    fn fft2_closed_forms() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let fz = tape.fft2(z);
        assert!(tape.value(fz).data().iter().all(|&v| v == 0.0));

        let c = tape.constant(Tensor::full(Shape::new(1, 1, 6, 5), 0.3));
        let fc = tape.fft2(c);
        let d = tape.value(fc).data();
        assert!((d[0] - 0.3 * 30.0).abs() < 1e-9, "DC bin {} != c*H*W", d[0]);
        for (i, &v) in d.iter().enumerate() {
            if i != 0 {
                assert!(v.abs() < 1e-9, "bin {i} not zero: {v}");
            }
        }
    }

    /// Parseval check against a direct O(N^4) DFT summation oracle.
    #[test]
    fn fft2_matches_direct_dft_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (8, 8);
        let xv = rnd(&mut rng, Shape::new(1, 1, h, w));
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(xv.clone());
        let f = tape.fft2(x);
        let fd = tape.value(f).data();

        let mut spat = 0.0;
        for &v in xv.data() {
            spat += v * v;
        }
        let mut spec = 0.0;
        for u in 0..h {
            for v in 0..w {
                // direct DFT bin
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for y in 0..h {
                    for xx in 0..w {
                        let ang = -2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 / h as f64 + v as f64 * xx as f64 / w as f64);
                        let val = xv.at(0, 0, y, xx);
                        re += val * ang.cos();
                        im += val * ang.sin();
                    }
                }
                let (fre, fim) = (fd[u * w + v], fd[h * w + u * w + v]);
                assert!((re - fre).abs() < 1e-8 && (im - fim).abs() < 1e-8);
                spec += fre * fre + fim * fim;
            }
        }
        assert!((spat - spec / (h * w) as f64).abs() < 1e-8);
    }

    #[test]
    fn reduce_loss_cases() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rnd(&mut rng, Shape::new(2, 3, 4, 4));
        let av = tape.constant(a.clone());
        for kind in [LossKind::L1, LossKind::L2] {
            let l = tape.reduce_loss(av, av, kind);
            assert_eq!(tape.value(l).scalar(), 0.0);
        }

        let b = a.map(|v| v - 0.5);
        let bv = tape.constant(b.clone());
        let l1 = tape.reduce_loss(av, bv, LossKind::L1);
        let l2 = tape.reduce_loss(av, bv, LossKind::L2);
        assert!((tape.value(l1).scalar() - 0.5).abs() < 1e-12);
        assert!((tape.value(l2).scalar() - 0.25).abs() < 1e-12);

        // random pair against a scalar loop
        let c = rnd(&mut rng, Shape::new(2, 3, 4, 4));
        let cv = tape.constant(c.clone());
        let l1r = tape.reduce_loss(av, cv, LossKind::L1);
        let n = a.shape().numel() as f64;
        let mut want = 0.0;
        for (x, y) in a.data().iter().zip(c.data()) {
            want += (x - y).abs();
        }
        assert!((tape.value(l1r).scalar() - want / n).abs() < 1e-6);
    }
}
