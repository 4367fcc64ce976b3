//! The multi-scale multi-level multi-input multi-output encoder-decoder:
//! EnBlocks, DeBlocks, residual blocks, the full wiring and the inter-scale
//! parameter-sharing scheme.
//!
//! Resolution map, fixed for the whole project: scale `i` runs at
//! `full / 2^(i-1)`; within a level, encoder block `k` runs at
//! `scale_base / 2^(k-1)` and decoder block `k` at `scale_base / 2^(3-k)`;
//! the CDCR module and both kernel fields sit at `scale_base / 4`; decoder
//! side images are tapped before the transposed convolution, so restoration
//! `S_k` / residual `R_k` land at `scale_base / 2^(3-k)`. This is the unique
//! assignment under which every fusion in the wiring is resolution-consistent
//! with a single x2 resize.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::cdcr::{cdcr_forward, CdcrParams, InversePath};
use crate::error::{CdcnError, Result};
use crate::pmpb::FieldVars;
use crate::tensor::{Parameter, Scalar, Shape, Tape, Tensor, Var};

/// Element width used by a run; checkpoints always store 32-bit data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Structural hyperparameters of the network.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub scales: usize,
    pub levels: usize,
    /// Blocks per level; the published wiring fixes this at 3.
    pub blocks: usize,
    pub base_channels: usize,
    pub resblocks: usize,
    /// N: sampling points of the blur kernel.
    pub blur_taps: usize,
    /// M: sampling points of the inverse kernel.
    pub inverse_taps: usize,
    /// Width of the inverse-path bottleneck (conv2 output).
    pub cdcr_mid_channels: usize,
    pub precision: Precision,
    /// Drop the inverse-kernel path; the kernel field is still estimated.
    pub no_cdcr: bool,
    /// Keep only the first blurred input and the final restoration per scale.
    pub no_mimo: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 3,
            levels: 2,
            blocks: 3,
            base_channels: 32,
            resblocks: 8,
            blur_taps: 3,
            inverse_taps: 7,
            cdcr_mid_channels: 64,
            precision: Precision::F32,
            no_cdcr: false,
            no_mimo: false,
        }
    }
}

impl ModelConfig {
    /// The published configuration.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Desk-scale model used by the test experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            base_channels: 8,
            resblocks: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CdcnError::Config(m));
        if self.scales < 1 || self.scales > 4 {
            return bad(format!("scales must be in 1..=4, got {}", self.scales));
        }
        if !(1..=2).contains(&self.levels) {
            return bad(format!("levels must be 1 or 2, got {}", self.levels));
        }
        if self.blocks != 3 {
            return bad(format!("the wiring requires 3 blocks per level, got {}", self.blocks));
        }
        if self.base_channels < 1 || self.resblocks < 1 {
            return bad("base_channels and resblocks must be >= 1".into());
        }
        if self.blur_taps < 1 || self.inverse_taps < 1 {
            return bad("N and M must be >= 1".into());
        }
        if self.cdcr_mid_channels < 1 {
            return bad("cdcr_mid_channels must be >= 1".into());
        }
        Ok(())
    }

    /// Channel width of tier `k` (1-based).
    pub fn width(&self, k: usize) -> usize {
        self.base_channels << (k - 1)
    }

    /// Input extents must divide by this for every tier to stay integral.
    pub fn extent_divisor(&self) -> usize {
        1 << (self.scales + 1)
    }

    /// Channels of the composed image input of encoder block `k` at `level`,
    /// `None` when that side input is dropped by the no-MIMO ablation.
    pub fn side_channels(&self, level: usize, k: usize) -> Option<usize> {
        let concat_level = level == 2 || self.levels == 1;
        if k == 1 {
            // scale-coarsest self-concat keeps the width at 6 even with no
            // guidance available, so parameters stay shared across scales
            Some(if concat_level && !self.no_mimo { 6 } else { 3 })
        } else if self.no_mimo {
            None
        } else {
            Some(if concat_level { 6 } else { 3 })
        }
    }

    /// Whether the decoder block `k` of `level` taps a side image.
    pub fn has_tap(&self, level: usize, k: usize) -> bool {
        if self.no_mimo {
            k == 3
        } else {
            let _ = level;
            true
        }
    }
}

/// A convolution's weight and bias handles.
#[derive(Clone, Debug)]
pub struct Conv<H> {
    pub weight: H,
    pub bias: H,
}

impl<A> Conv<A> {
    pub fn map<B>(&self, f: &mut impl FnMut(&A) -> B) -> Conv<B> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock<H> {
    pub c1: Conv<H>,
    pub c2: Conv<H>,
}

impl<A> ResBlock<A> {
    fn map<B>(&self, f: &mut impl FnMut(&A) -> B) -> ResBlock<B> {
        ResBlock {
            c1: self.c1.map(f),
            c2: self.c2.map(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnBlockParams<H> {
    /// Shallow two-conv embedding of the image side input.
    pub embed: Option<(Conv<H>, Conv<H>)>,
    /// Stride-2 downsampling conv from the previous block (k >= 2).
    pub down: Option<Conv<H>>,
    /// 3x3 fusion after concatenating the two paths.
    pub fuse: Option<Conv<H>>,
    pub res: Vec<ResBlock<H>>,
}

impl<A> EnBlockParams<A> {
    fn map<B>(&self, f: &mut impl FnMut(&A) -> B) -> EnBlockParams<B> {
        EnBlockParams {
            embed: self.embed.as_ref().map(|(a, b)| (a.map(f), b.map(f))),
            down: self.down.as_ref().map(|c| c.map(f)),
            fuse: self.fuse.as_ref().map(|c| c.map(f)),
            res: self.res.iter().map(|r| r.map(f)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeBlockParams<H> {
    /// Fusion conv applied to the multi-resolution concatenation (k >= 2).
    pub fuse: Option<Conv<H>>,
    pub res: Vec<ResBlock<H>>,
    /// Two 3x3 convs producing the 3-channel side image; the second is
    /// zero-initialized so initial restorations are the zero image.
    pub tap: Option<(Conv<H>, Conv<H>)>,
    /// Transposed conv x2 (k in {1, 2}).
    pub up: Option<Conv<H>>,
}

impl<A> DeBlockParams<A> {
    fn map<B>(&self, f: &mut impl FnMut(&A) -> B) -> DeBlockParams<B> {
        DeBlockParams {
            fuse: self.fuse.as_ref().map(|c| c.map(f)),
            res: self.res.iter().map(|r| r.map(f)).collect(),
            tap: self.tap.as_ref().map(|(a, b)| (a.map(f), b.map(f))),
            up: self.up.as_ref().map(|c| c.map(f)),
        }
    }
}

/// One level's parameter set; shared by every scale.
#[derive(Clone, Debug)]
pub struct LevelParams<H> {
    pub enc: Vec<EnBlockParams<H>>,
    pub cdcr: CdcrParams<H>,
    pub dec: Vec<DeBlockParams<H>>,
}

impl<A> LevelParams<A> {
    fn map<B>(&self, f: &mut impl FnMut(&A) -> B) -> LevelParams<B> {
        LevelParams {
            enc: self.enc.iter().map(|e| e.map(f)).collect(),
            cdcr: self.cdcr.map(f),
            dec: self.dec.iter().map(|d| d.map(f)).collect(),
        }
    }
}

enum Init {
    FanIn(usize),
    Zero,
    Const(f64),
}

struct Alloc<T> {
    flat: Vec<Parameter<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Alloc<T> {
    fn tensor(&mut self, name: String, shape: Shape, init: Init) -> usize {
        let value = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, T::of(v)),
            Init::FanIn(fan) => {
                let bound = (1.0 / fan as f64).sqrt();
                let data = (0..shape.numel())
                    .map(|_| T::of(self.rng.random_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(shape, data)
            }
        };
        self.flat.push(Parameter::new(name, value));
        self.flat.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) -> Conv<usize> {
        let fan = cin * k * k;
        let init = |z: bool, fan: usize| if z { Init::Zero } else { Init::FanIn(fan) };
        Conv {
            weight: self.tensor(format!("{name}.w"), Shape::new(cout, cin, k, k), init(zero, fan)),
            bias: self.tensor(format!("{name}.b"), Shape::new(1, cout, 1, 1), init(zero, fan)),
        }
    }

    /// Transposed-conv weight `(Cin, Cout, 4, 4)`.
    fn tconv(&mut self, name: &str, cin: usize, cout: usize) -> Conv<usize> {
        let fan = cin * 16;
        Conv {
            weight: self.tensor(format!("{name}.w"), Shape::new(cin, cout, 4, 4), Init::FanIn(fan)),
            bias: self.tensor(format!("{name}.b"), Shape::new(1, cout, 1, 1), Init::FanIn(fan)),
        }
    }

    fn slope(&mut self, name: &str) -> usize {
        self.tensor(name.to_string(), Shape::new(1, 1, 1, 1), Init::Const(0.25))
    }
}

fn build_level<T: Scalar>(a: &mut Alloc<T>, cfg: &ModelConfig, level: usize) -> LevelParams<usize> {
    let tag = format!("l{level}");
    let mut enc = Vec::new();
    for k in 1..=3usize {
        let w = cfg.width(k);
        let side = cfg.side_channels(level, k);
        let embed = side.map(|sc| {
            (
                a.conv(&format!("{tag}.enc{k}.embed0"), w, sc, 3, false),
                a.conv(&format!("{tag}.enc{k}.embed1"), w, w, 3, false),
            )
        });
        let down = (k >= 2).then(|| a.conv(&format!("{tag}.enc{k}.down"), w, cfg.width(k - 1), 3, false));
        let fuse = (k >= 2 && embed.is_some())
            .then(|| a.conv(&format!("{tag}.enc{k}.fuse"), w, 2 * w, 3, false));
        let res = (0..cfg.resblocks)
            .map(|r| ResBlock {
                c1: a.conv(&format!("{tag}.enc{k}.res{r}.c1"), w, w, 3, false),
                c2: a.conv(&format!("{tag}.enc{k}.res{r}.c2"), w, w, 3, false),
            })
            .collect();
        enc.push(EnBlockParams {
            embed,
            down,
            fuse,
            res,
        });
    }

    let wc = cfg.width(3);
    let n = cfg.blur_taps;
    let m = cfg.inverse_taps;
    let cdcr = CdcrParams {
        // zero head: training starts from the identity-like kernel field
        conv1: a.conv(&format!("{tag}.cdcr.conv1"), 3 * n, wc, 3, true),
        inverse: (!cfg.no_cdcr).then(|| InversePath {
            pre_offsets: a.slope(&format!("{tag}.cdcr.pre1.slope")),
            conv2: a.conv(&format!("{tag}.cdcr.conv2"), cfg.cdcr_mid_channels, 3 * n, 3, false),
            pre_mid: a.slope(&format!("{tag}.cdcr.pre2.slope")),
            conv3: a.conv(&format!("{tag}.cdcr.conv3"), 3 * m, cfg.cdcr_mid_channels, 3, true),
            inverse_taps: m,
        }),
        blur_taps: n,
    };

    let mut dec = Vec::new();
    for k in 1..=3usize {
        let w = cfg.width(4 - k);
        // Concat widths after the declared resizes: DB(k-1) upsample output
        // plus all three encoder outputs.
        let fuse = (k >= 2).then(|| {
            let cat = w + cfg.width(1) + cfg.width(2) + cfg.width(3);
            a.conv(&format!("{tag}.dec{k}.fuse"), w, cat, 3, false)
        });
        let res = (0..cfg.resblocks)
            .map(|r| ResBlock {
                c1: a.conv(&format!("{tag}.dec{k}.res{r}.c1"), w, w, 3, false),
                c2: a.conv(&format!("{tag}.dec{k}.res{r}.c2"), w, w, 3, false),
            })
            .collect();
        let tap = cfg.has_tap(level, k).then(|| {
            (
                a.conv(&format!("{tag}.dec{k}.tap0"), w, w, 3, false),
                a.conv(&format!("{tag}.dec{k}.tap1"), 3, w, 3, true),
            )
        });
        let up = (k <= 2).then(|| a.tconv(&format!("{tag}.dec{k}.up"), w, w / 2));
        dec.push(DeBlockParams {
            fuse,
            res,
            tap,
            up,
        });
    }

    LevelParams { enc, cdcr, dec }
}

/// All learnable tensors under the inter-scale sharing scheme: one parameter
/// set per level, shared across scales, independent across levels.
#[derive(Clone, Debug)]
pub struct NetworkParams<T> {
    pub config: ModelConfig,
    levels: Vec<LevelParams<usize>>,
    flat: Vec<Parameter<T>>,
}

/// Allocate and initialize all parameters. Convolutions use fan-in-scaled
/// uniform init; side-output heads and the CDCR heads are zero-initialized
/// so the initial network emits zero restorations and identity-like kernel
/// fields. Deterministic per seed.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<NetworkParams<T>> {
    config.validate()?;
    let mut alloc = Alloc {
        flat: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let levels = (1..=config.levels)
        .map(|j| build_level(&mut alloc, config, j))
        .collect();
    Ok(NetworkParams {
        config: config.clone(),
        levels,
        flat: alloc.flat,
    })
}

impl<T: Scalar> NetworkParams<T> {
    /// Number of distinct level parameter sets (the sharing invariant).
    pub fn distinct_level_sets(&self) -> usize {
        self.levels.len()
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.flat
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.flat
    }

    /// Total scalar count.
    pub fn param_count(&self) -> usize {
        self.flat.iter().map(|p| p.value.shape().numel()).sum()
    }

    /// Push every parameter onto the tape as a grad-requiring leaf and
    /// return the structured view over the resulting nodes.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let vars: Vec<Var> = self
            .flat
            .iter()
            .map(|p| tape.leaf(p.value.clone(), true))
            .collect();
        let levels = self
            .levels
            .iter()
            .map(|lp| lp.map(&mut |&i: &usize| vars[i]))
            .collect();
        BoundModel { levels, vars }
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "{} parameters in {} tensors across {} level set(s); base {} ch, {} resblocks, N={}, M={}",
            self.param_count(),
            self.flat.len(),
            self.levels.len(),
            self.config.base_channels,
            self.config.resblocks,
            self.config.blur_taps,
            self.config.inverse_taps
        )
    }
}

/// Parameters bound to a tape for one forward/backward pass.
pub struct BoundModel {
    pub levels: Vec<LevelParams<Var>>,
    /// Leaves in flat parameter order, for gradient extraction.
    pub vars: Vec<Var>,
}

/// Everything one scale produces.
pub struct ScaleOutputs {
    /// S_k restorations (level 1), `None` where the no-MIMO ablation drops
    /// the head. Index `k-1`; resolutions `base/4, base/2, base`.
    pub restorations: [Option<Var>; 3],
    /// R_k residual images (level 2); all `None` in one-level models.
    pub residuals: [Option<Var>; 3],
    /// Kernel fields per level: `(level j, field at base/4)`.
    pub fields: Vec<(usize, FieldVars)>,
    /// Blurred-pyramid tiers consumed by this scale (k = 1..3), reused by
    /// the reblurring loss as targets.
    pub b_tiers: [Var; 3],
    /// Composed side inputs consumed by the restoration level's encoder
    /// blocks, exposed for wiring checks.
    pub level1_side_inputs: Vec<Var>,
}

fn resblock<T: Scalar>(tape: &mut Tape<T>, p: &ResBlock<Var>, x: Var) -> Var {
    let a = tape.conv2d(x, p.c1.weight, p.c1.bias, 1, 1);
    let a = tape.relu(a);
    let a = tape.conv2d(a, p.c2.weight, p.c2.bias, 1, 1);
    tape.add(x, a)
}

fn embed2<T: Scalar>(tape: &mut Tape<T>, p: &(Conv<Var>, Conv<Var>), x: Var) -> Var {
    let a = tape.conv2d(x, p.0.weight, p.0.bias, 1, 1);
    let a = tape.relu(a);
    tape.conv2d(a, p.1.weight, p.1.bias, 1, 1)
}

/// Encoder block: embed the side input, optionally fuse with the strided
/// downsampling of the previous features, then run the residual stack.
pub fn enblock_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &EnBlockParams<Var>,
    prev_features: Option<Var>,
    side_input: Option<Var>,
    k: usize,
) -> Var {
    assert_eq!(k == 1, prev_features.is_none(), "k=1 takes no previous features");
    let stem = prev_features.map(|f| {
        let d = p.down.as_ref().expect("k >= 2 has a downsampling conv");
        tape.conv2d(f, d.weight, d.bias, 2, 1)
    });
    let emb = side_input.map(|s| {
        let e = p.embed.as_ref().expect("side input requires embed convs");
        if let Some(st) = stem {
            let (sh, eh) = (tape.shape(st), tape.shape(s));
            assert!(
                sh.h == eh.h && sh.w == eh.w,
                "resolution mismatch between downsampled features {sh} and side input {eh}"
            );
        }
        embed2(tape, e, s)
    });
    let mut f = match (stem, emb) {
        (Some(st), Some(e)) => {
            let cat = tape.concat_channels(&[st, e]);
            let fu = p.fuse.as_ref().expect("two paths require a fusion conv");
            tape.conv2d(cat, fu.weight, fu.bias, 1, 1)
        }
        (None, Some(e)) => e,
        (Some(st), None) => st,
        (None, None) => unreachable!("encoder block with no inputs"),
    };
    for rb in &p.res {
        f = resblock(tape, rb, f);
    }
    f
}

/// Decoder block: fuse (k >= 2), residual stack, side-image tap before the
/// transposed convolution, then x2 upsampling for k in {1, 2}.
/// Returns `(out_features, side_image)`.
pub fn deblock_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &DeBlockParams<Var>,
    in_features: Var,
    k: usize,
) -> (Var, Option<Var>) {
    let mut f = match &p.fuse {
        Some(c) => tape.conv2d(in_features, c.weight, c.bias, 1, 1),
        None => {
            assert_eq!(k, 1, "only the first decoder block skips fusion");
            in_features
        }
    };
    for rb in &p.res {
        f = resblock(tape, rb, f);
    }
    let side = p.tap.as_ref().map(|(t0, t1)| {
        let a = tape.conv2d(f, t0.weight, t0.bias, 1, 1);
        let a = tape.relu(a);
        tape.conv2d(a, t1.weight, t1.bias, 1, 1)
    });
    let out = match &p.up {
        Some(c) => tape.transposed_conv2d(f, c.weight, c.bias, 2),
        None => f,
    };
    (out, side)
}

struct LevelRun {
    cdcr_out: Var,
    field: FieldVars,
    sides: [Option<Var>; 3],
    side_inputs: Vec<Var>,
}

fn run_level<T: Scalar>(
    tape: &mut Tape<T>,
    lp: &LevelParams<Var>,
    side_inputs: [Option<Var>; 3],
    cdcr_extra: Option<Var>,
) -> LevelRun {
    let consumed: Vec<Var> = side_inputs.iter().flatten().copied().collect();
    let mut feats = Vec::with_capacity(3);
    let mut prev = None;
    for k in 1..=3usize {
        let f = enblock_forward(tape, &lp.enc[k - 1], prev, side_inputs[k - 1], k);
        feats.push(f);
        prev = Some(f);
    }
    let f_in = match cdcr_extra {
        Some(e) => tape.add(feats[2], e),
        None => feats[2],
    };
    let (cdcr_out, field) = cdcr_forward(tape, f_in, &lp.cdcr);

    let (d1_out, s1) = deblock_forward(tape, &lp.dec[0], cdcr_out, 1);
    // DB2 input: DB1out (+) EB1out(down) (+) EB2out (+) EB3out(up), all at base/2
    let t2 = tape.shape(feats[1]);
    let e1d = tape.bilinear_resize(feats[0], t2.h, t2.w);
    let e3u = tape.bilinear_resize(feats[2], t2.h, t2.w);
    let d2_in = tape.concat_channels(&[d1_out, e1d, feats[1], e3u]);
    let (d2_out, s2) = deblock_forward(tape, &lp.dec[1], d2_in, 2);
    // DB3 input: DB2out (+) EB1out (+) EB2out(up) (+) EB3out(up), all at base
    let t1 = tape.shape(feats[0]);
    let e2u = tape.bilinear_resize(feats[1], t1.h, t1.w);
    let e3uu = tape.bilinear_resize(feats[2], t1.h, t1.w);
    let d3_in = tape.concat_channels(&[d2_out, feats[0], e2u, e3uu]);
    let (_d3_out, s3) = deblock_forward(tape, &lp.dec[2], d3_in, 3);

    LevelRun {
        cdcr_out,
        field,
        sides: [s1, s2, s3],
        side_inputs: consumed,
    }
}

/// Run the full network on a blurred batch. The input extents must divide by
/// `config.extent_divisor()`. Processing runs coarse to fine; the returned
/// vector is ordered scale 1 (finest) first.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    config: &ModelConfig,
    blurred: Var,
) -> Vec<ScaleOutputs> {
    let full = tape.shape(blurred);
    let div = config.extent_divisor();
    assert!(
        full.h % div == 0 && full.w % div == 0,
        "input extents {}x{} must divide by {div}",
        full.h,
        full.w
    );
    assert_eq!(full.c, 3, "expected an RGB batch");

    let mut outputs: Vec<ScaleOutputs> = Vec::with_capacity(config.scales);
    let mut guidance: Option<[Option<Var>; 3]> = None; // previous scale's S_k

    for i in (1..=config.scales).rev() {
        let (bh, bw) = (full.h >> (i - 1), full.w >> (i - 1));
        let b_tiers: [Var; 3] = std::array::from_fn(|kk| {
            tape.bilinear_resize(blurred, bh >> kk, bw >> kk)
        });

        // side inputs of the concat-style level (level 2, or the single level)
        let concat_sides: [Option<Var>; 3] = std::array::from_fn(|kk| {
            let k = kk + 1;
            if config.no_mimo {
                return (k == 1).then_some(b_tiers[0]);
            }
            let b = b_tiers[kk];
            let partner = match &guidance {
                None => b, // coarsest scale: self-concatenation
                Some(prev_s) => {
                    let s = prev_s[3 - k].expect("guidance restoration present");
                    let t = tape.shape(b);
                    tape.bilinear_resize(s, t.h, t.w)
                }
            };
            Some(tape.concat_channels(&[b, partner]))
        });

        let (scale_out, s_for_guidance) = if config.levels == 2 {
            let l2 = run_level(tape, &model.levels[1], concat_sides, None);
            // level 1 side inputs: B_k + R_(4-k), elementwise
            let l1_sides: [Option<Var>; 3] = std::array::from_fn(|kk| {
                let k = kk + 1;
                if config.no_mimo && k > 1 {
                    return None;
                }
                let r = l2.sides[3 - k].expect("residual image required by the wiring");
                Some(tape.add(b_tiers[kk], r))
            });
            let l1 = run_level(tape, &model.levels[0], l1_sides, Some(l2.cdcr_out));
            let so = ScaleOutputs {
                restorations: l1.sides,
                residuals: l2.sides,
                fields: vec![(2, l2.field), (1, l1.field)],
                b_tiers,
                level1_side_inputs: l1.side_inputs,
            };
            let s_next = l1.sides;
            (so, s_next)
        } else {
            let l1 = run_level(tape, &model.levels[0], concat_sides, None);
            let so = ScaleOutputs {
                restorations: l1.sides,
                residuals: [None, None, None],
                fields: vec![(1, l1.field)],
                b_tiers,
                level1_side_inputs: l1.side_inputs,
            };
            let s_next = l1.sides;
            (so, s_next)
        };

        guidance = Some(s_for_guidance);
        outputs.push(scale_out);
    }
    outputs.reverse();
    outputs
}

/// One row of the resolution-map audit.
#[derive(Clone, Debug)]
pub struct AuditRow {
    pub unit: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Audit of every block's operating resolution and every fusion operand.
#[derive(Clone, Debug, Default)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub mismatches: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<28} {:>6} {:>6} {:>5}", "unit", "height", "width", "ch")?;
        for r in &self.rows {
            writeln!(f, "{:<28} {:>6} {:>6} {:>5}", r.unit, r.height, r.width, r.channels)?;
        }
        if self.mismatches.is_empty() {
            writeln!(f, "all fusion operands match")?;
        } else {
            for m in &self.mismatches {
                writeln!(f, "MISMATCH: {m}")?;
            }
        }
        Ok(())
    }
}

/// Walk the wiring arithmetically and verify that every fusion pair lands on
/// the same resolution after its declared resize. Each operand is derived
/// from its own defining formula, so an inconsistent change to any tier
/// assignment shows up as a mismatch. Failures are carried in the report,
/// not raised.
pub fn audit_resolutions(config: &ModelConfig, input_h: usize, input_w: usize) -> AuditReport {
    let mut report = AuditReport::default();
    let div = config.extent_divisor();
    if input_h % div != 0 || input_w % div != 0 {
        report
            .mismatches
            .push(format!("input {input_h}x{input_w} does not divide by {div}"));
        return report;
    }
    // tier formulas, each one line so deviations are local
    let scale_base = |i: usize| input_h >> (i - 1);
    let eb_res = |i: usize, k: usize| scale_base(i) >> (k - 1); // encoder block k
    let b_res = |i: usize, k: usize| scale_base(i) >> (k - 1); // blurred input B_k
    let db_res = |i: usize, k: usize| scale_base(i) >> (3 - k); // decoder block k
    let side_res = |i: usize, k: usize| scale_base(i) >> (3 - k); // S_k / R_k (tap before upsample)
    let field_res = |i: usize| scale_base(i) >> 2; // CDCR + kernel fields

    let levels: Vec<usize> = if config.levels == 2 { vec![2, 1] } else { vec![1] };
    let aspect = input_w as f64 / input_h as f64;
    let w_of = |h: usize| (h as f64 * aspect).round() as usize;
    let check = |site: String, got: usize, want: usize, mism: &mut Vec<String>| {
        if got != want {
            mism.push(format!("{site}: operand at {got}, target {want}"));
        }
    };

    for i in (1..=config.scales).rev() {
        for &j in &levels {
            let tag = |unit: &str| format!("s{i}.l{j}.{unit}");
            let concat_level = j == 2 || config.levels == 1;
            for k in 1..=3usize {
                let h = eb_res(i, k);
                report.rows.push(AuditRow {
                    unit: tag(&format!("EB{k}")),
                    height: h,
                    width: w_of(h),
                    channels: config.width(k),
                });
                if config.side_channels(j, k).is_some() {
                    check(tag(&format!("EB{k}.in B_{k}")), b_res(i, k), h, &mut report.mismatches);
                    if concat_level && !config.no_mimo && i < config.scales {
                        // guidance S_{(i+1),1,(4-k)} upsampled x2
                        let g = side_res(i + 1, 4 - k) * 2;
                        check(
                            tag(&format!("EB{k}.in S↑_{}", 4 - k)),
                            g,
                            h,
                            &mut report.mismatches,
                        );
                    }
                    if !concat_level {
                        // residual sum B_k + R_(4-k)
                        let r = side_res(i, 4 - k);
                        check(
                            tag(&format!("EB{k}.in R_{}", 4 - k)),
                            r,
                            h,
                            &mut report.mismatches,
                        );
                    }
                }
                if k >= 2 {
                    // strided stem from the previous block
                    check(
                        tag(&format!("EB{k}.stem")),
                        eb_res(i, k - 1) / 2,
                        h,
                        &mut report.mismatches,
                    );
                }
            }

            let fh = field_res(i);
            report.rows.push(AuditRow {
                unit: tag("CDCR"),
                height: fh,
                width: w_of(fh),
                channels: config.width(3),
            });
            report.rows.push(AuditRow {
                unit: tag("kernel-field"),
                height: fh,
                width: w_of(fh),
                channels: 3 * config.blur_taps,
            });
            // CDCR input composition and the reblur pairing
            check(tag("CDCR.in EB3"), eb_res(i, 3), fh, &mut report.mismatches);
            check(
                tag("reblur target B_3"),
                b_res(i, 3),
                fh,
                &mut report.mismatches,
            );

            for k in 1..=3usize {
                let h = db_res(i, k);
                report.rows.push(AuditRow {
                    unit: tag(&format!("DB{k}")),
                    height: h,
                    width: w_of(h),
                    channels: config.width(4 - k),
                });
                match k {
                    1 => check(tag("DB1.in CDCR"), field_res(i), h, &mut report.mismatches),
                    _ => {
                        // DB(k-1) output after its x2 transposed conv
                        check(
                            tag(&format!("DB{k}.in DB{}↑", k - 1)),
                            db_res(i, k - 1) * 2,
                            h,
                            &mut report.mismatches,
                        );
                        // encoder operands arrive through declared resizes;
                        // the un-resized one must already match
                        let plain = if k == 2 { 2 } else { 1 };
                        check(
                            tag(&format!("DB{k}.in EB{plain}")),
                            eb_res(i, plain),
                            h,
                            &mut report.mismatches,
                        );
                    }
                }
                if config.has_tap(j, k) {
                    let label = if concat_level && config.levels == 2 { "R" } else { "S" };
                    report.rows.push(AuditRow {
                        unit: tag(&format!("{label}{k}")),
                        height: side_res(i, k),
                        width: w_of(side_res(i, k)),
                        channels: 3,
                    });
                }
            }
        }
    }
    report
}
