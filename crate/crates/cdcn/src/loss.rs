//! The three training losses and their weighted combination: multi-scale L1
//! content, multi-scale frequency reconstruction, and the PMPB reblurring
//! loss over every CDCR site.

use crate::model::ScaleOutputs;
use crate::pmpb::FieldVars;
use crate::tensor::{LossKind, Scalar, Tape, Var};

/// Loss weighting and the per-term ablation switches.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the frequency term.
    pub lambda_frequency: f64,
    pub content_enabled: bool,
    pub frequency_enabled: bool,
    pub reblur_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_frequency: 0.1,
            content_enabled: true,
            frequency_enabled: true,
            reblur_enabled: true,
        }
    }
}

/// Per-term scalar values of one step, in f64 regardless of the training
/// precision; `total` always equals `content + lambda*frequency + reblur`
/// with disabled terms contributing zero.
#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub frequency: f64,
    pub reblur: f64,
    pub total: f64,
}

/// Ground-truth pyramid at the restoration tiers: `tiers[i-1][k-1]` sits at
/// `(full >> (i-1)) >> (3-k)`, mirroring `S_{i1k}`. The `k = 1` tier doubles
/// as the sharp source of the reblurring loss.
pub struct GtPyramid {
    pub tiers: Vec<[Var; 3]>,
}

pub fn gt_pyramid<T: Scalar>(tape: &mut Tape<T>, gt_full: Var, scales: usize) -> GtPyramid {
    let full = tape.shape(gt_full);
    let tiers = (1..=scales)
        .map(|i| {
            std::array::from_fn(|kk| {
                let h = (full.h >> (i - 1)) >> (2 - kk);
                let w = (full.w >> (i - 1)) >> (2 - kk);
                tape.bilinear_resize(gt_full, h, w)
            })
        })
        .collect();
    GtPyramid { tiers }
}

/// Supervision pairs gathered from a forward pass.
pub struct SupervisionSites {
    /// `(S, GT)` at matching tiers, one per emitted restoration.
    pub content: Vec<(Var, Var)>,
    /// `(field, sharp GT at base/4, blurred target B_3)`, one per CDCR.
    pub reblur: Vec<(FieldVars, Var, Var)>,
}

pub fn collect_sites(outputs: &[ScaleOutputs], gt: &GtPyramid) -> SupervisionSites {
    let mut content = Vec::new();
    let mut reblur = Vec::new();
    for (si, out) in outputs.iter().enumerate() {
        for k in 0..3 {
            if let Some(s) = out.restorations[k] {
                content.push((s, gt.tiers[si][k]));
            }
        }
        for &(_, field) in &out.fields {
            reblur.push((field, gt.tiers[si][0], out.b_tiers[2]));
        }
    }
    SupervisionSites { content, reblur }
}

/// Mean-per-element L1 between each restoration and its ground truth, summed
/// over sites.
pub fn content_loss<T: Scalar>(tape: &mut Tape<T>, sites: &[(Var, Var)]) -> Var {
    let mut total: Option<Var> = None;
    for &(s, g) in sites {
        let l = tape.reduce_loss(s, g, LossKind::L1);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    total.expect("at least one content site")
}

/// L1 between forward spectra, real and imaginary planes jointly, summed
/// over the same sites as the content loss.
pub fn frequency_loss<T: Scalar>(tape: &mut Tape<T>, sites: &[(Var, Var)]) -> Var {
    let mut total: Option<Var> = None;
    for &(s, g) in sites {
        let c = tape.shape(s).c;
        let fs = tape.fft2(s);
        let fg = tape.fft2(g);
        let ps = tape.split_channels(fs, &[c, c]);
        let pg = tape.split_channels(fg, &[c, c]);
        let lre = tape.reduce_loss(ps[0], pg[0], LossKind::L1);
        let lim = tape.reduce_loss(ps[1], pg[1], LossKind::L1);
        let l = tape.add(lre, lim);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    total.expect("at least one frequency site")
}

/// Mean squared error between the PMPB reconstruction of the sharp ground
/// truth under each estimated kernel field and the observed blurred tier,
/// summed over all fields (six in the two-level, three-scale configuration).
pub fn reblur_loss<T: Scalar>(tape: &mut Tape<T>, sites: &[(FieldVars, Var, Var)]) -> Var {
    let mut total: Option<Var> = None;
    for &(field, sharp, target) in sites {
        let rb = tape.reblur(sharp, field);
        let l = tape.reduce_loss(rb, target, LossKind::L2);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    total.expect("at least one reblur site")
}

/// Combine the enabled terms. Disabled terms are not built at all, so no
/// gradient flows through their inputs. Returns the differentiable total and
/// the f64 breakdown.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    sites: &SupervisionSites,
    config: &LossConfig,
) -> (Var, LossBreakdown) {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let push = |tape: &mut Tape<T>, v: Var, total: &mut Option<Var>| {
        *total = Some(match *total {
            None => v,
            Some(t) => tape.add(t, v),
        });
    };
    if config.content_enabled && !sites.content.is_empty() {
        let c = content_loss(tape, &sites.content);
        breakdown.content = tape.value(c).scalar().lift();
        push(tape, c, &mut total);
    }
    if config.frequency_enabled && !sites.content.is_empty() {
        let f = frequency_loss(tape, &sites.content);
        breakdown.frequency = tape.value(f).scalar().lift();
        let fw = tape.scale(f, config.lambda_frequency);
        push(tape, fw, &mut total);
    }
    if config.reblur_enabled && !sites.reblur.is_empty() {
        let r = reblur_loss(tape, &sites.reblur);
        breakdown.reblur = tape.value(r).scalar().lift();
        push(tape, r, &mut total);
    }
    breakdown.total =
        breakdown.content + config.lambda_frequency * breakdown.frequency + breakdown.reblur;
    let total = total.unwrap_or_else(|| {
        tape.constant(crate::tensor::Tensor::zeros(crate::tensor::Shape::new(1, 1, 1, 1)))
    });
    (total, breakdown)
}
