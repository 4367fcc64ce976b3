//! The optimization loop: Adam with the step-decay schedule, loss assembly,
//! deterministic desk-scale runs, checkpointing and the structured train
//! log.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DatasetManifest};
use crate::error::{CdcnError, Result};
use crate::loss::{collect_sites, gt_pyramid, total_loss, LossBreakdown, LossConfig};
use crate::model::{build_model, model_forward, ModelConfig, NetworkParams};
use crate::tensor::{Parameter, Scalar, Tape, Tensor};

/// Table-style ablation switches. Flags only remove things and are freely
/// combinable; they act on copies of the model and loss configs so one code
/// path serves every variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_reblur_loss: bool,
    pub no_cdcr: bool,
    pub one_level: bool,
    pub no_mimo: bool,
}

impl AblationFlags {
    pub fn apply(&self, model: &mut ModelConfig, loss: &mut LossConfig) {
        if self.no_reblur_loss {
            loss.reblur_enabled = false;
        }
        if self.no_cdcr {
            model.no_cdcr = true;
        }
        if self.one_level {
            model.levels = 1;
        }
        if self.no_mimo {
            model.no_mimo = true;
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Halve the learning rate every this many epochs.
    pub decay_every: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Refresh the abort-recovery snapshot every this many steps (0: only
    /// the initial state).
    pub snapshot_every: usize,
    /// Log a PSNR probe on the first training pair every this many steps
    /// (0: off).
    pub eval_every: usize,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Desk-scale schedule: 400 epochs with D = 40 keeps the published
        // 10-segment decay shape (2000 epochs, halving every 200).
        TrainConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate: 1e-4,
            decay_every: 40,
            epochs: 400,
            iters_per_epoch: 1,
            batch_size: 8,
            patch_size: 64,
            seed: 0,
            augment: true,
            snapshot_every: 50,
            eval_every: 0,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CdcnError::Config(m.into()));
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if self.learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return bad("learning rate and epsilon must be positive");
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.iters_per_epoch == 0 {
            return bad("decay_every, batch_size and iters_per_epoch must be positive");
        }
        Ok(())
    }
}

/// Step-decay schedule: `lr0 * 0.5^floor(epoch / D)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    config.learning_rate * 0.5f64.powi((epoch / config.decay_every) as i32)
}

/// First and second Adam moments, in flat parameter order.
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Bias-correction step counter.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over every parameter. Moment math runs in
/// f64 regardless of the parameter precision. Rejects non-finite gradients
/// before touching any state.
pub fn adam_step<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    assert_eq!(grads.len(), params.parameters().len(), "gradient count mismatch");
    for (p, g) in params.parameters().iter().zip(grads) {
        if !g.all_finite() {
            return Err(CdcnError::NonFinite {
                what: format!("gradient of {}", p.name),
                step: state.t as usize,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, p) in params.parameters_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pv = p.value.data_mut();
        for e in 0..g.len() {
            let ge = g[e].lift();
            let me = b1 * m[e].lift() + (1.0 - b1) * ge;
            let ve = b2 * v[e].lift() + (1.0 - b2) * ge * ge;
            m[e] = T::of(me);
            v[e] = T::of(ve);
            let update = lr * (me / bc1) / ((ve / bc2).sqrt() + config.epsilon);
            pv[e] = T::of(pv[e].lift() - update);
        }
    }
    Ok(())
}

/// Saved RNG position, enough to resume the stream exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Full training state. Stored as 32-bit values regardless of the run
/// precision, so reload is bitwise only for f32 runs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub epoch: usize,
    pub step: usize,
    pub params: Vec<Parameter<f32>>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub adam_t: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn snapshot<T: Scalar>(
        params: &NetworkParams<T>,
        adam: &AdamState<T>,
        rng: &ChaCha8Rng,
        train: &TrainConfig,
        loss: &LossConfig,
        epoch: usize,
        step: usize,
    ) -> Self {
        Checkpoint {
            model: params.config.clone(),
            train: train.clone(),
            loss: loss.clone(),
            epoch,
            step,
            params: params
                .parameters()
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast::<f32>()))
                .collect(),
            m: adam.m.iter().map(|t| t.cast()).collect(),
            v: adam.v.iter().map(|t| t.cast()).collect(),
            adam_t: adam.t,
            rng: RngState::capture(rng),
        }
    }

    /// Rebuild the network in precision `T`, verifying that the stored
    /// parameters match the architecture exactly; the error names the first
    /// mismatched parameter.
    pub fn restore_model<T: Scalar>(&self) -> Result<NetworkParams<T>> {
        let mut net: NetworkParams<T> = build_model(&self.model, 0)?;
        if net.parameters().len() != self.params.len() {
            return Err(CdcnError::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                net.parameters().len(),
                self.params.len()
            )));
        }
        for (slot, saved) in net.parameters_mut().iter_mut().zip(&self.params) {
            if slot.name != saved.name {
                return Err(CdcnError::Checkpoint(format!(
                    "parameter name mismatch: model expects {}, checkpoint has {}",
                    slot.name, saved.name
                )));
            }
            if slot.value.shape() != saved.value.shape() {
                return Err(CdcnError::Checkpoint(format!(
                    "parameter {} shape mismatch: model expects {}, checkpoint has {}",
                    slot.name,
                    slot.value.shape(),
                    saved.value.shape()
                )));
            }
            slot.value = saved.value.cast();
        }
        Ok(net)
    }

    pub fn restore_adam<T: Scalar>(&self) -> AdamState<T> {
        AdamState {
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
            t: self.adam_t,
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CDCN";
const CKPT_VERSION: u32 = 1;

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CdcnError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CdcnError::Checkpoint("invalid utf8 in checkpoint".into()))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    let s = t.shape();
    for e in [s.b, s.c, s.h, s.w] {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor<f32>> {
    let b = r.u32()? as usize;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let shape = crate::tensor::Shape::new(b, c, h, w);
    Ok(Tensor::from_vec(shape, r.f32s(shape.numel())?))
}

/// Versioned binary checkpoint: magic "CDCN", version, config snapshot,
/// length-prefixed (name, shape, float32 data) entries, both moment sets,
/// then the RNG state. The reader must consume the file exactly, so
/// truncation and trailing garbage both fail the length check.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let configs = serde_json::json!({
        "model": ckpt.model,
        "train": ckpt.train,
        "loss": ckpt.loss,
    });
    put_str(&mut buf, &configs.to_string());
    buf.extend_from_slice(&(ckpt.epoch as u32).to_le_bytes());
    buf.extend_from_slice(&(ckpt.step as u64).to_le_bytes());
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for p in &ckpt.params {
        put_str(&mut buf, &p.name);
        put_tensor(&mut buf, &p.value);
    }
    for t in ckpt.m.iter().chain(&ckpt.v) {
        put_tensor(&mut buf, t);
    }
    buf.extend_from_slice(&ckpt.adam_t.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.seed);
    buf.extend_from_slice(&ckpt.rng.stream.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    std::fs::write(path, &buf).map_err(|e| CdcnError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CdcnError::io(path, e))?;
    let mut r = ByteReader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(CdcnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(CdcnError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let configs: serde_json::Value = serde_json::from_str(&r.string()?)
        .map_err(|e| CdcnError::Checkpoint(format!("bad config snapshot: {e}")))?;
    let model: ModelConfig = serde_json::from_value(configs["model"].clone())
        .map_err(|e| CdcnError::Checkpoint(format!("bad model config: {e}")))?;
    let train: TrainConfig = serde_json::from_value(configs["train"].clone())
        .map_err(|e| CdcnError::Checkpoint(format!("bad train config: {e}")))?;
    let loss: LossConfig = serde_json::from_value(configs["loss"].clone())
        .map_err(|e| CdcnError::Checkpoint(format!("bad loss config: {e}")))?;
    let epoch = r.u32()? as usize;
    let step = r.u64()? as usize;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        params.push(Parameter::new(name, read_tensor(&mut r)?));
    }
    let m = (0..count).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
    let v = (0..count).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
    let adam_t = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    if r.pos != bytes.len() {
        return Err(CdcnError::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model,
        train,
        loss,
        epoch,
        step,
        params,
        m,
        v,
        adam_t,
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
    })
}

/// One structured log line per step.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| CdcnError::io(path, e))
    }
}

/// Why a run stopped early; the checkpoint accompanying it is the last good
/// snapshot.
#[derive(Clone, Debug)]
pub struct Abort {
    pub step: usize,
    pub what: String,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    /// `Some` when the run aborted on non-finite values; the checkpoint is
    /// then the last good snapshot instead of the final state.
    pub aborted: Option<Abort>,
}

/// Run the full optimization loop. Deterministic per seed: identical
/// configs produce byte-identical logs and checkpoints.
pub fn train_run<T: Scalar>(
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    manifest: &DatasetManifest,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let mut model_cfg = mcfg.clone();
    let mut loss_cfg = LossConfig::default();
    tcfg.ablation.apply(&mut model_cfg, &mut loss_cfg);
    model_cfg.validate()?;
    let div = model_cfg.extent_divisor();
    if tcfg.patch_size % div != 0 {
        return Err(CdcnError::Config(format!(
            "patch size {} must divide by {div}",
            tcfg.patch_size
        )));
    }
    let dataset: Dataset<T> = Dataset::load(manifest)?;

    let mut params: NetworkParams<T> = build_model(&model_cfg, tcfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0xda7a_5eed);
    let mut log = TrainLog::default();
    let mut last_good = Checkpoint::snapshot(&params, &adam, &rng, tcfg, &loss_cfg, 0, 0);

    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let lr = lr_at_epoch(tcfg, epoch);
        for _ in 0..tcfg.iters_per_epoch {
            let batch = dataset.sample_patch(tcfg.patch_size, tcfg.batch_size, tcfg.augment, &mut rng)?;
            let mut tape: Tape<T> = Tape::new();
            let bound = params.bind(&mut tape);
            let blurred = tape.constant(batch.blurred);
            let gt_full = tape.constant(batch.sharp);
            let outputs = model_forward(&mut tape, &bound, &model_cfg, blurred);
            let gt = gt_pyramid(&mut tape, gt_full, model_cfg.scales);
            let sites = collect_sites(&outputs, &gt);
            let (total, breakdown) = total_loss(&mut tape, &sites, &loss_cfg);
            if !breakdown.total.is_finite() {
                return Ok(TrainOutcome {
                    checkpoint: last_good,
                    log,
                    aborted: Some(Abort {
                        step,
                        what: "loss".into(),
                    }),
                });
            }
            let store = tape.backward(total);
            let grads: Vec<Tensor<T>> = bound.vars.iter().map(|&v| store.grad(&tape, v)).collect();
            drop(store);
            drop(tape);
            if let Err(e) = adam_step(&mut params, &grads, &mut adam, lr, tcfg) {
                log.records.push(LogRecord {
                    step,
                    epoch,
                    lr,
                    loss: breakdown,
                    eval_psnr: None,
                });
                return Ok(TrainOutcome {
                    checkpoint: last_good,
                    log,
                    aborted: Some(Abort {
                        step,
                        what: e.to_string(),
                    }),
                });
            }
            let eval_psnr = if tcfg.eval_every > 0 && step % tcfg.eval_every == 0 {
                let (ref blurred_full, ref sharp_full) = dataset.pairs[0];
                let restored = crate::eval::restore_image(&params, &model_cfg, blurred_full);
                Some(crate::eval::psnr(&restored, sharp_full).expect("matching extents"))
            } else {
                None
            };
            log.records.push(LogRecord {
                step,
                epoch,
                lr,
                loss: breakdown,
                eval_psnr,
            });
            step += 1;
            if tcfg.snapshot_every > 0 && step % tcfg.snapshot_every == 0 {
                last_good = Checkpoint::snapshot(&params, &adam, &rng, tcfg, &loss_cfg, epoch, step);
            }
        }
    }
    let checkpoint = Checkpoint::snapshot(&params, &adam, &rng, tcfg, &loss_cfg, tcfg.epochs, step);
    Ok(TrainOutcome {
        checkpoint,
        log,
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, procedural_sharp, SyntheticSpec};
    use crate::pmpb::MotionFamily;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            resblocks: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path, count: usize) -> DatasetManifest {
        let sources: Vec<Tensor<f32>> = (0..2).map(|i| procedural_sharp(32, 32, 50 + i)).collect();
        let spec = SyntheticSpec {
            count,
            time_samples: 4,
            max_displacement: 3.0,
            families: vec![MotionFamily::GlobalLinear],
            seed: 77,
        };
        generate_synthetic_dataset(&spec, &sources, dir).unwrap()
    }

    #[test]
    fn lr_schedule_values_and_shape() {
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            decay_every: 200,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_epoch(&cfg, 0), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 199), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 200), 5e-5);
        let mut prev = f64::INFINITY;
        for e in 0..1000 {
            let lr = lr_at_epoch(&cfg, e);
            assert!(lr <= prev);
            if e % 200 != 0 {
                assert_eq!(lr, lr_at_epoch(&cfg, e - 1));
            }
            prev = lr;
        }
    }

    #[test]
    fn adam_zero_gradients_leave_parameters_and_decay_moments() {
        let mcfg = tiny_model();
        let mut params = build_model::<f64>(&mcfg, 1).unwrap();
        let mut adam = AdamState::new(&params);
        let tcfg = TrainConfig::default();
        // one nonzero step to charge the moments
        let ones: Vec<Tensor<f64>> = params
            .parameters()
            .iter()
            .map(|p| Tensor::full(p.value.shape(), 0.01))
            .collect();
        adam_step(&mut params, &ones, &mut adam, 1e-4, &tcfg).unwrap();
        let m_before = adam.m[0].data()[0];
        let values: Vec<f64> = params.parameters().iter().map(|p| p.value.data()[0]).collect();

        let zeros: Vec<Tensor<f64>> = params
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        adam_step(&mut params, &zeros, &mut adam, 1e-4, &tcfg).unwrap();
        // moments decayed by beta1, parameters moved only by the residual
        // momentum, not by any gradient
        assert!((adam.m[0].data()[0] - 0.9 * m_before).abs() < 1e-15);
        // with zero gradient the update is driven by stale momentum; check
        // the specific zero-from-start case instead
        let mut params2 = build_model::<f64>(&mcfg, 1).unwrap();
        let before: Vec<f64> = params2.parameters().iter().map(|p| p.value.data()[0]).collect();
        let mut adam2 = AdamState::new(&params2);
        adam_step(&mut params2, &zeros, &mut adam2, 1e-4, &tcfg).unwrap();
        let after: Vec<f64> = params2.parameters().iter().map(|p| p.value.data()[0]).collect();
        assert_eq!(before, after);
        let _ = values;
    }

    #[test]
    fn adam_constant_gradient_update_approaches_lr() {
        let mcfg = tiny_model();
        let mut params = build_model::<f64>(&mcfg, 2).unwrap();
        let mut adam = AdamState::new(&params);
        let tcfg = TrainConfig::default();
        let g: Vec<Tensor<f64>> = params
            .parameters()
            .iter()
            .map(|p| Tensor::full(p.value.shape(), 0.3))
            .collect();
        let mut prev = params.parameters()[0].value.data()[0];
        let mut update = 0.0;
        for _ in 0..200 {
            adam_step(&mut params, &g, &mut adam, 1e-4, &tcfg).unwrap();
            let cur = params.parameters()[0].value.data()[0];
            update = prev - cur;
            prev = cur;
        }
        assert!(
            (update - 1e-4).abs() < 1e-6,
            "steady-state update {update} should be within 1% of the learning rate"
        );
    }

    #[test]
    fn adam_single_step_matches_hand_formula() {
        let mcfg = tiny_model();
        let mut params = build_model::<f64>(&mcfg, 3).unwrap();
        let mut adam = AdamState::new(&params);
        let tcfg = TrainConfig::default();
        let before: Vec<Vec<f64>> = params.parameters().iter().map(|p| p.value.data().to_vec()).collect();
        let grads: Vec<Tensor<f64>> = params
            .parameters()
            .iter()
            .enumerate()
            .map(|(i, p)| Tensor::full(p.value.shape(), 0.02 * (i as f64 + 1.0)))
            .collect();
        adam_step(&mut params, &grads, &mut adam, 1e-4, &tcfg).unwrap();
        for (i, p) in params.parameters().iter().enumerate() {
            let g = 0.02 * (i as f64 + 1.0);
            let m = 0.1 * g;
            let v = 0.001 * g * g;
            let mhat = m / (1.0 - 0.9);
            let vhat = v / (1.0 - 0.999);
            let want = before[i][0] - 1e-4 * mhat / (vhat.sqrt() + 1e-8);
            assert!((p.value.data()[0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mcfg = tiny_model();
        let mut params = build_model::<f64>(&mcfg, 4).unwrap();
        let mut adam = AdamState::new(&params);
        let mut grads: Vec<Tensor<f64>> = params
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let s = grads[3].shape();
        grads[3].set(0, 0, 0, 0, f64::NAN);
        let _ = s;
        let err = adam_step(&mut params, &grads, &mut adam, 1e-4, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn zero_epoch_run_returns_initial_checkpoint_and_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 2);
        let tcfg = TrainConfig {
            epochs: 0,
            patch_size: 32,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let out = train_run::<f32>(&tcfg, &tiny_model(), &manifest).unwrap();
        assert!(out.log.records.is_empty());
        assert!(out.aborted.is_none());
        let built = build_model::<f32>(&tiny_model(), tcfg.seed).unwrap();
        for (a, b) in out.checkpoint.params.iter().zip(built.parameters()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn seeded_runs_reproduce_logs_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 2);
        let tcfg = TrainConfig {
            epochs: 5,
            patch_size: 32,
            batch_size: 2,
            seed: 123,
            ..TrainConfig::default()
        };
        let a = train_run::<f32>(&tcfg, &tiny_model(), &manifest).unwrap();
        let b = train_run::<f32>(&tcfg, &tiny_model(), &manifest).unwrap();
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        for (pa, pb) in a.checkpoint.params.iter().zip(&b.checkpoint.params) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 2);
        let tcfg = TrainConfig {
            epochs: 3,
            patch_size: 32,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mcfg = tiny_model();
        let out = train_run::<f32>(&tcfg, &mcfg, &manifest).unwrap();
        let path = dir.path().join("ck.cdcn");
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, out.checkpoint.step);
        assert_eq!(loaded.rng, out.checkpoint.rng);

        let p1: NetworkParams<f32> = out.checkpoint.restore_model().unwrap();
        let p2: NetworkParams<f32> = loaded.restore_model().unwrap();
        let img = procedural_sharp::<f32>(32, 32, 8);
        let run = |params: &NetworkParams<f32>| {
            let mut tape: Tape<f32> = Tape::new();
            let bound = params.bind(&mut tape);
            let b = tape.constant(img.clone());
            let outs = model_forward(&mut tape, &bound, &mcfg, b);
            tape.value(outs[0].restorations[2].unwrap()).data().to_vec()
        };
        assert_eq!(run(&p1), run(&p2));
    }

    #[test]
    fn checkpoint_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 2);
        let tcfg = TrainConfig {
            epochs: 1,
            patch_size: 32,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let out = train_run::<f32>(&tcfg, &tiny_model(), &manifest).unwrap();
        let mut ck = out.checkpoint;
        // a model with a different width cannot accept these parameters
        ck.model.base_channels = 8;
        let err = ck.restore_model::<f32>().unwrap_err();
        assert!(err.to_string().contains("l1.enc1.embed0.w"), "{err}");
    }

    #[test]
    fn checkpoint_trailing_bytes_fail_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 2);
        let tcfg = TrainConfig {
            epochs: 1,
            patch_size: 32,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let out = train_run::<f32>(&tcfg, &tiny_model(), &manifest).unwrap();
        let path = dir.path().join("ck.cdcn");
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"junk");
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");

        let truncated = &bytes[..bytes.len() - 100];
        std::fs::write(&path, truncated).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
