//! PSNR loss, the seeded training loop with TD-tail augmentation, loss
//! history and resumable training state.

mod state;

pub use state::{load_state, save_state, TrainState, MODEL_FILE};

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{adamw_step, AdamWConfig, CosineSchedule, OptimState, Tape, Tensor, TensorError, LR_MAX, LR_MIN};
use crate::net::{diff_tensor, forward_tensors, frame_tensor, ArchConfig, ModelParams, Net, NetError, NetInput};
use crate::sensor::{augment_td_tail, CvsSample, Frame, SensorError, MAX_TD_TAIL};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (batch samples {batch:?})")]
    NonFinite { step: usize, batch: Vec<usize> },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("training state: {0}")]
    State(String),
}

/// Optimizer, schedule, loss and data-pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub td_tail_augment: bool,
    pub lambda_psnr: f64,
    pub eps_loss: f64,
    /// Square random crop side used for training; `None` trains on full frames.
    pub crop: Option<usize>,
    /// Caps the schedule length below `epochs * batches_per_epoch`.
    pub max_steps: Option<usize>,
    /// Seed of the weight initialization.
    pub init_seed: u64,
    /// Start with a zeroed output convolution, so the untrained network returns its input.
    pub zero_init_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: LR_MAX,
            lr_min: LR_MIN,
            weight_decay: 1e-4,
            betas: [0.9, 0.99],
            adam_eps: 1e-8,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            td_tail_augment: false,
            lambda_psnr: 0.5,
            eps_loss: 1e-8,
            crop: None,
            max_steps: None,
            init_seed: 0,
            zero_init_output: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lr_max) || !finite_nonneg(self.lr_min) || self.lr_min > self.lr_max {
            return bad("learning rates must satisfy 0 <= lr_min <= lr_max");
        }
        if !finite_nonneg(self.weight_decay) {
            return bad("weight_decay must be non-negative");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.eps_loss > 0.0) {
            return bad("adam_eps and eps_loss must be positive");
        }
        if !(self.lambda_psnr > 0.0 && self.lambda_psnr <= 1.0) {
            return bad("lambda_psnr must lie in (0, 1]");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.crop == Some(0) || self.max_steps == Some(0) {
            return bad("crop and max_steps must be positive when set");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, beta1: self.betas[0], beta2: self.betas[1], eps: self.adam_eps }
    }
}

/// `lambda * 10 * log10(MSE + eps)`, the negated, weighted PSNR.
pub fn psnr_loss(pred: &Frame, gt: &Frame, lambda: f64, eps: f64) -> Result<f64, TrainError> {
    if !pred.same_extent(gt) || pred.channels() != gt.channels() {
        return Err(TrainError::Tensor(TensorError::Shape("loss operands differ in shape".into())));
    }
    let tape = Tape::<f64>::inference();
    let p = tape.constant(frame_tensor(pred));
    let loss = tape.psnr_loss(p, &frame_tensor(gt), lambda, eps)?;
    let v = tape.value(loss).data()[0];
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Writes `step,lr,loss` rows.
pub fn write_history_csv<W: Write>(mut w: W, history: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,lr,loss")?;
    for r in history {
        writeln!(w, "{},{:e},{}", r.step, r.lr, r.loss)?;
    }
    Ok(())
}

/// Mini-batches of sample indices for one epoch, grouped by TD count and extent.
pub fn epoch_batches(dataset: &[CvsSample], batch_size: usize, cropped: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let mut groups: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for i in order {
        let s = &dataset[i];
        let key = if cropped { (s.td_seq.len(), 0, 0) } else { (s.td_seq.len(), s.height(), s.width()) };
        groups.entry(key).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = groups.into_values().flat_map(|g| g.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>()).collect();
    batches.shuffle(rng);
    batches
}

/// Total optimizer steps implied by `config` for `dataset`.
pub fn planned_steps(dataset: &[CvsSample], config: &TrainConfig) -> usize {
    let mut counts: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for s in dataset {
        let key = if config.crop.is_some() { (s.td_seq.len(), 0, 0) } else { (s.td_seq.len(), s.height(), s.width()) };
        *counts.entry(key).or_default() += 1;
    }
    let per_epoch: usize = counts.values().map(|c| c.div_ceil(config.batch_size.max(1))).sum();
    let total = per_epoch * config.epochs;
    config.max_steps.map_or(total, |m| m.min(total))
}

fn crop_tensor(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let (b, c, h, w) = t.dims4().expect("network tensors are rank 4");
    let mut data = Vec::with_capacity(b * c * size * size);
    for plane in t.data().chunks_exact(h * w) {
        for y in top..top + size {
            data.extend_from_slice(&plane[y * w + left..y * w + left + size]);
        }
    }
    Tensor::new(&[b, c, size, size], data).expect("crop within bounds")
}

/// Network input and target for one sample, after optional augmentation.
fn sample_input(sample: &CvsSample, tail: Option<usize>) -> Result<(NetInput<f32>, Tensor<f32>), TrainError> {
    let mut input = NetInput::from_sample(sample, sample.gt_index)?;
    if let Some(m) = tail {
        let aug = augment_td_tail(sample, &sample.extra_td, m)?;
        let last = aug.td_seq.len() - 1;
        let td = crate::sensor::dequantize(&aug.td_seq[last], crate::sensor::DIFF_BITS)?;
        input.tds[last] = diff_tensor(&td);
    }
    Ok((input, frame_tensor(sample.target())))
}

/// Parameters, optimizer moments and history after training.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub optim: OptimState<f32>,
    pub history: Vec<LossRecord>,
    pub total_steps: usize,
}

/// Trains from a fresh initialization.
pub fn train(dataset: &[CvsSample], config: &TrainConfig, arch: &ArchConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut model = ModelParams::init(arch, config.init_seed)?;
    if config.zero_init_output {
        model.zero_output();
    }
    let state = TrainState { model, optim: OptimState::new(config.adamw()), step: 0, history: Vec::new() };
    train_from(state, dataset, config, |_| ControlFlow::Continue(()))
}

/// Continues training from `state` until the planned step count.
///
/// Batch order and augmentation depend only on `config.seed` and the epoch,
/// so an interrupted run resumes on the same data stream. `on_step` sees each
/// new history record and may stop training early by returning `Break`.
pub fn train_from(
    state: TrainState,
    dataset: &[CvsSample],
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let TrainState { mut model, mut optim, step: start, mut history } = state;
    let arch = model.arch;
    let m = arch.spatial_multiple();
    for s in dataset {
        s.validate()?;
        match config.crop {
            Some(c) if c % m != 0 || c > s.height() || c > s.width() => {
                return Err(TrainError::Config(format!("crop {c} must be a multiple of {m} within {}x{}", s.height(), s.width())));
            }
            None if s.height() % m != 0 || s.width() % m != 0 => {
                return Err(TrainError::Config(format!("sample extent {}x{} must be a multiple of {m}", s.height(), s.width())));
            }
            _ => {}
        }
    }
    let total = planned_steps(dataset, config);
    let schedule = CosineSchedule { lr_max: config.lr_max, lr_min: config.lr_min, total_steps: total };
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        let batches = epoch_batches(dataset, config.batch_size, config.crop.is_some(), &mut rng);
        let tails: Vec<Option<usize>> = dataset
            .iter()
            .map(|s| {
                let m: usize = rng.gen_range(1..=MAX_TD_TAIL);
                (config.td_tail_augment && !s.extra_td.is_empty()).then(|| m.min(s.extra_td.len()))
            })
            .collect();
        for batch in batches {
            if step >= total {
                break 'epochs;
            }
            // Crop offsets are drawn even when skipping, keeping the stream aligned on resume.
            let mut items = Vec::with_capacity(batch.len());
            for &i in &batch {
                let s = &dataset[i];
                let off = config.crop.map(|c| (rng.gen_range(0..=s.height() - c), rng.gen_range(0..=s.width() - c)));
                items.push((i, off));
            }
            if step < start {
                step += 1;
                continue;
            }
            let mut inputs = Vec::with_capacity(items.len());
            let mut targets = Vec::with_capacity(items.len());
            for (i, off) in items {
                let (mut input, mut target) = sample_input(&dataset[i], tails[i])?;
                if let (Some(c), Some((top, left))) = (config.crop, off) {
                    input = NetInput {
                        blur: crop_tensor(&input.blur, top, left, c),
                        sd: crop_tensor(&input.sd, top, left, c),
                        tds: input.tds.iter().map(|t| crop_tensor(t, top, left, c)).collect(),
                    };
                    target = crop_tensor(&target, top, left, c);
                }
                inputs.push(input);
                targets.push(target);
            }
            let input = NetInput::batch(&inputs)?;
            let target = crate::net::stack(&targets)?;

            let lr = schedule.lr_at(step)?;
            let tape = Tape::<f32>::new();
            let net = Net::bind(&tape, &model.params, &arch, true);
            let out = forward_tensors(&tape, &net, &input)?;
            let loss = tape.psnr_loss(out, &target, config.lambda_psnr, config.eps_loss)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite { step, batch });
            }
            let mut grads = tape.backward(loss).map_err(|e| match e {
                TensorError::NonFinite => TrainError::NonFinite { step, batch: batch.clone() },
                e => e.into(),
            })?;
            let named: BTreeMap<String, Tensor<f32>> =
                net.vars.iter().filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g))).collect();
            if named.values().any(|g| !g.all_finite()) {
                return Err(TrainError::NonFinite { step, batch });
            }
            adamw_step(&mut model.params, &named, &mut optim, lr)?;
            let rec = LossRecord { step, lr, loss: loss_value };
            let flow = on_step(&rec);
            history.push(rec);
            step += 1;
            if flow.is_break() {
                break 'epochs;
            }
        }
    }
    Ok(TrainOutcome { model, optim, history, total_steps: total })
}
