use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentSet, SliceStack, Split};
use crate::decoder::{total_loss, LossConfig};
use crate::error::{Error, Result};
use crate::metrics::{default_grid, evaluate, EvalReport, Prediction};
use crate::model::{Mode, Model, ParamCounts};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

use super::config::TrainConfig;
use super::dataset::{Dataset, SampleRef};

/// Training samples whose loss is tracked before and after a run.
pub const PROBE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Reconstruct the clean centre slice from a stack with extra noise.
    Denoise { noise: f64 },
    /// BCE on the fault mask plus the delta penalty.
    Segment { lambda_p: f32 },
}

/// Stacks to `[B, M, H, W]` inputs and `[B, 1, H, W]` mask targets.
pub fn segmentation_batch(stacks: &[SliceStack]) -> Result<(Tensor, Tensor)> {
    let s0 = stacks.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (m, h, w) = (s0.m(), s0.height, s0.width);
    let x: Vec<f32> = stacks.iter().flat_map(|s| s.channels.iter().copied()).collect();
    let y: Vec<f32> = stacks.iter().flat_map(|s| s.target.iter().map(|&v| v as f32)).collect();
    Ok((
        Tensor::new(&[stacks.len(), m, h, w], x)?,
        Tensor::new(&[stacks.len(), 1, h, w], y)?,
    ))
}

/// Noisy stacks and their clean centre slices.
pub fn denoise_batch(stacks: &[SliceStack], noise: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let (x, _) = segmentation_batch(stacks)?;
    let s0 = &stacks[0];
    let y: Vec<f32> = stacks.iter().flat_map(|s| s.center().iter().copied()).collect();
    let target = Tensor::new(&[stacks.len(), 1, s0.height, s0.width], y)?;
    let mut x = x;
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
        for v in x.data_mut() {
            *v += n.sample(rng) as f32;
        }
    }
    Ok((x, target))
}

fn loss_value(model: &Model, g: &mut Graph, x: Tensor, y: &Tensor, objective: Objective) -> Result<crate::tensor::Var> {
    let xv = g.constant(x);
    let logits = model.forward(g, xv)?;
    match objective {
        Objective::Denoise { .. } => g.mse(logits, y),
        Objective::Segment { lambda_p } => {
            total_loss(g, logits, y, &model.store, &model.delta_ids(), &LossConfig { lambda_p })
        }
    }
}

/// Evenly spaced training samples used to measure the loss without
/// sampling noise.
pub fn probe_refs(data: &Dataset) -> Vec<SampleRef> {
    let n = data.train.len();
    let k = PROBE_SIZE.min(n);
    (0..k).map(|j| data.train[j * n / k]).collect()
}

/// Mean objective over `refs`, without augmentation. Denoising probes use a
/// fixed noise draw.
pub fn probe_loss(model: &Model, data: &Dataset, refs: &[SampleRef], m: usize, objective: Objective) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let mut total = 0.0;
    for chunk in refs.chunks(8) {
        let stacks = chunk.iter().map(|&r| data.stack(r, m)).collect::<Result<Vec<_>>>()?;
        let (x, y) = match objective {
            Objective::Denoise { noise } => denoise_batch(&stacks, noise, &mut rng)?,
            Objective::Segment { .. } => segmentation_batch(&stacks)?,
        };
        let mut g = Graph::new();
        let l = loss_value(model, &mut g, x, &y, objective)?;
        total += g.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok(total / refs.len().max(1) as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    /// Minibatch loss at every step.
    pub losses: Vec<f64>,
    /// Loss on the fixed probe samples before and after training.
    pub probe_loss_initial: f64,
    pub probe_loss_final: f64,
    pub params: ParamCounts,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    pub wall_clock_s: f64,
    pub eval: Option<EvalReport>,
    pub config: TrainConfig,
}

impl RunReport {
    /// `1 - final / initial` on the probe samples.
    pub fn loss_reduction(&self) -> f64 {
        1.0 - self.probe_loss_final / self.probe_loss_initial
    }

    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        let strip = |r: &RunReport| {
            let mut v = serde_json::to_value(r).expect("report serializes");
            v["wall_clock_s"] = serde_json::Value::Null;
            v
        };
        strip(self) == strip(other)
    }
}

/// Runs `cfg.steps` Adam steps on `model` in its current mode. The caller
/// sets the mode; frozen tensors are checked bit-for-bit afterwards.
pub fn train_loop(model: &mut Model, data: &Dataset, cfg: &TrainConfig, objective: Objective) -> Result<RunReport> {
    let start = Instant::now();
    if data.train.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let (h, w) = data.image_dims();
    let size = model.config.encoder.image_size;
    if (h, w) != (size, size) {
        return Err(Error::shape("train", &[h, w], &[size, size]));
    }
    let m = model.config.encoder.input_channels;
    let augmentation = match objective {
        Objective::Segment { .. } => cfg.augmentation,
        Objective::Denoise { .. } => AugmentSet::None,
    };

    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(3);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.augment_params.seed);
    aug_rng.set_stream(4);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(5);

    let probes = probe_refs(data);
    let probe_loss_initial = probe_loss(model, data, &probes, m, objective)?;
    let reference = model.store.clone();
    let frozen_checksum_before = model.frozen_checksum();
    let mut adam = Adam::new(cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let stacks = (0..cfg.batch_size)
            .map(|_| {
                let r = data.train[sample_rng.random_range(0..data.train.len())];
                let s = data.stack(r, m)?;
                Ok(augment(&s, augmentation, &cfg.augment_params, &mut aug_rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = match objective {
            Objective::Denoise { noise } => denoise_batch(&stacks, noise, &mut noise_rng)?,
            Objective::Segment { .. } => segmentation_batch(&stacks)?,
        };
        let mut g = Graph::new();
        let loss = loss_value(model, &mut g, x, &y, objective)?;
        losses.push(g.value(loss).item() as f64);
        g.backward_into(loss, &mut model.store)?;
        adam.step(&mut model.store);
    }

    let changed = model.changed_frozen(&reference);
    if let Some(name) = changed.first() {
        return Err(Error::FrozenTensorChanged(name.clone()));
    }
    let probe_loss_final = probe_loss(model, data, &probes, m, objective)?;
    Ok(RunReport {
        mode: model.mode(),
        losses,
        probe_loss_initial,
        probe_loss_final,
        params: model.count_params(),
        frozen_checksum_before,
        frozen_checksum_after: model.frozen_checksum(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        eval: None,
        config: cfg.clone(),
    })
}

/// Trains a fresh model on the denoising pretext task.
pub fn pretext_pretrain(cfg: &TrainConfig, data: &Dataset) -> Result<(Model, RunReport)> {
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    model.set_mode(Mode::Pretext);
    let report = train_loop(
        &mut model,
        data,
        cfg,
        Objective::Denoise {
            noise: cfg.pretext_noise,
        },
    )?;
    Ok((model, report))
}

/// Freezes `backbone` to adapters, conv deltas and the output token, then
/// trains on fault masks and evaluates on the test split.
pub fn finetune(cfg: &TrainConfig, backbone: Model, data: &Dataset) -> Result<(Model, RunReport)> {
    let diff = backbone.config.mismatches(&cfg.model_config());
    if !diff.is_empty() {
        return Err(Error::CheckpointMismatch(format!(
            "mismatched fields: {}",
            diff.join(", ")
        )));
    }
    let mut model = backbone;
    model.config.encoder.balance = cfg.balance;
    model.encoder.config.balance = cfg.balance;
    model.set_mode(Mode::Finetune);
    segment(cfg, model, data)
}

/// Trains every parameter from scratch on fault masks.
pub fn train_full(cfg: &TrainConfig, data: &Dataset) -> Result<(Model, RunReport)> {
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    model.set_mode(Mode::Full);
    segment(cfg, model, data)
}

fn segment(cfg: &TrainConfig, mut model: Model, data: &Dataset) -> Result<(Model, RunReport)> {
    let mut report = train_loop(&mut model, data, cfg, Objective::Segment { lambda_p: cfg.lambda_p })?;
    let m = cfg.m;
    report.eval = Some(evaluate_split(&model, data, Split::Test, m)?);
    Ok((model, report))
}

/// Sigmoid probabilities `[B, H, W]` flattened, for a batch of stacks.
pub fn predict_batch(model: &Model, stacks: &[SliceStack]) -> Result<Vec<f32>> {
    let (x, _) = segmentation_batch(stacks)?;
    let logits = model.logits(x)?;
    Ok(logits.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
}

pub fn evaluate_split(model: &Model, data: &Dataset, split: Split, m: usize) -> Result<EvalReport> {
    let refs = data.split(split);
    let mut preds = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(16) {
        let stacks = chunk.iter().map(|&r| data.stack(r, m)).collect::<Result<Vec<_>>>()?;
        let probs = predict_batch(model, &stacks)?;
        let plane = stacks[0].plane();
        for (s, p) in stacks.iter().zip(probs.chunks(plane)) {
            preds.push(Prediction::new(
                format!("{}:{}", data.names[s.meta.volume], s.meta.crossline),
                s.height,
                s.width,
                p.to_vec(),
                s.target.clone(),
            )?);
        }
    }
    evaluate(&preds, &default_grid())
}

/// Adam settings for the pretext stage used by sweeps.
pub fn pretext_stage(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        mode: Mode::Pretext,
        steps: cfg.pretext.steps,
        adam: AdamConfig {
            lr: cfg.pretext.lr,
            ..cfg.adam
        },
        ..cfg.clone()
    }
}
