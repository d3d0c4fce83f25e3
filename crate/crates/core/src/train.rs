//! Minibatch training of [`ArmdnModel`]: Adam with a staircase learning-rate
//! decay, per-step dropout on the associative output, zero padding with loss
//! masks, best-validation checkpoint selection and per-vertical fine-tuning.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::armdn::{sample_dropout, ArmdnModel, ModelConfig, NetworkVariant, Sequence};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureSchema;

/// Consecutive non-finite batches tolerated before training aborts.
pub const MAX_SKIPPED_BATCHES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    /// Iterations between learning-rate decays.
    pub decay_every: usize,
    pub dropout_p: f64,
    pub epochs: usize,
    pub mixtures: usize,
    pub variant: NetworkVariant,
    pub hidden: usize,
    pub assoc_width: usize,
    pub embed_width: usize,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    /// Trailing training weeks held out for checkpoint selection.
    pub validation_weeks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr0: 1e-3,
            decay_factor: 0.96,
            decay_every: 1000,
            dropout_p: 0.5,
            epochs: 30,
            mixtures: 10,
            variant: NetworkVariant::Armdn,
            hidden: 50,
            assoc_width: 50,
            embed_width: 30,
            clip_norm: 5.0,
            validation_weeks: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size and decay_every must be positive".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr0 must be finite and non-negative, clip_norm positive".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            mixtures: if self.variant == NetworkVariant::Ar { 1 } else { self.mixtures },
            hidden: self.hidden,
            assoc_width: self.assoc_width,
            embed_width: self.embed_width,
        }
    }
}

/// Staircase decay: `lr0 · decay_factor^⌊step / decay_every⌋`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let exponent = step / config.decay_every as u64;
    config.lr0 * config.decay_factor.powi(exponent.min(i32::MAX as u64) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Pads every sequence to the longest one; padding cells are masked.
pub fn pad_batch(sequences: Vec<Sequence>) -> Vec<Sequence> {
    let len = sequences.iter().map(Sequence::len).max().unwrap_or(0);
    sequences.into_iter().map(|s| s.padded(len)).collect()
}

/// Samples `batch_size` sequences without replacement and pads them.
pub fn make_minibatch(pool: &[Sequence], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Sequence>> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("minibatch pool"));
    }
    let n = batch_size.min(pool.len());
    let picked = rand::seq::index::sample(rng, pool.len(), n);
    Ok(pad_batch(picked.iter().map(|i| pool[i].clone()).collect()))
}

/// Teacher-forced sequences split into fitting and validation parts.
///
/// Fitting sequences stop `validation_weeks` before each series' end.
/// Validation sequences cover the whole series with the loss kept only on
/// the held-out tail. Series too short to spare a tail are fitted whole.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub fit: Vec<Sequence>,
    pub validation: Vec<Sequence>,
}

impl TrainingData {
    pub fn new(dataset: &Dataset, schema: &FeatureSchema, validation_weeks: usize) -> Result<Self> {
        let mut fit = Vec::with_capacity(dataset.len());
        let mut validation = Vec::new();
        for s in dataset.series() {
            if validation_weeks > 0 && s.len() > validation_weeks {
                let cut = s.end_week() - validation_weeks as i64;
                let head = s.truncated(cut).expect("cut is inside the series");
                fit.push(Sequence::from_series(&head, schema)?);
                let full = Sequence::from_series(s, schema)?;
                let n = full.len();
                validation.push(full.masked_to(n - validation_weeks..n));
            } else {
                fit.push(Sequence::from_series(s, schema)?);
            }
        }
        if fit.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { fit, validation })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the end of the epoch.
    pub lr: f64,
    /// Teacher-forced NLL over the fitting cells, without dropout.
    pub train_nll: f64,
    pub val_nll: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation NLL (the last
    /// epoch when there is no validation data).
    pub model: ArmdnModel,
    pub log: Vec<EpochLog>,
    /// Dropout-on minibatch loss of every applied update.
    pub iteration_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub optimizer: AdamState,
}

impl TrainOutcome {
    /// JSON lines, one per epoch.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log line serializes") + "\n")
            .collect()
    }
}

fn batch_loss(model: &ArmdnModel, seqs: &[Sequence]) -> Result<Option<f64>> {
    if seqs.iter().all(|s| s.unmasked() == 0) {
        return Ok(None);
    }
    // Gradient-free chunks would be cheaper, but this keeps one loss path.
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in seqs.chunks(64) {
        let cells: usize = chunk.iter().map(Sequence::unmasked).sum();
        if cells == 0 {
            continue;
        }
        total += model.loss(chunk)? * cells as f64;
        n += cells;
    }
    Ok(Some(total / n as f64))
}

fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Runs `config.epochs` epochs from `model` with a fresh optimizer.
pub fn fit(mut model: ArmdnModel, data: &TrainingData, config: &TrainConfig, stream: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut adam = AdamState::new(model.params.len());
    let mut log = Vec::with_capacity(config.epochs);
    let mut iteration_losses = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut skipped = 0usize;
    let mut iteration = 0usize;
    let width = model.config.assoc_width;
    let mut order: Vec<usize> = (0..data.fit.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            iteration += 1;
            let batch = pad_batch(idx.iter().map(|&i| data.fit[i].clone()).collect());
            let masks: Vec<_> = if config.dropout_p > 0.0 {
                batch
                    .iter()
                    .map(|s| sample_dropout(s.len(), width, config.dropout_p, &mut rng))
                    .collect()
            } else {
                Vec::new()
            };
            let dropout = (config.dropout_p > 0.0).then_some(masks.as_slice());
            let (loss, mut grad) = model.loss_and_gradient(&batch, dropout)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                skipped += 1;
                if skipped >= MAX_SKIPPED_BATCHES {
                    return Err(Error::Diverged {
                        iteration,
                        consecutive: skipped,
                    });
                }
                continue;
            }
            skipped = 0;
            clip_gradient(&mut grad, config.clip_norm);
            let lr = lr_schedule(adam.step, config);
            adam_step(&mut model.params, &grad, &mut adam, lr)?;
            iteration_losses.push(loss);
        }
        let train_nll = batch_loss(&model, &data.fit)?.unwrap_or(f64::NAN);
        let val_nll = batch_loss(&model, &data.validation)?;
        let score = val_nll.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b || val_nll.is_none()) {
            best = Some((score, epoch, model.params.clone()));
        }
        log.push(EpochLog {
            epoch,
            lr: lr_schedule(adam.step, config),
            train_nll,
            val_nll,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        log,
        iteration_losses,
        best_epoch,
        optimizer: adam,
    })
}

/// Trains one model over every series of `dataset`.
pub fn train_global(dataset: &Dataset, schema: &FeatureSchema, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model = ArmdnModel::init(config.model_config(), schema, config.seed)?;
    let data = TrainingData::new(dataset, schema, config.validation_weeks)?;
    fit(model, &data, config, 1)
}

/// Continues training `model` on one vertical's series only.
pub fn finetune_vertical(
    model: &ArmdnModel,
    dataset: &Dataset,
    schema: &FeatureSchema,
    vertical_id: &str,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let subset = dataset.filter_vertical(vertical_id);
    if subset.is_empty() {
        return Err(Error::UnknownVertical(vertical_id.to_string()));
    }
    let data = TrainingData::new(&subset, schema, config.validation_weeks)?;
    fit(model.clone(), &data, config, 2)
}
