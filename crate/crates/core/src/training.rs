//! Composite MSE + correlation loss and the mini-batch training loop.

use std::collections::HashSet;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, AdamConfig, AdamState, ParamBundle};
use crate::error::{Error, Result};
use crate::eval::pearson_per_voxel;
use crate::readouts::{Readout, SampleInput};
use crate::tensor_io::{Dataset, Splits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub w_mse: f64,
    pub w_corr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            micro_batch: 4,
            accumulation_steps: 4,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            patience_epochs: 20,
            max_epochs: 200,
            seed: 0,
            w_mse: 0.5,
            w_corr: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.micro_batch == 0 {
            return fail("micro_batch must be >= 1".into());
        }
        if self.accumulation_steps == 0 {
            return fail("accumulation_steps must be >= 1".into());
        }
        if self.patience_epochs == 0 {
            return fail("patience_epochs must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be >= 1".into());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.w_mse < 0.0 || self.w_corr < 0.0 || (self.w_mse + self.w_corr - 1.0).abs() > 1e-9 {
            return fail(format!("w_mse ({}) and w_corr ({}) must be non-negative and sum to 1", self.w_mse, self.w_corr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub mse: f64,
    /// `mean_n (1 - r_n)`, or `None` when skipped for batches smaller than 2.
    pub corr: Option<f64>,
    /// `dL/dpred`, `B x N`.
    pub grad: Vec<f64>,
}

/// `w_mse * MSE + w_corr * mean_n(1 - r_n)` over a `B x N` batch, with `r_n`
/// the Pearson correlation of voxel `n` across the batch. Voxels with zero
/// variance count as `r = 0`.
pub fn composite_loss(pred: &[f64], target: &[f64], b: usize, n: usize, w_mse: f64, w_corr: f64) -> Result<LossOutput> {
    if pred.len() != b * n || target.len() != b * n {
        return Err(Error::shape("loss inputs", &[b, n], &[pred.len(), target.len()]));
    }
    let count = (b * n) as f64;
    let mut grad = vec![0.0; b * n];
    let mut mse = 0.0;
    for i in 0..b * n {
        let d = pred[i] - target[i];
        mse += d * d;
        grad[i] = w_mse * 2.0 * d / count;
    }
    mse /= count;
    if b < 2 {
        warn!("batch of {b} is too small for the correlation term; using MSE only");
        return Ok(LossOutput { loss: w_mse * mse, mse, corr: None, grad });
    }
    let mut corr = 0.0;
    for v in 0..n {
        let (mut mp, mut mt) = (0.0, 0.0);
        for i in 0..b {
            mp += pred[i * n + v];
            mt += target[i * n + v];
        }
        mp /= b as f64;
        mt /= b as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..b {
            let p = pred[i * n + v] - mp;
            let t = target[i * n + v] - mt;
            sxy += p * t;
            sxx += p * p;
            syy += t * t;
        }
        if sxx > 0.0 && syy > 0.0 {
            let (np, nt) = (sxx.sqrt(), syy.sqrt());
            let r = sxy / (np * nt);
            corr += 1.0 - r;
            // d r / d p_i = t~_i / (|p~||t~|) - r p~_i / |p~|^2
            let scale = w_corr / n as f64;
            for i in 0..b {
                let p = pred[i * n + v] - mp;
                let t = target[i * n + v] - mt;
                grad[i * n + v] -= scale * (t / (np * nt) - r * p / sxx);
            }
        } else {
            corr += 1.0;
        }
    }
    corr /= n as f64;
    Ok(LossOutput { loss: w_mse * mse + w_corr * corr, mse, corr: Some(corr), grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_pearson: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_pearson: f64,
    pub stop_reason: StopReason,
}

/// Patience-based early stopping on a score that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::NEG_INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Records the score of a (1-based) epoch. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Mean per-voxel Pearson of eval-mode predictions on `indices`.
pub fn mean_pearson_on<R: Readout>(model: &R, data: &Dataset, indices: &[usize], targets: &[f64]) -> Result<f64> {
    let n = model.voxels();
    let preds: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| model.predict(SampleInput::from_sets(&data.features, data.localization.as_ref(), i)))
        .collect::<Result<_>>()?;
    let pred = preds.concat();
    let target: Vec<f64> = indices.iter().flat_map(|&i| targets[i * n..(i + 1) * n].iter().copied()).collect();
    let r = pearson_per_voxel(&pred, &target, indices.len(), n)?;
    Ok(r.iter().sum::<f64>() / n as f64)
}

/// One optimizer step on the samples in `batch`.
///
/// The loss is computed over the whole effective batch; gradients are
/// accumulated one sample at a time in batch order, with each micro-batch's
/// gradient scaled by the number of micro-batches and the total divided by
/// it again before the Adam step.
#[allow(clippy::too_many_arguments)]
fn step<R: Readout>(
    model: &mut R,
    adam: &mut AdamState,
    data: &Dataset,
    targets: &[f64],
    batch: &[usize],
    micro_batch: usize,
    noise: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let n = model.voxels();
    let loc = data.localization.as_ref();
    let inputs: Vec<SampleInput<'_>> = batch.iter().map(|&i| SampleInput::from_sets(&data.features, loc, i)).collect();
    let noise_of = |j: usize| noise.get(j).filter(|z| !z.is_empty()).map(Vec::as_slice);

    let forward: Vec<(Vec<f64>, R::Cache)> = {
        let m = &*model;
        inputs.par_iter().enumerate().map(|(j, x)| m.forward(*x, noise_of(j))).collect::<Result<_>>()?
    };
    let pred: Vec<f64> = forward.iter().flat_map(|(y, _)| y.iter().copied()).collect();
    let target: Vec<f64> = batch.iter().flat_map(|&i| targets[i * n..(i + 1) * n].iter().copied()).collect();
    let loss = composite_loss(&pred, &target, batch.len(), n, cfg.w_mse, cfg.w_corr)?;
    if !loss.loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", loss.loss)));
    }
    let k = batch.len().div_ceil(micro_batch) as f64;
    let grads: Vec<_> = {
        let m = &*model;
        inputs
            .par_iter()
            .zip(forward.par_iter())
            .enumerate()
            .map(|(j, (x, (_, cache)))| {
                let dy: Vec<f64> = loss.grad[j * n..(j + 1) * n].iter().map(|g| g * k).collect();
                m.backward(*x, cache, noise_of(j), &dy)
            })
            .collect::<Result<_>>()?
    };
    let params = model.params_mut();
    for g in &grads {
        params.accumulate(g)?;
    }
    params.scale_grads(1.0 / k);
    adam_step(params, adam)?;
    model.project();
    Ok(loss.loss)
}

/// Trains `model` on the train split, keeping the parameters of the epoch
/// with the best validation Pearson.
pub fn train<R: Readout>(model: &mut R, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.splits.train.len() < 2 || data.splits.val.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 train and 2 val stimuli (got {} / {})",
            data.splits.train.len(),
            data.splits.val.len()
        )));
    }
    if model.needs_localization() && data.localization.is_none() {
        return Err(Error::Config("localization embeddings required".into()));
    }
    if model.voxels() != data.voxels() {
        return Err(Error::shape("model vs dataset voxels", &[model.voxels()], &[data.voxels()]));
    }
    if model.input_len() != data.features.sample_len() {
        return Err(Error::shape("model vs dataset features", &[model.input_len()], &data.features.shape()));
    }

    let targets = data.responses.averaged();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params(), cfg.adam())?;
    let mut stopper = EarlyStopping::new(cfg.patience_epochs);
    let mut best: ParamBundle = model.params().clone();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_pearson: Vec::new(),
        best_epoch: 0,
        best_val_pearson: f64::NEG_INFINITY,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut order = data.splits.train.clone();
    let eff = cfg.effective_batch();
    let noise_len = model.noise_len();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (b, batch) in order.chunks(eff).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let noise: Vec<Vec<f64>> = batch
                .iter()
                .map(|_| (0..noise_len).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let loss = step(model, &mut adam, data, &targets, batch, cfg.micro_batch, &noise, cfg).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {b}: {m}")),
                Error::NonFiniteGradient { block } => {
                    Error::Numerical(format!("epoch {epoch}, batch {b}: non-finite gradient in `{block}`"))
                }
                other => other,
            })?;
            total += loss;
            steps += 1;
        }
        let train_loss = total / steps.max(1) as f64;
        let val = mean_pearson_on(model, data, &data.splits.val, &targets)?;
        history.train_loss.push(train_loss);
        history.val_pearson.push(val);
        let (improved, stop) = stopper.observe(epoch, val);
        if improved {
            best = model.params().clone();
        }
        debug!("epoch {epoch}: train loss {train_loss:.6}, val pearson {val:.6}");
        if stop {
            history.stop_reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_val) = stopper.best();
    history.best_epoch = best_epoch;
    history.best_val_pearson = best_val;
    *model.params_mut() = best;
    info!(
        "{} training stopped ({:?}) after {} epochs; best epoch {best_epoch}, val pearson {best_val:.4}",
        model.kind(),
        history.stop_reason,
        history.val_pearson.len()
    );
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    Fractions { train: f64, val: f64, test: f64 },
    /// Explicit validation and test lists; everything else is training.
    Explicit { val: Vec<usize>, test: Vec<usize> },
}

/// Partitions `0..stimuli`. Fraction splits shuffle under `seed` and round
/// the train and val sizes; the test split takes the remainder.
pub fn split_dataset(stimuli: usize, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    match spec {
        SplitSpec::Fractions { train, val, test } => {
            if [*train, *val, *test].iter().any(|f| *f < 0.0) || (train + val + test - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("split fractions must be non-negative and sum to 1, got {train}/{val}/{test}")));
            }
            let mut idx: Vec<usize> = (0..stimuli).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_train = ((train * stimuli as f64).round() as usize).min(stimuli);
            let n_val = ((val * stimuli as f64).round() as usize).min(stimuli - n_train);
            let mut s = Splits {
                train: idx[..n_train].to_vec(),
                val: idx[n_train..n_train + n_val].to_vec(),
                test: idx[n_train + n_val..].to_vec(),
            };
            s.train.sort_unstable();
            s.val.sort_unstable();
            s.test.sort_unstable();
            Ok(s)
        }
        SplitSpec::Explicit { val, test } => {
            let mut seen = HashSet::new();
            for &i in val.iter().chain(test) {
                if i >= stimuli {
                    return Err(Error::Config(format!("stimulus {i} out of range (stimuli = {stimuli})")));
                }
                if !seen.insert(i) {
                    return Err(Error::Config(format!("stimulus {i} appears in more than one explicit list")));
                }
            }
            let train = (0..stimuli).filter(|i| !seen.contains(i)).collect();
            Ok(Splits { train, val: val.clone(), test: test.clone() })
        }
    }
}
