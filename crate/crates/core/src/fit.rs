//! Fitting any readout kind on a [`Dataset`]: closed-form ridge or the
//! gradient training loop.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{noise_ceiling, noise_normalized_accuracy, VoxelReport};
use crate::readouts::ridge::{parse_lambda_grid, ridge_fit};
use crate::readouts::{
    FactorizedDims, FactorizedReadout, GaussianReadout, Model, ReadoutKind, RidgeModel, SstConfig, SstReadout,
    HIDDEN_DIM,
};
use crate::readouts::gaussian::GaussianInit;
use crate::sampler::Padding;
use crate::tensor_io::Dataset;
use crate::training::{train, TrainConfig, TrainHistory};

/// Everything `fit` needs besides the data. Serialized as the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub train: TrainConfig,
    /// `lo:hi:count` log-spaced ridge penalties.
    pub lambda_grid: String,
    pub folds: usize,
    pub bias: bool,
    pub padding: Padding,
    pub hidden: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            train: TrainConfig::default(),
            lambda_grid: "1e-3:1e5:9".into(),
            folds: 5,
            bias: false,
            padding: Padding::Zeros,
            hidden: HIDDEN_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSummary {
    pub best_lambda: f64,
    /// `(lambda, mean validation Pearson)` per grid point.
    pub cv_scores: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    pub history: Option<TrainHistory>,
    pub ridge: Option<RidgeSummary>,
}

/// Initializes a trainable readout sized for `data`. The RNG is seeded from
/// the training seed on a separate stream from the shuffling RNG.
pub fn init_model(kind: ReadoutKind, data: &Dataset, cfg: &FitConfig) -> Result<Model> {
    let f = &data.features;
    let dims = FactorizedDims { voxels: data.voxels(), channels: f.channels, width: f.width, height: f.height };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(1);
    Ok(match kind {
        ReadoutKind::Factorized => Model::Factorized(FactorizedReadout::init(dims, cfg.bias, &mut rng)?),
        ReadoutKind::Gaussian => {
            let mut g = GaussianReadout::init(dims.voxels, dims.channels, dims.width, dims.height, GaussianInit::default(), &mut rng)?;
            g.padding = cfg.padding;
            Model::Gaussian(g)
        }
        ReadoutKind::Sst => {
            let loc = data
                .localization
                .as_ref()
                .ok_or_else(|| Error::Config("localization embeddings required".into()))?;
            let config = SstConfig { loc_dim: loc.dim, hidden: cfg.hidden, bias: cfg.bias, padding: cfg.padding };
            Model::Sst(SstReadout::init(dims, config, &mut rng)?)
        }
        ReadoutKind::Ridge => return Err(Error::Config("ridge readouts are solved, not initialized".into())),
    })
}

/// Fits `kind` on the train split. Ridge picks its penalty by k-fold CV
/// inside the train split; the others train with early stopping on val.
pub fn fit(kind: ReadoutKind, data: &Dataset, cfg: &FitConfig) -> Result<FitOutcome> {
    if kind == ReadoutKind::Ridge {
        return fit_ridge(data, cfg);
    }
    let mut model = init_model(kind, data, cfg)?;
    let history = match &mut model {
        Model::Factorized(m) => train(m, data, &cfg.train)?,
        Model::Gaussian(m) => train(m, data, &cfg.train)?,
        Model::Sst(m) => train(m, data, &cfg.train)?,
        Model::Ridge(_) => unreachable!(),
    };
    Ok(FitOutcome { model, history: Some(history), ridge: None })
}

fn fit_ridge(data: &Dataset, cfg: &FitConfig) -> Result<FitOutcome> {
    let grid = parse_lambda_grid(&cfg.lambda_grid)?;
    let train_idx = &data.splits.train;
    if train_idx.len() < cfg.folds {
        return Err(Error::Config(format!("ridge needs at least {} train stimuli, got {}", cfg.folds, train_idx.len())));
    }
    let f = &data.features;
    let e = f.sample_len();
    let n = data.voxels();
    let targets = data.responses.averaged();
    let x = DMatrix::from_fn(train_idx.len(), e, |r, c| f.sample(train_idx[r])[c]);
    let y = DMatrix::from_fn(train_idx.len(), n, |r, c| targets[train_idx[r] * n + c]);
    let fitted = ridge_fit(&x, &y, &grid, cfg.folds)?;
    let model = RidgeModel::from_fit(&fitted, f.channels, f.width, f.height);
    let ridge = RidgeSummary { best_lambda: fitted.best_lambda, cv_scores: fitted.cv_scores };
    Ok(FitOutcome { model: Model::Ridge(model), history: None, ridge: Some(ridge) })
}


/// Eval-mode predictions on `indices` scored against repeat-averaged
/// responses. The noise ceiling, when the data has repeats, is estimated
/// from all stimuli. Returns the report and the `T x N` predictions.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize], name: &str) -> Result<(VoxelReport, Vec<f64>)> {
    if model.voxels() != data.voxels() {
        return Err(Error::shape("model vs dataset voxels", &[model.voxels()], &[data.voxels()]));
    }
    let n = data.voxels();
    let pred = model.predict(data, indices)?;
    let targets = data.responses.averaged();
    let target: Vec<f64> = indices.iter().flat_map(|&i| targets[i * n..(i + 1) * n].iter().copied()).collect();
    let nc = if data.responses.repeats >= 2 { Some(noise_ceiling(&data.responses)?.nc) } else { None };
    let report = noise_normalized_accuracy(name, &pred, &target, indices.len(), n, nc.as_deref())?;
    Ok((report, pred))
}
