//! The four readout mechanisms mapping encoder feature maps to voxels.

pub mod checkpoint;
pub mod deformation;
pub mod factorized;
pub mod gaussian;
pub mod ridge;
pub mod sst;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, ParamBundle};
use crate::error::{Error, Result};
use crate::tensor_io::{FeatureSet, LocalizationEmbeddingSet};

pub use checkpoint::Model;
pub use deformation::{DeformationNet, HIDDEN_DIM};
pub use factorized::{factorized_forward, FactorizedDims, FactorizedReadout};
pub use gaussian::{GaussianReadout, Mode};
pub use ridge::{ridge_fit, RidgeFit, RidgeModel};
pub use sst::{SstConfig, SstReadout};

/// Default localization embedding size.
pub const DEFAULT_LOC_DIM: usize = 196;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutKind {
    /// Closed-form ridge regression on flattened features.
    #[serde(alias = "linear")]
    Ridge,
    Factorized,
    Gaussian,
    Sst,
}

impl ReadoutKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReadoutKind::Ridge => "ridge",
            ReadoutKind::Factorized => "factorized",
            ReadoutKind::Gaussian => "gaussian",
            ReadoutKind::Sst => "sst",
        }
    }
}

impl fmt::Display for ReadoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReadoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" | "linear" => Ok(ReadoutKind::Ridge),
            "factorized" => Ok(ReadoutKind::Factorized),
            "gaussian" => Ok(ReadoutKind::Gaussian),
            "sst" => Ok(ReadoutKind::Sst),
            other => Err(Error::Config(format!(
                "unknown readout kind `{other}` (expected ridge, factorized, gaussian or sst)"
            ))),
        }
    }
}

/// Learnable parameter count for a readout configuration, with the
/// deformation networks' hidden size fixed at [`HIDDEN_DIM`].
pub fn param_count(kind: ReadoutKind, n: usize, c: usize, w: usize, h: usize, l: usize) -> u64 {
    let (n, c, w, h, l) = (n as u64, c as u64, w as u64, h as u64, l as u64);
    let hidden = HIDDEN_DIM as u64;
    match kind {
        ReadoutKind::Ridge => n * c * h * w,
        ReadoutKind::Gaussian => n * (c + 7),
        ReadoutKind::Factorized => n * (c + w * h),
        ReadoutKind::Sst => n * (c + w * h) + hidden * 6 * (n + c) + l * hidden * 2,
    }
}

/// One stimulus worth of readout input.
#[derive(Debug, Clone, Copy)]
pub struct SampleInput<'a> {
    /// Flattened `C x W x H` feature map.
    pub features: &'a [f64],
    pub loc: Option<&'a [f64]>,
}

impl<'a> SampleInput<'a> {
    pub fn new(features: &'a [f64]) -> Self {
        SampleInput { features, loc: None }
    }

    pub fn with_loc(features: &'a [f64], loc: &'a [f64]) -> Self {
        SampleInput { features, loc: Some(loc) }
    }

    pub fn from_sets(features: &'a FeatureSet, loc: Option<&'a LocalizationEmbeddingSet>, i: usize) -> Self {
        SampleInput { features: features.sample(i), loc: loc.map(|l| l.sample(i)) }
    }
}

/// A gradient-trained readout. Forward and backward work on one stimulus at
/// a time so callers control batching and summation order.
pub trait Readout: Send + Sync {
    type Cache: Send + Sync;

    fn kind(&self) -> ReadoutKind;
    fn params(&self) -> &ParamBundle;
    fn params_mut(&mut self) -> &mut ParamBundle;
    fn voxels(&self) -> usize;
    /// Length of the flattened feature map each stimulus must supply.
    fn input_len(&self) -> usize;

    /// Number of standard-normal draws consumed per stimulus in training mode.
    fn noise_len(&self) -> usize {
        0
    }

    fn needs_localization(&self) -> bool {
        false
    }

    /// Projects parameters back onto their feasible set after an optimizer
    /// step.
    fn project(&mut self) {}

    /// `noise` is `Some` in training mode for readouts with `noise_len() > 0`.
    fn forward(&self, x: SampleInput<'_>, noise: Option<&[f64]>) -> Result<(Vec<f64>, Self::Cache)>;

    /// Parameter gradients for one stimulus given `dy = dL/dy`, in bundle order.
    fn backward(&self, x: SampleInput<'_>, cache: &Self::Cache, noise: Option<&[f64]>, dy: &[f64]) -> Result<Gradients>;

    fn predict(&self, x: SampleInput<'_>) -> Result<Vec<f64>> {
        Ok(self.forward(x, None)?.0)
    }

    fn check_input(&self, x: &SampleInput<'_>) -> Result<()> {
        if x.features.len() != self.input_len() {
            return Err(Error::shape("stimulus features", &[self.input_len()], &[x.features.len()]));
        }
        if self.needs_localization() && x.loc.is_none() {
            return Err(Error::Config("localization embeddings required".into()));
        }
        Ok(())
    }
}
