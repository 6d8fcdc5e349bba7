//! Model checkpoints: a directory holding one VXT1 file per parameter block
//! plus `index.json` describing the readout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    FactorizedDims, FactorizedReadout, GaussianReadout, Readout, ReadoutKind, RidgeModel, SampleInput, SstConfig,
    SstReadout,
};
use crate::diffcore::ParamBundle;
use crate::error::{Error, Result};
use crate::sampler::Padding;
use crate::tensor_io::{read_tensor, write_tensor, Dataset, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub voxels: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub loc_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub kind: ReadoutKind,
    pub dims: ModelDims,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Parameter block name -> file name, in bundle order.
    pub tensors: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ridge(RidgeModel),
    Factorized(FactorizedReadout),
    Gaussian(GaussianReadout),
    Sst(SstReadout),
}

impl Model {
    pub fn kind(&self) -> ReadoutKind {
        match self {
            Model::Ridge(_) => ReadoutKind::Ridge,
            Model::Factorized(_) => ReadoutKind::Factorized,
            Model::Gaussian(_) => ReadoutKind::Gaussian,
            Model::Sst(_) => ReadoutKind::Sst,
        }
    }

    pub fn voxels(&self) -> usize {
        match self {
            Model::Ridge(m) => m.voxels,
            Model::Factorized(m) => m.voxels(),
            Model::Gaussian(m) => m.voxels(),
            Model::Sst(m) => m.voxels(),
        }
    }

    pub fn learnable_count(&self) -> usize {
        match self {
            Model::Ridge(m) => m.weights.len(),
            Model::Factorized(m) => m.params().num_params(),
            Model::Gaussian(m) => m.params().num_params(),
            Model::Sst(m) => m.params().num_params(),
        }
    }

    pub fn predict_sample(&self, x: SampleInput<'_>) -> Result<Vec<f64>> {
        match self {
            Model::Ridge(m) => m.predict(x.features),
            Model::Factorized(m) => m.predict(x),
            Model::Gaussian(m) => m.predict(x),
            Model::Sst(m) => m.predict(x),
        }
    }

    /// Eval-mode predictions for `indices`, row-major `len(indices) x N`.
    pub fn predict(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let rows: Vec<Vec<f64>> = indices
            .par_iter()
            .map(|&i| self.predict_sample(SampleInput::from_sets(&data.features, data.localization.as_ref(), i)))
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }

    fn index_and_bundle(&self) -> (CheckpointIndex, ParamBundle) {
        let mut index = CheckpointIndex {
            kind: self.kind(),
            dims: ModelDims { voxels: 0, channels: 0, width: 0, height: 0, loc_dim: None },
            bias: false,
            padding: Padding::Zeros,
            hidden: None,
            lambda: None,
            tensors: Vec::new(),
        };
        let bundle = match self {
            Model::Ridge(m) => {
                index.dims = ModelDims { voxels: m.voxels, channels: m.channels, width: m.width, height: m.height, loc_dim: None };
                index.lambda = Some(m.lambda);
                let mut b = ParamBundle::new();
                b.push("weights", vec![m.voxels, m.input_len()], m.weights.clone()).expect("consistent");
                b
            }
            Model::Factorized(m) => {
                let d = m.dims;
                index.dims = ModelDims { voxels: d.voxels, channels: d.channels, width: d.width, height: d.height, loc_dim: None };
                index.bias = m.bias;
                m.params().clone()
            }
            Model::Gaussian(m) => {
                index.dims = ModelDims { voxels: m.voxels, channels: m.channels, width: m.width, height: m.height, loc_dim: None };
                index.padding = m.padding;
                m.params().clone()
            }
            Model::Sst(m) => {
                let d = m.dims;
                index.dims = ModelDims {
                    voxels: d.voxels,
                    channels: d.channels,
                    width: d.width,
                    height: d.height,
                    loc_dim: Some(m.config.loc_dim),
                };
                index.bias = m.config.bias;
                index.padding = m.config.padding;
                index.hidden = Some(m.config.hidden);
                m.params().clone()
            }
        };
        index.tensors = bundle.blocks().iter().map(|b| (b.name.clone(), format!("{}.vxt", b.name))).collect();
        (index, bundle)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (index, bundle) = self.index_and_bundle();
        for (block, (_, file)) in bundle.blocks().iter().zip(&index.tensors) {
            let t = Tensor::from_f64(block.shape.clone(), block.value.clone())?;
            write_tensor(&t, dir.join(file))?;
        }
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CheckpointIndex = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
        let mut bundle = ParamBundle::new();
        let mut tensors = BTreeMap::new();
        for (name, file) in &index.tensors {
            let t = read_tensor(dir.join(file))?;
            tensors.insert(name.clone(), t.shape().to_vec());
            bundle.push(name, t.shape().to_vec(), t.into_f64_vec())?;
        }
        let d = index.dims;
        let fdims = FactorizedDims { voxels: d.voxels, channels: d.channels, width: d.width, height: d.height };
        let model = match index.kind {
            ReadoutKind::Ridge => {
                let weights = bundle
                    .index_of("weights")
                    .map(|i| bundle.blocks()[i].value.clone())
                    .ok_or_else(|| Error::Config("ridge checkpoint missing `weights`".into()))?;
                if weights.len() != d.voxels * d.channels * d.width * d.height {
                    return Err(Error::shape("ridge weights", &[d.voxels, d.channels, d.width, d.height], &[weights.len()]));
                }
                Model::Ridge(RidgeModel {
                    voxels: d.voxels,
                    channels: d.channels,
                    width: d.width,
                    height: d.height,
                    lambda: index.lambda.unwrap_or(0.0),
                    weights,
                })
            }
            ReadoutKind::Factorized => Model::Factorized(FactorizedReadout::from_bundle(fdims, bundle)?),
            ReadoutKind::Gaussian => {
                let mut g = GaussianReadout::from_bundle(d.voxels, d.channels, d.width, d.height, bundle)?;
                g.padding = index.padding;
                Model::Gaussian(g)
            }
            ReadoutKind::Sst => {
                let config = SstConfig {
                    loc_dim: d.loc_dim.ok_or_else(|| Error::Config("sst checkpoint needs dims.loc_dim".into()))?,
                    hidden: index.hidden.unwrap_or(super::HIDDEN_DIM),
                    bias: index.bias,
                    padding: index.padding,
                };
                Model::Sst(SstReadout::from_bundle(fdims, config, bundle)?)
            }
        };
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::readouts::gaussian::GaussianInit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reload_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = FactorizedDims { voxels: 3, channels: 2, width: 4, height: 5 };
        let models = vec![
            Model::Factorized(FactorizedReadout::init(d, true, &mut rng).unwrap()),
            Model::Gaussian(GaussianReadout::init(3, 2, 4, 5, GaussianInit::default(), &mut rng).unwrap()),
            Model::Sst(SstReadout::init(d, SstConfig { loc_dim: 6, ..Default::default() }, &mut rng).unwrap()),
            Model::Ridge(RidgeModel { voxels: 2, channels: 1, width: 1, height: 3, lambda: 0.5, weights: vec![1., 2., 3., 4., 5., 6.] }),
        ];
        for m in models {
            let dir = tempfile::tempdir().unwrap();
            m.save(dir.path()).unwrap();
            assert_eq!(Model::load(dir.path()).unwrap(), m);
        }
    }
}
