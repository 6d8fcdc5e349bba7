//! Semantic spatial transformer readout.
//!
//! Per stimulus, two deformation networks map the localization embedding to
//! affine transforms: `theta1` (one per channel) warps the feature maps and
//! `theta2` (one per voxel) warps the spatial masks. The warped maps then go
//! through the factorized contraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::deformation::{self, DeformationNet, HIDDEN_DIM};
use super::factorized::{self, init_spatial_feature, FactorizedDims, BIAS, FEATURE, SPATIAL};
use super::{Readout, ReadoutKind, SampleInput, DEFAULT_LOC_DIM};
use crate::diffcore::{Gradients, ParamBundle};
use crate::error::{Error, Result};
use crate::sampler::{batch_affine_transform, batch_affine_transform_backward, AffineParams, Padding, Theta};

pub const THETA1_M1: &str = "theta1.m1";
pub const THETA1_M2: &str = "theta1.m2";
pub const THETA2_M1: &str = "theta2.m1";
pub const THETA2_M2: &str = "theta2.m2";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SstConfig {
    pub loc_dim: usize,
    pub hidden: usize,
    pub bias: bool,
    pub padding: Padding,
}

impl Default for SstConfig {
    fn default() -> Self {
        SstConfig { loc_dim: DEFAULT_LOC_DIM, hidden: HIDDEN_DIM, bias: false, padding: Padding::Zeros }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SstReadout {
    pub dims: FactorizedDims,
    pub config: SstConfig,
    params: ParamBundle,
}

#[derive(Debug, Clone)]
pub struct SstCache {
    h1: Vec<f64>,
    h2: Vec<f64>,
    theta1: AffineParams,
    theta2: AffineParams,
    features: Vec<f64>,
    masks: Vec<f64>,
    contraction: Vec<f64>,
}

impl SstReadout {
    /// Random masks and feature weights, random first deformation layers and
    /// zero second layers (identity transforms).
    pub fn init<R: Rng>(dims: FactorizedDims, config: SstConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamBundle::new();
        init_spatial_feature(&mut params, dims, rng)?;
        if config.bias {
            params.push(BIAS, vec![dims.voxels], vec![0.0; dims.voxels])?;
        }
        let net1 = DeformationNet::init(config.loc_dim, config.hidden, dims.channels, rng);
        let net2 = DeformationNet::init(config.loc_dim, config.hidden, dims.voxels, rng);
        Self::push_net(&mut params, THETA1_M1, THETA1_M2, net1)?;
        Self::push_net(&mut params, THETA2_M1, THETA2_M2, net2)?;
        Ok(SstReadout { dims, config, params })
    }

    fn push_net(params: &mut ParamBundle, m1: &str, m2: &str, net: DeformationNet) -> Result<()> {
        params.push(m1, vec![net.loc_dim, net.hidden], net.m1)?;
        params.push(m2, vec![net.hidden, 6 * net.maps], net.m2)
    }

    /// Builds from explicit factorized weights and deformation networks.
    pub fn from_parts(
        dims: FactorizedDims,
        config: SstConfig,
        spatial: Vec<f64>,
        feature: Vec<f64>,
        bias: Option<Vec<f64>>,
        net1: DeformationNet,
        net2: DeformationNet,
    ) -> Result<Self> {
        if net1.maps != dims.channels || net2.maps != dims.voxels {
            return Err(Error::shape("deformation outputs", &[dims.channels, dims.voxels], &[net1.maps, net2.maps]));
        }
        if net1.loc_dim != config.loc_dim || net2.loc_dim != config.loc_dim || net1.hidden != config.hidden || net2.hidden != config.hidden {
            return Err(Error::Config("deformation network sizes disagree with the SST config".into()));
        }
        let mut params = ParamBundle::new();
        params.push(SPATIAL, vec![dims.voxels, dims.width, dims.height], spatial)?;
        params.push(FEATURE, vec![dims.voxels, dims.channels], feature)?;
        if config.bias != bias.is_some() {
            return Err(Error::Config("bias presence disagrees with the SST config".into()));
        }
        if let Some(b) = bias {
            params.push(BIAS, vec![dims.voxels], b)?;
        }
        Self::push_net(&mut params, THETA1_M1, THETA1_M2, net1)?;
        Self::push_net(&mut params, THETA2_M1, THETA2_M2, net2)?;
        Ok(SstReadout { dims, config, params })
    }

    pub(crate) fn from_bundle(dims: FactorizedDims, config: SstConfig, params: ParamBundle) -> Result<Self> {
        let get = |name: &str| {
            params
                .index_of(name)
                .map(|i| params.blocks()[i].value.clone())
                .ok_or_else(|| Error::Config(format!("sst checkpoint missing `{name}`")))
        };
        let net = |m1: &str, m2: &str, maps: usize| -> Result<DeformationNet> {
            Ok(DeformationNet { loc_dim: config.loc_dim, hidden: config.hidden, maps, m1: get(m1)?, m2: get(m2)? })
        };
        let bias = if config.bias { Some(get(BIAS)?) } else { None };
        Self::from_parts(
            dims,
            config,
            get(SPATIAL)?,
            get(FEATURE)?,
            bias,
            net(THETA1_M1, THETA1_M2, dims.channels)?,
            net(THETA2_M1, THETA2_M2, dims.voxels)?,
        )
    }

    pub fn net(&self, which: u8) -> DeformationNet {
        let (m1, m2, maps) = match which {
            1 => (THETA1_M1, THETA1_M2, self.dims.channels),
            _ => (THETA2_M1, THETA2_M2, self.dims.voxels),
        };
        DeformationNet {
            loc_dim: self.config.loc_dim,
            hidden: self.config.hidden,
            maps,
            m1: self.params.value(m1).to_vec(),
            m2: self.params.value(m2).to_vec(),
        }
    }

    /// `(theta1, theta2)` for one embedding.
    pub fn thetas(&self, loc: &[f64]) -> Result<(AffineParams, AffineParams)> {
        if loc.len() != self.config.loc_dim {
            return Err(Error::shape("localization embedding", &[self.config.loc_dim], &[loc.len()]));
        }
        let hidden = self.config.hidden;
        let p = &self.params;
        let (_, t1) = deformation::forward_sample(loc, p.value(THETA1_M1), p.value(THETA1_M2), hidden, self.dims.channels);
        let (_, t2) = deformation::forward_sample(loc, p.value(THETA2_M1), p.value(THETA2_M2), hidden, self.dims.voxels);
        Ok((AffineParams { rows: t1 }, AffineParams { rows: t2 }))
    }
}

impl Readout for SstReadout {
    type Cache = SstCache;

    fn kind(&self) -> ReadoutKind {
        ReadoutKind::Sst
    }

    fn params(&self) -> &ParamBundle {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamBundle {
        &mut self.params
    }

    fn voxels(&self) -> usize {
        self.dims.voxels
    }

    fn input_len(&self) -> usize {
        self.dims.channels * self.dims.plane()
    }

    fn needs_localization(&self) -> bool {
        true
    }

    fn forward(&self, x: SampleInput<'_>, _noise: Option<&[f64]>) -> Result<(Vec<f64>, SstCache)> {
        self.check_input(&x)?;
        let loc = x.loc.expect("checked");
        let d = self.dims;
        let hidden = self.config.hidden;
        let p = &self.params;
        if loc.len() != self.config.loc_dim {
            return Err(Error::shape("localization embedding", &[self.config.loc_dim], &[loc.len()]));
        }
        let (h1, t1) = deformation::forward_sample(loc, p.value(THETA1_M1), p.value(THETA1_M2), hidden, d.channels);
        let (h2, t2) = deformation::forward_sample(loc, p.value(THETA2_M1), p.value(THETA2_M2), hidden, d.voxels);
        let theta1 = AffineParams { rows: t1 };
        let theta2 = AffineParams { rows: t2 };
        let features = batch_affine_transform(x.features, d.width, d.height, &theta1, self.config.padding)?;
        let masks = batch_affine_transform(p.value(SPATIAL), d.width, d.height, &theta2, self.config.padding)?;
        let (mut y, contraction) =
            factorized::forward_sample(&features, &masks, p.value(FEATURE), d.voxels, d.channels, d.plane());
        if self.config.bias {
            for (y, b) in y.iter_mut().zip(p.value(BIAS)) {
                *y += b;
            }
        }
        Ok((y, SstCache { h1, h2, theta1, theta2, features, masks, contraction }))
    }

    fn backward(&self, x: SampleInput<'_>, cache: &SstCache, _noise: Option<&[f64]>, dy: &[f64]) -> Result<Gradients> {
        let loc = x.loc.ok_or_else(|| Error::Config("localization embeddings required".into()))?;
        let d = self.dims;
        let p = &self.params;
        let g = factorized::backward_sample(
            &cache.features,
            &cache.masks,
            p.value(FEATURE),
            &cache.contraction,
            dy,
            d.voxels,
            d.channels,
            d.plane(),
            true,
        );
        let de = g.de.expect("requested");
        let (_, dtheta1) =
            batch_affine_transform_backward(x.features, d.width, d.height, &cache.theta1, self.config.padding, &de, false)?;
        let (dspatial, dtheta2) = batch_affine_transform_backward(
            p.value(SPATIAL),
            d.width,
            d.height,
            &cache.theta2,
            self.config.padding,
            &g.ds,
            true,
        )?;
        let (d1m1, d1m2) = deformation::backward_sample(loc, p.value(THETA1_M2), &cache.h1, &dtheta1);
        let (d2m1, d2m2) = deformation::backward_sample(loc, p.value(THETA2_M2), &cache.h2, &dtheta2);
        let mut out = vec![dspatial.expect("requested"), g.df];
        if self.config.bias {
            out.push(dy.to_vec());
        }
        out.extend([d1m1, d1m2, d2m1, d2m2]);
        Ok(out)
    }
}

/// Batched forward: `features` is `B x C x W x H`, `loc` is `B x L`.
pub fn sst_forward(features: &[f64], loc: Option<&[f64]>, batch: usize, readout: &SstReadout) -> Result<Vec<f64>> {
    let loc = loc.ok_or_else(|| Error::Config("localization embeddings required".into()))?;
    let len = readout.input_len();
    let l = readout.config.loc_dim;
    if features.len() != batch * len || loc.len() != batch * l {
        return Err(Error::shape("sst batch", &[batch, len, l], &[features.len(), loc.len()]));
    }
    let mut out = Vec::with_capacity(batch * readout.voxels());
    for (f, z) in features.chunks_exact(len).zip(loc.chunks_exact(l)) {
        out.extend(readout.forward(SampleInput::with_loc(f, z), None)?.0);
    }
    Ok(out)
}

/// Affine rows for every stimulus in `loc` (`B x L`), as `(theta1, theta2)` lists.
pub fn batch_thetas(readout: &SstReadout, loc: &[f64]) -> Result<(Vec<Theta>, Vec<Theta>)> {
    let l = readout.config.loc_dim;
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    for z in loc.chunks_exact(l) {
        let (a, b) = readout.thetas(z)?;
        t1.extend(a.rows);
        t2.extend(b.rows);
    }
    Ok((t1, t2))
}
