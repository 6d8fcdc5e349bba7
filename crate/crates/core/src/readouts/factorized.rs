//! Spatial-feature factorized readout.
//!
//! For one stimulus with features `E (C x P)`, spatial masks `S (N x P)`
//! and feature weights `F (N x C)`:
//!
//! ```text
//! A[n, c] = sum_p E[c, p] * S[n, p]
//! y[n]    = sum_c A[n, c] * F[n, c]   (+ b[n] when the bias is enabled)
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Readout, ReadoutKind, SampleInput};
use crate::diffcore::{Gradients, ParamBundle};
use crate::error::{Error, Result};

pub const SPATIAL: &str = "spatial";
pub const FEATURE: &str = "feature";
pub const BIAS: &str = "bias";

/// Forward pass for one stimulus. Returns `(y, A)` with `A` laid out `N x C`.
pub fn forward_sample(e: &[f64], s: &[f64], f: &[f64], n: usize, c: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; n * c];
    let mut y = vec![0.0; n];
    for v in 0..n {
        let sv = &s[v * p..(v + 1) * p];
        let mut acc = 0.0;
        for ch in 0..c {
            let ec = &e[ch * p..(ch + 1) * p];
            let dot: f64 = sv.iter().zip(ec).map(|(x, y)| x * y).sum();
            a[v * c + ch] = dot;
            acc += dot * f[v * c + ch];
        }
        y[v] = acc;
    }
    (y, a)
}

pub struct FactorizedGrads {
    pub ds: Vec<f64>,
    pub df: Vec<f64>,
    pub de: Option<Vec<f64>>,
}

/// Backward pass for one stimulus given `dy = dL/dy`.
#[allow(clippy::too_many_arguments)]
pub fn backward_sample(
    e: &[f64],
    s: &[f64],
    f: &[f64],
    a: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    p: usize,
    want_de: bool,
) -> FactorizedGrads {
    let mut ds = vec![0.0; n * p];
    let mut df = vec![0.0; n * c];
    let mut de = want_de.then(|| vec![0.0; c * p]);
    for v in 0..n {
        let g = dy[v];
        if g == 0.0 {
            continue;
        }
        let dsv = &mut ds[v * p..(v + 1) * p];
        for ch in 0..c {
            df[v * c + ch] = g * a[v * c + ch];
            let da = g * f[v * c + ch];
            let ec = &e[ch * p..(ch + 1) * p];
            for (d, x) in dsv.iter_mut().zip(ec) {
                *d += da * x;
            }
            if let Some(de) = de.as_mut() {
                let sv = &s[v * p..(v + 1) * p];
                for (d, x) in de[ch * p..(ch + 1) * p].iter_mut().zip(sv) {
                    *d += da * x;
                }
            }
        }
    }
    FactorizedGrads { ds, df, de }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorizedDims {
    pub voxels: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl FactorizedDims {
    pub fn plane(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedReadout {
    pub dims: FactorizedDims,
    pub bias: bool,
    params: ParamBundle,
}

/// Standard deviation of the random spatial-mask initialization.
pub const SPATIAL_INIT_STD: f64 = 0.01;

pub(crate) fn init_spatial_feature<R: Rng>(bundle: &mut ParamBundle, dims: FactorizedDims, rng: &mut R) -> Result<()> {
    let FactorizedDims { voxels: n, channels: c, .. } = dims;
    let p = dims.plane();
    let ns = Normal::new(0.0, SPATIAL_INIT_STD).unwrap();
    let nf = Normal::new(0.0, 1.0 / (c as f64).sqrt()).unwrap();
    let s: Vec<f64> = (0..n * p).map(|_| ns.sample(rng)).collect();
    let f: Vec<f64> = (0..n * c).map(|_| nf.sample(rng)).collect();
    bundle.push(SPATIAL, vec![n, dims.width, dims.height], s)?;
    bundle.push(FEATURE, vec![n, c], f)?;
    Ok(())
}

impl FactorizedReadout {
    pub fn init<R: Rng>(dims: FactorizedDims, bias: bool, rng: &mut R) -> Result<Self> {
        let mut params = ParamBundle::new();
        init_spatial_feature(&mut params, dims, rng)?;
        if bias {
            params.push(BIAS, vec![dims.voxels], vec![0.0; dims.voxels])?;
        }
        Ok(FactorizedReadout { dims, bias, params })
    }

    pub fn from_params(dims: FactorizedDims, spatial: Vec<f64>, feature: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        let mut params = ParamBundle::new();
        params.push(SPATIAL, vec![dims.voxels, dims.width, dims.height], spatial)?;
        params.push(FEATURE, vec![dims.voxels, dims.channels], feature)?;
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            params.push(BIAS, vec![dims.voxels], b)?;
        }
        Ok(FactorizedReadout { dims, bias: has_bias, params })
    }

    pub(crate) fn from_bundle(dims: FactorizedDims, params: ParamBundle) -> Result<Self> {
        let spatial = params.index_of(SPATIAL).map(|i| params.blocks()[i].value.clone());
        let feature = params.index_of(FEATURE).map(|i| params.blocks()[i].value.clone());
        let bias = params.index_of(BIAS).map(|i| params.blocks()[i].value.clone());
        match (spatial, feature) {
            (Some(s), Some(f)) => Self::from_params(dims, s, f, bias),
            _ => Err(Error::Config("factorized checkpoint needs `spatial` and `feature`".into())),
        }
    }
}

impl Readout for FactorizedReadout {
    type Cache = Vec<f64>;

    fn kind(&self) -> ReadoutKind {
        ReadoutKind::Factorized
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

    fn forward(&self, x: SampleInput<'_>, _noise: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(&x)?;
        let d = self.dims;
        let (mut y, a) = forward_sample(
            x.features,
            self.params.value(SPATIAL),
            self.params.value(FEATURE),
            d.voxels,
            d.channels,
            d.plane(),
        );
        if self.bias {
            for (y, b) in y.iter_mut().zip(self.params.value(BIAS)) {
                *y += b;
            }
        }
        Ok((y, a))
    }

    fn backward(&self, x: SampleInput<'_>, cache: &Vec<f64>, _noise: Option<&[f64]>, dy: &[f64]) -> Result<Gradients> {
        let d = self.dims;
        let g = backward_sample(
            x.features,
            self.params.value(SPATIAL),
            self.params.value(FEATURE),
            cache,
            dy,
            d.voxels,
            d.channels,
            d.plane(),
            false,
        );
        let mut out = vec![g.ds, g.df];
        if self.bias {
            out.push(dy.to_vec());
        }
        Ok(out)
    }
}

/// Batched factorized contraction: `features` is `B x C x W x H`, result `B x N`.
pub fn factorized_forward(features: &[f64], batch: usize, readout: &FactorizedReadout) -> Result<Vec<f64>> {
    let len = readout.input_len();
    if features.len() != batch * len {
        return Err(Error::shape("feature batch", &[batch, len], &[features.len()]));
    }
    let mut out = Vec::with_capacity(batch * readout.voxels());
    for sample in features.chunks_exact(len) {
        out.extend(readout.forward(SampleInput::new(sample), None)?.0);
    }
    Ok(out)
}
