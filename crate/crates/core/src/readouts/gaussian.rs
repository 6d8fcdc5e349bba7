//! Gaussian 2D readout.
//!
//! Each voxel reads all channels at one position drawn from a bivariate
//! Gaussian `N(mu_n, A_n A_n^T)`. Training samples the position with the
//! reparameterization `mu_n + A_n * eps`; evaluation reads at `mu_n`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Readout, ReadoutKind, SampleInput};
use crate::diffcore::{Gradients, ParamBundle};
use crate::error::{Error, Result};
use crate::sampler::{Padding, Tap};

pub const MU: &str = "mu";
pub const COV: &str = "cov";
pub const BIAS: &str = "bias";
pub const FEATURE: &str = "feature";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianInit {
    /// Initial means are uniform in `[-mu_range, mu_range]^2`.
    pub mu_range: f64,
    /// Initial `A_n = sigma * I`.
    pub sigma: f64,
}

impl Default for GaussianInit {
    fn default() -> Self {
        GaussianInit { mu_range: 0.5, sigma: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianReadout {
    pub voxels: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub padding: Padding,
    params: ParamBundle,
}

impl GaussianReadout {
    pub fn init<R: Rng>(voxels: usize, channels: usize, width: usize, height: usize, init: GaussianInit, rng: &mut R) -> Result<Self> {
        let mu: Vec<f64> = (0..voxels * 2).map(|_| rng.random_range(-init.mu_range..=init.mu_range)).collect();
        let cov: Vec<f64> = (0..voxels).flat_map(|_| [init.sigma, 0.0, 0.0, init.sigma]).collect();
        let nf = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).unwrap();
        let feature: Vec<f64> = (0..voxels * channels).map(|_| nf.sample(rng)).collect();
        Self::from_params(voxels, channels, width, height, mu, cov, vec![0.0; voxels], feature)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_params(
        voxels: usize,
        channels: usize,
        width: usize,
        height: usize,
        mu: Vec<f64>,
        cov: Vec<f64>,
        bias: Vec<f64>,
        feature: Vec<f64>,
    ) -> Result<Self> {
        let mut params = ParamBundle::new();
        params.push(MU, vec![voxels, 2], mu)?;
        params.push(COV, vec![voxels, 2, 2], cov)?;
        params.push(BIAS, vec![voxels], bias)?;
        params.push(FEATURE, vec![voxels, channels], feature)?;
        Ok(GaussianReadout { voxels, channels, width, height, padding: Padding::Zeros, params })
    }

    pub(crate) fn from_bundle(voxels: usize, channels: usize, width: usize, height: usize, params: ParamBundle) -> Result<Self> {
        let get = |name: &str| {
            params
                .index_of(name)
                .map(|i| params.blocks()[i].value.clone())
                .ok_or_else(|| Error::Config(format!("gaussian checkpoint missing `{name}`")))
        };
        Self::from_params(voxels, channels, width, height, get(MU)?, get(COV)?, get(BIAS)?, get(FEATURE)?)
    }

    /// Sampling position of voxel `n` (normalized coordinates).
    fn position(&self, n: usize, noise: Option<&[f64]>) -> [f64; 2] {
        let mu = &self.params.value(MU)[2 * n..2 * n + 2];
        match noise {
            Some(eps) => {
                let a = &self.params.value(COV)[4 * n..4 * n + 4];
                let (e0, e1) = (eps[2 * n], eps[2 * n + 1]);
                [mu[0] + a[0] * e0 + a[1] * e1, mu[1] + a[2] * e0 + a[3] * e1]
            }
            None => [mu[0], mu[1]],
        }
    }

    /// Covariance `A_n A_n^T` of voxel `n`, row-major 2x2.
    pub fn covariance(&self, n: usize) -> [f64; 4] {
        let a = &self.params.value(COV)[4 * n..4 * n + 4];
        [
            a[0] * a[0] + a[1] * a[1],
            a[0] * a[2] + a[1] * a[3],
            a[2] * a[0] + a[3] * a[1],
            a[2] * a[2] + a[3] * a[3],
        ]
    }

    /// Batched forward over a `B x C x W x H` feature batch. `noise` holds
    /// `B x N x 2` standard-normal draws and is required in training mode.
    pub fn forward_batch(&self, features: &[f64], batch: usize, mode: Mode, noise: Option<&[f64]>) -> Result<Vec<f64>> {
        let len = self.input_len();
        if features.len() != batch * len {
            return Err(Error::shape("feature batch", &[batch, len], &[features.len()]));
        }
        let nl = self.noise_len();
        if mode == Mode::Train && noise.map(|z| z.len()) != Some(batch * nl) {
            return Err(Error::Config("training mode needs B x N x 2 position noise".into()));
        }
        let mut out = Vec::with_capacity(batch * self.voxels);
        for (b, sample) in features.chunks_exact(len).enumerate() {
            let z = match mode {
                Mode::Train => noise.map(|z| &z[b * nl..(b + 1) * nl]),
                Mode::Eval => None,
            };
            out.extend(self.forward(SampleInput::new(sample), z)?.0);
        }
        Ok(out)
    }
}

impl Readout for GaussianReadout {
    /// Interpolated channel values `V`, `N x C`.
    type Cache = Vec<f64>;

    fn kind(&self) -> ReadoutKind {
        ReadoutKind::Gaussian
    }

    fn params(&self) -> &ParamBundle {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamBundle {
        &mut self.params
    }

    fn voxels(&self) -> usize {
        self.voxels
    }

    fn input_len(&self) -> usize {
        self.channels * self.width * self.height
    }

    /// Keeps the means on the feature map, where the loss has gradient.
    fn project(&mut self) {
        for m in self.params.value_mut(MU) {
            *m = m.clamp(-1.0, 1.0);
        }
    }

    fn noise_len(&self) -> usize {
        2 * self.voxels
    }

    fn forward(&self, x: SampleInput<'_>, noise: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(&x)?;
        let (c, p) = (self.channels, self.width * self.height);
        let w = self.params.value(FEATURE);
        let bias = self.params.value(BIAS);
        let mut values = vec![0.0; self.voxels * c];
        let mut y = vec![0.0; self.voxels];
        for n in 0..self.voxels {
            let [px, py] = self.position(n, noise);
            let tap = Tap::new(px, py, self.width, self.height, self.padding);
            let mut acc = 0.0;
            for ch in 0..c {
                let v = tap.value(&x.features[ch * p..(ch + 1) * p]);
                values[n * c + ch] = v;
                acc += w[n * c + ch] * v;
            }
            y[n] = acc + bias[n];
        }
        Ok((y, values))
    }

    fn backward(&self, x: SampleInput<'_>, values: &Vec<f64>, noise: Option<&[f64]>, dy: &[f64]) -> Result<Gradients> {
        let (c, p) = (self.channels, self.width * self.height);
        let w = self.params.value(FEATURE);
        let mut dmu = vec![0.0; 2 * self.voxels];
        let mut dcov = vec![0.0; 4 * self.voxels];
        let mut dfeat = vec![0.0; self.voxels * c];
        for n in 0..self.voxels {
            let g = dy[n];
            let [px, py] = self.position(n, noise);
            let tap = Tap::new(px, py, self.width, self.height, self.padding);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                dfeat[n * c + ch] = g * values[n * c + ch];
                let (dx, dy) = tap.grad_xy(&x.features[ch * p..(ch + 1) * p]);
                gx += g * w[n * c + ch] * dx;
                gy += g * w[n * c + ch] * dy;
            }
            dmu[2 * n] = gx;
            dmu[2 * n + 1] = gy;
            if let Some(eps) = noise {
                let (e0, e1) = (eps[2 * n], eps[2 * n + 1]);
                dcov[4 * n..4 * n + 4].copy_from_slice(&[gx * e0, gx * e1, gy * e0, gy * e1]);
            }
        }
        Ok(vec![dmu, dcov, dy.to_vec(), dfeat])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(mu: [f64; 2], feature: Vec<f64>, channels: usize, w: usize, h: usize) -> GaussianReadout {
        GaussianReadout::from_params(1, channels, w, h, mu.to_vec(), vec![0.0; 4], vec![0.0], feature).unwrap()
    }

    #[test]
    fn reads_pixel_at_node() {
        // 3x3 map, node (w=2, h=1) is at x = 0, y = 1
        let maps: Vec<f64> = (0..18).map(|i| i as f64).collect();
        let r = single([0.0, 1.0], vec![0.0, 1.0], 2, 3, 3);
        let y = r.forward_batch(&maps, 1, Mode::Eval, None).unwrap();
        assert_eq!(y, vec![maps[9 + 2 * 3 + 1]]);
    }

    #[test]
    fn center_of_two_by_two() {
        let r = single([0.0, 0.0], vec![1.0], 1, 2, 2);
        assert_eq!(r.forward_batch(&[1.0, 2.0, 3.0, 4.0], 1, Mode::Eval, None).unwrap(), vec![2.5]);
    }

    #[test]
    fn zero_covariance_train_equals_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = GaussianReadout::init(5, 3, 6, 6, GaussianInit::default(), &mut rng).unwrap();
        r.params_mut().value_mut(COV).iter_mut().for_each(|a| *a = 0.0);
        let feats: Vec<f64> = (0..2 * 108).map(|i| (i as f64 * 0.7).cos()).collect();
        let noise: Vec<f64> = (0..20).map(|i| (i as f64).sin() * 2.0).collect();
        let train = r.forward_batch(&feats, 2, Mode::Train, Some(&noise)).unwrap();
        let eval = r.forward_batch(&feats, 2, Mode::Eval, None).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn covariance_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = GaussianReadout::init(20, 1, 4, 4, GaussianInit::default(), &mut rng).unwrap();
        r.params_mut().value_mut(COV).iter_mut().for_each(|a| *a = rng.random_range(-2.0..2.0));
        for n in 0..20 {
            let s = r.covariance(n);
            assert_eq!(s[1], s[2]);
            let det = s[0] * s[3] - s[1] * s[2];
            assert!(s[0] >= 0.0 && s[3] >= 0.0 && det >= -1e-12);
        }
    }

    #[test]
    fn count_is_c_plus_seven() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = GaussianReadout::init(10, 32, 8, 8, GaussianInit::default(), &mut rng).unwrap();
        assert_eq!(r.params().num_params(), 10 * (32 + 7));
    }

    #[test]
    fn train_mode_requires_noise() {
        let r = single([0.0, 0.0], vec![1.0], 1, 2, 2);
        assert!(r.forward_batch(&[1.0; 4], 1, Mode::Train, None).is_err());
    }
}
