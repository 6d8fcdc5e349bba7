//! Two-layer linear deformation networks producing residual affine
//! parameters from localization embeddings.
//!
//! `theta = identity + reshape(loc * M1 * M2, [M, 6])`. Neither layer has a
//! bias and there is no nonlinearity, so a zero `M2` (the initialization)
//! yields identity transforms for every input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sampler::{AffineParams, Theta, IDENTITY};

pub const HIDDEN_DIM: usize = 32;

/// Hidden activations and affine rows for one stimulus.
pub fn forward_sample(loc: &[f64], m1: &[f64], m2: &[f64], hidden: usize, maps: usize) -> (Vec<f64>, Vec<Theta>) {
    let l = loc.len();
    let mut h = vec![0.0; hidden];
    for (i, &x) in loc.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (hj, w) in h.iter_mut().zip(&m1[i * hidden..(i + 1) * hidden]) {
            *hj += x * w;
        }
    }
    debug_assert_eq!(m1.len(), l * hidden);
    let out = 6 * maps;
    let mut delta = vec![0.0; out];
    for (j, &hj) in h.iter().enumerate() {
        if hj == 0.0 {
            continue;
        }
        for (d, w) in delta.iter_mut().zip(&m2[j * out..(j + 1) * out]) {
            *d += hj * w;
        }
    }
    let thetas = delta
        .chunks_exact(6)
        .map(|d| std::array::from_fn(|k| IDENTITY[k] + d[k]))
        .collect();
    (h, thetas)
}

/// Gradients `(dM1, dM2)` for one stimulus given `dL/dtheta`.
pub fn backward_sample(loc: &[f64], m2: &[f64], h: &[f64], dthetas: &[Theta]) -> (Vec<f64>, Vec<f64>) {
    let hidden = h.len();
    let out = 6 * dthetas.len();
    let dflat: Vec<f64> = dthetas.iter().flatten().copied().collect();
    let mut dm2 = vec![0.0; hidden * out];
    let mut dh = vec![0.0; hidden];
    for j in 0..hidden {
        let row = &m2[j * out..(j + 1) * out];
        let drow = &mut dm2[j * out..(j + 1) * out];
        let mut acc = 0.0;
        for k in 0..out {
            drow[k] = h[j] * dflat[k];
            acc += row[k] * dflat[k];
        }
        dh[j] = acc;
    }
    let mut dm1 = vec![0.0; loc.len() * hidden];
    for (i, &x) in loc.iter().enumerate() {
        for (d, g) in dm1[i * hidden..(i + 1) * hidden].iter_mut().zip(&dh) {
            *d = x * g;
        }
    }
    (dm1, dm2)
}

/// Standalone deformation network (weights only).
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationNet {
    pub loc_dim: usize,
    pub hidden: usize,
    pub maps: usize,
    /// `L x hidden`
    pub m1: Vec<f64>,
    /// `hidden x 6M`
    pub m2: Vec<f64>,
}

impl DeformationNet {
    /// Random first layer with unit-scale hidden activations, zero second layer.
    pub fn init<R: Rng>(loc_dim: usize, hidden: usize, maps: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (loc_dim as f64).sqrt()).unwrap();
        DeformationNet {
            loc_dim,
            hidden,
            maps,
            m1: (0..loc_dim * hidden).map(|_| normal.sample(rng)).collect(),
            m2: vec![0.0; hidden * 6 * maps],
        }
    }

    pub fn param_count(&self) -> usize {
        self.m1.len() + self.m2.len()
    }

    /// Affine parameters for a `B x L` batch of embeddings.
    pub fn forward(&self, loc: &[f64]) -> Result<Vec<AffineParams>> {
        if self.loc_dim == 0 || !loc.len().is_multiple_of(self.loc_dim) {
            return Err(Error::shape("localization batch", &[self.loc_dim], &[loc.len()]));
        }
        Ok(loc
            .chunks_exact(self.loc_dim)
            .map(|l| AffineParams { rows: forward_sample(l, &self.m1, &self.m2, self.hidden, self.maps).1 })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_second_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DeformationNet::init(16, 32, 5, &mut rng);
        let loc: Vec<f64> = (0..48).map(|_| rng.random_range(-3.0..3.0)).collect();
        for a in net.forward(&loc).unwrap() {
            assert_eq!(a, AffineParams::identity(5));
        }
    }

    #[test]
    fn zero_input_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DeformationNet::init(8, 4, 3, &mut rng);
        net.m2.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        assert_eq!(net.forward(&[0.0; 8]).unwrap()[0], AffineParams::identity(3));
    }

    #[test]
    fn rank_one_translation() {
        // M1 column 0 = u, M2 row 0 puts t into a13 of map 1 only
        let (l, hidden, maps, t) = (4, 2, 2, 0.25);
        let u = [0.5, -1.0, 2.0, 0.0];
        let mut m1 = vec![0.0; l * hidden];
        for i in 0..l {
            m1[i * hidden] = u[i];
        }
        let mut m2 = vec![0.0; hidden * 6 * maps];
        m2[6 + 2] = t;
        let net = DeformationNet { loc_dim: l, hidden, maps, m1, m2 };
        let loc = [1.0, 0.5, -0.25, 9.0];
        let latent: f64 = u.iter().zip(&loc).map(|(a, b)| a * b).sum();
        let theta = &net.forward(&loc).unwrap()[0];
        assert_eq!(theta.rows[0], IDENTITY);
        assert_eq!(theta.rows[1], [1.0, 0.0, t * latent, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn count_matches_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(DeformationNet::init(196, 32, 10, &mut rng).param_count(), 196 * 32 + 32 * 6 * 10);
    }
}
