//! Parameter storage, gradient accumulation, Adam and a finite-difference
//! gradient checker.
//!
//! All reductions run in a fixed sequential order so that repeated runs are
//! bit-identical for a given build.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One gradient buffer per parameter block, in bundle order.
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named dense parameter blocks with matching gradient blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBundle {
    blocks: Vec<ParamBlock>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> Result<()> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter block `{name}`")));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape(format!("parameter block `{name}`"), &shape, &[value.len()]));
        }
        let grad = vec![0.0; value.len()];
        self.blocks.push(ParamBlock { name: name.to_string(), shape, value, grad });
        Ok(())
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn block(&self, name: &str) -> &ParamBlock {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no parameter block `{name}`"));
        &self.blocks[i]
    }

    pub fn value(&self, name: &str) -> &[f64] {
        &self.block(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut [f64] {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no parameter block `{name}`"));
        &mut self.blocks[i].value
    }

    /// Total number of learnable scalars.
    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        self.blocks.iter().map(|b| vec![0.0; b.len()]).collect()
    }

    pub fn grads(&self) -> Gradients {
        self.blocks.iter().map(|b| b.grad.clone()).collect()
    }

    pub fn clear_grads(&mut self) {
        for b in &mut self.blocks {
            b.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Adds `micro` into the stored gradients.
    ///
    /// After accumulating `k` micro-batches the caller divides by `k`
    /// (see [`ParamBundle::scale_grads`]) before stepping.
    pub fn accumulate(&mut self, micro: &[Vec<f64>]) -> Result<()> {
        if micro.len() != self.blocks.len() {
            return Err(Error::shape("gradient block count", &[self.blocks.len()], &[micro.len()]));
        }
        for (b, g) in self.blocks.iter().zip(micro) {
            if g.len() != b.len() {
                return Err(Error::shape(format!("gradient for `{}`", b.name), &b.shape, &[g.len()]));
            }
        }
        for (b, g) in self.blocks.iter_mut().zip(micro) {
            for (acc, x) in b.grad.iter_mut().zip(g) {
                *acc += x;
            }
        }
        Ok(())
    }
}

/// Adds `src` into `dst` element-wise. Both must have identical layout.
pub fn add_into(dst: &mut Gradients, src: &Gradients) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(bundle: &ParamBundle, config: AdamConfig) -> Result<Self> {
        if !config.lr.is_finite() || config.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive and finite, got {}", config.lr)));
        }
        Ok(AdamState { config, t: 0, m: bundle.zero_grads(), v: bundle.zero_grads() })
    }
}

/// Applies one bias-corrected Adam update from the stored gradients, then
/// clears them. Nothing is modified if any gradient is non-finite.
pub fn adam_step(bundle: &mut ParamBundle, state: &mut AdamState) -> Result<()> {
    if state.m.len() != bundle.blocks.len() {
        return Err(Error::shape("adam state", &[state.m.len()], &[bundle.blocks.len()]));
    }
    for b in &bundle.blocks {
        if b.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { block: b.name.clone() });
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for ((b, m), v) in bundle.blocks.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..b.value.len() {
            let g = b.grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            b.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            b.grad[i] = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Block name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the gradients stored in `bundle` against central differences
/// of `loss_fn`.
///
/// With `subset = Some((k, seed))` only `k` randomly chosen coordinates
/// (at least 100, or all if fewer exist) are checked. Relative error uses
/// `max(|a|, |n|, 1e-8)` as denominator.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    bundle: &ParamBundle,
    eps: f64,
    subset: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamBundle) -> Result<f64>,
{
    let coords: Vec<(usize, usize)> = bundle
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(bi, b)| (0..b.len()).map(move |i| (bi, i)))
        .collect();
    let coords = match subset {
        Some((k, seed)) if k.max(100) < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, coords.len(), k.max(100)).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut probe = bundle.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    for (bi, i) in coords {
        let x = bundle.blocks[bi].value[i];
        probe.blocks[bi].value[i] = x + eps;
        let plus = loss_fn(&probe)?;
        probe.blocks[bi].value[i] = x - eps;
        let minus = loss_fn(&probe)?;
        probe.blocks[bi].value[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is non-finite when perturbing `{}`[{i}]",
                bundle.blocks[bi].name
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = bundle.blocks[bi].grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel.max(report.max_rel_err);
            report.worst = Some((bundle.blocks[bi].name.clone(), i));
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(values: &[f64]) -> ParamBundle {
        let mut b = ParamBundle::new();
        b.push("x", vec![values.len()], values.to_vec()).unwrap();
        b
    }

    #[test]
    fn accumulate_is_additive() {
        let mut b = bundle(&[0.0, 0.0]);
        let g = vec![vec![1.5, -2.0]];
        b.accumulate(&g).unwrap();
        b.accumulate(&g).unwrap();
        assert_eq!(b.block("x").grad, vec![3.0, -4.0]);
        b.accumulate(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(b.block("x").grad, vec![3.0, -4.0]);
    }

    #[test]
    fn accumulate_then_divide_recovers_mean() {
        let mut b = bundle(&[0.0, 0.0, 0.0]);
        let g = vec![vec![0.3, -1.1, 2.5]];
        for _ in 0..4 {
            b.accumulate(&g).unwrap();
        }
        b.scale_grads(0.25);
        assert_eq!(b.block("x").grad, g[0]);
    }

    #[test]
    fn accumulate_shape_mismatch() {
        let mut b = bundle(&[0.0, 0.0]);
        assert!(b.accumulate(&[vec![1.0]]).is_err());
        assert!(b.accumulate(&[vec![1.0, 1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn duplicate_block_names_rejected() {
        let mut b = bundle(&[1.0]);
        assert!(b.push("x", vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut b = bundle(&[1.0, 1.0, 1.0]);
        b.accumulate(&[vec![0.5, 0.0, -0.5]]).unwrap();
        let mut st = AdamState::new(&b, AdamConfig::default()).unwrap();
        adam_step(&mut b, &mut st).unwrap();
        let x = b.value("x");
        // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        let expected = 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((x[0] - (1.0 - expected)).abs() < 1e-15);
        assert_eq!(x[1], 1.0);
        assert!((x[2] - (1.0 + expected)).abs() < 1e-15);
        assert_eq!((1.0 - x[0]), (x[2] - 1.0));
        assert_eq!(st.t, 1);
        assert!(b.block("x").grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut b = bundle(&[1.0]);
        b.accumulate(&[vec![f64::NAN]]).unwrap();
        let mut st = AdamState::new(&b, AdamConfig::default()).unwrap();
        let err = adam_step(&mut b, &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref block } if block == "x"));
        assert_eq!(b.value("x"), &[1.0]);
    }

    #[test]
    fn adam_is_block_order_invariant() {
        let mut ab = ParamBundle::new();
        ab.push("a", vec![2], vec![0.1, 0.2]).unwrap();
        ab.push("b", vec![1], vec![-0.3]).unwrap();
        let mut ba = ParamBundle::new();
        ba.push("b", vec![1], vec![-0.3]).unwrap();
        ba.push("a", vec![2], vec![0.1, 0.2]).unwrap();
        let mut s1 = AdamState::new(&ab, AdamConfig::default()).unwrap();
        let mut s2 = AdamState::new(&ba, AdamConfig::default()).unwrap();
        for k in 0..5 {
            let ga = vec![0.3 * k as f64, -0.7];
            let gb = vec![1.0 / (k as f64 + 1.0)];
            ab.accumulate(&[ga.clone(), gb.clone()]).unwrap();
            ba.accumulate(&[gb, ga]).unwrap();
            adam_step(&mut ab, &mut s1).unwrap();
            adam_step(&mut ba, &mut s2).unwrap();
        }
        assert_eq!(ab.value("a"), ba.value("a"));
        assert_eq!(ab.value("b"), ba.value("b"));
    }

    #[test]
    fn fd_check_quadratic() {
        let mut b = bundle(&[1.0, 2.0]);
        b.accumulate(&[vec![2.0, 4.0]]).unwrap();
        let loss = |p: &ParamBundle| Ok(p.value("x").iter().map(|x| x * x).sum::<f64>());
        let r = finite_diff_check(loss, &b, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn fd_check_constant_loss() {
        let b = bundle(&[1.0, 2.0]);
        let r = finite_diff_check(|_| Ok(3.0), &b, 1e-5, None).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn fd_check_detects_wrong_gradient() {
        let mut b = bundle(&[1.0]);
        b.accumulate(&[vec![3.0]]).unwrap();
        let r = finite_diff_check(|p| Ok(p.value("x")[0].powi(2)), &b, 1e-5, None).unwrap();
        assert!(r.max_rel_err > 0.3);
    }

    #[test]
    fn fd_check_subset_size() {
        let b = bundle(&vec![0.0; 500]);
        let r = finite_diff_check(|_| Ok(0.0), &b, 1e-5, Some((10, 3))).unwrap();
        assert_eq!(r.checked, 100);
    }
}
