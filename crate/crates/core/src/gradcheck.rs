//! End-to-end gradient checks of the trainable readouts on random
//! instances: composite loss over a small batch, analytic gradients from
//! the readout's backward pass, central differences from the checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{finite_diff_check, GradCheckReport, ParamBundle};
use crate::error::{Error, Result};
use crate::readouts::deformation::DeformationNet;
use crate::readouts::{
    FactorizedDims, FactorizedReadout, GaussianReadout, Readout, ReadoutKind, SampleInput, SstConfig, SstReadout,
    HIDDEN_DIM,
};
use crate::training::composite_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckSpec {
    pub batch: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub voxels: usize,
    pub loc_dim: usize,
    pub seed: u64,
    pub eps: f64,
    /// Check only this many random coordinates (at least 100).
    pub subset: Option<usize>,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec { batch: 4, channels: 3, width: 8, height: 8, voxels: 6, loc_dim: 16, seed: 0, eps: 1e-5, subset: None }
    }
}

struct Instance {
    features: Vec<f64>,
    loc: Vec<f64>,
    target: Vec<f64>,
    noise: Vec<f64>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

fn loss_and_grads<R: Readout>(model: &R, spec: &GradCheckSpec, inst: &Instance, want_grads: bool) -> Result<(f64, Option<ParamBundle>)> {
    let e = model.input_len();
    let (b, n, nl) = (spec.batch, model.voxels(), model.noise_len());
    let input = |i: usize| {
        let x = &inst.features[i * e..(i + 1) * e];
        SampleInput::with_loc(x, &inst.loc[i * spec.loc_dim..(i + 1) * spec.loc_dim])
    };
    let noise = |i: usize| (nl > 0).then(|| &inst.noise[i * nl..(i + 1) * nl]);
    let mut pred = Vec::with_capacity(b * n);
    let mut caches = Vec::with_capacity(b);
    for i in 0..b {
        let (y, cache) = model.forward(input(i), noise(i))?;
        pred.extend(y);
        caches.push(cache);
    }
    let loss = composite_loss(&pred, &inst.target, b, n, 0.5, 0.5)?;
    if !want_grads {
        return Ok((loss.loss, None));
    }
    let mut bundle = model.params().clone();
    bundle.clear_grads();
    for (i, cache) in caches.iter().enumerate() {
        let g = model.backward(input(i), cache, noise(i), &loss.grad[i * n..(i + 1) * n])?;
        bundle.accumulate(&g)?;
    }
    Ok((loss.loss, Some(bundle)))
}

fn run<R: Readout + Clone>(model: R, spec: &GradCheckSpec, inst: &Instance) -> Result<GradCheckReport> {
    let (_, bundle) = loss_and_grads(&model, spec, inst, true)?;
    let bundle = bundle.expect("gradients requested");
    let mut probe = model.clone();
    finite_diff_check(
        |params| {
            *probe.params_mut() = params.clone();
            Ok(loss_and_grads(&probe, spec, inst, false)?.0)
        },
        &bundle,
        spec.eps,
        spec.subset.map(|k| (k, spec.seed)),
    )
}

/// Distance from `c` (normalized, axis of `n` pixels) to the nearest pixel
/// boundary, in pixels.
fn boundary_distance(c: f64, n: usize) -> f64 {
    let u = (c + 1.0) * 0.5 * (n as f64 - 1.0);
    (u - u.round()).abs()
}

/// Bilinear sampling has kinks wherever a sample crosses a pixel line, and
/// a central difference straddling one measures neither one-sided slope.
/// Returns the smallest pixel-line distance over every sampling position
/// in the instance and an upper bound on how far any position moves per
/// unit change of a single parameter.
fn sampling_margin(kind: ReadoutKind, model: &dyn std::any::Any, spec: &GradCheckSpec, inst: &Instance) -> (f64, f64) {
    let (w, h) = (spec.width, spec.height);
    let scale = 0.5 * (w.max(h) as f64 - 1.0);
    let mut min_dist = f64::INFINITY;
    let mut lipschitz: f64 = 0.0;
    let mut visit = |x: f64, y: f64| {
        min_dist = min_dist.min(boundary_distance(x, h)).min(boundary_distance(y, w));
    };
    match kind {
        ReadoutKind::Gaussian => {
            let m = model.downcast_ref::<GaussianReadout>().expect("gaussian model");
            let mu = m.params().value(crate::readouts::gaussian::MU);
            let a = m.params().value(crate::readouts::gaussian::COV);
            for i in 0..spec.batch {
                let z = &inst.noise[i * 2 * spec.voxels..(i + 1) * 2 * spec.voxels];
                for v in 0..spec.voxels {
                    let (e0, e1) = (z[2 * v], z[2 * v + 1]);
                    let an = &a[4 * v..4 * v + 4];
                    visit(mu[2 * v] + an[0] * e0 + an[1] * e1, mu[2 * v + 1] + an[2] * e0 + an[3] * e1);
                    lipschitz = lipschitz.max(scale * e0.abs().max(e1.abs()).max(1.0));
                }
            }
        }
        ReadoutKind::Sst => {
            let m = model.downcast_ref::<SstReadout>().expect("sst model");
            let l = spec.loc_dim;
            let hidden = HIDDEN_DIM;
            for i in 0..spec.batch {
                let loc = &inst.loc[i * l..(i + 1) * l];
                let (t1, t2) = m.thetas(loc).expect("valid instance");
                for theta in t1.rows.iter().chain(&t2.rows) {
                    for wi in 0..w {
                        let yt = crate::sampler::normalized(wi, w);
                        for hi in 0..h {
                            let xt = crate::sampler::normalized(hi, h);
                            visit(
                                theta[0] * xt + theta[1] * yt + theta[2],
                                theta[3] * xt + theta[4] * yt + theta[5],
                            );
                        }
                    }
                }
                let loc_max = loc.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
                for (m1, m2) in [
                    (crate::readouts::sst::THETA1_M1, crate::readouts::sst::THETA1_M2),
                    (crate::readouts::sst::THETA2_M1, crate::readouts::sst::THETA2_M2),
                ] {
                    let (m1, m2) = (m.params().value(m1), m.params().value(m2));
                    let outs = m2.len() / hidden;
                    for j in 0..hidden {
                        let hj: f64 = (0..l).map(|k| loc[k] * m1[k * hidden + j]).sum();
                        lipschitz = lipschitz.max(scale * hj.abs());
                        for row in m2[j * outs..(j + 1) * outs].chunks_exact(3) {
                            let r: f64 = row.iter().map(|x| x.abs()).sum();
                            lipschitz = lipschitz.max(scale * loc_max * r);
                        }
                    }
                }
            }
        }
        _ => {}
    }
    (min_dist, lipschitz)
}

/// Upper bound on re-draws when looking for an instance whose sampling
/// positions keep clear of pixel lines under the finite-difference step.
const MAX_DRAWS: usize = 1000;

/// Builds a random instance of `kind` and checks its gradients.
///
/// Parameters are drawn away from their initial values so every code path
/// is exercised: SST deformation nets get a random second layer (otherwise
/// every warp is the identity) and Gaussian readouts a non-zero covariance.
/// For the readouts that sample bilinearly, instances where a step of
/// `eps` could carry a sampling position across a pixel line are re-drawn
/// from the same seeded stream.
pub fn check_readout(kind: ReadoutKind, spec: &GradCheckSpec) -> Result<GradCheckReport> {
    let GradCheckSpec { batch, channels: c, width: w, height: h, voxels: n, loc_dim: l, .. } = *spec;
    if [batch, c, w, h, n, l].contains(&0) {
        return Err(Error::Config("grad-check dimensions must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = FactorizedDims { voxels: n, channels: c, width: w, height: h };
    for _ in 0..MAX_DRAWS {
        let inst = Instance {
            features: normals(&mut rng, batch * c * w * h, 1.0),
            loc: normals(&mut rng, batch * l, 1.0),
            target: normals(&mut rng, batch * n, 1.0),
            noise: normals(&mut rng, batch * 2 * n, 1.0),
        };
        let spatial = normals(&mut rng, n * w * h, 0.3);
        let feature = normals(&mut rng, n * c, 1.0 / (c as f64).sqrt());
        let clear = |model: &dyn std::any::Any| {
            let (dist, lip) = sampling_margin(kind, model, spec, &inst);
            dist > 4.0 * spec.eps * lip
        };
        match kind {
            ReadoutKind::Factorized => {
                let m = FactorizedReadout::from_params(dims, spatial, feature, Some(normals(&mut rng, n, 0.1)))?;
                return run(m, spec, &inst);
            }
            ReadoutKind::Gaussian => {
                let mu: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-0.7..0.7)).collect();
                let off = Normal::new(0.0, 0.05).unwrap();
                let cov: Vec<f64> = (0..n)
                    .flat_map(|_| {
                        [0.15 + off.sample(&mut rng), off.sample(&mut rng), off.sample(&mut rng), 0.15 + off.sample(&mut rng)]
                    })
                    .collect();
                let bias = normals(&mut rng, n, 0.1);
                let m = GaussianReadout::from_params(n, c, w, h, mu, cov, bias, feature)?;
                if clear(&m) {
                    return run(m, spec, &inst);
                }
            }
            ReadoutKind::Sst => {
                let config = SstConfig { loc_dim: l, hidden: HIDDEN_DIM, bias: true, ..Default::default() };
                let mut net = |maps: usize| {
                    let mut net = DeformationNet::init(l, HIDDEN_DIM, maps, &mut rng);
                    net.m2 = normals(&mut rng, net.m2.len(), 0.02);
                    net
                };
                let (net1, net2) = (net(c), net(n));
                let bias = normals(&mut rng, n, 0.1);
                let m = SstReadout::from_parts(dims, config, spatial, feature, Some(bias), net1, net2)?;
                if clear(&m) {
                    return run(m, spec, &inst);
                }
            }
            ReadoutKind::Ridge => {
                return Err(Error::Config("ridge is solved in closed form and has no backward pass".into()))
            }
        }
    }
    Err(Error::Numerical(format!(
        "no instance in {MAX_DRAWS} draws keeps its sampling positions clear of pixel lines at eps = {}",
        spec.eps
    )))
}
