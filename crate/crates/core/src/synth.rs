//! Synthetic datasets with known ground truth.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::zscore_responses;
use crate::readouts::factorized::forward_sample;
use crate::readouts::{GaussianReadout, Mode, DEFAULT_LOC_DIM};
use crate::sampler::{transform_map, Padding, Theta};
use crate::tensor_io::{
    read_tensor, write_tensor, Dataset, FeatureSet, LocalizationEmbeddingSet, ResponseSet, Tensor,
};
use crate::training::{split_dataset, SplitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    StaticFactorized,
    GaussianRf,
    DynamicRf,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::StaticFactorized => "static_factorized",
            Scenario::GaussianRf => "gaussian_rf",
            Scenario::DynamicRf => "dynamic_rf",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static_factorized" => Ok(Scenario::StaticFactorized),
            "gaussian_rf" => Ok(Scenario::GaussianRf),
            "dynamic_rf" => Ok(Scenario::DynamicRf),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected static_factorized, gaussian_rf or dynamic_rf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub scenario: Scenario,
    pub voxels: usize,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub stimuli: usize,
    pub repeats: usize,
    /// Per-trial noise variance after z-scoring; the signal gets `1 - noise_var`.
    pub noise_var: f64,
    pub seed: u64,
    /// Gaussian blur (pixels) applied to the random feature maps. `None`
    /// picks the scenario default: white for the factorized scenarios,
    /// 1.5 px for `gaussian_rf`.
    pub feature_blur: Option<f64>,
    /// Width (pixels) of the isotropic blob masks.
    pub blob_sigma: Option<f64>,
    pub split: [f64; 3],
    // dynamic_rf only
    pub loc_dim: usize,
    pub distractor_frac: f64,
    /// Standard deviation of the latent shift, normalized units.
    pub shift_std: f64,
    /// Standard deviation of the latent log-scale.
    pub scale_std: f64,
    /// Fraction of voxels whose masks ignore the latent.
    pub static_frac: f64,
    // gaussian_rf only
    pub mu_range: f64,
    /// Generator covariance factor `A = rf_sigma * I`.
    pub rf_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            scenario: Scenario::StaticFactorized,
            voxels: 16,
            channels: 4,
            width: 8,
            height: 8,
            stimuli: 512,
            repeats: 1,
            noise_var: 0.0,
            seed: 0,
            feature_blur: None,
            blob_sigma: None,
            split: [0.8, 0.1, 0.1],
            loc_dim: DEFAULT_LOC_DIM,
            distractor_frac: 0.75,
            shift_std: 0.25,
            scale_std: 0.15,
            static_frac: 0.25,
            mu_range: 0.7,
            rf_sigma: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.voxels, self.channels, self.width, self.height, self.stimuli, self.repeats];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all synth dimensions must be >= 1, got {dims:?}")));
        }
        if !(0.0..1.0).contains(&self.noise_var) {
            return Err(Error::Config(format!("noise_var must be in [0, 1), got {}", self.noise_var)));
        }
        if !(0.0..1.0).contains(&self.distractor_frac) {
            return Err(Error::Config(format!("distractor_frac must be in [0, 1), got {}", self.distractor_frac)));
        }
        if !(0.0..=1.0).contains(&self.static_frac) {
            return Err(Error::Config(format!("static_frac must be in [0, 1], got {}", self.static_frac)));
        }
        if self.scenario == Scenario::DynamicRf && self.loc_dim == 0 {
            return Err(Error::Config("loc_dim must be >= 1".into()));
        }
        if self.shift_std < 0.0 || self.scale_std < 0.0 || self.rf_sigma < 0.0 {
            return Err(Error::Config("standard deviations must be non-negative".into()));
        }
        Ok(())
    }

    fn plane(&self) -> usize {
        self.width * self.height
    }
}

/// Generator parameters kept for scoring fits. Arrays that do not apply to
/// a scenario are empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthTruth {
    /// `N x W x H` base masks (factorized scenarios).
    pub spatial: Vec<f64>,
    /// `N x C` feature weights.
    pub feature: Vec<f64>,
    /// `N x 2` receptive-field centers (gaussian_rf).
    pub mu: Vec<f64>,
    /// `N x 4` covariance factors (gaussian_rf).
    pub cov: Vec<f64>,
    /// `S x 2` latent shifts (dynamic_rf).
    pub latent_shift: Vec<f64>,
    /// `S` latent log-scales (dynamic_rf).
    pub latent_scale: Vec<f64>,
    /// `N` per-voxel coupling to the latent (dynamic_rf).
    pub gain: Vec<f64>,
    /// `N` per-voxel rotation of the latent shift (dynamic_rf).
    pub angle: Vec<f64>,
    /// `N` mean over stimuli of the voxel's true translation norm (dynamic_rf).
    pub shift_magnitude: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthIndex {
    spec: SynthSpec,
    tensors: Vec<(String, Vec<usize>)>,
}

impl SynthTruth {
    fn arrays(&self, spec: &SynthSpec) -> Vec<(&'static str, Vec<usize>, &Vec<f64>)> {
        let (n, s) = (spec.voxels, spec.stimuli);
        let all = vec![
            ("spatial", vec![n, spec.width, spec.height], &self.spatial),
            ("feature", vec![n, spec.channels], &self.feature),
            ("mu", vec![n, 2], &self.mu),
            ("cov", vec![n, 2, 2], &self.cov),
            ("latent_shift", vec![s, 2], &self.latent_shift),
            ("latent_scale", vec![s], &self.latent_scale),
            ("gain", vec![n], &self.gain),
            ("angle", vec![n], &self.angle),
            ("shift_magnitude", vec![n], &self.shift_magnitude),
        ];
        all.into_iter().filter(|(_, _, v)| !v.is_empty()).collect()
    }

    /// Writes `truth.json` plus one VXT1 file per array into `dir`.
    pub fn write(&self, spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (name, shape, data) in self.arrays(spec) {
            write_tensor(&Tensor::from_f64(shape.clone(), data.clone())?, dir.join(format!("{name}.vxt")))?;
            tensors.push((name.to_string(), shape));
        }
        let index = TruthIndex { spec: spec.clone(), tensors };
        let path = dir.join("truth.json");
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<(SynthSpec, Self)> {
        let dir = dir.as_ref();
        let path = dir.join("truth.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: TruthIndex = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        let mut truth = SynthTruth::default();
        for (name, shape) in &index.tensors {
            let t = read_tensor(dir.join(format!("{name}.vxt")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("truth tensor `{name}`"), shape, t.shape()));
            }
            let slot = match name.as_str() {
                "spatial" => &mut truth.spatial,
                "feature" => &mut truth.feature,
                "mu" => &mut truth.mu,
                "cov" => &mut truth.cov,
                "latent_shift" => &mut truth.latent_shift,
                "latent_scale" => &mut truth.latent_scale,
                "gain" => &mut truth.gain,
                "angle" => &mut truth.angle,
                "shift_magnitude" => &mut truth.shift_magnitude,
                _ => continue,
            };
            *slot = t.into_f64_vec();
        }
        Ok((index.spec, truth))
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub spec: SynthSpec,
    pub dataset: Dataset,
    pub truth: SynthTruth,
}

impl SynthOutput {
    /// Writes the dataset and a `truth/` sidecar into `dir`; returns the
    /// manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let manifest = self.dataset.write(dir)?;
        self.truth.write(&self.spec, dir.join("truth"))?;
        Ok(manifest)
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    match spec.scenario {
        Scenario::StaticFactorized => gen_static_factorized(spec),
        Scenario::GaussianRf => gen_gaussian_rf(spec),
        Scenario::DynamicRf => gen_dynamic_rf(spec),
    }
}

fn check_scenario(spec: &SynthSpec, want: Scenario) -> Result<()> {
    spec.validate()?;
    if spec.scenario != want {
        return Err(Error::Config(format!("spec scenario is {}, expected {want}", spec.scenario)));
    }
    Ok(())
}

/// Separable Gaussian blur of one `W x H` map with zero padding.
fn blur(map: &mut [f64], width: usize, height: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let mut tmp = vec![0.0; map.len()];
    for i in 0..width {
        for j in 0..height {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let jj = j as isize + k as isize - radius;
                if (0..height as isize).contains(&jj) {
                    acc += wk * map[i * height + jj as usize];
                }
            }
            tmp[i * height + j] = acc;
        }
    }
    for i in 0..width {
        for j in 0..height {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let ii = i as isize + k as isize - radius;
                if (0..width as isize).contains(&ii) {
                    acc += wk * tmp[ii as usize * height + j];
                }
            }
            map[i * height + j] = acc;
        }
    }
}

/// `S x C x W x H` standard-normal maps, optionally blurred and rescaled to
/// unit variance.
fn random_features(spec: &SynthSpec, blur_sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let p = spec.plane();
    let mut data: Vec<f64> = (0..spec.stimuli * spec.channels * p).map(|_| StandardNormal.sample(rng)).collect();
    if blur_sigma > 0.0 {
        for map in data.chunks_exact_mut(p) {
            blur(map, spec.width, spec.height, blur_sigma);
        }
        let var = data.iter().map(|x| x * x).sum::<f64>() / data.len() as f64;
        if var > 0.0 {
            let sd = var.sqrt();
            data.iter_mut().for_each(|x| *x /= sd);
        }
    }
    data
}

/// Unit-norm isotropic blobs with uniformly random centers.
fn blob_masks(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let sigma = spec.blob_sigma.unwrap_or_else(|| (w.min(h) as f64 / 8.0).max(1.0));
    let mut out = Vec::with_capacity(spec.voxels * w * h);
    for _ in 0..spec.voxels {
        let ci = rng.random_range(0.0..=(w - 1) as f64);
        let cj = rng.random_range(0.0..=(h - 1) as f64);
        let mut mask: Vec<f64> = (0..w * h)
            .map(|k| {
                let (i, j) = ((k / h) as f64, (k % h) as f64);
                (-((i - ci).powi(2) + (j - cj).powi(2)) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let norm = mask.iter().map(|x| x * x).sum::<f64>().sqrt();
        mask.iter_mut().for_each(|x| *x /= norm);
        out.extend(mask);
    }
    out
}

fn feature_weights(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nf = Normal::new(0.0, 1.0 / (spec.channels as f64).sqrt()).unwrap();
    (0..spec.voxels * spec.channels).map(|_| nf.sample(rng)).collect()
}

/// Turns noiseless `S x N` signals into z-scored `S x R x N` responses:
/// each voxel's signal is standardized and scaled to variance `1 - v`,
/// independent `N(0, v)` noise is added per repeat, and the result is
/// z-scored over all trials.
fn noisy_responses(spec: &SynthSpec, signal: &[f64], rng: &mut ChaCha8Rng) -> Result<ResponseSet> {
    let (s, r, n) = (spec.stimuli, spec.repeats, spec.voxels);
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for row in signal.chunks_exact(n) {
        mean.iter_mut().zip(row).for_each(|(m, y)| *m += y / s as f64);
    }
    for row in signal.chunks_exact(n) {
        for j in 0..n {
            var[j] += (row[j] - mean[j]).powi(2) / s as f64;
        }
    }
    let gain: Vec<f64> = var.iter().map(|v| if *v > 0.0 { (1.0 - spec.noise_var).sqrt() / v.sqrt() } else { 0.0 }).collect();
    let noise_sd = spec.noise_var.sqrt();
    let mut data = Vec::with_capacity(s * r * n);
    for row in signal.chunks_exact(n) {
        for _ in 0..r {
            for j in 0..n {
                let eps: f64 = StandardNormal.sample(rng);
                data.push((row[j] - mean[j]) * gain[j] + noise_sd * eps);
            }
        }
    }
    Ok(zscore_responses(&ResponseSet::new(s, r, n, data)?))
}

fn assemble(
    spec: &SynthSpec,
    features: Vec<f64>,
    signal: &[f64],
    loc: Option<Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let responses = noisy_responses(spec, signal, rng)?;
    let features = FeatureSet::new(spec.stimuli, spec.channels, spec.width, spec.height, features)?;
    let localization = loc.map(|l| LocalizationEmbeddingSet::new(spec.stimuli, spec.loc_dim, l)).transpose()?;
    let [train, val, test] = spec.split;
    let splits = split_dataset(spec.stimuli, &SplitSpec::Fractions { train, val, test }, spec.seed)?;
    Dataset::new(features, responses, localization, splits)
}

fn contract(spec: &SynthSpec, features: &[f64], masks_of: impl Fn(usize) -> Vec<f64>, feature: &[f64]) -> Vec<f64> {
    let (n, c, p) = (spec.voxels, spec.channels, spec.plane());
    let mut signal = Vec::with_capacity(spec.stimuli * n);
    for i in 0..spec.stimuli {
        let e = &features[i * c * p..(i + 1) * c * p];
        signal.extend(forward_sample(e, &masks_of(i), feature, n, c, p).0);
    }
    signal
}

/// Responses from a factorized readout with blob masks and random feature
/// weights.
pub fn gen_static_factorized(spec: &SynthSpec) -> Result<SynthOutput> {
    check_scenario(spec, Scenario::StaticFactorized)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spatial = blob_masks(spec, &mut rng);
    let feature = feature_weights(spec, &mut rng);
    let features = random_features(spec, spec.feature_blur.unwrap_or(0.0), &mut rng);
    let signal = contract(spec, &features, |_| spatial.clone(), &feature);
    let dataset = assemble(spec, features, &signal, None, &mut rng)?;
    Ok(SynthOutput { spec: spec.clone(), dataset, truth: SynthTruth { spatial, feature, ..Default::default() } })
}

/// Per-voxel mask transform for one stimulus: isotropic scale `exp(g z)`
/// and translation `g R(phi) shift`.
fn voxel_theta(gain: f64, angle: f64, shift: [f64; 2], log_scale: f64) -> Theta {
    let (sin, cos) = angle.sin_cos();
    let tx = gain * (cos * shift[0] - sin * shift[1]);
    let ty = gain * (sin * shift[0] + cos * shift[1]);
    let s = (gain * log_scale).exp();
    [s, 0.0, tx, 0.0, s, ty]
}

/// Factorized responses whose masks move with a per-stimulus latent
/// (shift and scale). The latent is linearly embedded in a subset of the
/// localization dimensions; the rest are standard-normal distractors.
pub fn gen_dynamic_rf(spec: &SynthSpec) -> Result<SynthOutput> {
    check_scenario(spec, Scenario::DynamicRf)?;
    let (s, n, w, h, l) = (spec.stimuli, spec.voxels, spec.width, spec.height, spec.loc_dim);
    let p = spec.plane();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spatial = blob_masks(spec, &mut rng);
    let feature = feature_weights(spec, &mut rng);
    let features = random_features(spec, spec.feature_blur.unwrap_or(0.0), &mut rng);

    let mut gain = Vec::with_capacity(n);
    let mut angle = Vec::with_capacity(n);
    for _ in 0..n {
        let is_static = rng.random::<f64>() < spec.static_frac;
        let g = rng.random_range(0.25..=1.0);
        gain.push(if is_static { 0.0 } else { g });
        angle.push(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
    }
    let mut latent_shift = Vec::with_capacity(2 * s);
    let mut latent_scale = Vec::with_capacity(s);
    for _ in 0..s {
        let z: [f64; 3] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
        latent_shift.push(spec.shift_std * z[0]);
        latent_shift.push(spec.shift_std * z[1]);
        latent_scale.push(spec.scale_std * z[2]);
    }

    // Informative dims carry a random mix of the standardized latent.
    let informative = ((1.0 - spec.distractor_frac) * l as f64).round().max(1.0) as usize;
    let informative = informative.min(l);
    let mix: Vec<f64> = (0..3 * informative)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|x: f64| x / 3f64.sqrt())
        .collect();
    let unit = |x: f64, sd: f64| if sd > 0.0 { x / sd } else { 0.0 };
    let mut loc = Vec::with_capacity(s * l);
    for i in 0..s {
        let u = [
            unit(latent_shift[2 * i], spec.shift_std),
            unit(latent_shift[2 * i + 1], spec.shift_std),
            unit(latent_scale[i], spec.scale_std),
        ];
        for d in 0..l {
            if d < informative {
                loc.push((0..3).map(|k| u[k] * mix[k * informative + d]).sum());
            } else {
                loc.push(StandardNormal.sample(&mut rng));
            }
        }
    }

    let mut shift_magnitude = vec![0.0; n];
    let mut signal = Vec::with_capacity(s * n);
    let mut warped = vec![0.0; n * p];
    for i in 0..s {
        let shift = [latent_shift[2 * i], latent_shift[2 * i + 1]];
        for v in 0..n {
            let theta = voxel_theta(gain[v], angle[v], shift, latent_scale[i]);
            shift_magnitude[v] += theta[2].hypot(theta[5]) / s as f64;
            transform_map(&spatial[v * p..(v + 1) * p], w, h, &theta, Padding::Zeros, &mut warped[v * p..(v + 1) * p]);
        }
        let e = &features[i * spec.channels * p..(i + 1) * spec.channels * p];
        signal.extend(forward_sample(e, &warped, &feature, n, spec.channels, p).0);
    }
    let dataset = assemble(spec, features, &signal, Some(loc), &mut rng)?;
    let truth = SynthTruth {
        spatial,
        feature,
        latent_shift,
        latent_scale,
        gain,
        angle,
        shift_magnitude,
        ..Default::default()
    };
    Ok(SynthOutput { spec: spec.clone(), dataset, truth })
}

/// Responses from a Gaussian readout (read at the centers) over smooth
/// random feature maps.
pub fn gen_gaussian_rf(spec: &SynthSpec) -> Result<SynthOutput> {
    check_scenario(spec, Scenario::GaussianRf)?;
    let (n, c, w, h) = (spec.voxels, spec.channels, spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mu: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-spec.mu_range..=spec.mu_range)).collect();
    let cov: Vec<f64> = (0..n).flat_map(|_| [spec.rf_sigma, 0.0, 0.0, spec.rf_sigma]).collect();
    let feature = feature_weights(spec, &mut rng);
    let features = random_features(spec, spec.feature_blur.unwrap_or(1.5), &mut rng);
    let readout = GaussianReadout::from_params(n, c, w, h, mu.clone(), cov.clone(), vec![0.0; n], feature.clone())?;
    let signal = readout.forward_batch(&features, spec.stimuli, Mode::Eval, None)?;
    let dataset = assemble(spec, features, &signal, None, &mut rng)?;
    Ok(SynthOutput { spec: spec.clone(), dataset, truth: SynthTruth { feature, mu, cov, ..Default::default() } })
}
