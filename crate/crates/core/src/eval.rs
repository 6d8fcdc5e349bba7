//! Per-voxel accuracy, noise ceilings, model comparison and the affine
//! deviation analysis.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Theta;
use crate::tensor_io::ResponseSet;

/// Voxels whose noise ceiling is at or below this are excluded from
/// normalized aggregates.
pub const NC_FLOOR: f64 = 0.05;

/// Sample Pearson correlation of each column of two row-major `T x N`
/// matrices. Columns with zero variance in either input give 0.
pub fn pearson_per_voxel(pred: &[f64], target: &[f64], t: usize, n: usize) -> Result<Vec<f64>> {
    if pred.len() != t * n || target.len() != t * n {
        return Err(Error::shape("pearson inputs", &[t, n], &[pred.len(), target.len()]));
    }
    if t < 2 {
        return Err(Error::Config(format!("pearson needs at least 2 samples, got {t}")));
    }
    let mut mp = vec![0.0; n];
    let mut mt = vec![0.0; n];
    for row in 0..t {
        for j in 0..n {
            mp[j] += pred[row * n + j];
            mt[j] += target[row * n + j];
        }
    }
    mp.iter_mut().chain(mt.iter_mut()).for_each(|m| *m /= t as f64);
    let mut sxy = vec![0.0; n];
    let mut sxx = vec![0.0; n];
    let mut syy = vec![0.0; n];
    for row in 0..t {
        for j in 0..n {
            let a = pred[row * n + j] - mp[j];
            let b = target[row * n + j] - mt[j];
            sxy[j] += a * b;
            sxx[j] += a * a;
            syy[j] += b * b;
        }
    }
    Ok((0..n)
        .map(|j| {
            let denom = (sxx[j] * syy[j]).sqrt();
            if denom > 0.0 && denom.is_finite() {
                (sxy[j] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}

/// Z-scores each voxel over all `(stimulus, repeat)` trials (population
/// standard deviation). Constant voxels are only centered.
pub fn zscore_responses(r: &ResponseSet) -> ResponseSet {
    let n = r.voxels;
    let count = (r.stimuli * r.repeats) as f64;
    let mut mean = vec![0.0; n];
    for row in r.data.chunks_exact(n) {
        for (m, y) in mean.iter_mut().zip(row) {
            *m += y;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for row in r.data.chunks_exact(n) {
        for j in 0..n {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
    let mut data = r.data.clone();
    for row in data.chunks_exact_mut(n) {
        for j in 0..n {
            row[j] -= mean[j];
            if sd[j] > 0.0 {
                row[j] /= sd[j];
            }
        }
    }
    ResponseSet { data, ..r.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCeiling {
    pub noise_var: Vec<f64>,
    pub signal_var: Vec<f64>,
    pub nc: Vec<f64>,
    pub repeats: usize,
}

/// Noise ceiling in correlation units for repeat-averaged responses.
///
/// Expects responses z-scored per voxel. The noise variance is the mean
/// over stimuli of the unbiased across-repeat variance; the signal variance
/// is `1 - noise` clipped to `[0, 1]`, and
/// `nc = sqrt(signal / (signal + noise / R))`.
pub fn noise_ceiling(responses: &ResponseSet) -> Result<NoiseCeiling> {
    let (s, r, n) = (responses.stimuli, responses.repeats, responses.voxels);
    if r < 2 {
        return Err(Error::Config(format!("noise ceiling needs at least 2 repeats, got {r}")));
    }
    let mut noise = vec![0.0; n];
    let mut mean = vec![0.0; n];
    for i in 0..s {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for k in 0..r {
            for (m, y) in mean.iter_mut().zip(responses.trial(i, k)) {
                *m += y;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        for k in 0..r {
            for ((acc, y), m) in noise.iter_mut().zip(responses.trial(i, k)).zip(&mean) {
                let d = y - m;
                *acc += d * d / (r - 1) as f64;
            }
        }
    }
    noise.iter_mut().for_each(|v| *v /= s as f64);
    let signal: Vec<f64> = noise.iter().map(|v| (1.0 - v).clamp(0.0, 1.0)).collect();
    let nc = signal
        .iter()
        .zip(&noise)
        .map(|(&sig, &noi)| {
            let denom = sig + noi / r as f64;
            if denom > 0.0 {
                (sig / denom).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(NoiseCeiling { noise_var: noise, signal_var: signal, nc, repeats: r })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelReport {
    pub model: String,
    pub r: Vec<f64>,
    pub nc: Option<Vec<f64>>,
    /// `r / nc`, `None` where the voxel is excluded or no ceiling exists.
    pub normalized: Vec<Option<f64>>,
    pub excluded: Vec<bool>,
}

impl VoxelReport {
    pub fn voxels(&self) -> usize {
        self.r.len()
    }

    /// Normalized accuracy where available, raw Pearson otherwise.
    pub fn score(&self, voxel: usize) -> f64 {
        self.normalized[voxel].unwrap_or(self.r[voxel])
    }

    pub fn summary(&self) -> ReportSummary {
        let included: Vec<f64> = self.normalized.iter().flatten().copied().collect();
        ReportSummary {
            model: self.model.clone(),
            voxels: self.voxels(),
            included: included.len(),
            mean_r: mean(&self.r),
            median_r: median(&self.r),
            mean_normalized: (!included.is_empty()).then(|| mean(&included)),
            median_normalized: (!included.is_empty()).then(|| median(&included)),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("voxel_id,r,nc,normalized,excluded\n");
        for v in 0..self.voxels() {
            let nc = self.nc.as_ref().map(|nc| nc[v].to_string()).unwrap_or_default();
            let norm = self.normalized[v].map(|x| x.to_string()).unwrap_or_default();
            writeln!(out, "{v},{},{nc},{norm},{}", self.r[v], self.excluded[v]).unwrap();
        }
        out
    }

    pub fn from_csv(model: &str, text: &str) -> Result<Self> {
        let bad = |line: usize| Error::Config(format!("malformed report csv at line {line}"));
        let mut r = Vec::new();
        let mut nc = Vec::new();
        let mut normalized = Vec::new();
        let mut excluded = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 || cols[0].parse::<usize>().ok() != Some(r.len()) {
                return Err(bad(i + 1));
            }
            r.push(cols[1].parse::<f64>().map_err(|_| bad(i + 1))?);
            nc.push(if cols[2].is_empty() { None } else { Some(cols[2].parse::<f64>().map_err(|_| bad(i + 1))?) });
            normalized.push(if cols[3].is_empty() { None } else { Some(cols[3].parse::<f64>().map_err(|_| bad(i + 1))?) });
            excluded.push(cols[4].parse::<bool>().map_err(|_| bad(i + 1))?);
        }
        let nc = if nc.iter().all(Option::is_some) && !nc.is_empty() { Some(nc.into_iter().flatten().collect()) } else { None };
        Ok(VoxelReport { model: model.to_string(), r, nc, normalized, excluded })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }

    /// Reads `report.csv` and the model id from `summary.json` in `dir`.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let json = dir.join("summary.json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let summary: ReportSummary = serde_json::from_str(&text).map_err(|source| Error::Json { path: json, source })?;
        let csv = dir.join("report.csv");
        let text = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
        Self::from_csv(&summary.model, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub model: String,
    pub voxels: usize,
    pub included: usize,
    pub mean_r: f64,
    pub median_r: f64,
    pub mean_normalized: Option<f64>,
    pub median_normalized: Option<f64>,
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// Correlates predictions with repeat-averaged targets (both `T x N`
/// row-major) and divides by the noise ceiling where it exceeds
/// [`NC_FLOOR`].
pub fn noise_normalized_accuracy(
    model: &str,
    pred: &[f64],
    target_avg: &[f64],
    t: usize,
    n: usize,
    nc: Option<&[f64]>,
) -> Result<VoxelReport> {
    let r = pearson_per_voxel(pred, target_avg, t, n)?;
    if let Some(nc) = nc {
        if nc.len() != n {
            return Err(Error::shape("noise ceiling", &[n], &[nc.len()]));
        }
    }
    let mut normalized = Vec::with_capacity(n);
    let mut excluded = Vec::with_capacity(n);
    for v in 0..n {
        match nc {
            Some(nc) if nc[v] > NC_FLOOR => {
                normalized.push(Some(r[v] / nc[v]));
                excluded.push(false);
            }
            Some(_) => {
                normalized.push(None);
                excluded.push(true);
            }
            None => {
                normalized.push(None);
                excluded.push(false);
            }
        }
    }
    Ok(VoxelReport { model: model.to_string(), r, nc: nc.map(<[f64]>::to_vec), normalized, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinnerMap {
    /// Model ids in sorted order; `winner` indexes into this list.
    pub models: Vec<String>,
    pub winner: Vec<usize>,
    /// Voxels where two or more models share the best score.
    pub tied: Vec<bool>,
}

/// Per-voxel argmax of [`VoxelReport::score`]. Ties go to the model id that
/// sorts first, so the result does not depend on the order of `reports`.
pub fn compare_models(reports: &[VoxelReport]) -> Result<WinnerMap> {
    let first = reports.first().ok_or_else(|| Error::Config("no reports to compare".into()))?;
    let n = first.voxels();
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[a].model.cmp(&reports[b].model));
    for w in order.windows(2) {
        if reports[w[0]].model == reports[w[1]].model {
            return Err(Error::Config(format!("duplicate model id `{}`", reports[w[0]].model)));
        }
    }
    for rep in reports {
        if rep.voxels() != n {
            return Err(Error::shape(format!("voxels of `{}`", rep.model), &[n], &[rep.voxels()]));
        }
    }
    let mut winner = Vec::with_capacity(n);
    let mut tied = Vec::with_capacity(n);
    for v in 0..n {
        let mut best = 0;
        let mut best_score = reports[order[0]].score(v);
        let mut tie = false;
        for (rank, &i) in order.iter().enumerate().skip(1) {
            let s = reports[i].score(v);
            if s > best_score {
                best = rank;
                best_score = s;
                tie = false;
            } else if s == best_score {
                tie = true;
            }
        }
        winner.push(best);
        tied.push(tie);
    }
    Ok(WinnerMap { models: order.iter().map(|&i| reports[i].model.clone()).collect(), winner, tied })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationMode {
    /// Mean over stimuli of `||theta_i - mean theta||`.
    #[default]
    MeanNorm,
    /// Norm of all stimuli's deviations stacked into one vector.
    StackedNorm,
}

/// Per-unit deviation of affine parameters from their across-stimulus mean.
/// `thetas` is `stimuli x units` in stimulus-major order.
pub fn affine_deviation(thetas: &[Theta], stimuli: usize, units: usize, mode: DeviationMode) -> Result<Vec<f64>> {
    if thetas.len() != stimuli * units {
        return Err(Error::shape("affine parameters", &[stimuli, units, 6], &[thetas.len(), 6]));
    }
    if stimuli < 2 {
        return Err(Error::Config("affine deviation needs at least 2 stimuli".into()));
    }
    let mut mean = vec![[0.0; 6]; units];
    for i in 0..stimuli {
        for m in 0..units {
            for k in 0..6 {
                mean[m][k] += thetas[i * units + m][k];
            }
        }
    }
    mean.iter_mut().flatten().for_each(|x| *x /= stimuli as f64);
    let mut out = vec![0.0; units];
    for i in 0..stimuli {
        for m in 0..units {
            let sq: f64 = (0..6).map(|k| (thetas[i * units + m][k] - mean[m][k]).powi(2)).sum();
            out[m] += match mode {
                DeviationMode::MeanNorm => sq.sqrt(),
                DeviationMode::StackedNorm => sq,
            };
        }
    }
    for d in &mut out {
        *d = match mode {
            DeviationMode::MeanNorm => *d / stimuli as f64,
            DeviationMode::StackedNorm => d.sqrt(),
        };
    }
    Ok(out)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman inputs", &[a.len()], &[b.len()]));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    Ok(pearson_per_voxel(&ra, &rb, a.len(), 1)?[0])
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}
