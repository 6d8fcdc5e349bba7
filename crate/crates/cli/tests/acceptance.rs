//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelfit::eval::{affine_deviation, median, spearman, DeviationMode};
use voxelfit::fit::{evaluate, fit, FitConfig};
use voxelfit::gradcheck::{check_readout, GradCheckSpec};
use voxelfit::readouts::factorized::factorized_forward;
use voxelfit::readouts::ridge::{ridge_fit, ridge_objective, ridge_solve_dual, ridge_solve_primal};
use voxelfit::readouts::sst::{batch_thetas, sst_forward};
use voxelfit::readouts::{FactorizedDims, FactorizedReadout, RidgeModel, SstConfig, SstReadout};
use voxelfit::synth::{generate, Scenario, SynthSpec};
use voxelfit::{Model, Readout, ReadoutKind};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for kind in [ReadoutKind::Factorized, ReadoutKind::Gaussian, ReadoutKind::Sst] {
        let spec = GradCheckSpec { batch: 4, channels: 3, width: 8, height: 8, voxels: 6, loc_dim: 16, ..Default::default() };
        match check_readout(kind, &spec) {
            Ok(r) => {
                worst = worst.max(r.max_rel_err);
                parts.push(format!("{kind} {:.2e} over {} coords", r.max_rel_err, r.checked));
            }
            Err(e) => return outcome(false, format!("{kind}: {e}")),
        }
    }
    let took = start.elapsed();
    outcome(worst < 1e-4 && took < Duration::from_secs(60), format!("{} in {took:.1?}", parts.join(", ")))
}

fn random_dims(rng: &mut ChaCha8Rng) -> FactorizedDims {
    FactorizedDims {
        voxels: rng.random_range(1..12),
        channels: rng.random_range(1..8),
        width: rng.random_range(1..12),
        height: rng.random_range(1..12),
    }
}

fn identity_collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dims = random_dims(&mut rng);
        let loc_dim = rng.random_range(1..40);
        let batch = rng.random_range(1..4);
        let sst = SstReadout::init(dims, SstConfig { loc_dim, ..Default::default() }, &mut rng).unwrap();
        let p = sst.params();
        let fac = FactorizedReadout::from_params(dims, p.value("spatial").to_vec(), p.value("feature").to_vec(), None).unwrap();
        let e = normal(&mut rng, batch * dims.channels * dims.plane());
        let loc: Vec<f64> = (0..batch * loc_dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let a = sst_forward(&e, Some(&loc), batch, &sst).unwrap();
        let b = factorized_forward(&e, batch, &fac).unwrap();
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    outcome(worst < 1e-12, format!("max abs diff {worst:.1e} over 100 instances"))
}

fn contraction_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = random_dims(&mut rng);
        let (n, c, w, h) = (d.voxels, d.channels, d.width, d.height);
        let batch = rng.random_range(1..4);
        let s = normal(&mut rng, n * w * h);
        let f = normal(&mut rng, n * c);
        let e = normal(&mut rng, batch * c * w * h);
        let model = FactorizedReadout::from_params(d, s.clone(), f.clone(), None).unwrap();
        let y = factorized_forward(&e, batch, &model).unwrap();
        for b in 0..batch {
            for v in 0..n {
                let mut want = 0.0;
                for ch in 0..c {
                    for i in 0..w {
                        for j in 0..h {
                            want += e[((b * c + ch) * w + i) * h + j] * s[(v * w + i) * h + j] * f[v * c + ch];
                        }
                    }
                }
                worst = worst.max((y[b * n + v] - want).abs());
            }
        }
    }
    outcome(worst < 1e-10, format!("max abs diff {worst:.1e} over 20 instances"))
}

fn ridge_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut agree: f64 = 0.0;
    for (t, e) in [(40, 15), (15, 40), (30, 30)] {
        let x = DMatrix::from_fn(t, e, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(t, 4, |_, _| rng.random_range(-1.0..1.0));
        for lambda in [1e-2, 1.0, 1e2] {
            let p = ridge_solve_primal(&x, &y, lambda).unwrap();
            let d = ridge_solve_dual(&x, &y, lambda).unwrap();
            agree = agree.max((p - d).amax());
        }
    }
    let x = DMatrix::from_fn(60, 20, |_, _| rng.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(60, 3, |_, _| rng.random_range(-1.0..1.0));
    let fitted = ridge_fit(&x, &y, &[1e-2, 1e-1, 1.0, 1e1, 1e2], 5).unwrap();
    let lambda = fitted.best_lambda;
    let base = ridge_objective(&x, &y, &fitted.weights_t, lambda);
    let mut lowest_rise = f64::INFINITY;
    for _ in 0..20 {
        let delta = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-1e-3..1e-3));
        lowest_rise = lowest_rise.min(ridge_objective(&x, &y, &(&fitted.weights_t + delta), lambda) - base);
    }
    outcome(
        agree < 1e-8 && lowest_rise > 0.0,
        format!("primal vs dual {agree:.1e}; smallest objective rise under 20 perturbations {lowest_rise:.2e} (lambda {lambda})"),
    )
}

fn recovery() -> Outcome {
    let spec = SynthSpec { scenario: Scenario::StaticFactorized, voxels: 16, channels: 4, width: 8, height: 8, stimuli: 512, ..Default::default() };
    let data = generate(&spec).unwrap().dataset;
    let mut cfg = FitConfig::default();
    cfg.train.max_epochs = 200;
    let mut slow = cfg.clone();
    cfg.train.lr = 1e-3;
    let start = Instant::now();
    let h = fit(ReadoutKind::Factorized, &data, &cfg).unwrap().history.unwrap();
    let took = start.elapsed();
    slow.train.lr = 1e-4;
    let reference = fit(ReadoutKind::Factorized, &data, &slow).unwrap().history.unwrap();
    outcome(
        h.best_val_pearson > 0.99 && h.val_pearson.len() <= 200 && took < Duration::from_secs(300),
        format!(
            "val r {:.5} at epoch {} (lr 1e-3, {took:.1?}); lr 1e-4 reaches {:.3} in 200 epochs",
            h.best_val_pearson, h.best_epoch, reference.best_val_pearson
        ),
    )
}

fn noise_ceiling_check() -> Outcome {
    let spec = SynthSpec {
        scenario: Scenario::StaticFactorized,
        voxels: 32,
        channels: 2,
        width: 4,
        height: 4,
        stimuli: 10_000,
        repeats: 3,
        noise_var: 0.6,
        seed: 14,
        ..Default::default()
    };
    let data = generate(&spec).unwrap().dataset;
    let nc = voxelfit::eval::noise_ceiling(&data.responses).unwrap();
    let m = median(&nc.nc);
    let want = (0.4f64 / 0.6).sqrt();
    let rel = (m - want).abs() / want;
    outcome(rel < 0.02, format!("median {m:.4} vs {want:.4} ({:.2}% off)", 100.0 * rel))
}

fn expected_count(kind: ReadoutKind, n: usize, c: usize, w: usize, h: usize) -> usize {
    match kind {
        ReadoutKind::Ridge => n * c * w * h,
        ReadoutKind::Factorized => n * (w * h + c),
        ReadoutKind::Gaussian => n * (c + 7),
        ReadoutKind::Sst => n * (c + w * h) + 32 * 6 * (n + c) + 196 * 32 * 2,
    }
}

fn param_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut mismatches = Vec::new();
    for _ in 0..10 {
        let d = random_dims(&mut rng);
        let (n, c, w, h) = (d.voxels, d.channels, d.width, d.height);
        let e = c * w * h;
        let x = DMatrix::from_fn(10, e, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(10, n, |_, _| rng.random_range(-1.0..1.0));
        let ridge = RidgeModel::from_fit(&ridge_fit(&x, &y, &[1.0], 2).unwrap(), c, w, h);
        let models = [
            Model::Ridge(ridge),
            Model::Factorized(FactorizedReadout::init(d, false, &mut rng).unwrap()),
            Model::Gaussian(voxelfit::readouts::GaussianReadout::init(n, c, w, h, Default::default(), &mut rng).unwrap()),
            Model::Sst(SstReadout::init(d, SstConfig::default(), &mut rng).unwrap()),
        ];
        for m in &models {
            let want = expected_count(m.kind(), n, c, w, h);
            let formula = voxelfit::param_count(m.kind(), n, c, w, h, 196) as usize;
            if m.learnable_count() != want || formula != want {
                mismatches.push(format!("{} ({n},{c},{w},{h}): {} vs {want}", m.kind(), m.learnable_count()));
            }
        }
    }
    let detail = if mismatches.is_empty() { "40 models match".to_string() } else { mismatches.join("; ") };
    outcome(mismatches.is_empty(), detail)
}

fn directional() -> (Outcome, Outcome) {
    let start = Instant::now();
    let spec = SynthSpec {
        scenario: Scenario::DynamicRf,
        voxels: 64,
        channels: 8,
        width: 16,
        height: 16,
        stimuli: 4000,
        noise_var: 0.2,
        seed: 7,
        ..Default::default()
    };
    let out = generate(&spec).unwrap();
    let data = &out.dataset;
    let mut cfg = FitConfig::default();
    cfg.train.lr = 1e-3;
    let val = &data.splits.val;
    let score = |m: &Model| evaluate(m, data, val, "m").unwrap().0.summary().mean_r;

    let ridge = fit(ReadoutKind::Ridge, data, &cfg).unwrap();
    let factorized = fit(ReadoutKind::Factorized, data, &cfg).unwrap();
    let sst = fit(ReadoutKind::Sst, data, &cfg).unwrap();
    let (r, f, s) = (score(&ridge.model), score(&factorized.model), score(&sst.model));
    let took = start.elapsed();
    let ordering = outcome(
        s >= f + 0.05 && f >= r + 0.02 && took < Duration::from_secs(1800),
        format!("val r: sst {s:.4}, factorized {f:.4}, ridge {r:.4} (lambda {}); {took:.0?}", ridge.ridge.unwrap().best_lambda),
    );

    let Model::Sst(m) = &sst.model else { unreachable!() };
    let loc = data.localization.as_ref().unwrap();
    let rows: Vec<f64> = val.iter().flat_map(|&i| loc.sample(i).iter().copied()).collect();
    let (_, theta2) = batch_thetas(m, &rows).unwrap();
    let d = affine_deviation(&theta2, val.len(), 64, DeviationMode::MeanNorm).unwrap();
    let rho = spearman(&d, &out.truth.shift_magnitude).unwrap();
    (ordering, outcome(rho > 0.3, format!("spearman rho {rho:.3} between theta2 deviation and true shift")))
}

fn run(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_voxelfit")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn checkpoint_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &["synth", "--scenario", "dynamic_rf", "--out", "data", "--voxels", "6", "--channels", "3", "--width", "8", "--height", "8", "--stimuli", "200", "--loc-dim", "12", "--seed", "5"]);
    let mut differing = Vec::new();
    for kind in ["ridge", "factorized", "gaussian", "sst"] {
        for run_id in ["a", "b"] {
            let out = format!("{kind}_{run_id}");
            run(dir, &["fit", "--readout", kind, "--manifest", "data/manifest.json", "--out", &out, "--seed", "9", "--max-epochs", "6"]);
        }
        let a = checkpoint_files(&dir.join(format!("{kind}_a/checkpoint")));
        let b = checkpoint_files(&dir.join(format!("{kind}_b/checkpoint")));
        if a.is_empty() || a != b {
            differing.push(kind);
        }
    }
    let detail = if differing.is_empty() { "four readouts reproduce their checkpoints".to_string() } else { format!("differ: {differing:?}") };
    outcome(differing.is_empty(), detail)
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report("gradient correctness", gradients());
    report("identity collapse", identity_collapse());
    report("contraction oracle", contraction_oracle());
    report("ridge oracle", ridge_oracle());
    report("recovery", recovery());
    report("noise ceiling", noise_ceiling_check());
    report("parameter counts", param_counts());
    report("determinism", determinism());
    let (ordering, affine) = directional();
    report("readout ordering", ordering);
    report("affine deviation", affine);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
