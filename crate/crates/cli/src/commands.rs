use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use voxelfit::eval::{affine_deviation, compare_models, mean, median, noise_ceiling, spearman, DeviationMode, VoxelReport};
use voxelfit::fit::{evaluate, fit as fit_readout, FitConfig};
use voxelfit::gradcheck::{check_readout, GradCheckSpec};
use voxelfit::readouts::{Model, ReadoutKind, SampleInput};
use voxelfit::synth::{generate, SynthSpec, SynthTruth};
use voxelfit::{load_dataset, Dataset, Error, Split};

use crate::args::*;
use crate::output::*;
use crate::record::Run;
use crate::CliError;

type CmdResult = Result<(), CliError>;

fn load(manifest: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(manifest)?)
}

fn split_indices(data: &Dataset, split: Split) -> Result<Vec<usize>, CliError> {
    let idx = data.splits.get(split).to_vec();
    if idx.len() < 2 {
        return Err(CliError::Usage(format!("split `{split:?}` has {} stimuli; need at least 2", idx.len())));
    }
    Ok(idx)
}

/// Accepts a checkpoint directory or a `fit` output directory.
fn load_model(dir: &Path) -> Result<Model, CliError> {
    let nested = dir.join("checkpoint");
    let dir = if nested.join("index.json").exists() { nested } else { dir.to_path_buf() };
    Ok(Model::load(dir)?)
}

fn report_files(out: &Path, report: &VoxelReport) -> Result<Vec<PathBuf>, CliError> {
    report.write(out)?;
    let n = report.voxels();
    let normalized: Vec<f64> = report.normalized.iter().map(|x| x.unwrap_or(f64::NAN)).collect();
    Ok(vec![
        out.join("report.csv"),
        out.join("summary.json"),
        write_vxt(out.join("r.vxt"), vec![n], report.r.clone())?,
        write_vxt(out.join("normalized.vxt"), vec![n], normalized)?,
    ])
}

pub fn fit(a: FitArgs) -> CmdResult {
    let kind: ReadoutKind = a.readout.into();
    let mut cfg: FitConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => FitConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(g) = &a.lambda_grid {
        cfg.lambda_grid = g.clone();
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(p) = a.patience {
        cfg.train.patience_epochs = p;
    }
    let run = Run::start(&json!({ "readout": kind, "manifest": a.manifest, "config": cfg }), Some(cfg.train.seed));
    let data = load(&a.manifest)?;
    let outcome = fit_readout(kind, &data, &cfg)?;

    ensure_dir(&a.out)?;
    let mut outputs = Vec::new();
    let ckpt = a.out.join("checkpoint");
    outcome.model.save(&ckpt)?;
    outputs.push(ckpt);
    outputs.push(write_json(a.out.join("config.json"), &cfg)?);
    if let Some(h) = &outcome.history {
        outputs.push(write_json(a.out.join("history.json"), h)?);
        let rows: Vec<f64> = h.train_loss.iter().zip(&h.val_pearson).flat_map(|(l, v)| [*l, *v]).collect();
        outputs.push(write_vxt(a.out.join("history.vxt"), vec![h.train_loss.len(), 2], rows)?);
    }
    let mut run = run;
    if let Some(r) = &outcome.ridge {
        run.best_lambda = Some(r.best_lambda);
        outputs.push(write_json(a.out.join("ridge_cv.json"), r)?);
    }
    let name = a.name.clone().unwrap_or_else(|| kind.to_string());
    if data.splits.val.len() >= 2 {
        let (report, _) = evaluate(&outcome.model, &data, &data.splits.val, &name)?;
        outputs.extend(report_files(&a.out, &report)?);
        println!("{name}: val mean r = {:.4}", report.summary().mean_r);
    }
    run.finish(&a.out, &outputs)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let run = Run::start(&a, None);
    let model = load_model(&a.checkpoint)?;
    let data = load(&a.manifest)?;
    let idx = split_indices(&data, a.split.into())?;
    let name = a.name.clone().unwrap_or_else(|| model.kind().to_string());
    let (report, pred) = evaluate(&model, &data, &idx, &name)?;
    ensure_dir(&a.out)?;
    let mut outputs = report_files(&a.out, &report)?;
    outputs.push(write_vxt(a.out.join("predictions.vxt"), vec![idx.len(), data.voxels()], pred)?);
    let s = report.summary();
    println!("{name}: mean r = {:.4}, median r = {:.4}", s.mean_r, s.median_r);
    run.finish(&a.out, &outputs)?;
    Ok(())
}

#[derive(Serialize)]
struct WinnerSummary {
    models: Vec<String>,
    wins: Vec<usize>,
    ties: usize,
}

pub fn compare(a: CompareArgs) -> CmdResult {
    let run = Run::start(&a, None);
    let reports = a.reports.iter().map(VoxelReport::read).collect::<voxelfit::Result<Vec<_>>>()?;
    let map = compare_models(&reports)?;
    ensure_dir(&a.out)?;
    let mut csv = String::from("voxel_id,winner,model,tied\n");
    for (v, (&w, &t)) in map.winner.iter().zip(&map.tied).enumerate() {
        csv.push_str(&format!("{v},{w},{},{t}\n", map.models[w]));
    }
    let wins = (0..map.models.len()).map(|m| map.winner.iter().filter(|&&w| w == m).count()).collect();
    let summary = WinnerSummary { models: map.models.clone(), wins, ties: map.tied.iter().filter(|t| **t).count() };
    let n = map.winner.len();
    let outputs = vec![
        write_text(a.out.join("winner.csv"), &csv)?,
        write_json(a.out.join("winner.json"), &summary)?,
        write_vxt(a.out.join("winner.vxt"), vec![n], map.winner.iter().map(|&w| w as f64).collect())?,
    ];
    for (m, w) in summary.models.iter().zip(&summary.wins) {
        println!("{m}: best on {w} of {n} voxels");
    }
    run.finish(&a.out, &outputs)?;
    Ok(())
}

pub fn noise_ceiling_cmd(a: NoiseCeilingArgs) -> CmdResult {
    let run = Run::start(&a, None);
    let data = load(&a.manifest)?;
    let nc = noise_ceiling(&data.responses)?;
    ensure_dir(&a.out)?;
    let mut csv = String::from("voxel_id,noise_var,signal_var,nc\n");
    for v in 0..nc.nc.len() {
        csv.push_str(&format!("{v},{},{},{}\n", nc.noise_var[v], nc.signal_var[v], nc.nc[v]));
    }
    let n = nc.nc.len();
    let summary = json!({ "voxels": n, "repeats": nc.repeats, "mean_nc": mean(&nc.nc), "median_nc": median(&nc.nc) });
    let outputs = vec![
        write_text(a.out.join("noise_ceiling.csv"), &csv)?,
        write_json(a.out.join("summary.json"), &summary)?,
        write_vxt(a.out.join("nc.vxt"), vec![n], nc.nc.clone())?,
        write_vxt(a.out.join("noise_var.vxt"), vec![n], nc.noise_var.clone())?,
    ];
    println!("median noise ceiling {:.4} over {n} voxels", median(&nc.nc));
    run.finish(&a.out, &outputs)?;
    Ok(())
}

pub fn analyze_affine(a: AnalyzeAffineArgs) -> CmdResult {
    let run = Run::start(&a, None);
    let model = load_model(&a.checkpoint)?;
    let Model::Sst(sst) = &model else {
        return Err(CliError::Usage(format!("analyze-affine needs an sst checkpoint, got {}", model.kind())));
    };
    let data = load(&a.manifest)?;
    let loc = data.localization.as_ref().ok_or_else(|| Error::Config("localization embeddings required".into()))?;
    let idx = split_indices(&data, a.split.into())?;
    let mode = if a.stacked { DeviationMode::StackedNorm } else { DeviationMode::MeanNorm };
    let (mut t1, mut t2) = (Vec::new(), Vec::new());
    for &i in &idx {
        let x = SampleInput::from_sets(&data.features, Some(loc), i);
        let (a1, a2) = sst.thetas(x.loc.expect("present"))?;
        t1.extend(a1.rows);
        t2.extend(a2.rows);
    }
    let (c, n) = (sst.dims.channels, sst.dims.voxels);
    let d1 = affine_deviation(&t1, idx.len(), c, mode)?;
    let d2 = affine_deviation(&t2, idx.len(), n, mode)?;

    ensure_dir(&a.out)?;
    let mut csv = String::from("transform,unit,deviation\n");
    for (u, d) in d1.iter().enumerate() {
        csv.push_str(&format!("theta1,{u},{d}\n"));
    }
    for (u, d) in d2.iter().enumerate() {
        csv.push_str(&format!("theta2,{u},{d}\n"));
    }
    let mut summary = json!({
        "mode": mode,
        "stimuli": idx.len(),
        "theta1_mean_deviation": mean(&d1),
        "theta2_mean_deviation": mean(&d2),
    });
    if let Some(dir) = &a.truth {
        let (_, truth) = SynthTruth::read(dir)?;
        if truth.shift_magnitude.len() != n {
            return Err(CliError::Usage(format!(
                "truth in {} has no per-voxel shift magnitudes for {n} voxels",
                dir.display()
            )));
        }
        let rho = spearman(&d2, &truth.shift_magnitude)?;
        summary["theta2_spearman_vs_true_shift"] = json!(rho);
        println!("theta2 deviation vs true shift: spearman {rho:.4}");
    }
    let flat = |t: &[voxelfit::Theta]| t.iter().flatten().copied().collect::<Vec<f64>>();
    let outputs = vec![
        write_text(a.out.join("deviation.csv"), &csv)?,
        write_json(a.out.join("summary.json"), &summary)?,
        write_vxt(a.out.join("theta1_deviation.vxt"), vec![c], d1)?,
        write_vxt(a.out.join("theta2_deviation.vxt"), vec![n], d2)?,
        write_vxt(a.out.join("theta2.vxt"), vec![idx.len(), n, 6], flat(&t2))?,
    ];
    run.finish(&a.out, &outputs)?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let mut spec: SynthSpec = match &a.spec {
        Some(path) => read_json(path)?,
        None => SynthSpec::default(),
    };
    spec.scenario = a.scenario.into();
    spec.seed = a.seed;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut spec.voxels, a.voxels);
    set(&mut spec.channels, a.channels);
    set(&mut spec.width, a.width);
    set(&mut spec.height, a.height);
    set(&mut spec.stimuli, a.stimuli);
    set(&mut spec.repeats, a.repeats);
    set(&mut spec.loc_dim, a.loc_dim);
    if let Some(v) = a.noise_var {
        spec.noise_var = v;
    }
    let run = Run::start(&spec, Some(spec.seed));
    let out = generate(&spec)?;
    let manifest = out.write(&a.out)?;
    println!("wrote {}", manifest.display());
    let mut outputs = vec![manifest, a.out.join("features.vxt"), a.out.join("responses.vxt")];
    if out.dataset.localization.is_some() {
        outputs.push(a.out.join("localization.vxt"));
    }
    outputs.push(a.out.join("truth"));
    run.finish(&a.out, &outputs)?;
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> CmdResult {
    let kind: ReadoutKind = a.readout.into();
    let spec = GradCheckSpec {
        batch: a.batch,
        channels: a.channels,
        width: a.width,
        height: a.height,
        voxels: a.voxels,
        loc_dim: a.loc_dim,
        seed: a.seed,
        eps: a.eps,
        subset: a.subset,
    };
    let run = Run::start(&json!({ "readout": kind, "spec": spec, "tol": a.tol }), Some(a.seed));
    let report = check_readout(kind, &spec)?;
    let worst = report.worst.as_ref().map(|(b, i)| format!("{b}[{i}]")).unwrap_or_default();
    println!(
        "{kind}: max relative error {:.3e} at {worst} (analytic {:.6e}, numeric {:.6e}, {} coordinates)",
        report.max_rel_err, report.analytic, report.numeric, report.checked
    );
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let body = json!({
            "readout": kind,
            "max_rel_err": report.max_rel_err,
            "worst": worst,
            "analytic": report.analytic,
            "numeric": report.numeric,
            "checked": report.checked,
            "passed": report.max_rel_err < a.tol,
        });
        let outputs = vec![write_json(out.join("grad_check.json"), &body)?];
        run.finish(out, &outputs)?;
    }
    if report.max_rel_err >= a.tol {
        return Err(CliError::GradCheck(report.max_rel_err, a.tol));
    }
    Ok(())
}
