use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use voxelfit::readouts::ReadoutKind;
use voxelfit::synth::Scenario;
use voxelfit::Split;

#[derive(Debug, Parser)]
#[command(name = "voxelfit", version = env!("VOXELFIT_DESCRIBE"), about = "Fit and compare voxelwise encoding readouts")]
pub struct Cli {
    /// Worker threads for per-stimulus parallelism (default: all cores).
    #[arg(long, global = true, env = "VOXELFIT_THREADS")]
    pub threads: Option<usize>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or solve, for ridge) a readout and write its checkpoint.
    Fit(FitArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Per-voxel winner map across evaluation reports.
    Compare(CompareArgs),
    /// Noise ceiling per voxel from repeated trials.
    NoiseCeiling(NoiseCeilingArgs),
    /// Per-unit deviation of an SST checkpoint's affine transforms.
    AnalyzeAffine(AnalyzeAffineArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Finite-difference check of a readout's analytic gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Ridge,
    Linear,
    Factorized,
    Gaussian,
    Sst,
}

impl From<KindArg> for ReadoutKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Ridge | KindArg::Linear => ReadoutKind::Ridge,
            KindArg::Factorized => ReadoutKind::Factorized,
            KindArg::Gaussian => ReadoutKind::Gaussian,
            KindArg::Sst => ReadoutKind::Sst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScenarioArg {
    StaticFactorized,
    GaussianRf,
    DynamicRf,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::StaticFactorized => Scenario::StaticFactorized,
            ScenarioArg::GaussianRf => Scenario::GaussianRf,
            ScenarioArg::DynamicRf => Scenario::DynamicRf,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub readout: KindArg,
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON fit configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ridge penalties as `lo:hi:count`, log-spaced.
    #[arg(long)]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Model id used in reports (default: the readout kind).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint directory, or a `fit` output directory containing one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Directories holding `report.csv` and `summary.json` (repeat the flag).
    #[arg(long = "report", required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct NoiseCeilingArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "noise_ceiling")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeAffineArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Norm of the stacked deviations instead of the mean per-stimulus norm.
    #[arg(long)]
    pub stacked: bool,
    /// Synthetic ground-truth directory; adds rank correlations with the
    /// true per-voxel shift magnitude.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub voxels: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub stimuli: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub noise_var: Option<f64>,
    #[arg(long)]
    pub loc_dim: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, value_enum)]
    pub readout: KindArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 6)]
    pub voxels: usize,
    #[arg(long, default_value_t = 16)]
    pub loc_dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Check a random subset of this many coordinates (at least 100).
    #[arg(long)]
    pub subset: Option<usize>,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
