//! The `glap` command line.
//!
//! Exit codes: 0 on success, 1 for malformed input or invalid flags, 2 when
//! a numerical kernel fails (singular system, lasso non-convergence).

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{aggregate_per_image_semantics, FeatureMatrix, LabelVector, SemanticTable, ZslSplit};
use crate::error::{GlapError, Result};
use crate::io;
use crate::model::{predict, train, Metric, Strategy, StrategyConfig};
use crate::prototype::{compute_class_means, default_sigma2, generate_virtual, reconstruct_weights};
use crate::solvers::{LassoOptions, Regularizer, RegularizerSpec};
use crate::synth::{
    default_strategy_set, evaluate_multi_seed, npc_sweep_multi_seed, Mixing, SyntheticConfig,
};
use crate::transfer::{check_transferability, DEFAULT_TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "glap", version, about = "Zero-shot learning with generative latent prototypes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it as JSON.
    Train(TrainArgs),
    /// Classify feature rows with a trained model.
    Predict(PredictArgs),
    /// Report whether unseen semantic vectors lie in the seen semantic span.
    CheckTransfer(CheckTransferArgs),
    /// Sample virtual unseen-class instances.
    Generate(GenerateArgs),
    /// Compare all strategies on synthetic worlds.
    SynthBench(SynthBenchArgs),
    /// Accuracy against the number of virtual instances per class.
    NpcSweep(NpcSweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Baseline,
    Glap1,
    Glap2,
    Glap3,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Baseline => Strategy::Baseline,
            StrategyArg::Glap1 => Strategy::Glap1,
            StrategyArg::Glap2 => Strategy::Glap2,
            StrategyArg::Glap3 => Strategy::Glap3,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegArg {
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MixingArg {
    Convex,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Source features, one instance per row.
    #[arg(long)]
    pub features: PathBuf,
    /// Source labels, one class id per line.
    #[arg(long)]
    pub labels: PathBuf,
    /// Per-class seen semantics: class_id followed by the vector.
    #[arg(long)]
    pub seen_sem: Option<PathBuf>,
    /// Per-image seen semantics aligned with the feature rows; averaged per class.
    #[arg(long, conflicts_with = "seen_sem")]
    pub seen_sem_per_image: Option<PathBuf>,
    /// Per-class unseen semantics.
    #[arg(long)]
    pub unseen_sem: Option<PathBuf>,
    /// Rescale every feature row to unit L2 norm.
    #[arg(long)]
    pub normalize_features: bool,
    /// Rescale every semantic vector to unit L2 norm.
    #[arg(long)]
    pub normalize_semantics: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Trade-off between source and virtual data; defaults follow the strategy.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Virtual instances per unseen class.
    #[arg(long, default_value_t = 50)]
    pub npc: usize,
    /// Variance of virtual instances; default is 0.1 x pooled within-class variance.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Ridge term of the map fit; default is 1e-6 x trace(Gram) / d.
    #[arg(long)]
    pub ridge_eps: Option<f64>,
    #[arg(long, value_enum, default_value_t = RegArg::L2)]
    pub reg: RegArg,
    #[arg(long, default_value_t = 1e-3)]
    pub reg_weight: f64,
    #[arg(long, default_value_t = 10_000)]
    pub lasso_max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub lasso_tol: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,
}

impl ModelArgs {
    fn config(&self, strategy: Strategy, seed: u64) -> Result<StrategyConfig> {
        let mut cfg = StrategyConfig::new(strategy).with_npc(self.npc).with_seed(seed);
        if let Some(l) = self.lambda {
            cfg = cfg.with_lambda(l);
        }
        cfg.sigma2 = self.sigma2;
        cfg.ridge_eps = self.ridge_eps;
        cfg.reg = RegularizerSpec {
            kind: match self.reg {
                RegArg::L2 => Regularizer::L2,
                RegArg::L1 => Regularizer::L1,
            },
            weight: self.reg_weight,
        };
        cfg.lasso = LassoOptions {
            max_iter: self.lasso_max_iter,
            tol: self.lasso_tol,
        };
        cfg.metric = match self.metric {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 50)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 20)]
    pub semantic_dim: usize,
    #[arg(long, default_value_t = 15)]
    pub n_seen: usize,
    #[arg(long, default_value_t = 5)]
    pub n_unseen: usize,
    #[arg(long, default_value_t = 100)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    pub obs_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub semantic_noise: f64,
    #[arg(long, value_enum, default_value_t = MixingArg::Convex)]
    pub mixing: MixingArg,
}

impl SyntheticArgs {
    fn config(&self) -> Result<SyntheticConfig> {
        let cfg = SyntheticConfig {
            latent_dim: self.latent_dim,
            feature_dim: self.feature_dim,
            semantic_dim: self.semantic_dim,
            n_seen: self.n_seen,
            n_unseen: self.n_unseen,
            samples_per_class: self.samples_per_class,
            obs_noise: self.obs_noise,
            semantic_noise: self.semantic_noise,
            mixing: match self.mixing {
                MixingArg::Convex => Mixing::ConvexCombination,
                MixingArg::Gaussian => Mixing::GaussianPrototypes,
            },
            seed: 0,
        };
        cfg.validate()?;
        for w in cfg.warnings() {
            eprintln!("warning: {w}");
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_enum, default_value_t = StrategyArg::Glap2)]
    pub strategy: StrategyArg,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Seed of the virtual-instance sampler.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub normalize_features: bool,
    /// Predictions CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckTransferArgs {
    #[arg(long)]
    pub seen_sem: PathBuf,
    #[arg(long)]
    pub unseen_sem: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long)]
    pub normalize_semantics: bool,
    /// Report JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Virtual instances as `class_id,f_1,...,f_d` rows.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthBenchArgs {
    #[command(flatten)]
    pub world: SyntheticArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Master seed; every trial derives its own seeds from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NpcSweepArgs {
    #[command(flatten)]
    pub world: SyntheticArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50,100,200")]
    pub npc_values: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Series CSV: npc,strategy,mean_accuracy,std_accuracy.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional full report as JSON.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

fn load_split(src: &SourceArgs, strategy: Option<Strategy>) -> Result<ZslSplit> {
    let unseen_path = src.unseen_sem.as_deref().ok_or_else(|| {
        GlapError::InvalidInput(match strategy {
            Some(Strategy::Baseline) => "unseen semantics required for prediction".into(),
            _ => "unseen semantics required for virtual generation".into(),
        })
    })?;
    let features = io::read_features(&src.features, src.normalize_features)?;
    let labels = io::read_labels(&src.labels)?;
    let seen = load_seen(src, &features, &labels)?;
    let unseen = io::read_semantic_table(unseen_path, src.normalize_semantics)?;
    Ok(ZslSplit {
        features,
        labels,
        seen,
        unseen,
    })
}

fn load_seen(src: &SourceArgs, features: &FeatureMatrix, labels: &LabelVector) -> Result<SemanticTable> {
    match (&src.seen_sem, &src.seen_sem_per_image) {
        (Some(p), _) => io::read_semantic_table(p, src.normalize_semantics),
        (None, Some(p)) => {
            let per_image = io::read_instance_matrix(p)?;
            let table = aggregate_per_image_semantics(features, labels, &per_image)?;
            Ok(if src.normalize_semantics { table.l2_normalized() } else { table })
        }
        (None, None) => Err(GlapError::InvalidInput(
            "seen semantics required (--seen-sem or --seen-sem-per-image)".into(),
        )),
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let strategy = Strategy::from(args.strategy);
    let cfg = args.model.config(strategy, args.seed)?;
    let split = load_split(&args.source, Some(strategy))?;
    let model = train(&split, &cfg)?;
    io::write_text(&args.out, &io::model_json(&model)?)
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = io::read_model(&args.model)?;
    let features = io::read_features(&args.features, args.normalize_features)?;
    let pred = predict(&model, &features)?;
    let fallbacks = pred.cosine_fallback.iter().filter(|f| **f).count();
    if fallbacks > 0 {
        eprintln!("note: {fallbacks} instance(s) projected to zero; scored by Euclidean distance");
    }
    io::write_text(&args.out, &io::predictions_csv(&pred))
}

fn cmd_check_transfer(args: &CheckTransferArgs) -> Result<()> {
    let seen = io::read_semantic_table(&args.seen_sem, args.normalize_semantics)?;
    let unseen = io::read_semantic_table(&args.unseen_sem, args.normalize_semantics)?;
    let report = check_transferability(&seen, &unseen, args.tolerance)?;
    io::write_text(&args.out, &io::to_sorted_json(&report)?)
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = args.model.config(Strategy::Glap1, args.seed)?;
    let split = load_split(&args.source, None)?;
    crate::dataset::validate_split(&split).into_result()?;
    let weights = reconstruct_weights(&split.seen, &split.unseen, cfg.reg, cfg.lasso)?;
    let means = compute_class_means(&split.features, &split.labels, &split.seen)?;
    let sigma2 = match cfg.sigma2 {
        Some(s) => s,
        None => default_sigma2(&split.features, &split.labels, &means)?,
    };
    let v = generate_virtual(&means, &weights, &split.unseen, cfg.npc, sigma2, cfg.seed)?;
    io::write_text(&args.out, &io::virtual_csv(&v))
}

fn cmd_synth_bench(args: &SynthBenchArgs) -> Result<()> {
    let world = args.world.config()?;
    // Glap2's lambda comes from --lambda; the other strategies pin their own.
    let base = args.model.config(Strategy::Glap2, args.seed)?;
    let report = evaluate_multi_seed(&world, &default_strategy_set(&base), args.seed, args.trials)?;
    io::write_text(&args.out, &io::to_sorted_json(&report)?)
}

fn cmd_npc_sweep(args: &NpcSweepArgs) -> Result<()> {
    let world = args.world.config()?;
    let base = args.model.config(Strategy::Glap2, args.seed)?;
    let report = npc_sweep_multi_seed(&world, &base, &args.npc_values, args.seed, args.trials)?;
    io::write_text(&args.out, &report.to_csv())?;
    if let Some(p) = &args.json_out {
        io::write_text(p, &io::to_sorted_json(&report)?)?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::CheckTransfer(a) => cmd_check_transfer(a),
        Command::Generate(a) => cmd_generate(a),
        Command::SynthBench(a) => cmd_synth_bench(a),
        Command::NpcSweep(a) => cmd_npc_sweep(a),
    }
}

pub fn exit_code_for(err: &GlapError) -> u8 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
