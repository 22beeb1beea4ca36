//! Synthetic zero-shot worlds drawn from the latent-prototype generative
//! model, plus the strategy comparison and NPC sweep run on them.
//!
//! A world has `k + l` latent prototypes `z_c` in `R^m`. Images of class `c`
//! are `P_x z_c + obs_noise * g` and its semantic vector is `P_k z_c` (plus
//! optional semantic noise). Seen prototypes are standard normal; unseen
//! prototypes are either convex combinations of the seen ones, which keeps
//! their semantics inside the seen semantic span, or independent draws.
//! Classes are balanced, matching a uniform categorical prior in expectation.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, FeatureMatrix, LabelVector, SemanticTable, ZslSplit};
use crate::error::{GlapError, Result};
use crate::model::{predict, train, Strategy, StrategyConfig};
use crate::rng::{derive_seed, GaussianStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// `z_t = Z_s w` with `w` on the simplex.
    ConvexCombination,
    /// Independent standard-normal unseen prototypes.
    GaussianPrototypes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub semantic_dim: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    /// Source instances per seen class; also test instances per unseen class.
    pub samples_per_class: usize,
    /// Standard deviation of the image observation noise.
    pub obs_noise: f64,
    /// Standard deviation of the semantic noise; zero gives exact tables.
    pub semantic_noise: f64,
    pub mixing: Mixing,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            latent_dim: 10,
            feature_dim: 50,
            semantic_dim: 20,
            n_seen: 15,
            n_unseen: 5,
            samples_per_class: 100,
            obs_noise: 0.5,
            semantic_noise: 0.0,
            mixing: Mixing::ConvexCombination,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GlapError::InvalidInput(m.to_string()));
        if self.latent_dim == 0 || self.feature_dim == 0 || self.semantic_dim == 0 {
            return bad("synthetic dimensions must be positive");
        }
        if self.n_seen < 2 || self.n_unseen < 2 {
            return bad("synthetic worlds need at least two seen and two unseen classes");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive");
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite())
            || !(self.semantic_noise >= 0.0 && self.semantic_noise.is_finite())
        {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.feature_dim < self.latent_dim {
            w.push(format!(
                "feature_dim {} < latent_dim {}: images cannot resolve every latent direction",
                self.feature_dim, self.latent_dim
            ));
        }
        w
    }
}

/// A generated split plus held-out instances of the unseen classes.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub split: ZslSplit,
    pub test_features: FeatureMatrix,
    pub test_labels: LabelVector,
    /// Latent prototypes, seen classes first (`m x (k + l)`).
    pub prototypes: DMatrix<f64>,
}

// Stream ids inside one world seed.
const STREAM_SEEN_PROTOTYPES: u64 = 0;
const STREAM_UNSEEN_PROTOTYPES: u64 = 1;
const STREAM_IMAGE_PROJECTION: u64 = 2;
const STREAM_SEMANTIC_PROJECTION: u64 = 3;
const STREAM_SOURCE_NOISE: u64 = 4;
const STREAM_TEST_NOISE: u64 = 5;
const STREAM_SEMANTIC_NOISE: u64 = 6;

fn normal_matrix(rows: usize, cols: usize, scale: f64, g: &mut GaussianStream) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * g.standard_normal())
}

fn observe(
    centres: &DMatrix<f64>,
    per_class: usize,
    noise: f64,
    g: &mut GaussianStream,
) -> DMatrix<f64> {
    let d = centres.nrows();
    let n = centres.ncols() * per_class;
    let mut x = DMatrix::zeros(d, n);
    for c in 0..centres.ncols() {
        for s in 0..per_class {
            let j = c * per_class + s;
            for r in 0..d {
                x[(r, j)] = centres[(r, c)] + noise * g.standard_normal();
            }
        }
    }
    x
}

pub fn generate_synthetic_split(cfg: &SyntheticConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let (m, d, a, k, l) = (cfg.latent_dim, cfg.feature_dim, cfg.semantic_dim, cfg.n_seen, cfg.n_unseen);
    let stream = |id| GaussianStream::new(cfg.seed, id);

    let z_seen = normal_matrix(m, k, 1.0, &mut stream(STREAM_SEEN_PROTOTYPES));
    let z_unseen = {
        let mut g = stream(STREAM_UNSEEN_PROTOTYPES);
        match cfg.mixing {
            Mixing::ConvexCombination => {
                // Squared normals normalized to sum one: a Dirichlet(1/2) draw.
                let w = DMatrix::from_fn(k, l, |_, _| g.standard_normal().powi(2));
                let mut w = w;
                for mut col in w.column_iter_mut() {
                    let s = col.sum();
                    col /= s;
                }
                &z_seen * w
            }
            Mixing::GaussianPrototypes => normal_matrix(m, l, 1.0, &mut g),
        }
    };

    let scale = 1.0 / (m as f64).sqrt();
    let p_x = normal_matrix(d, m, scale, &mut stream(STREAM_IMAGE_PROJECTION));
    let p_k = normal_matrix(a, m, scale, &mut stream(STREAM_SEMANTIC_PROJECTION));

    let mut k_seen = &p_k * &z_seen;
    let mut k_unseen = &p_k * &z_unseen;
    if cfg.semantic_noise > 0.0 {
        let mut g = stream(STREAM_SEMANTIC_NOISE);
        k_seen += normal_matrix(a, k, cfg.semantic_noise, &mut g);
        k_unseen += normal_matrix(a, l, cfg.semantic_noise, &mut g);
    }

    let seen_ids: Vec<ClassId> = (0..k as u64).map(ClassId).collect();
    let unseen_ids: Vec<ClassId> = (k as u64..(k + l) as u64).map(ClassId).collect();
    let per = cfg.samples_per_class;

    let source = observe(&(&p_x * &z_seen), per, cfg.obs_noise, &mut stream(STREAM_SOURCE_NOISE));
    let test = observe(&(&p_x * &z_unseen), per, cfg.obs_noise, &mut stream(STREAM_TEST_NOISE));
    let labels = |ids: &[ClassId]| LabelVector::new(ids.iter().flat_map(|id| std::iter::repeat_n(*id, per)).collect());

    let mut prototypes = DMatrix::zeros(m, k + l);
    prototypes.columns_mut(0, k).copy_from(&z_seen);
    prototypes.columns_mut(k, l).copy_from(&z_unseen);

    Ok(SyntheticWorld {
        split: ZslSplit {
            features: FeatureMatrix::new(source)?,
            labels: labels(&seen_ids),
            seen: SemanticTable::new(seen_ids, k_seen)?,
            unseen: SemanticTable::new(unseen_ids.clone(), k_unseen)?,
        },
        test_features: FeatureMatrix::new(test)?,
        test_labels: labels(&unseen_ids),
        prototypes,
    })
}

/// `correct / total`; zero for an empty set.
pub fn accuracy(predicted: &LabelVector, truth: &LabelVector) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let correct = predicted.iter().zip(truth.iter()).filter(|(p, t)| p == t).count();
    correct as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub lambda: f64,
    pub npc: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[t][p]`: test instances of class `class_ids[t]` predicted
    /// as `class_ids[p]`.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub class_ids: Vec<ClassId>,
    pub results: Vec<StrategyResult>,
    pub config: Option<SyntheticConfig>,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn accuracy_of(&self, strategy: Strategy) -> Option<f64> {
        self.results.iter().find(|r| r.strategy == strategy).map(|r| r.accuracy)
    }
}

/// Tallies predictions against the truth over the unseen class ids.
pub fn score_predictions(
    class_ids: &[ClassId],
    predicted: &LabelVector,
    truth: &LabelVector,
) -> Result<(usize, Vec<Vec<usize>>)> {
    if predicted.len() != truth.len() {
        return Err(GlapError::dim("predicted labels", truth.len(), predicted.len()));
    }
    let pos: BTreeMap<ClassId, usize> = class_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut confusion = vec![vec![0usize; class_ids.len()]; class_ids.len()];
    let mut correct = 0;
    for (p, t) in predicted.iter().zip(truth.iter()) {
        let ti = *pos.get(t).ok_or(GlapError::UnknownClass(*t))?;
        let pi = *pos.get(p).ok_or(GlapError::UnknownClass(*p))?;
        confusion[ti][pi] += 1;
        if ti == pi {
            correct += 1;
        }
    }
    Ok((correct, confusion))
}

/// Trains each configuration on `split` and scores it on the held-out
/// unseen-class instances.
pub fn evaluate_strategies(
    split: &ZslSplit,
    test_features: &FeatureMatrix,
    test_labels: &LabelVector,
    configs: &[StrategyConfig],
) -> Result<EvalReport> {
    if test_features.is_empty() || test_labels.is_empty() {
        return Err(GlapError::InvalidInput("empty test set".into()));
    }
    if test_features.len() != test_labels.len() {
        return Err(GlapError::dim("test labels", test_features.len(), test_labels.len()));
    }
    let class_ids = split.unseen.ids().to_vec();
    let results = configs
        .iter()
        .map(|cfg| {
            let model = train(split, cfg)?;
            let pred = predict(&model, test_features)?;
            let (correct, confusion) = score_predictions(&class_ids, &pred.labels, test_labels)?;
            let total = test_labels.len();
            Ok(StrategyResult {
                strategy: cfg.strategy,
                lambda: cfg.lambda,
                npc: cfg.npc,
                accuracy: correct as f64 / total as f64,
                correct,
                total,
                confusion,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        class_ids,
        results,
        config: None,
        seeds: configs.iter().map(|c| c.seed).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub lambda: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: SyntheticConfig,
    pub master_seed: u64,
    /// World seed of every trial.
    pub seeds: Vec<u64>,
    pub summary: Vec<StrategySummary>,
    /// Mean accuracy of each GLaP strategy minus the baseline mean, keyed
    /// like `glap2_minus_baseline`.
    pub margins: BTreeMap<String, f64>,
    pub trials: Vec<EvalReport>,
}

impl BenchReport {
    pub fn mean_of(&self, strategy: Strategy) -> Option<f64> {
        self.summary.iter().find(|s| s.strategy == strategy).map(|s| s.mean_accuracy)
    }
}

/// Seed of trial `t`'s world and of its virtual sampling.
pub fn trial_seeds(master: u64, trial: usize) -> (u64, u64) {
    let world = derive_seed(master, trial as u64);
    (world, derive_seed(world, u64::MAX))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(configs: &[StrategyConfig], trials: &[EvalReport]) -> Vec<StrategySummary> {
    configs
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let accuracies: Vec<f64> = trials.iter().map(|t| t.results[i].accuracy).collect();
            let (mean, std) = mean_std(&accuracies);
            StrategySummary {
                strategy: cfg.strategy,
                lambda: cfg.lambda,
                mean_accuracy: mean,
                std_accuracy: std,
                accuracies,
            }
        })
        .collect()
}

/// Runs `configs` on `trials` independently generated worlds. Trial `t`
/// uses [`trial_seeds`]`(master_seed, t)`; trials run in parallel and the
/// report does not depend on scheduling.
pub fn evaluate_multi_seed(
    cfg: &SyntheticConfig,
    configs: &[StrategyConfig],
    master_seed: u64,
    trials: usize,
) -> Result<BenchReport> {
    if trials == 0 {
        return Err(GlapError::InvalidInput("at least one trial is required".into()));
    }
    if configs.is_empty() {
        return Err(GlapError::InvalidInput("no strategies to evaluate".into()));
    }
    let reports = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (world_seed, sample_seed) = trial_seeds(master_seed, t);
            let world = generate_synthetic_split(&SyntheticConfig { seed: world_seed, ..*cfg })?;
            let seeded: Vec<StrategyConfig> = configs.iter().map(|c| c.with_seed(sample_seed)).collect();
            let mut report = evaluate_strategies(&world.split, &world.test_features, &world.test_labels, &seeded)?;
            report.config = Some(SyntheticConfig { seed: world_seed, ..*cfg });
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = summarize(configs, &reports);
    let mut margins = BTreeMap::new();
    if let Some(base) = summary.iter().find(|s| s.strategy == Strategy::Baseline) {
        for s in summary.iter().filter(|s| s.strategy != Strategy::Baseline) {
            margins.insert(format!("{}_minus_baseline", s.strategy), s.mean_accuracy - base.mean_accuracy);
        }
    }
    Ok(BenchReport {
        config: *cfg,
        master_seed,
        seeds: (0..trials).map(|t| trial_seeds(master_seed, t).0).collect(),
        summary,
        margins,
        trials: reports,
    })
}

/// The four strategies with shared settings, as used by the benchmark.
pub fn default_strategy_set(base: &StrategyConfig) -> Vec<StrategyConfig> {
    let glap2_lambda = if base.lambda > 0.0 && base.lambda < 1.0 { base.lambda } else { 0.5 };
    Strategy::ALL
        .into_iter()
        .map(|s| {
            let c = StrategyConfig { strategy: s, ..*base };
            match s {
                Strategy::Baseline => c.with_lambda(1.0),
                Strategy::Glap1 => c.with_lambda(0.0),
                Strategy::Glap2 => c.with_lambda(glap2_lambda),
                Strategy::Glap3 => c.with_lambda(0.5),
            }
        })
        .collect()
}

fn sweep_configs(base: &StrategyConfig, npc: usize) -> Vec<StrategyConfig> {
    default_strategy_set(&base.with_npc(npc))
        .into_iter()
        .filter(|c| matches!(c.strategy, Strategy::Glap1 | Strategy::Glap2))
        .collect()
}

fn check_npcs(npcs: &[usize]) -> Result<()> {
    if npcs.is_empty() || npcs.contains(&0) {
        return Err(GlapError::InvalidInput("npc values must be positive".into()));
    }
    if npcs.windows(2).any(|w| w[0] > w[1]) {
        return Err(GlapError::InvalidInput("npc values must be sorted ascending".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NpcPoint {
    pub npc: usize,
    pub report: EvalReport,
}

/// Glap1 and Glap2 at every `npc`, all with `base.seed`.
pub fn npc_sweep(
    split: &ZslSplit,
    test_features: &FeatureMatrix,
    test_labels: &LabelVector,
    base: &StrategyConfig,
    npcs: &[usize],
) -> Result<Vec<NpcPoint>> {
    check_npcs(npcs)?;
    npcs.iter()
        .map(|&npc| {
            Ok(NpcPoint {
                npc,
                report: evaluate_strategies(split, test_features, test_labels, &sweep_configs(base, npc))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NpcSeriesRow {
    pub npc: usize,
    pub strategy: Strategy,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NpcSweepReport {
    pub config: SyntheticConfig,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    /// Baseline accuracy per trial; it does not depend on npc.
    pub baseline: StrategySummary,
    pub rows: Vec<NpcSeriesRow>,
}

impl NpcSweepReport {
    pub fn mean_at(&self, npc: usize, strategy: Strategy) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.npc == npc && r.strategy == strategy)
            .map(|r| r.mean_accuracy)
    }

    /// `npc,strategy,mean_accuracy,std_accuracy` with a header line; the
    /// baseline is repeated at every npc as the reference series.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("npc,strategy,mean_accuracy,std_accuracy\n");
        let mut npcs: Vec<usize> = self.rows.iter().map(|r| r.npc).collect();
        npcs.dedup();
        for npc in npcs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                npc, Strategy::Baseline, self.baseline.mean_accuracy, self.baseline.std_accuracy
            ));
            for r in self.rows.iter().filter(|r| r.npc == npc) {
                out.push_str(&format!("{},{},{},{}\n", r.npc, r.strategy, r.mean_accuracy, r.std_accuracy));
            }
        }
        out
    }
}

/// Multi-world NPC sweep. Every npc value reuses the same world and sampling
/// seeds, so only the number of virtual instances changes along a series.
pub fn npc_sweep_multi_seed(
    cfg: &SyntheticConfig,
    base: &StrategyConfig,
    npcs: &[usize],
    master_seed: u64,
    trials: usize,
) -> Result<NpcSweepReport> {
    check_npcs(npcs)?;
    if trials == 0 {
        return Err(GlapError::InvalidInput("at least one trial is required".into()));
    }
    // Per trial: baseline accuracy, then (glap1, glap2) per npc.
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (world_seed, sample_seed) = trial_seeds(master_seed, t);
            let world = generate_synthetic_split(&SyntheticConfig { seed: world_seed, ..*cfg })?;
            let seeded = base.with_seed(sample_seed);
            let baseline_cfg = default_strategy_set(&seeded)[0];
            let baseline = evaluate_strategies(&world.split, &world.test_features, &world.test_labels, &[baseline_cfg])?;
            let points = npc_sweep(&world.split, &world.test_features, &world.test_labels, &seeded, npcs)?;
            Ok((baseline.results[0].accuracy, points))
        })
        .collect::<Result<Vec<_>>>()?;

    let base_acc: Vec<f64> = per_trial.iter().map(|(b, _)| *b).collect();
    let (bm, bs) = mean_std(&base_acc);
    let mut rows = Vec::new();
    for (i, &npc) in npcs.iter().enumerate() {
        for (s, strategy) in [Strategy::Glap1, Strategy::Glap2].into_iter().enumerate() {
            let accs: Vec<f64> = per_trial.iter().map(|(_, p)| p[i].report.results[s].accuracy).collect();
            let (mean, std) = mean_std(&accs);
            rows.push(NpcSeriesRow {
                npc,
                strategy,
                mean_accuracy: mean,
                std_accuracy: std,
            });
        }
    }
    Ok(NpcSweepReport {
        config: *cfg,
        master_seed,
        seeds: (0..trials).map(|t| trial_seeds(master_seed, t).0).collect(),
        baseline: StrategySummary {
            strategy: Strategy::Baseline,
            lambda: 1.0,
            mean_accuracy: bm,
            std_accuracy: bs,
            accuracies: base_acc,
        },
        rows,
    })
}
