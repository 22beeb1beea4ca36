//! The GLaP model: combined fitting over real and virtual data, the four
//! training strategies, and nearest-semantic-vector prediction.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{validate_split, ClassId, FeatureMatrix, LabelVector, SemanticTable, ZslSplit};
use crate::error::{GlapError, Result};
use crate::prototype::{
    compute_class_means, default_sigma2, generate_virtual, reconstruct_weights, VirtualDataset,
    DEFAULT_NPC,
};
use crate::solvers::{default_ridge_eps, solve_map, LassoOptions, LinearMap, RegularizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Source data only (`lambda = 1`).
    Baseline,
    /// Virtual unseen-class data only (`lambda = 0`).
    Glap1,
    /// Source and virtual data, `0 < lambda < 1`.
    Glap2,
    /// Seen class means and virtual data at `lambda = 1/2`.
    Glap3,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::Glap1, Strategy::Glap2, Strategy::Glap3];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Glap1 => "glap1",
            Strategy::Glap2 => "glap2",
            Strategy::Glap3 => "glap3",
        }
    }

    pub fn uses_virtual(self) -> bool {
        self != Strategy::Baseline
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = GlapError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| GlapError::InvalidInput(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl FromStr for Metric {
    type Err = GlapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(GlapError::InvalidInput(format!("unknown metric '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    pub npc: usize,
    /// `None` picks [`default_sigma2`] from the source data.
    pub sigma2: Option<f64>,
    pub reg: RegularizerSpec,
    pub lasso: LassoOptions,
    /// `None` picks [`default_ridge_eps`] from the combined Gram matrix.
    pub ridge_eps: Option<f64>,
    pub seed: u64,
    pub metric: Metric,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        let lambda = match strategy {
            Strategy::Baseline => 1.0,
            Strategy::Glap1 => 0.0,
            Strategy::Glap2 | Strategy::Glap3 => 0.5,
        };
        StrategyConfig {
            strategy,
            lambda,
            npc: DEFAULT_NPC,
            sigma2: None,
            reg: RegularizerSpec::default(),
            lasso: LassoOptions::default(),
            ridge_eps: None,
            seed: 0,
            metric: Metric::Euclidean,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_npc(mut self, npc: usize) -> Self {
        self.npc = npc;
        self
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = Some(sigma2);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ridge_eps(mut self, eps: f64) -> Self {
        self.ridge_eps = Some(eps);
        self
    }

    pub fn with_reg(mut self, reg: RegularizerSpec) -> Self {
        self.reg = reg;
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GlapError::InvalidInput(msg));
        if !self.lambda.is_finite() || !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        match self.strategy {
            Strategy::Baseline if self.lambda != 1.0 => return bad("baseline requires lambda = 1".into()),
            Strategy::Glap1 if self.lambda != 0.0 => return bad("glap1 requires lambda = 0".into()),
            Strategy::Glap2 if self.lambda <= 0.0 || self.lambda >= 1.0 => {
                return bad("glap2 requires 0 < lambda < 1".into())
            }
            Strategy::Glap3 if self.lambda != 0.5 => return bad("glap3 requires lambda = 0.5".into()),
            _ => {}
        }
        if self.npc == 0 {
            return bad("npc must be positive".into());
        }
        if let Some(s) = self.sigma2 {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("sigma2 must be non-negative, got {s}"));
            }
        }
        if let Some(e) = self.ridge_eps {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("ridge_eps must be non-negative, got {e}"));
            }
        }
        self.lasso.validate()?;
        self.reg.validate()
    }
}

/// One set of training columns: features `d x n` and their semantics `a x n`.
#[derive(Debug, Clone, Copy)]
pub struct TrainingBlock<'a> {
    pub features: &'a DMatrix<f64>,
    pub semantics: &'a DMatrix<f64>,
}

impl<'a> TrainingBlock<'a> {
    pub fn new(features: &'a DMatrix<f64>, semantics: &'a DMatrix<f64>) -> Self {
        TrainingBlock { features, semantics }
    }

    pub fn from_virtual(v: &'a VirtualDataset) -> Self {
        TrainingBlock::new(&v.features, &v.semantics)
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.features.ncols() == 0 {
            return Err(GlapError::InvalidInput(format!("{name} operand is empty")));
        }
        if self.semantics.ncols() != self.features.ncols() {
            return Err(GlapError::dim(format!("{name} semantic columns"), self.features.ncols(), self.semantics.ncols()));
        }
        Ok(())
    }

    fn gram_and_cross(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let xt = self.features.transpose();
        (self.features * &xt, self.semantics * xt)
    }
}

/// Maximizes the `lambda`-weighted log-likelihood over source and virtual
/// columns:
/// `A = (l C_s + (1-l) C_v) (l G_s + (1-l) G_v + eps I)^{-1}`.
///
/// At `lambda = 1` the virtual block is never touched and at `lambda = 0`
/// the source block is never touched.
pub fn fit_combined(
    source: Option<TrainingBlock<'_>>,
    virt: Option<TrainingBlock<'_>>,
    lambda: f64,
    ridge_eps: Option<f64>,
) -> Result<LinearMap> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(GlapError::InvalidInput(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut acc: Option<(DMatrix<f64>, DMatrix<f64>)> = None;

    if lambda > 0.0 {
        let src = source.ok_or_else(|| GlapError::InvalidInput("source operand required for lambda > 0".into()))?;
        src.check("source")?;
        let (mut g, mut c) = src.gram_and_cross();
        if lambda < 1.0 {
            g *= lambda;
            c *= lambda;
        }
        acc = Some((g, c));
    }
    if lambda < 1.0 {
        let v = virt.ok_or_else(|| GlapError::InvalidInput("virtual operand required for lambda < 1".into()))?;
        v.check("virtual")?;
        let (mut g, mut c) = v.gram_and_cross();
        if lambda > 0.0 {
            g *= 1.0 - lambda;
            c *= 1.0 - lambda;
        }
        acc = Some(match acc {
            None => (g, c),
            Some((gs, cs)) => {
                if gs.nrows() != g.nrows() {
                    return Err(GlapError::dim("virtual feature dimension", gs.nrows(), g.nrows()));
                }
                if cs.nrows() != c.nrows() {
                    return Err(GlapError::dim("virtual semantic dimension", cs.nrows(), c.nrows()));
                }
                (gs + g, cs + c)
            }
        });
    }

    let (gram, cross) = acc.expect("lambda selects at least one block");
    let eps = ridge_eps.unwrap_or_else(|| default_ridge_eps(&gram));
    let a = solve_map(&gram, &cross, eps)?;
    LinearMap::new(a, eps)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Source instances used in the fit.
    pub real_columns: usize,
    /// Seen class means used in the fit.
    pub mean_columns: usize,
    pub virtual_columns: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlapModel {
    pub map: LinearMap,
    pub unseen: SemanticTable,
    /// The training configuration with `sigma2` and `ridge_eps` resolved.
    /// `sigma2` stays `None` for the baseline, which samples nothing.
    pub config: StrategyConfig,
    pub provenance: Provenance,
}

impl GlapModel {
    pub fn new(map: LinearMap, unseen: SemanticTable, config: StrategyConfig, provenance: Provenance) -> Result<Self> {
        if map.semantic_dim() != unseen.dim() {
            return Err(GlapError::dim("model semantic dimension", unseen.dim(), map.semantic_dim()));
        }
        Ok(GlapModel {
            map,
            unseen,
            config,
            provenance,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.map.feature_dim()
    }
}

/// Everything `train` produces on the way to the model, for inspection.
#[derive(Debug, Clone)]
pub struct TrainingArtifacts {
    pub model: GlapModel,
    pub virtual_data: Option<VirtualDataset>,
}

/// Runs the full pipeline: reconstruction weights, class means, virtual
/// sampling, then the strategy's combined fit.
pub fn train(split: &ZslSplit, config: &StrategyConfig) -> Result<GlapModel> {
    train_with_artifacts(split, config).map(|t| t.model)
}

pub fn train_with_artifacts(split: &ZslSplit, config: &StrategyConfig) -> Result<TrainingArtifacts> {
    validate_split(split).into_result()?;
    config.validate()?;
    let mut resolved = *config;

    let source_semantics = split.seen.expand(&split.labels)?;
    let source = TrainingBlock::new(split.features.matrix(), &source_semantics);

    let mut virtual_data = None;
    let mut means = None;
    if config.strategy.uses_virtual() {
        let weights = reconstruct_weights(&split.seen, &split.unseen, config.reg, config.lasso)?;
        let class_means = compute_class_means(&split.features, &split.labels, &split.seen)?;
        let sigma2 = match config.sigma2 {
            Some(s) => s,
            None => default_sigma2(&split.features, &split.labels, &class_means)?,
        };
        resolved.sigma2 = Some(sigma2);
        virtual_data = Some(generate_virtual(
            &class_means,
            &weights,
            &split.unseen,
            config.npc,
            sigma2,
            config.seed,
        )?);
        means = Some(class_means);
    }

    let virt = virtual_data.as_ref().map(TrainingBlock::from_virtual);
    let n_virtual = virtual_data.as_ref().map_or(0, |v| v.len());
    let (map, provenance) = match config.strategy {
        Strategy::Baseline => (
            fit_combined(Some(source), None, 1.0, config.ridge_eps)?,
            Provenance {
                real_columns: split.features.len(),
                ..Provenance::default()
            },
        ),
        Strategy::Glap1 => (
            fit_combined(None, virt, 0.0, config.ridge_eps)?,
            Provenance {
                virtual_columns: n_virtual,
                ..Provenance::default()
            },
        ),
        Strategy::Glap2 => (
            fit_combined(Some(source), virt, config.lambda, config.ridge_eps)?,
            Provenance {
                real_columns: split.features.len(),
                virtual_columns: n_virtual,
                ..Provenance::default()
            },
        ),
        Strategy::Glap3 => {
            let m = means.as_ref().expect("glap3 computes class means");
            let block = TrainingBlock::new(&m.means, split.seen.matrix());
            (
                fit_combined(Some(block), virt, 0.5, config.ridge_eps)?,
                Provenance {
                    mean_columns: m.len(),
                    virtual_columns: n_virtual,
                    ..Provenance::default()
                },
            )
        }
    };
    resolved.ridge_eps = Some(map.ridge_eps());

    let model = GlapModel::new(map, split.unseen.clone(), resolved, provenance)?;
    Ok(TrainingArtifacts { model, virtual_data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: LabelVector,
    /// `l x n`: row `c` scores unseen class `c` (model entry order) against
    /// every test instance. Euclidean distances, or cosine similarities
    /// under the cosine metric.
    pub scores: DMatrix<f64>,
    /// Instances whose projection had zero norm under the cosine metric and
    /// were scored by Euclidean distance instead.
    pub cosine_fallback: Vec<bool>,
}

/// Index of the best score; exact ties go to the lowest class id.
pub fn best_class(scores: &[f64], ids: &[ClassId], lower_is_better: bool) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        let better = if lower_is_better {
            scores[i] < scores[best]
        } else {
            scores[i] > scores[best]
        };
        if better || (scores[i] == scores[best] && ids[i] < ids[best]) {
            best = i;
        }
    }
    best
}

fn score_instance(s: DVectorView<'_, f64>, unseen: &SemanticTable, metric: Metric) -> (Vec<f64>, usize, bool) {
    let euclid = || -> Vec<f64> {
        unseen
            .entries()
            .map(|(_, k)| (s - k).norm())
            .collect()
    };
    let s_norm = s.norm();
    match metric {
        Metric::Cosine if s_norm > 0.0 => {
            let scores: Vec<f64> = unseen
                .entries()
                .map(|(_, k)| {
                    let kn = k.norm();
                    if kn == 0.0 {
                        0.0
                    } else {
                        s.dot(&k) / (s_norm * kn)
                    }
                })
                .collect();
            let best = best_class(&scores, unseen.ids(), false);
            (scores, best, false)
        }
        Metric::Cosine => {
            let scores = euclid();
            let best = best_class(&scores, unseen.ids(), true);
            (scores, best, true)
        }
        Metric::Euclidean => {
            let scores = euclid();
            let best = best_class(&scores, unseen.ids(), true);
            (scores, best, false)
        }
    }
}

/// Projects each test instance into semantic space and picks the nearest
/// unseen class vector.
pub fn predict(model: &GlapModel, test: &FeatureMatrix) -> Result<Prediction> {
    if test.dim() != model.feature_dim() {
        return Err(GlapError::dim("test feature dimension", model.feature_dim(), test.dim()));
    }
    let projected = model.map.project(test.matrix())?;
    let per_instance: Vec<(Vec<f64>, usize, bool)> = (0..projected.ncols())
        .into_par_iter()
        .map(|j| score_instance(projected.column(j), &model.unseen, model.config.metric))
        .collect();

    let l = model.unseen.len();
    let mut scores = DMatrix::zeros(l, per_instance.len());
    let mut labels = Vec::with_capacity(per_instance.len());
    let mut fallback = Vec::with_capacity(per_instance.len());
    for (j, (s, best, fb)) in per_instance.into_iter().enumerate() {
        for (c, v) in s.into_iter().enumerate() {
            scores[(c, j)] = v;
        }
        labels.push(model.unseen.ids()[best]);
        fallback.push(fb);
    }
    Ok(Prediction {
        labels: LabelVector::new(labels),
        scores,
        cosine_fallback: fallback,
    })
}
