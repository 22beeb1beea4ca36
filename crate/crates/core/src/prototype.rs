//! Seen-class prototypes, reconstruction of unseen prototypes, and sampling
//! of virtual unseen-class instances.
//!
//! A seen prototype is only ever materialized through its image-space
//! projection, which is the class mean of the training features. An unseen
//! class `i` is then centred at `means * w_i`, where `w_i` reconstructs its
//! semantic vector from the seen semantic vectors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::{ClassId, FeatureMatrix, LabelVector, SemanticTable};
use crate::error::{GlapError, Result};
use crate::rng::GaussianStream;
use crate::solvers::{
    solve_weights_l1, solve_weights_l2, LassoOptions, Regularizer, RegularizerSpec,
};

/// Fraction of the pooled within-class variance used as the default `sigma2`.
pub const DEFAULT_SIGMA2_FRACTION: f64 = 0.1;
pub const DEFAULT_NPC: usize = 50;

/// Per-seen-class feature means, one column per seen class in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub means: DMatrix<f64>,
    pub class_ids: Vec<ClassId>,
    pub counts: Vec<usize>,
}

impl ClassMeans {
    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

pub fn compute_class_means(
    features: &FeatureMatrix,
    labels: &LabelVector,
    seen: &SemanticTable,
) -> Result<ClassMeans> {
    if labels.len() != features.len() {
        return Err(GlapError::dim("labels", features.len(), labels.len()));
    }
    let positions = seen.positions_of(labels)?;
    let d = features.dim();
    let k = seen.len();
    let mut sums = DMatrix::zeros(d, k);
    let mut counts = vec![0usize; k];
    for (j, &p) in positions.iter().enumerate() {
        let mut col = sums.column_mut(p);
        col += features.instance(j);
        counts[p] += 1;
    }
    for (p, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(GlapError::EmptyClass(seen.ids()[p]));
        }
        let mut col = sums.column_mut(p);
        col /= count as f64;
    }
    Ok(ClassMeans {
        means: sums,
        class_ids: seen.ids().to_vec(),
        counts,
    })
}

/// Pooled per-coordinate within-class variance of the source features.
/// Zero when every class is a singleton.
pub fn within_class_variance(
    features: &FeatureMatrix,
    labels: &LabelVector,
    means: &ClassMeans,
) -> Result<f64> {
    let index: std::collections::HashMap<ClassId, usize> = means
        .class_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let mut ss = 0.0;
    for (j, id) in labels.iter().enumerate() {
        let p = *index.get(id).ok_or(GlapError::UnknownClass(*id))?;
        ss += (features.instance(j) - means.means.column(p)).norm_squared();
    }
    let dof = features.len().saturating_sub(means.len());
    if dof == 0 {
        return Ok(0.0);
    }
    Ok(ss / (dof as f64 * features.dim() as f64))
}

/// Default virtual-instance variance: a tenth of the pooled within-class
/// variance of the source features.
pub fn default_sigma2(features: &FeatureMatrix, labels: &LabelVector, means: &ClassMeans) -> Result<f64> {
    Ok(DEFAULT_SIGMA2_FRACTION * within_class_variance(features, labels, means)?)
}

/// Reconstruction weights, one `k`-vector column per unseen class.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionWeights {
    pub weights: DMatrix<f64>,
    pub regularizer: RegularizerSpec,
}

pub fn reconstruct_weights(
    seen: &SemanticTable,
    unseen: &SemanticTable,
    reg: RegularizerSpec,
    lasso: LassoOptions,
) -> Result<ReconstructionWeights> {
    if seen.dim() != unseen.dim() {
        return Err(GlapError::dim("unseen semantic dimension", seen.dim(), unseen.dim()));
    }
    reg.validate()?;
    let ks = seen.matrix();
    let mut weights = DMatrix::zeros(seen.len(), unseen.len());
    for i in 0..unseen.len() {
        let kt: DVector<f64> = unseen.vector(i).into_owned();
        let w = match reg.kind {
            Regularizer::L2 => solve_weights_l2(ks, &kt, reg.weight)?,
            Regularizer::L1 => solve_weights_l1(ks, &kt, reg.weight, lasso.max_iter, lasso.tol)?,
        };
        weights.set_column(i, &w);
    }
    Ok(ReconstructionWeights {
        weights,
        regularizer: reg,
    })
}

/// Sampled unseen-class instances. Columns are grouped by class: unseen
/// class `i` owns columns `i * npc .. (i + 1) * npc`.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualDataset {
    pub features: DMatrix<f64>,
    pub semantics: DMatrix<f64>,
    pub labels: LabelVector,
    pub sigma2: f64,
    pub seed: u64,
    pub npc: usize,
}

impl VirtualDataset {
    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.ncols() == 0
    }
}

/// Image-space centres `means * w_i` of every unseen class (`d x l`).
pub fn unseen_centres(means: &ClassMeans, weights: &ReconstructionWeights) -> Result<DMatrix<f64>> {
    if weights.weights.nrows() != means.len() {
        return Err(GlapError::dim("reconstruction weight rows", means.len(), weights.weights.nrows()));
    }
    Ok(&means.means * &weights.weights)
}

fn sample_block(centre: &DVector<f64>, npc: usize, sigma: f64, seed: u64, stream: u64) -> Vec<f64> {
    let d = centre.len();
    let mut block = vec![0.0; d * npc];
    if sigma == 0.0 {
        for col in block.chunks_mut(d) {
            col.copy_from_slice(centre.as_slice());
        }
        return block;
    }
    let mut g = GaussianStream::new(seed, stream);
    for col in block.chunks_mut(d) {
        for (v, c) in col.iter_mut().zip(centre.iter()) {
            *v = c + sigma * g.standard_normal();
        }
    }
    block
}

fn generate(
    means: &ClassMeans,
    weights: &ReconstructionWeights,
    unseen: &SemanticTable,
    npc: usize,
    sigma2: f64,
    seed: u64,
    parallel: bool,
) -> Result<VirtualDataset> {
    if npc == 0 {
        return Err(GlapError::InvalidInput("npc must be positive".into()));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(GlapError::InvalidInput(format!("sigma2 must be non-negative, got {sigma2}")));
    }
    if weights.weights.ncols() != unseen.len() {
        return Err(GlapError::dim("reconstruction weight columns", unseen.len(), weights.weights.ncols()));
    }
    let centres = unseen_centres(means, weights)?;
    let sigma = sigma2.sqrt();
    let d = means.dim();
    let l = unseen.len();

    let sample = |i: usize| sample_block(&centres.column(i).into_owned(), npc, sigma, seed, i as u64);
    let blocks: Vec<Vec<f64>> = if parallel {
        (0..l).into_par_iter().map(sample).collect()
    } else {
        (0..l).map(sample).collect()
    };

    let features = DMatrix::from_iterator(d, l * npc, blocks.into_iter().flatten());
    let mut semantics = DMatrix::zeros(unseen.dim(), l * npc);
    let mut labels = Vec::with_capacity(l * npc);
    for (i, (id, k)) in unseen.entries().enumerate() {
        for c in i * npc..(i + 1) * npc {
            semantics.set_column(c, &k);
            labels.push(id);
        }
    }
    Ok(VirtualDataset {
        features,
        semantics,
        labels: LabelVector::new(labels),
        sigma2,
        seed,
        npc,
    })
}

/// Draws `npc` instances per unseen class from `N(means * w_i, sigma2 I)`.
/// Classes are sampled in parallel, each from its own stream.
pub fn generate_virtual(
    means: &ClassMeans,
    weights: &ReconstructionWeights,
    unseen: &SemanticTable,
    npc: usize,
    sigma2: f64,
    seed: u64,
) -> Result<VirtualDataset> {
    generate(means, weights, unseen, npc, sigma2, seed, true)
}

/// Single-threaded [`generate_virtual`]; output is bitwise identical.
pub fn generate_virtual_sequential(
    means: &ClassMeans,
    weights: &ReconstructionWeights,
    unseen: &SemanticTable,
    npc: usize,
    sigma2: f64,
    seed: u64,
) -> Result<VirtualDataset> {
    generate(means, weights, unseen, npc, sigma2, seed, false)
}
