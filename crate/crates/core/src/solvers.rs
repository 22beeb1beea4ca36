//! Dense linear-algebra kernels: the regularized image-to-semantic map and
//! the ridge / lasso solvers for reconstruction weights.
//!
//! The map is always `a x d` and solves `A (G + eps I) = C`, with `G = X X^T`
//! the feature Gram matrix and `C = K X^T` the semantic/feature cross term.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{GlapError, Result};

/// Relative scale of the automatic ridge term: `eps = RIDGE_SCALE * trace(G) / d`.
pub const RIDGE_SCALE: f64 = 1e-6;

/// Fitted linear map `s = A x + b` from feature space to semantic space.
/// The bias is always zero here.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    matrix: DMatrix<f64>,
    bias: DVector<f64>,
    ridge_eps: f64,
}

impl LinearMap {
    pub fn new(matrix: DMatrix<f64>, ridge_eps: f64) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GlapError::InvalidInput("linear map has non-finite entries".into()));
        }
        if !(ridge_eps >= 0.0 && ridge_eps.is_finite()) {
            return Err(GlapError::InvalidInput(format!("invalid ridge_eps {ridge_eps}")));
        }
        let bias = DVector::zeros(matrix.nrows());
        Ok(LinearMap {
            matrix,
            bias,
            ridge_eps,
        })
    }

    /// `a x d` coefficient matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn ridge_eps(&self) -> f64 {
        self.ridge_eps
    }

    pub fn semantic_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Projects every instance column into semantic space.
    pub fn project(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.nrows() != self.feature_dim() {
            return Err(GlapError::dim("feature dimension", self.feature_dim(), features.nrows()));
        }
        Ok(&self.matrix * features)
    }
}

/// `trace(G) / d` scaled by [`RIDGE_SCALE`].
pub fn default_ridge_eps(gram: &DMatrix<f64>) -> f64 {
    let d = gram.nrows().max(1) as f64;
    RIDGE_SCALE * gram.trace() / d
}

/// Numerical rank of a symmetric positive semi-definite matrix.
pub(crate) fn psd_rank(m: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if max == 0.0 {
        return 0;
    }
    let cutoff = max * m.nrows() as f64 * f64::EPSILON;
    eig.eigenvalues.iter().filter(|v| **v > cutoff).count()
}

/// Solves `A (gram + eps I) = cross` for `A` by Cholesky factorization.
pub(crate) fn solve_map(gram: &DMatrix<f64>, cross: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let d = gram.nrows();
    if gram.ncols() != d {
        return Err(GlapError::dim("gram columns", d, gram.ncols()));
    }
    if cross.ncols() != d {
        return Err(GlapError::dim("cross-term columns", d, cross.ncols()));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(GlapError::InvalidInput(format!("invalid ridge_eps {eps}")));
    }

    let mut system = gram.clone();
    if eps > 0.0 {
        for i in 0..d {
            system[(i, i)] += eps;
        }
    } else {
        let rank = psd_rank(&system);
        if rank < d {
            return Err(GlapError::Singular { rank, size: d });
        }
    }

    let chol = system.clone().cholesky().ok_or_else(|| GlapError::Singular {
        rank: psd_rank(&system),
        size: d,
    })?;
    // system is symmetric, so A^T = system^{-1} cross^T.
    let at = chol.solve(&cross.transpose());
    let a = at.transpose();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GlapError::Singular {
            rank: psd_rank(&system),
            size: d,
        });
    }
    Ok(a)
}

/// Ridge-regularized least-squares map from features `x` (`d x N`) to
/// semantics `k` (`a x N`): `A = K X^T (X X^T + eps I)^{-1}`.
pub fn fit_linear_map(x: &FeatureMatrix, k: &DMatrix<f64>, ridge_eps: f64) -> Result<LinearMap> {
    if k.ncols() != x.len() {
        return Err(GlapError::dim("semantic columns", x.len(), k.ncols()));
    }
    let xm = x.matrix();
    let gram = xm * xm.transpose();
    let cross = k * xm.transpose();
    let a = solve_map(&gram, &cross, ridge_eps)?;
    LinearMap::new(a, ridge_eps)
}

/// `||A (G + eps I) - C||_F / max(1, ||C||_F)`.
pub fn normal_equation_residual(map: &LinearMap, gram: &DMatrix<f64>, cross: &DMatrix<f64>) -> f64 {
    let mut system = gram.clone();
    for i in 0..system.nrows() {
        system[(i, i)] += map.ridge_eps();
    }
    let diff = map.matrix() * system - cross;
    diff.norm() / cross.norm().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: Regularizer,
    pub weight: f64,
}

impl RegularizerSpec {
    pub fn l2(weight: f64) -> Self {
        RegularizerSpec {
            kind: Regularizer::L2,
            weight,
        }
    }

    pub fn l1(weight: f64) -> Self {
        RegularizerSpec {
            kind: Regularizer::L1,
            weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            Regularizer::L2 => self.weight > 0.0 && self.weight.is_finite(),
            Regularizer::L1 => self.weight >= 0.0 && self.weight.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(GlapError::InvalidInput(format!(
                "invalid {:?} regularizer weight {}",
                self.kind, self.weight
            )))
        }
    }
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec::l2(1e-3)
    }
}

fn check_weight_dims(ks: &DMatrix<f64>, kt: &DVector<f64>) -> Result<()> {
    if ks.nrows() != kt.len() {
        return Err(GlapError::dim("target semantic dimension", ks.nrows(), kt.len()));
    }
    Ok(())
}

/// Ridge reconstruction `w = (K^T K + weight I)^{-1} K^T k`.
pub fn solve_weights_l2(ks: &DMatrix<f64>, kt: &DVector<f64>, weight: f64) -> Result<DVector<f64>> {
    check_weight_dims(ks, kt)?;
    RegularizerSpec::l2(weight).validate()?;
    let mut gram = ks.transpose() * ks;
    for i in 0..gram.nrows() {
        gram[(i, i)] += weight;
    }
    let rhs = ks.transpose() * kt;
    let size = gram.nrows();
    let chol = gram.cholesky().ok_or(GlapError::Singular { rank: 0, size })?;
    Ok(chol.solve(&rhs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Maximum number of full coordinate sweeps.
    pub max_iter: usize,
    /// Absolute KKT tolerance.
    pub tol: f64,
}

impl LassoOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.tol.is_nan() || self.tol <= 0.0 {
            return Err(GlapError::InvalidInput("lasso needs max_iter > 0 and tol > 0".into()));
        }
        Ok(())
    }
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_iter: 10_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub weights: DVector<f64>,
    pub sweeps: usize,
    pub kkt_violation: f64,
    /// Objective after each sweep; the first entry is the objective at zero.
    pub objective_trace: Vec<f64>,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `||k - K w||^2 + weight ||w||_1`.
pub fn lasso_objective(ks: &DMatrix<f64>, kt: &DVector<f64>, w: &DVector<f64>, weight: f64) -> f64 {
    (kt - ks * w).norm_squared() + weight * w.lp_norm(1)
}

/// Largest violation of the lasso optimality conditions at `w`.
pub fn lasso_kkt_violation(ks: &DMatrix<f64>, kt: &DVector<f64>, w: &DVector<f64>, weight: f64) -> f64 {
    let grad = (ks.transpose() * (ks * w - kt)) * 2.0;
    grad.iter()
        .zip(w.iter())
        .enumerate()
        .map(|(j, (g, wj))| {
            if ks.column(j).norm_squared() == 0.0 {
                0.0
            } else if *wj == 0.0 {
                (g.abs() - weight).max(0.0)
            } else {
                (g + weight * wj.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Cyclic coordinate descent for `min ||k - K w||^2 + weight ||w||_1`,
/// starting from zero and visiting coordinates in index order.
pub fn lasso_coordinate_descent(
    ks: &DMatrix<f64>,
    kt: &DVector<f64>,
    weight: f64,
    opts: LassoOptions,
) -> Result<LassoFit> {
    check_weight_dims(ks, kt)?;
    RegularizerSpec::l1(weight).validate()?;
    opts.validate()?;

    let k = ks.ncols();
    let col_sq: Vec<f64> = (0..k).map(|j| ks.column(j).norm_squared()).collect();
    let mut w = DVector::zeros(k);
    let mut residual = kt.clone();
    let half = weight / 2.0;
    let mut trace = vec![lasso_objective(ks, kt, &w, weight)];

    let mut violation = lasso_kkt_violation(ks, kt, &w, weight);
    if violation <= opts.tol {
        return Ok(LassoFit {
            weights: w,
            sweeps: 0,
            kkt_violation: violation,
            objective_trace: trace,
        });
    }

    for sweep in 1..=opts.max_iter {
        for j in 0..k {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = ks.column(j);
            let old = w[j];
            let rho = col.dot(&residual) + col_sq[j] * old;
            let new = soft_threshold(rho, half) / col_sq[j];
            if new != old {
                residual.axpy(old - new, &col, 1.0);
                w[j] = new;
            }
        }
        trace.push(lasso_objective(ks, kt, &w, weight));
        violation = lasso_kkt_violation(ks, kt, &w, weight);
        if violation <= opts.tol {
            return Ok(LassoFit {
                weights: w,
                sweeps: sweep,
                kkt_violation: violation,
                objective_trace: trace,
            });
        }
    }
    Err(GlapError::NonConvergence {
        sweeps: opts.max_iter,
        violation,
    })
}

pub fn solve_weights_l1(
    ks: &DMatrix<f64>,
    kt: &DVector<f64>,
    weight: f64,
    max_iter: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    lasso_coordinate_descent(ks, kt, weight, LassoOptions { max_iter, tol }).map(|f| f.weights)
}
