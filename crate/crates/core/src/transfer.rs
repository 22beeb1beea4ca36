//! Transferability of unseen semantic vectors.
//!
//! An unseen class can only be told apart by a map fitted on seen classes if
//! its semantic vector lies in the column space of the seen semantic matrix.
//! The check projects each unseen vector onto that space and reports the
//! relative norm of what is left over.

use nalgebra::{DMatrix, DVector, SVD};
use serde::Serialize;

use crate::dataset::{ClassId, SemanticTable};
use crate::error::{GlapError, Result};

/// Singular values at or below this fraction of the largest are treated as zero.
pub const RANK_CUTOFF: f64 = 1e-10;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassTransfer {
    pub class_id: ClassId,
    pub relative_residual: f64,
    pub transferable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferReport {
    pub per_class: Vec<ClassTransfer>,
    pub tolerance: f64,
    /// Numerical rank of the seen semantic matrix.
    pub seen_rank: usize,
}

impl TransferReport {
    pub fn all_transferable(&self) -> bool {
        self.per_class.iter().all(|c| c.transferable)
    }
}

/// Orthonormal basis (`a x r`) of the column space of `m`.
pub fn column_space_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = SVD::new(m.clone(), true, false);
    let u = svd.u.expect("left singular vectors requested");
    let max = svd.singular_values.iter().fold(0.0_f64, |a, s| a.max(*s));
    if max == 0.0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > RANK_CUTOFF * max)
        .map(|(i, _)| i)
        .collect();
    u.select_columns(&keep)
}

/// `||v - P v|| / ||v||` for the orthogonal projector `P = B B^T`.
pub fn relative_residual(basis: &DMatrix<f64>, v: &DVector<f64>) -> Result<f64> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(GlapError::InvalidInput("zero semantic vector has no residual".into()));
    }
    let coords = basis.transpose() * v;
    let rest = v - basis * coords;
    Ok(rest.norm() / norm)
}

pub fn check_transferability(
    seen: &SemanticTable,
    unseen: &SemanticTable,
    tolerance: f64,
) -> Result<TransferReport> {
    if seen.dim() != unseen.dim() {
        return Err(GlapError::dim("unseen semantic dimension", seen.dim(), unseen.dim()));
    }
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(GlapError::InvalidInput(format!("tolerance must be positive, got {tolerance}")));
    }
    let basis = column_space_basis(seen.matrix());
    let per_class = unseen
        .entries()
        .map(|(class_id, k)| {
            let r = relative_residual(&basis, &k.into_owned()).map_err(|_| {
                GlapError::InvalidInput(format!("unseen class {class_id} has a zero semantic vector"))
            })?;
            Ok(ClassTransfer {
                class_id,
                relative_residual: r,
                transferable: r <= tolerance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferReport {
        per_class,
        tolerance,
        seen_rank: basis.ncols(),
    })
}
