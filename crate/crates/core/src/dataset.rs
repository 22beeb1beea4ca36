//! Matrices, labels and semantic tables for the zero-shot setting.
//!
//! Instances are columns everywhere in this crate: a feature matrix is
//! `d x N` and a semantic matrix is `a x N`. File formats store instances as
//! rows and are transposed at ingestion (see [`crate::io`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{GlapError, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub u64);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for ClassId {
    fn from(v: u64) -> Self {
        ClassId(v)
    }
}

fn check_finite(m: &DMatrix<f64>, context: &str) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(GlapError::NonFinite {
                    context: context.to_string(),
                    row: r,
                    col: c,
                });
            }
        }
    }
    Ok(())
}

/// Image features, one instance per column (`d x N`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(GlapError::InvalidInput("feature dimension is zero".into()));
        }
        if values.ncols() == 0 {
            return Err(GlapError::InvalidInput("no instances".into()));
        }
        check_finite(&values, "features")?;
        Ok(FeatureMatrix { values })
    }

    /// Builds from instance rows, transposing into the column convention.
    pub fn from_instance_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(GlapError::InvalidInput("no instances".into()));
        }
        let d = rows[0].len();
        for row in rows {
            if row.len() != d {
                return Err(GlapError::dim("feature row length", d, row.len()));
            }
        }
        Self::new(DMatrix::from_fn(d, n, |r, c| rows[c][r]))
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    pub fn instance(&self, j: usize) -> DVectorView<'_, f64> {
        self.values.column(j)
    }

    /// Rescales every instance to unit Euclidean norm; zero instances are kept.
    pub fn l2_normalized(&self) -> Self {
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        FeatureMatrix { values }
    }

    /// Keeps the listed instance columns, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        FeatureMatrix {
            values: self.values.select_columns(indices),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<ClassId>);

impl LabelVector {
    pub fn new(labels: Vec<ClassId>) -> Self {
        LabelVector(labels)
    }

    pub fn from_ids(ids: impl IntoIterator<Item = u64>) -> Self {
        LabelVector(ids.into_iter().map(ClassId).collect())
    }

    pub fn as_slice(&self) -> &[ClassId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassId> {
        self.0.iter()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        LabelVector(indices.iter().map(|&i| self.0[i]).collect())
    }
}

/// Per-class semantic vectors (attributes or word vectors), one column per
/// class in entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable {
    ids: Vec<ClassId>,
    vectors: DMatrix<f64>,
    index: HashMap<ClassId, usize>,
}

impl SemanticTable {
    /// `vectors` is `a x n`, column `i` belonging to `ids[i]`.
    pub fn new(ids: Vec<ClassId>, vectors: DMatrix<f64>) -> Result<Self> {
        if ids.is_empty() {
            return Err(GlapError::InvalidInput("semantic table has no entries".into()));
        }
        if vectors.ncols() != ids.len() {
            return Err(GlapError::dim("semantic table entries", ids.len(), vectors.ncols()));
        }
        if vectors.nrows() == 0 {
            return Err(GlapError::InvalidInput("semantic dimension is zero".into()));
        }
        check_finite(&vectors, "semantic table")?;
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(*id, i).is_some() {
                return Err(GlapError::InvalidInput(format!(
                    "duplicate class id {id} in semantic table"
                )));
            }
        }
        if vectors.column_iter().all(|c| c.norm() == 0.0) {
            return Err(GlapError::InvalidInput(
                "semantic table has only zero vectors".into(),
            ));
        }
        Ok(SemanticTable { ids, vectors, index })
    }

    pub fn from_entries(entries: Vec<(ClassId, Vec<f64>)>) -> Result<Self> {
        let a = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
        for (id, v) in &entries {
            if v.len() != a {
                return Err(GlapError::dim(format!("semantic vector of class {id}"), a, v.len()));
            }
        }
        let vectors = DMatrix::from_fn(a, entries.len(), |r, c| entries[c].1[r]);
        Self::new(entries.into_iter().map(|(id, _)| id).collect(), vectors)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    /// The `a x n` matrix of semantic columns (K_s or K_t).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> DVectorView<'_, f64> {
        self.vectors.column(i)
    }

    pub fn position(&self, id: ClassId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: ClassId) -> Option<DVectorView<'_, f64>> {
        self.position(id).map(|i| self.vectors.column(i))
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ClassId, DVectorView<'_, f64>)> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (*id, self.vectors.column(i)))
    }

    /// Unit-norm copy; zero vectors are left as they are.
    pub fn l2_normalized(&self) -> Self {
        let mut vectors = self.vectors.clone();
        for mut col in vectors.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        SemanticTable {
            ids: self.ids.clone(),
            vectors,
            index: self.index.clone(),
        }
    }

    /// Dense positions of `labels` in this table.
    pub fn positions_of(&self, labels: &LabelVector) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|id| self.position(*id).ok_or(GlapError::UnknownClass(*id)))
            .collect()
    }

    /// Per-instance semantic matrix `K = [k_{y_1}, ..., k_{y_N}]`.
    pub fn expand(&self, labels: &LabelVector) -> Result<DMatrix<f64>> {
        let pos = self.positions_of(labels)?;
        Ok(self.vectors.select_columns(&pos))
    }
}

/// Labeled source data plus the seen and unseen semantic tables.
#[derive(Debug, Clone)]
pub struct ZslSplit {
    pub features: FeatureMatrix,
    pub labels: LabelVector,
    pub seen: SemanticTable,
    pub unseen: SemanticTable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    OverlappingClassIds(Vec<ClassId>),
    SemanticDimensionMismatch { seen: usize, unseen: usize },
    LabelCountMismatch { labels: usize, instances: usize },
    UnknownLabels(Vec<ClassId>),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OverlappingClassIds(ids) => {
                write!(f, "overlapping class ids: {}", join_ids(ids))
            }
            Violation::SemanticDimensionMismatch { seen, unseen } => {
                write!(f, "semantic dimension mismatch: seen {seen}, unseen {unseen}")
            }
            Violation::LabelCountMismatch { labels, instances } => {
                write!(f, "label count mismatch: {labels} labels for {instances} instances")
            }
            Violation::UnknownLabels(ids) => {
                write!(f, "labels missing from seen semantics: {}", join_ids(ids))
            }
        }
    }
}

fn join_ids(ids: &[ClassId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            let msg = self
                .violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            Err(GlapError::InvalidInput(msg))
        }
    }
}

/// Lists every broken invariant of the split. Never fails.
pub fn validate_split(split: &ZslSplit) -> ValidationReport {
    let mut violations = Vec::new();

    let seen_ids: BTreeSet<ClassId> = split.seen.ids().iter().copied().collect();
    let overlap: Vec<ClassId> = split
        .unseen
        .ids()
        .iter()
        .filter(|id| seen_ids.contains(id))
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !overlap.is_empty() {
        violations.push(Violation::OverlappingClassIds(overlap));
    }

    if split.seen.dim() != split.unseen.dim() {
        violations.push(Violation::SemanticDimensionMismatch {
            seen: split.seen.dim(),
            unseen: split.unseen.dim(),
        });
    }

    if split.labels.len() != split.features.len() {
        violations.push(Violation::LabelCountMismatch {
            labels: split.labels.len(),
            instances: split.features.len(),
        });
    }

    let unknown: BTreeSet<ClassId> = split
        .labels
        .iter()
        .filter(|id| !seen_ids.contains(id))
        .copied()
        .collect();
    if !unknown.is_empty() {
        violations.push(Violation::UnknownLabels(unknown.into_iter().collect()));
    }

    ValidationReport { violations }
}

/// Reduces per-image semantic annotations (`a x N`) to one mean vector per
/// class. Entries come out sorted by class id.
pub fn aggregate_per_image_semantics(
    features: &FeatureMatrix,
    labels: &LabelVector,
    per_image: &DMatrix<f64>,
) -> Result<SemanticTable> {
    let n = features.len();
    if labels.len() != n {
        return Err(GlapError::dim("labels", n, labels.len()));
    }
    if per_image.ncols() != n {
        return Err(GlapError::dim("per-image semantic columns", n, per_image.ncols()));
    }
    check_finite(per_image, "per-image semantics")?;

    let a = per_image.nrows();
    let mut sums: BTreeMap<ClassId, (DVector<f64>, usize)> = BTreeMap::new();
    for (j, id) in labels.iter().enumerate() {
        let entry = sums
            .entry(*id)
            .or_insert_with(|| (DVector::zeros(a), 0));
        entry.0 += per_image.column(j);
        entry.1 += 1;
    }

    let ids: Vec<ClassId> = sums.keys().copied().collect();
    let mut vectors = DMatrix::zeros(a, ids.len());
    for (i, (sum, count)) in sums.values().enumerate() {
        vectors.set_column(i, &(sum / *count as f64));
    }
    SemanticTable::new(ids, vectors)
}
