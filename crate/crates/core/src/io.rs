//! File formats.
//!
//! CSV inputs are comma separated, headerless, with `#` comment lines and
//! one instance per row:
//!
//! * features: `f_1,...,f_d`
//! * labels: one integer class id per line, aligned with feature rows
//! * semantic tables: `class_id,v_1,...,v_a`
//!
//! Models and reports are JSON with lexicographically sorted keys. Floats
//! are written in shortest round-trip form everywhere.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{ClassId, FeatureMatrix, LabelVector, SemanticTable};
use crate::error::{GlapError, Result};
use crate::model::{GlapModel, Metric, Prediction, Provenance, Strategy, StrategyConfig};
use crate::prototype::VirtualDataset;
use crate::solvers::{LassoOptions, LinearMap, RegularizerSpec};

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> GlapError {
    GlapError::Parse {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Non-comment rows of a CSV file with their 1-based line numbers.
fn read_rows(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| GlapError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn parse_float(path: &Path, line: u64, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(path, line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value '{field}'")));
    }
    Ok(v)
}

fn parse_class_id(path: &Path, line: u64, field: &str) -> Result<ClassId> {
    field
        .parse::<u64>()
        .map(ClassId)
        .map_err(|_| parse_err(path, line, format!("'{field}' is not a non-negative integer class id")))
}

/// Reads a float matrix stored one instance per row; returns it transposed
/// (`columns x rows`).
pub fn read_instance_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows = read_rows(path)?;
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no instances"));
    }
    let width = rows[0].1.len();
    let mut values = Vec::with_capacity(rows.len() * width);
    for (line, fields) in &rows {
        if fields.len() != width {
            return Err(parse_err(
                path,
                *line,
                format!("expected {width} values, found {}", fields.len()),
            ));
        }
        for f in fields {
            values.push(parse_float(path, *line, f)?);
        }
    }
    // Row-major instance rows are exactly the column-major instance columns.
    Ok(DMatrix::from_vec(width, rows.len(), values))
}

pub fn read_features(path: &Path, l2_normalize: bool) -> Result<FeatureMatrix> {
    let m = FeatureMatrix::new(read_instance_matrix(path)?)?;
    Ok(if l2_normalize { m.l2_normalized() } else { m })
}

pub fn read_labels(path: &Path) -> Result<LabelVector> {
    let rows = read_rows(path)?;
    rows.iter()
        .map(|(line, fields)| {
            if fields.len() != 1 {
                return Err(parse_err(path, *line, "expected one class id per line"));
            }
            parse_class_id(path, *line, &fields[0])
        })
        .collect::<Result<Vec<_>>>()
        .map(LabelVector::new)
}

pub fn read_semantic_table(path: &Path, l2_normalize: bool) -> Result<SemanticTable> {
    let rows = read_rows(path)?;
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no semantic entries"));
    }
    let mut entries = Vec::with_capacity(rows.len());
    let width = rows[0].1.len();
    for (line, fields) in &rows {
        if fields.len() < 2 {
            return Err(parse_err(path, *line, "expected class_id followed by at least one value"));
        }
        if fields.len() != width {
            return Err(parse_err(path, *line, format!("expected {width} fields, found {}", fields.len())));
        }
        let id = parse_class_id(path, *line, &fields[0])?;
        let v = fields[1..]
            .iter()
            .map(|f| parse_float(path, *line, f))
            .collect::<Result<Vec<_>>>()?;
        entries.push((id, v));
    }
    let table = SemanticTable::from_entries(entries)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(if l2_normalize { table.l2_normalized() } else { table })
}

fn push_row<'a>(out: &mut String, lead: Option<String>, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    if let Some(l) = lead {
        out.push_str(&l);
        first = false;
    }
    for v in values {
        if !first {
            out.push(',');
        }
        out.push_str(&v.to_string());
        first = false;
    }
    out.push('\n');
}

/// One row per column of `m`.
pub fn instance_rows_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for col in m.column_iter() {
        push_row(&mut out, None, col.iter());
    }
    out
}

pub fn labels_csv(labels: &LabelVector) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn semantic_table_csv(table: &SemanticTable) -> String {
    let mut out = String::new();
    for (id, v) in table.entries() {
        push_row(&mut out, Some(id.to_string()), v.iter());
    }
    out
}

/// `instance_index,predicted_class_id,score_1,...,score_l`.
pub fn predictions_csv(pred: &Prediction) -> String {
    let mut out = String::new();
    for (j, label) in pred.labels.iter().enumerate() {
        push_row(&mut out, Some(format!("{j},{label}")), pred.scores.column(j).iter());
    }
    out
}

/// Virtual instances as `class_id,f_1,...,f_d` rows.
pub fn virtual_csv(v: &VirtualDataset) -> String {
    let mut out = String::new();
    for (j, label) in v.labels.iter().enumerate() {
        push_row(&mut out, Some(label.to_string()), v.features.column(j).iter());
    }
    out
}

/// Serializes with sorted keys and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let v: Value = serde_json::to_value(value).map_err(|e| GlapError::Io(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| GlapError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GlapError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenEntry {
    pub class_id: ClassId,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoFile {
    pub max_iter: usize,
    pub tol: f64,
}

/// On-disk model, version 1. `A` is the `a x d` map in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub a: usize,
    pub d: usize,
    pub metric: Metric,
    pub strategy: Strategy,
    pub lambda: f64,
    pub npc: usize,
    pub sigma2: Option<f64>,
    pub seed: u64,
    pub ridge_eps: f64,
    pub reg: RegularizerSpec,
    pub lasso: LassoFile,
    #[serde(rename = "A")]
    pub matrix: Vec<f64>,
    pub unseen: Vec<UnseenEntry>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn from_model(model: &GlapModel) -> Self {
        let a_mat = model.map.matrix();
        let (a, d) = a_mat.shape();
        let mut matrix = Vec::with_capacity(a * d);
        for r in 0..a {
            matrix.extend(a_mat.row(r).iter());
        }
        let c = &model.config;
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            a,
            d,
            metric: c.metric,
            strategy: c.strategy,
            lambda: c.lambda,
            npc: c.npc,
            sigma2: c.sigma2,
            seed: c.seed,
            ridge_eps: model.map.ridge_eps(),
            reg: c.reg,
            lasso: LassoFile {
                max_iter: c.lasso.max_iter,
                tol: c.lasso.tol,
            },
            matrix,
            unseen: model
                .unseen
                .entries()
                .map(|(class_id, v)| UnseenEntry {
                    class_id,
                    vector: v.iter().copied().collect(),
                })
                .collect(),
            provenance: model.provenance,
        }
    }

    pub fn into_model(self) -> Result<GlapModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(GlapError::InvalidInput(format!(
                "unsupported model format_version {}",
                self.format_version
            )));
        }
        if self.matrix.len() != self.a * self.d {
            return Err(GlapError::dim("model A entries", self.a * self.d, self.matrix.len()));
        }
        let map = LinearMap::new(DMatrix::from_row_slice(self.a, self.d, &self.matrix), self.ridge_eps)?;
        let unseen = SemanticTable::from_entries(
            self.unseen.into_iter().map(|e| (e.class_id, e.vector)).collect(),
        )?;
        let config = StrategyConfig {
            strategy: self.strategy,
            lambda: self.lambda,
            npc: self.npc,
            sigma2: self.sigma2,
            reg: self.reg,
            lasso: LassoOptions {
                max_iter: self.lasso.max_iter,
                tol: self.lasso.tol,
            },
            ridge_eps: Some(self.ridge_eps),
            seed: self.seed,
            metric: self.metric,
        };
        GlapModel::new(map, unseen, config, self.provenance)
    }
}

pub fn model_json(model: &GlapModel) -> Result<String> {
    to_sorted_json(&ModelFile::from_model(model))
}

pub fn read_model(path: &Path) -> Result<GlapModel> {
    let text = fs::read_to_string(path).map_err(|e| GlapError::Io(format!("{}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| parse_err(path, e.line() as u64, e.to_string()))?;
    file.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train, StrategyConfig};
    use crate::synth::{generate_synthetic_split, SyntheticConfig};
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn features_are_transposed_and_comments_skipped() {
        let f = write_tmp("# header comment\n1,2,3\n\n4,5,6\n");
        let m = read_features(f.path(), false).unwrap();
        assert_eq!(m.dim(), 3);
        assert_eq!(m.len(), 2);
        assert_eq!(m.instance(1).as_slice(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn nan_row_names_its_line() {
        let f = write_tmp("1,2\n3,NaN\n");
        match read_features(f.path(), false).unwrap_err() {
            GlapError::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("non-finite"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_and_ragged_files_are_rejected() {
        let f = write_tmp("# nothing\n");
        assert!(read_features(f.path(), false).unwrap_err().to_string().contains("no instances"));
        let f = write_tmp("1,2\n3\n");
        assert!(matches!(read_features(f.path(), false), Err(GlapError::Parse { line: 2, .. })));
    }

    #[test]
    fn labels_and_tables_parse() {
        let f = write_tmp("3\n3\n# c\n17\n");
        assert_eq!(read_labels(f.path()).unwrap(), LabelVector::from_ids([3, 3, 17]));
        let f = write_tmp("3\n-1\n");
        assert!(matches!(read_labels(f.path()), Err(GlapError::Parse { line: 2, .. })));

        let f = write_tmp("10,1.5,0\n12,0,2\n");
        let t = read_semantic_table(f.path(), false).unwrap();
        assert_eq!(t.ids(), &[ClassId(10), ClassId(12)]);
        assert_eq!(t.dim(), 2);
        let normed = read_semantic_table(f.path(), true).unwrap();
        assert_eq!(normed.vector(0).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn model_json_round_trips() {
        let cfg = SyntheticConfig { samples_per_class: 10, ..SyntheticConfig::default() };
        let w = generate_synthetic_split(&cfg).unwrap();
        let model = train(&w.split, &StrategyConfig::new(crate::Strategy::Glap2).with_npc(5)).unwrap();
        let text = model_json(&model).unwrap();
        let f = write_tmp(&text);
        let back = read_model(f.path()).unwrap();
        assert_eq!(back.map, model.map);
        assert_eq!(back.unseen, model.unseen);
        assert_eq!(back.config, model.config);
        assert_eq!(back.provenance, model.provenance);
        assert!(text.contains("\"format_version\": 1"));
        // Keys come out sorted.
        let a_pos = text.find("\"A\"").unwrap();
        let d_pos = text.find("\"d\"").unwrap();
        assert!(a_pos < d_pos);
    }

    proptest! {
        #[test]
        fn csv_floats_round_trip(values in prop::collection::vec(-1e300f64..1e300, 1..20)) {
            let m = DMatrix::from_vec(values.len(), 1, values.clone());
            let f = write_tmp(&instance_rows_csv(&m));
            let back = read_instance_matrix(f.path()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
