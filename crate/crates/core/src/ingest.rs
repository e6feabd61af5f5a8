//! CSV ingestion driven by a [`SchemaConfig`].
//!
//! The unit file holds one row per unit. Cluster covariates come from an
//! optional cluster file and/or from aggregates of unit columns. Categorical
//! columns are one-hot expanded (first sorted level dropped as reference).

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClusterRecord, CosDataset, UnitRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdColumns {
    pub unit: String,
    pub cluster: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Arithmetic mean of member values.
    Mean,
    /// Share of member units with a nonzero value.
    Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub column: String,
    pub aggregator: Aggregator,
    /// Name of the synthesized cluster covariate; defaults to
    /// `<column>_mean` or `<column>_prop`.
    #[serde(default)]
    pub name: Option<String>,
}

impl AggregateSpec {
    pub fn output_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| match self.aggregator {
            Aggregator::Mean => format!("{}_mean", self.column),
            Aggregator::Proportion => format!("{}_prop", self.column),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub unit_file: PathBuf,
    #[serde(default)]
    pub cluster_file: Option<PathBuf>,
    pub id_columns: IdColumns,
    pub treatment_column: String,
    pub outcome_column: String,
    #[serde(default)]
    pub unit_covariates: Vec<String>,
    #[serde(default)]
    pub cluster_covariates: Vec<String>,
    #[serde(default)]
    pub aggregate_unit_covariates: Vec<AggregateSpec>,
    /// Covariates (unit or cluster) to one-hot expand.
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl SchemaConfig {
    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.unit_file.is_relative() {
            self.unit_file = base.join(&self.unit_file);
        }
        if let Some(p) = &self.cluster_file {
            if p.is_relative() {
                self.cluster_file = Some(base.join(p));
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let listed = [
            &self.id_columns.unit,
            &self.id_columns.cluster,
            &self.treatment_column,
            &self.outcome_column,
        ]
        .into_iter()
        .cloned()
        .chain(self.unit_covariates.iter().cloned())
        .chain(self.cluster_covariates.iter().cloned())
        .chain(self.aggregate_unit_covariates.iter().map(|a| a.output_name()));
        for name in listed {
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("column '{name}' listed twice")));
            }
        }
        if self.cluster_file.is_none() && !self.cluster_covariates.is_empty() {
            return Err(Error::Config(
                "cluster_covariates require a cluster_file; use aggregate_unit_covariates instead"
                    .into(),
            ));
        }
        Ok(())
    }
}

struct Table {
    file: String,
    headers: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            file: path.display().to_string(),
            headers,
            rows,
        })
    }

    fn has(&self, column: &str) -> bool {
        self.headers.contains_key(column)
    }

    fn col(&self, column: &str) -> Result<usize> {
        self.headers
            .get(column)
            .copied()
            .ok_or_else(|| Error::MissingColumn {
                file: self.file.clone(),
                column: column.to_string(),
            })
    }

    /// Raw cell; `row` is 0-based over data rows.
    fn cell(&self, row: usize, col: usize, name: &str) -> Result<&str> {
        let v = self.rows[row].get(col).unwrap_or("");
        if is_missing(v) {
            return Err(Error::MissingValue {
                column: name.to_string(),
                row: line_number(row),
            });
        }
        Ok(v)
    }

    fn number(&self, row: usize, col: usize, name: &str) -> Result<f64> {
        let v = self.cell(row, col, name)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(Error::UnparseableValue {
                column: name.to_string(),
                row: line_number(row),
                value: v.to_string(),
            }),
        }
    }

    fn flag(&self, row: usize, col: usize, name: &str) -> Result<bool> {
        let v = self.cell(row, col, name)?;
        match v.to_ascii_lowercase().as_str() {
            "1" | "1.0" | "true" | "yes" => Ok(true),
            "0" | "0.0" | "false" | "no" => Ok(false),
            _ => Err(Error::UnparseableValue {
                column: name.to_string(),
                row: line_number(row),
                value: v.to_string(),
            }),
        }
    }
}

/// 1-based file line of a data row (the header is line 1).
fn line_number(row: usize) -> usize {
    row + 2
}

fn is_missing(v: &str) -> bool {
    matches!(v, "" | "NA" | "na" | "N/A" | "NaN" | "nan" | "." | "null")
}

/// Numeric or one-hot expanded column extractor.
enum ColumnReader {
    Numeric {
        name: String,
        col: usize,
    },
    OneHot {
        name: String,
        col: usize,
        levels: Vec<String>,
    },
}

impl ColumnReader {
    fn new(table: &Table, name: &str, categorical: bool, rows: &[usize]) -> Result<Self> {
        let col = table.col(name)?;
        if !categorical {
            return Ok(Self::Numeric {
                name: name.to_string(),
                col,
            });
        }
        let mut levels = BTreeSet::new();
        for &r in rows {
            levels.insert(table.cell(r, col, name)?.to_string());
        }
        // reference level (first in sorted order) is dropped
        let levels = levels.into_iter().skip(1).collect();
        Ok(Self::OneHot {
            name: name.to_string(),
            col,
            levels,
        })
    }

    fn names(&self) -> Vec<String> {
        match self {
            Self::Numeric { name, .. } => vec![name.clone()],
            Self::OneHot { name, levels, .. } => {
                levels.iter().map(|l| format!("{name}={l}")).collect()
            }
        }
    }

    fn read(&self, table: &Table, row: usize, out: &mut Vec<f64>) -> Result<()> {
        match self {
            Self::Numeric { name, col } => out.push(table.number(row, *col, name)?),
            Self::OneHot { name, col, levels } => {
                let v = table.cell(row, *col, name)?;
                out.extend(levels.iter().map(|l| if l == v { 1.0 } else { 0.0 }));
            }
        }
        Ok(())
    }
}

/// Sum of values in a fixed (sorted) order so aggregates do not depend on
/// row order.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn load_dataset(schema: &SchemaConfig) -> Result<CosDataset> {
    schema.validate()?;
    let units = Table::read(&schema.unit_file)?;
    let clusters = schema
        .cluster_file
        .as_deref()
        .map(Table::read)
        .transpose()?;

    let unit_id_col = units.col(&schema.id_columns.unit)?;
    let unit_cluster_col = units.col(&schema.id_columns.cluster)?;
    let outcome_col = units.col(&schema.outcome_column)?;

    let all_rows: Vec<usize> = (0..units.rows.len()).collect();
    let is_cat = |n: &str| schema.categorical.iter().any(|c| c == n);
    let unit_readers = schema
        .unit_covariates
        .iter()
        .map(|n| ColumnReader::new(&units, n, is_cat(n), &all_rows))
        .collect::<Result<Vec<_>>>()?;

    // Cluster membership in order of first appearance.
    let mut cluster_order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<usize>> = HashMap::new();
    for r in 0..units.rows.len() {
        let id = units.cell(r, unit_cluster_col, &schema.id_columns.cluster)?;
        members
            .entry(id.to_string())
            .or_insert_with(|| {
                cluster_order.push(id.to_string());
                Vec::new()
            })
            .push(r);
    }

    // Treatment: from the unit file when present there, else the cluster file.
    let mut treatment: HashMap<String, bool> = HashMap::new();
    if units.has(&schema.treatment_column) {
        let col = units.col(&schema.treatment_column)?;
        for id in &cluster_order {
            let rows = &members[id];
            let first = units.flag(rows[0], col, &schema.treatment_column)?;
            for &r in &rows[1..] {
                if units.flag(r, col, &schema.treatment_column)? != first {
                    return Err(Error::NonConstantTreatmentWithinCluster {
                        cluster: id.clone(),
                        row: line_number(r),
                    });
                }
            }
            treatment.insert(id.clone(), first);
        }
    } else if let Some(ct) = &clusters {
        let idc = ct.col(&schema.id_columns.cluster)?;
        let tc = ct.col(&schema.treatment_column)?;
        for r in 0..ct.rows.len() {
            let id = ct.cell(r, idc, &schema.id_columns.cluster)?.to_string();
            treatment.insert(id, ct.flag(r, tc, &schema.treatment_column)?);
        }
    } else {
        return Err(Error::MissingColumn {
            file: units.file.clone(),
            column: schema.treatment_column.clone(),
        });
    }

    // Cluster covariates from the cluster file.
    let mut cluster_names = Vec::new();
    let mut file_covariates: HashMap<String, Vec<f64>> = HashMap::new();
    let mut file_order: Vec<String> = Vec::new();
    if let Some(ct) = &clusters {
        let idc = ct.col(&schema.id_columns.cluster)?;
        let rows: Vec<usize> = (0..ct.rows.len()).collect();
        let readers = schema
            .cluster_covariates
            .iter()
            .map(|n| ColumnReader::new(ct, n, is_cat(n), &rows))
            .collect::<Result<Vec<_>>>()?;
        for rd in &readers {
            cluster_names.extend(rd.names());
        }
        for r in rows {
            let id = ct.cell(r, idc, &schema.id_columns.cluster)?.to_string();
            let mut w = Vec::new();
            for rd in &readers {
                rd.read(ct, r, &mut w)?;
            }
            if file_covariates.insert(id.clone(), w).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "cluster '{id}' appears twice in {}",
                    ct.file
                )));
            }
            file_order.push(id);
        }
    }

    // Aggregated cluster covariates.
    let agg_cols = schema
        .aggregate_unit_covariates
        .iter()
        .map(|a| units.col(&a.column))
        .collect::<Result<Vec<_>>>()?;
    cluster_names.extend(
        schema
            .aggregate_unit_covariates
            .iter()
            .map(AggregateSpec::output_name),
    );

    let ordered_ids: Vec<String> = if clusters.is_some() {
        let ids: Vec<String> = file_order
            .into_iter()
            .filter(|id| {
                let keep = members.contains_key(id);
                if !keep {
                    log::warn!("cluster '{id}' has no units and is skipped");
                }
                keep
            })
            .collect();
        for id in &cluster_order {
            if !file_covariates.contains_key(id) {
                return Err(Error::InvalidDataset(format!(
                    "cluster '{id}' is missing from the cluster file"
                )));
            }
        }
        ids
    } else {
        cluster_order.clone()
    };

    let mut cluster_records = Vec::with_capacity(ordered_ids.len());
    for id in &ordered_ids {
        let rows = &members[id];
        let mut w = file_covariates.remove(id).unwrap_or_default();
        for (spec, &col) in schema.aggregate_unit_covariates.iter().zip(&agg_cols) {
            let mut vals = rows
                .iter()
                .map(|&r| units.number(r, col, &spec.column))
                .collect::<Result<Vec<_>>>()?;
            if spec.aggregator == Aggregator::Proportion {
                for v in vals.iter_mut() {
                    *v = if *v != 0.0 { 1.0 } else { 0.0 };
                }
            }
            w.push(order_free_mean(&mut vals));
        }
        let treated = *treatment.get(id).ok_or_else(|| {
            Error::InvalidDataset(format!("no treatment status for cluster '{id}'"))
        })?;
        cluster_records.push(ClusterRecord::new(id.clone(), treated, w));
    }

    let mut unit_names = Vec::new();
    for rd in &unit_readers {
        unit_names.extend(rd.names());
    }
    let mut unit_records = Vec::with_capacity(units.rows.len());
    for r in 0..units.rows.len() {
        let mut x = Vec::with_capacity(unit_names.len());
        for rd in &unit_readers {
            rd.read(&units, r, &mut x)?;
        }
        unit_records.push(UnitRecord {
            unit_id: units.cell(r, unit_id_col, &schema.id_columns.unit)?.to_string(),
            cluster_id: units
                .cell(r, unit_cluster_col, &schema.id_columns.cluster)?
                .to_string(),
            x,
            y: units.number(r, outcome_col, &schema.outcome_column)?,
        });
    }

    CosDataset::new(unit_names, cluster_names, cluster_records, unit_records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    fn schema(unit_file: PathBuf) -> SchemaConfig {
        SchemaConfig {
            unit_file,
            cluster_file: None,
            id_columns: IdColumns {
                unit: "id".into(),
                cluster: "school".into(),
            },
            treatment_column: "trt".into(),
            outcome_column: "y".into(),
            unit_covariates: vec!["score".into()],
            cluster_covariates: vec![],
            aggregate_unit_covariates: vec![AggregateSpec {
                column: "score".into(),
                aggregator: Aggregator::Mean,
                name: None,
            }],
            categorical: vec![],
        }
    }

    #[test]
    fn two_rows_two_clusters() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "u.csv", "id,school,trt,y,score\n1,a,1,3.0,1\n2,b,0,2.0,2\n");
        let ds = load_dataset(&schema(f)).unwrap();
        assert_eq!(ds.m(), 2);
        assert_eq!(ds.n(), 2);
        assert!(ds.clusters()[0].treated);
        assert!(!ds.clusters()[1].treated);
    }

    #[test]
    fn aggregate_mean() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "u.csv",
            "id,school,trt,y,score\n1,a,1,3.0,1\n2,a,1,2.0,3\n3,b,0,1,5\n",
        );
        let ds = load_dataset(&schema(f)).unwrap();
        assert_eq!(ds.cluster_covariates(), ["score_mean"]);
        assert_eq!(ds.clusters()[0].w, vec![2.0]);
        assert_eq!(ds.clusters()[1].w, vec![5.0]);
    }

    #[test]
    fn non_constant_treatment() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "u.csv",
            "id,school,trt,y,score\n1,a,1,3.0,1\n2,a,0,2.0,3\n3,b,0,1,5\n",
        );
        let err = load_dataset(&schema(f)).unwrap_err();
        assert!(
            matches!(err, Error::NonConstantTreatmentWithinCluster { ref cluster, row: 3 } if cluster == "a")
        );
    }

    #[test]
    fn missing_and_unparseable_values_name_location() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "u.csv", "id,school,trt,y,score\n1,a,1,,1\n2,b,0,2,1\n");
        let err = load_dataset(&schema(f)).unwrap_err();
        assert!(matches!(err, Error::MissingValue { ref column, row: 2 } if column == "y"));

        let f = write(dir.path(), "v.csv", "id,school,trt,y,score\n1,a,1,1,1\n2,b,0,2,abc\n");
        let err = load_dataset(&schema(f)).unwrap_err();
        assert!(
            matches!(err, Error::UnparseableValue { ref column, row: 3, ref value } if column == "score" && value == "abc")
        );
    }

    #[test]
    fn missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "u.csv", "id,school,trt,y\n1,a,1,1\n2,b,0,2\n");
        let err = load_dataset(&schema(f)).unwrap_err();
        assert!(matches!(err, Error::MissingColumn { ref column, .. } if column == "score"));
    }

    #[test]
    fn cluster_file_and_categorical() {
        let dir = tempfile::tempdir().unwrap();
        let u = write(
            dir.path(),
            "u.csv",
            "id,school,y,score,race\n1,a,3.0,1,w\n2,a,2.0,3,b\n3,b,1,5,h\n4,b,1,5,w\n",
        );
        let c = write(
            dir.path(),
            "c.csv",
            "school,trt,size\nb,0,100\na,1,200\nzz,0,5\n",
        );
        let mut s = schema(u);
        s.cluster_file = Some(c);
        s.cluster_covariates = vec!["size".into()];
        s.unit_covariates = vec!["score".into(), "race".into()];
        s.categorical = vec!["race".into()];
        s.aggregate_unit_covariates = vec![];
        let ds = load_dataset(&s).unwrap();
        assert_eq!(ds.clusters()[0].cluster_id, "b");
        assert_eq!(ds.clusters()[0].w, vec![100.0]);
        assert!(ds.clusters()[1].treated);
        assert_eq!(ds.unit_covariates(), ["score", "race=h", "race=w"]);
        // unit 3 in cluster b has race h
        assert_eq!(ds.units()[0].x, vec![5.0, 1.0, 0.0]);
    }

    #[test]
    fn duplicate_column_rejected() {
        let mut s = schema(PathBuf::from("nope.csv"));
        s.unit_covariates.push("y".into());
        assert!(matches!(load_dataset(&s), Err(Error::Config(_))));
    }

    proptest::proptest! {
        #[test]
        fn aggregates_ignore_row_order(vals in proptest::collection::vec(-1e3f64..1e3, 2..12), rot in 0usize..12) {
            let dir = tempfile::tempdir().unwrap();
            let mut rows: Vec<String> = vals.iter().enumerate()
                .map(|(i, v)| format!("{i},a,1,0,{v}")).collect();
            rows.push("99,b,0,0,0".into());
            let k = rot % rows.len();
            let body = |rs: &[String]| format!("id,school,trt,y,score\n{}\n", rs.join("\n"));
            let f1 = write(dir.path(), "a.csv", &body(&rows));
            rows.rotate_left(k);
            rows.reverse();
            let f2 = write(dir.path(), "b.csv", &body(&rows));
            let d1 = load_dataset(&schema(f1)).unwrap();
            let d2 = load_dataset(&schema(f2)).unwrap();
            let a1 = d1.clusters().iter().find(|c| c.cluster_id == "a").unwrap().w[0];
            let a2 = d2.clusters().iter().find(|c| c.cluster_id == "a").unwrap().w[0];
            proptest::prop_assert_eq!(a1, a2);
            let exact: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            proptest::prop_assert!((a1 - exact).abs() <= 1e-12 * exact.abs().max(1.0));
        }
    }
}
