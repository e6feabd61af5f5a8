//! Feature maps for the balance objective.
//!
//! Base columns are the cluster covariates (evaluated per unit) followed by
//! the unit covariates. Optional second-degree monomials and explicit
//! cluster-by-unit interactions are formed from the (standardized) base
//! columns. No intercept column is produced: the sum-to-n1 constraint on
//! the weights plays that role.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::CosDataset;
use crate::error::{Error, Result};

const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub include_unit: bool,
    pub standardize: bool,
    /// Explicit `(cluster covariate, unit covariate)` product terms.
    pub interactions: Vec<(String, String)>,
    pub polynomial_degree: u8,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            include_unit: true,
            standardize: true,
            interactions: Vec::new(),
            polynomial_degree: 1,
        }
    }
}

impl FeatureSpec {
    pub fn cluster_only() -> Self {
        Self {
            include_unit: false,
            ..Self::default()
        }
    }

    fn validate(&self, ds: &CosDataset) -> Result<()> {
        if !matches!(self.polynomial_degree, 1 | 2) {
            return Err(Error::Config(format!(
                "polynomial_degree must be 1 or 2, got {}",
                self.polynomial_degree
            )));
        }
        if !self.include_unit && !self.interactions.is_empty() {
            return Err(Error::Config(
                "interactions require include_unit = true".into(),
            ));
        }
        for (w, x) in &self.interactions {
            if !ds.cluster_covariates().contains(w) {
                return Err(Error::UnknownCovariate(w.clone()));
            }
            if !ds.unit_covariates().contains(x) {
                return Err(Error::UnknownCovariate(x.clone()));
            }
        }
        Ok(())
    }
}

/// Transformed covariates and treated-side target moments.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub names: Vec<String>,
    /// All units, dataset order, `n x d`.
    pub features: DMatrix<f64>,
    /// Control units (dataset positions, grouped by cluster).
    pub control_units: Vec<usize>,
    pub treated_units: Vec<usize>,
    /// Control rows, `n0 x d`.
    pub b0: DMatrix<f64>,
    /// Treated rows, `n1 x d`.
    pub b1: DMatrix<f64>,
    /// Treated feature means.
    pub target: DVector<f64>,
    /// Per-column centering applied (0 when not standardized).
    pub center: Vec<f64>,
    /// Per-column scaling applied (1 when not standardized).
    pub scale: Vec<f64>,
    /// Columns removed for having zero variance.
    pub dropped: Vec<String>,
    pub include_unit: bool,
    /// One row per cluster (dataset cluster order) when features do not
    /// vary within clusters.
    pub cluster_rows: Option<DMatrix<f64>>,
    n1: usize,
}

struct Column {
    name: String,
    values: Vec<f64>,
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes (if requested) and drops zero-variance columns.
fn finish(
    cols: Vec<Column>,
    standardize: bool,
    center: &mut Vec<f64>,
    scale: &mut Vec<f64>,
    dropped: &mut Vec<String>,
) -> Vec<Column> {
    let mut kept = Vec::with_capacity(cols.len());
    for mut c in cols {
        let (mean, sd) = moments(&c.values);
        if sd <= ZERO_VARIANCE * mean.abs().max(1.0) {
            log::warn!("feature '{}' has zero variance and is dropped", c.name);
            dropped.push(c.name);
            continue;
        }
        if standardize {
            for v in c.values.iter_mut() {
                *v = (*v - mean) / sd;
            }
            center.push(mean);
            scale.push(sd);
        } else {
            center.push(0.0);
            scale.push(1.0);
        }
        kept.push(c);
    }
    kept
}

pub fn build_features(ds: &CosDataset, spec: &FeatureSpec) -> Result<DesignMatrices> {
    spec.validate(ds)?;
    let n = ds.n();

    let mut base = Vec::new();
    for (j, name) in ds.cluster_covariates().iter().enumerate() {
        let values = (0..n)
            .map(|i| ds.clusters()[ds.unit_cluster(i)].w[j])
            .collect();
        base.push(Column {
            name: name.clone(),
            values,
        });
    }
    if spec.include_unit {
        for (j, name) in ds.unit_covariates().iter().enumerate() {
            let values = ds.units().iter().map(|u| u.x[j]).collect();
            base.push(Column {
                name: name.clone(),
                values,
            });
        }
    }

    let mut center = Vec::new();
    let mut scale = Vec::new();
    let mut dropped = Vec::new();
    let base = finish(base, spec.standardize, &mut center, &mut scale, &mut dropped);

    let product = |a: &Column, b: &Column, name: String| Column {
        name,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect(),
    };
    let mut extra = Vec::new();
    if spec.polynomial_degree == 2 {
        for c in &base {
            extra.push(product(c, c, format!("{}^2", c.name)));
        }
        for i in 0..base.len() {
            for j in i + 1..base.len() {
                extra.push(product(
                    &base[i],
                    &base[j],
                    format!("{}*{}", base[i].name, base[j].name),
                ));
            }
        }
    }
    for (w, x) in &spec.interactions {
        let find = |name: &str| base.iter().find(|c| c.name == name);
        let (Some(a), Some(b)) = (find(w), find(x)) else {
            log::warn!("interaction {w}*{x} skipped: a factor was dropped");
            continue;
        };
        let name = format!("{w}*{x}");
        let mirrored = format!("{x}*{w}");
        if extra.iter().any(|c| c.name == name || c.name == mirrored) {
            continue;
        }
        extra.push(product(a, b, name));
    }
    let extra = finish(extra, spec.standardize, &mut center, &mut scale, &mut dropped);

    let cols: Vec<Column> = base.into_iter().chain(extra).collect();
    let d = cols.len();
    let features = DMatrix::from_fn(n, d, |i, j| cols[j].values[i]);
    let names = cols.into_iter().map(|c| c.name).collect();

    let control_units = ds.control_units();
    let treated_units = ds.treated_units();
    let b0 = features.select_rows(&control_units);
    let b1 = features.select_rows(&treated_units);
    let n1 = treated_units.len();
    let target = DVector::from_iterator(d, (0..d).map(|j| b1.column(j).sum() / n1 as f64));

    let cluster_rows = (!spec.include_unit).then(|| {
        let starts: Vec<usize> = ds.cluster_ranges().iter().map(|r| r.start).collect();
        features.select_rows(&starts)
    });

    Ok(DesignMatrices {
        names,
        features,
        control_units,
        treated_units,
        b0,
        b1,
        target,
        center,
        scale,
        dropped,
        include_unit: spec.include_unit,
        cluster_rows,
        n1,
    })
}

/// `(1/n1) B0ᵀ γ − target`.
pub fn imbalance_vector(
    b0: &DMatrix<f64>,
    target: &DVector<f64>,
    gamma: &[f64],
    n1: usize,
) -> Result<DVector<f64>> {
    if gamma.len() != b0.nrows() {
        return Err(Error::DimensionMismatch {
            expected: b0.nrows(),
            actual: gamma.len(),
        });
    }
    if target.len() != b0.ncols() {
        return Err(Error::DimensionMismatch {
            expected: b0.ncols(),
            actual: target.len(),
        });
    }
    let g = DVector::from_column_slice(gamma);
    Ok(b0.tr_mul(&g) / n1 as f64 - target)
}

impl DesignMatrices {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    /// Imbalance of control-unit weights (in control-unit order).
    pub fn imbalance(&self, gamma: &[f64]) -> Result<DVector<f64>> {
        imbalance_vector(&self.b0, &self.target, gamma, self.n1)
    }

    /// Imbalance of cluster-constant weights given per control cluster
    /// (control clusters in dataset order): `(1/n1) Σ n_ℓ γ̄_ℓ φ_ℓ − target`.
    pub fn cluster_imbalance(&self, ds: &CosDataset, gamma_bar: &[f64]) -> Result<DVector<f64>> {
        let rows = self.cluster_rows.as_ref().ok_or_else(|| {
            Error::Config("cluster-level imbalance needs include_unit = false".into())
        })?;
        let controls: Vec<usize> = ds.control_clusters().collect();
        if gamma_bar.len() != controls.len() {
            return Err(Error::DimensionMismatch {
                expected: controls.len(),
                actual: gamma_bar.len(),
            });
        }
        let mut acc = DVector::zeros(self.dim());
        for (&k, &g) in controls.iter().zip(gamma_bar) {
            let size = ds.clusters()[k].size as f64;
            acc += rows.row(k).transpose() * (size * g);
        }
        Ok(acc / self.n1 as f64 - &self.target)
    }
}
