//! Clustered observational dataset: units nested in clusters, with treatment
//! assigned at the cluster level.
//!
//! Units are stored grouped by cluster (in cluster order), so every
//! per-cluster reduction is a reduction over a contiguous slice.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub cluster_id: String,
    /// Unit-level covariates.
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_id: String,
    pub treated: bool,
    /// Cluster-level covariates.
    pub w: Vec<f64>,
    /// Number of member units. Filled in by [`CosDataset::new`].
    #[serde(default)]
    pub size: usize,
}

impl ClusterRecord {
    pub fn new(cluster_id: impl Into<String>, treated: bool, w: Vec<f64>) -> Self {
        Self {
            cluster_id: cluster_id.into(),
            treated,
            w,
            size: 0,
        }
    }
}

impl UnitRecord {
    pub fn new(
        unit_id: impl Into<String>,
        cluster_id: impl Into<String>,
        x: Vec<f64>,
        y: f64,
    ) -> Self {
        Self {
            unit_id: unit_id.into(),
            cluster_id: cluster_id.into(),
            x,
            y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub n: usize,
    pub m: usize,
    pub n1: usize,
    pub n0: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDataset {
    unit_covariates: Vec<String>,
    cluster_covariates: Vec<String>,
    clusters: Vec<ClusterRecord>,
    units: Vec<UnitRecord>,
}

/// Immutable clustered dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset", into = "RawDataset")]
pub struct CosDataset {
    unit_covariates: Vec<String>,
    cluster_covariates: Vec<String>,
    clusters: Vec<ClusterRecord>,
    units: Vec<UnitRecord>,
    ranges: Vec<Range<usize>>,
    unit_cluster: Vec<usize>,
    n1: usize,
}

impl TryFrom<RawDataset> for CosDataset {
    type Error = Error;

    fn try_from(raw: RawDataset) -> Result<Self> {
        CosDataset::new(
            raw.unit_covariates,
            raw.cluster_covariates,
            raw.clusters,
            raw.units,
        )
    }
}

impl From<CosDataset> for RawDataset {
    fn from(ds: CosDataset) -> Self {
        RawDataset {
            unit_covariates: ds.unit_covariates,
            cluster_covariates: ds.cluster_covariates,
            clusters: ds.clusters,
            units: ds.units,
        }
    }
}

impl CosDataset {
    /// Validates and assembles a dataset. Units are regrouped by cluster
    /// (clusters keep their given order, units keep their relative order
    /// within a cluster) and cluster sizes are recomputed.
    pub fn new(
        unit_covariates: Vec<String>,
        cluster_covariates: Vec<String>,
        mut clusters: Vec<ClusterRecord>,
        units: Vec<UnitRecord>,
    ) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::InvalidDataset("dataset has no units".into()));
        }
        let mut position: HashMap<&str, usize> = HashMap::with_capacity(clusters.len());
        for (k, c) in clusters.iter().enumerate() {
            if position.insert(c.cluster_id.as_str(), k).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "duplicate cluster id '{}'",
                    c.cluster_id
                )));
            }
            if c.w.len() != cluster_covariates.len() {
                return Err(Error::InvalidDataset(format!(
                    "cluster '{}' has {} covariates, expected {}",
                    c.cluster_id,
                    c.w.len(),
                    cluster_covariates.len()
                )));
            }
            if c.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "cluster '{}' has a non-finite covariate",
                    c.cluster_id
                )));
            }
        }

        let mut buckets: Vec<Vec<UnitRecord>> = vec![Vec::new(); clusters.len()];
        for u in units {
            let &k = position.get(u.cluster_id.as_str()).ok_or_else(|| {
                Error::InvalidDataset(format!(
                    "unit '{}' refers to unknown cluster '{}'",
                    u.unit_id, u.cluster_id
                ))
            })?;
            if u.x.len() != unit_covariates.len() {
                return Err(Error::InvalidDataset(format!(
                    "unit '{}' has {} covariates, expected {}",
                    u.unit_id,
                    u.x.len(),
                    unit_covariates.len()
                )));
            }
            if !u.y.is_finite() || u.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "unit '{}' has a non-finite value",
                    u.unit_id
                )));
            }
            buckets[k].push(u);
        }

        let mut ranges = Vec::with_capacity(clusters.len());
        let mut unit_cluster = Vec::new();
        let mut grouped = Vec::new();
        let mut n1 = 0;
        for (k, bucket) in buckets.into_iter().enumerate() {
            if bucket.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "cluster '{}' has no units",
                    clusters[k].cluster_id
                )));
            }
            let start = grouped.len();
            clusters[k].size = bucket.len();
            if clusters[k].treated {
                n1 += bucket.len();
            }
            unit_cluster.extend(std::iter::repeat_n(k, bucket.len()));
            grouped.extend(bucket);
            ranges.push(start..grouped.len());
        }

        if !clusters.iter().any(|c| c.treated) {
            return Err(Error::NoTreatedClusters);
        }
        if clusters.iter().all(|c| c.treated) {
            return Err(Error::NoControlClusters);
        }

        Ok(Self {
            unit_covariates,
            cluster_covariates,
            clusters,
            units: grouped,
            ranges,
            unit_cluster,
            n1,
        })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    pub fn unit_covariates(&self) -> &[String] {
        &self.unit_covariates
    }

    pub fn cluster_covariates(&self) -> &[String] {
        &self.cluster_covariates
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    /// Units in treated clusters.
    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.units.len() - self.n1
    }

    pub fn counts(&self) -> Counts {
        Counts {
            n: self.n(),
            m: self.m(),
            n1: self.n1,
            n0: self.n0(),
        }
    }

    /// Unit index range of every cluster, in cluster order.
    pub fn cluster_ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn cluster_index(&self) -> BTreeMap<&str, Range<usize>> {
        self.clusters
            .iter()
            .zip(&self.ranges)
            .map(|(c, r)| (c.cluster_id.as_str(), r.clone()))
            .collect()
    }

    /// Cluster position of unit `i`.
    pub fn unit_cluster(&self, i: usize) -> usize {
        self.unit_cluster[i]
    }

    pub fn is_treated_unit(&self, i: usize) -> bool {
        self.clusters[self.unit_cluster[i]].treated
    }

    pub fn treated_clusters(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.m()).filter(|&k| self.clusters[k].treated)
    }

    pub fn control_clusters(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.m()).filter(|&k| !self.clusters[k].treated)
    }

    /// Dataset positions of control units, grouped by cluster.
    pub fn control_units(&self) -> Vec<usize> {
        self.control_clusters()
            .flat_map(|k| self.ranges[k].clone())
            .collect()
    }

    pub fn treated_units(&self) -> Vec<usize> {
        self.treated_clusters()
            .flat_map(|k| self.ranges[k].clone())
            .collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.y).collect()
    }

    /// Copy of the dataset with outcomes replaced (given in dataset unit order).
    pub fn with_outcomes(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                actual: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite outcome".into()));
        }
        let mut out = self.clone();
        for (u, &v) in out.units.iter_mut().zip(y) {
            u.y = v;
        }
        Ok(out)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy(sizes: &[(bool, usize)]) -> CosDataset {
        let clusters = sizes
            .iter()
            .enumerate()
            .map(|(k, &(t, _))| ClusterRecord::new(format!("c{k}"), t, vec![k as f64]))
            .collect();
        let mut units = Vec::new();
        for (k, &(_, s)) in sizes.iter().enumerate() {
            for j in 0..s {
                units.push(UnitRecord::new(
                    format!("u{k}_{j}"),
                    format!("c{k}"),
                    vec![j as f64],
                    (k + j) as f64,
                ));
            }
        }
        CosDataset::new(vec!["x".into()], vec!["w".into()], clusters, units).unwrap()
    }

    #[test]
    fn cluster_index_groups_units() {
        let clusters = vec![
            ClusterRecord::new("a", true, vec![]),
            ClusterRecord::new("b", false, vec![]),
        ];
        let units = vec![
            UnitRecord::new("1", "a", vec![], 0.0),
            UnitRecord::new("2", "b", vec![], 0.0),
            UnitRecord::new("3", "a", vec![], 0.0),
        ];
        let ds = CosDataset::new(vec![], vec![], clusters, units).unwrap();
        let idx = ds.cluster_index();
        assert_eq!(idx["a"], 0..2);
        assert_eq!(idx["b"], 2..3);
        assert_eq!(ds.units()[1].unit_id, "3");
        assert_eq!(ds.clusters()[0].size, 2);
    }

    #[test]
    fn singleton_cluster_range() {
        let clusters = vec![
            ClusterRecord::new("a", true, vec![]),
            ClusterRecord::new("b", false, vec![]),
        ];
        let units = vec![
            UnitRecord::new("1", "a", vec![], 0.0),
            UnitRecord::new("2", "b", vec![], 0.0),
        ];
        let ds = CosDataset::new(vec![], vec![], clusters, units).unwrap();
        assert_eq!(ds.cluster_index()["a"], 0..1);
    }

    #[test]
    fn empty_dataset_rejected() {
        let clusters = vec![ClusterRecord::new("a", true, vec![])];
        assert!(matches!(
            CosDataset::new(vec![], vec![], clusters, vec![]),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn counts_examples() {
        let ds = toy(&[(true, 3), (false, 5)]);
        assert_eq!(
            ds.counts(),
            Counts {
                n: 8,
                m: 2,
                n1: 3,
                n0: 5
            }
        );
        let ds = toy(&[(true, 2), (true, 2), (false, 4)]);
        assert_eq!(
            ds.counts(),
            Counts {
                n: 8,
                m: 3,
                n1: 4,
                n0: 4
            }
        );
    }

    #[test]
    fn single_arm_rejected() {
        let clusters = vec![ClusterRecord::new("a", true, vec![])];
        let units = vec![UnitRecord::new("1", "a", vec![], 0.0)];
        let err = CosDataset::new(vec![], vec![], clusters, units).unwrap_err();
        assert!(matches!(err, Error::NoControlClusters));
        assert_eq!(err.to_string(), "no control clusters");

        let clusters = vec![ClusterRecord::new("a", false, vec![])];
        let units = vec![UnitRecord::new("1", "a", vec![], 0.0)];
        assert!(matches!(
            CosDataset::new(vec![], vec![], clusters, units),
            Err(Error::NoTreatedClusters)
        ));
    }

    #[test]
    fn unknown_cluster_and_empty_cluster_rejected() {
        let clusters = vec![
            ClusterRecord::new("a", true, vec![]),
            ClusterRecord::new("b", false, vec![]),
        ];
        let units = vec![
            UnitRecord::new("1", "a", vec![], 0.0),
            UnitRecord::new("2", "zz", vec![], 0.0),
        ];
        assert!(CosDataset::new(vec![], vec![], clusters.clone(), units).is_err());
        let units = vec![UnitRecord::new("1", "a", vec![], 0.0)];
        assert!(CosDataset::new(vec![], vec![], clusters, units).is_err());
    }

    #[test]
    fn json_round_trip() {
        let ds = toy(&[(true, 3), (false, 2), (false, 1)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save_json(&path).unwrap();
        assert_eq!(CosDataset::load_json(&path).unwrap(), ds);
    }

    proptest::proptest! {
        #[test]
        fn counts_invariant_under_unit_permutation(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ds = toy(&[(true, 3), (false, 4), (true, 1), (false, 2)]);
            let mut units = ds.units().to_vec();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            units.shuffle(&mut rng);
            let shuffled = CosDataset::new(
                ds.unit_covariates().to_vec(),
                ds.cluster_covariates().to_vec(),
                ds.clusters().to_vec(),
                units,
            ).unwrap();
            proptest::prop_assert_eq!(shuffled.counts(), ds.counts());
        }
    }
}
