//! Tabular datasets: CSV ingestion, protected-group partitions, fairness
//! events and sampling.
//!
//! Preprocessing applied by [`load_csv`]:
//! - numeric feature columns are min-max scaled into `[0, 1]` (a constant
//!   column maps to 0);
//! - categorical feature columns are one-hot encoded, levels sorted
//!   lexicographically;
//! - protected columns are label-encoded to `[0, K)` in sorted level order and
//!   combined into a single cross-product attribute when there are several;
//! - rows with an empty field in any used column are dropped. Literal
//!   placeholders such as `?` are kept as their own category.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, RngStream};

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Feature columns, in output order. Empty means every column that is
    /// neither protected nor the label.
    #[serde(default)]
    pub features: Vec<String>,
    pub protected: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    Numeric { min: f64, max: f64 },
    Categorical { levels: Vec<String> },
}

/// Source column of one block of the feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    /// First feature-matrix column occupied by this source column.
    pub offset: usize,
    pub kind: FeatureKind,
}

impl FeatureColumn {
    pub fn width(&self) -> usize {
        match &self.kind {
            FeatureKind::Numeric { .. } => 1,
            FeatureKind::Categorical { levels } => levels.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectedAttribute {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<usize>,
}

/// Feature matrix, protected-group codes in `[0, K)` and binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    features: Mat,
    protected: Vec<usize>,
    labels: Vec<u8>,
    num_groups: usize,
    group_names: Vec<String>,
    attributes: Vec<ProtectedAttribute>,
    columns: Vec<FeatureColumn>,
}

impl TabularDataset {
    /// Build a dataset from raw parts. Features are used as given (no scaling).
    pub fn new(features: Mat, protected: Vec<usize>, labels: Vec<u8>, num_groups: usize) -> Result<Self> {
        let group_names = (0..num_groups).map(|k| k.to_string()).collect();
        let attributes = vec![ProtectedAttribute {
            name: "group".into(),
            levels: (0..num_groups).map(|k| k.to_string()).collect(),
            codes: protected.clone(),
        }];
        let columns = (0..features.cols())
            .map(|j| FeatureColumn {
                name: format!("x{j}"),
                offset: j,
                kind: FeatureKind::Numeric { min: 0.0, max: 1.0 },
            })
            .collect();
        let ds = TabularDataset {
            features,
            protected,
            labels,
            num_groups,
            group_names,
            attributes,
            columns,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.protected.len() != n || self.labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: if self.protected.len() != n {
                    self.protected.len()
                } else {
                    self.labels.len()
                },
            });
        }
        if let Some(y) = self.labels.iter().find(|&&y| y > 1) {
            return Err(Error::Domain(format!("label {y} is not binary")));
        }
        if let Some(a) = self.protected.iter().find(|&&a| a >= self.num_groups) {
            return Err(Error::Domain(format!(
                "protected code {a} outside [0, {})",
                self.num_groups
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    #[inline]
    pub fn y(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn protected(&self) -> &[usize] {
        &self.protected
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn attributes(&self) -> &[ProtectedAttribute] {
        &self.attributes
    }

    pub fn columns(&self) -> &[FeatureColumn] {
        &self.columns
    }

    /// Rows `idx`, in that order. The group code set and metadata are kept.
    pub fn subset(&self, idx: &[usize]) -> TabularDataset {
        TabularDataset {
            features: self.features.select_rows(idx),
            protected: idx.iter().map(|&i| self.protected[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_groups: self.num_groups,
            group_names: self.group_names.clone(),
            attributes: self
                .attributes
                .iter()
                .map(|a| ProtectedAttribute {
                    name: a.name.clone(),
                    levels: a.levels.clone(),
                    codes: idx.iter().map(|&i| a.codes[i]).collect(),
                })
                .collect(),
            columns: self.columns.clone(),
        }
    }

    /// Recover the category of a one-hot encoded column for `row`.
    pub fn decode_one_hot(&self, column: &str, row: usize) -> Option<&str> {
        let col = self.columns.iter().find(|c| c.name == column)?;
        let FeatureKind::Categorical { levels } = &col.kind else {
            return None;
        };
        let x = self.x(row);
        levels
            .iter()
            .enumerate()
            .find(|(j, _)| x[col.offset + j] == 1.0)
            .map(|(_, l)| l.as_str())
    }
}

enum RawColumn {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

fn infer(values: Vec<String>) -> RawColumn {
    let parsed: Option<Vec<f64>> = values
        .iter()
        .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect();
    match parsed {
        Some(v) => RawColumn::Numeric(v),
        None => RawColumn::Categorical(values),
    }
}

fn sorted_levels(values: &[String]) -> Vec<String> {
    let mut levels: Vec<String> = values.to_vec();
    levels.sort();
    levels.dedup();
    levels
}

/// Load a UTF-8, comma-delimited CSV with a header row.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TabularDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, schema).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

/// [`load_csv`] on in-memory text.
pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<TabularDataset> {
    let format_err = |reason: &str| Error::Format {
        path: "<memory>".into(),
        reason: reason.into(),
    };
    if text.trim().is_empty() {
        return Err(format_err("file is empty"));
    }
    if schema.protected.is_empty() {
        return Err(Error::Schema("at least one protected column is required".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };

    let label_idx = find(&schema.label)?;
    let protected_idx: Vec<usize> = schema.protected.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let feature_names: Vec<String> = if schema.features.is_empty() {
        header
            .iter()
            .filter(|h| **h != schema.label && !schema.protected.contains(h))
            .cloned()
            .collect()
    } else {
        schema.features.clone()
    };
    let feature_idx: Vec<usize> = feature_names.iter().map(|c| find(c)).collect::<Result<_>>()?;
    if feature_names.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let used: Vec<usize> = feature_idx
        .iter()
        .chain(&protected_idx)
        .chain(std::iter::once(&label_idx))
        .copied()
        .collect();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for record in reader.records() {
        let record = record?;
        if record.len() != header.len() {
            return Err(format_err("ragged row"));
        }
        if used.iter().any(|&j| record[j].is_empty()) {
            continue;
        }
        for &j in &used {
            cells[j].push(record[j].to_string());
        }
    }
    let n = cells[label_idx].len();
    if n == 0 {
        return Err(format_err("no data rows"));
    }

    let labels: Vec<u8> = cells[label_idx]
        .iter()
        .map(|v| match v.as_str() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Domain(format!(
                "label column `{}` has non-binary value `{other}`",
                schema.label
            ))),
        })
        .collect::<Result<_>>()?;

    let attributes: Vec<ProtectedAttribute> = schema
        .protected
        .iter()
        .zip(&protected_idx)
        .map(|(name, &j)| {
            let values = std::mem::take(&mut cells[j]);
            let levels = sorted_levels(&values);
            let codes = values
                .iter()
                .map(|v| levels.binary_search(v).expect("level present"))
                .collect();
            ProtectedAttribute {
                name: name.clone(),
                levels,
                codes,
            }
        })
        .collect();

    let mut columns = Vec::new();
    let mut blocks: Vec<RawColumn> = Vec::new();
    let mut width = 0;
    for (name, &j) in feature_names.iter().zip(&feature_idx) {
        let raw = infer(std::mem::take(&mut cells[j]));
        let kind = match &raw {
            RawColumn::Numeric(v) => {
                let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                FeatureKind::Numeric { min, max }
            }
            RawColumn::Categorical(v) => FeatureKind::Categorical {
                levels: sorted_levels(v),
            },
        };
        let col = FeatureColumn {
            name: name.clone(),
            offset: width,
            kind,
        };
        width += col.width();
        columns.push(col);
        blocks.push(raw);
    }

    let mut features = Mat::zeros(n, width);
    for (col, raw) in columns.iter().zip(&blocks) {
        match (&col.kind, raw) {
            (FeatureKind::Numeric { min, max }, RawColumn::Numeric(v)) => {
                let range = max - min;
                for (i, x) in v.iter().enumerate() {
                    let s = if range > 0.0 { (x - min) / range } else { 0.0 };
                    features.set(i, col.offset, s);
                }
            }
            (FeatureKind::Categorical { levels }, RawColumn::Categorical(v)) => {
                for (i, x) in v.iter().enumerate() {
                    let l = levels.binary_search(x).expect("level present");
                    features.set(i, col.offset + l, 1.0);
                }
            }
            _ => unreachable!("kind inferred from raw column"),
        }
    }

    let first = &attributes[0];
    let mut ds = TabularDataset {
        features,
        protected: first.codes.clone(),
        labels,
        num_groups: first.levels.len(),
        group_names: first.levels.clone(),
        attributes,
        columns,
    };
    if ds.attributes.len() > 1 {
        let names: Vec<String> = schema.protected.clone();
        ds = cross_product_groups(&ds, &names)?;
    }
    Ok(ds)
}

/// Replace the active protected attribute by the cross product of the named
/// attributes: `K = Π K_i` codes, first attribute most significant.
pub fn cross_product_groups(ds: &TabularDataset, attributes: &[String]) -> Result<TabularDataset> {
    if attributes.is_empty() {
        return Err(Error::Schema("no protected attributes named".into()));
    }
    let attrs: Vec<&ProtectedAttribute> = attributes
        .iter()
        .map(|name| {
            ds.attributes
                .iter()
                .find(|a| &a.name == name)
                .ok_or_else(|| Error::Schema(format!("unknown protected attribute `{name}`")))
        })
        .collect::<Result<_>>()?;

    let k: usize = attrs.iter().map(|a| a.levels.len()).product();
    let protected: Vec<usize> = (0..ds.len())
        .map(|i| attrs.iter().fold(0, |code, a| code * a.levels.len() + a.codes[i]))
        .collect();

    let mut group_names = Vec::with_capacity(k);
    for code in 0..k {
        let mut rem = code;
        let mut parts = Vec::with_capacity(attrs.len());
        for a in attrs.iter().rev() {
            let l = rem % a.levels.len();
            rem /= a.levels.len();
            parts.push(if attrs.len() == 1 {
                a.levels[l].clone()
            } else {
                format!("{}={}", a.name, a.levels[l])
            });
        }
        parts.reverse();
        group_names.push(parts.join(","));
    }

    let mut counts = vec![0usize; k];
    for &c in &protected {
        counts[c] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateGroup {
            group: group_names[empty].clone(),
        });
    }

    Ok(TabularDataset {
        protected,
        num_groups: k,
        group_names,
        ..ds.clone()
    })
}

/// Disjoint row-index lists, one per protected group, covering the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, k: usize) -> &[usize] {
        &self.groups[k]
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Build from explicit index lists. Disjointness is not checked.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Self {
        GroupPartition { groups }
    }

    /// The whole dataset as one group.
    pub fn single(n: usize) -> Self {
        GroupPartition {
            groups: vec![(0..n).collect()],
        }
    }
}

pub fn partition_by_group(ds: &TabularDataset) -> Result<GroupPartition> {
    let mut groups = vec![Vec::new(); ds.num_groups()];
    for (i, &a) in ds.protected().iter().enumerate() {
        groups[a].push(i);
    }
    if let Some(k) = groups.iter().position(Vec::is_empty) {
        return Err(Error::DegenerateGroup {
            group: ds.group_names()[k].clone(),
        });
    }
    Ok(GroupPartition { groups })
}

/// Conditioning event `e` of a group-fairness statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum FairnessEvent {
    /// No conditioning (demographic parity).
    None,
    /// `y = 1` (equality of opportunity).
    PositiveLabel,
    LabelEquals(u8),
}

impl FairnessEvent {
    pub fn admits(self, y: u8) -> bool {
        match self {
            FairnessEvent::None => true,
            FairnessEvent::PositiveLabel => y == 1,
            FairnessEvent::LabelEquals(v) => y == v,
        }
    }
}

impl fmt::Display for FairnessEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FairnessEvent::None => f.write_str("none"),
            FairnessEvent::PositiveLabel => f.write_str("positive-label"),
            FairnessEvent::LabelEquals(y) => write!(f, "label-equals-{y}"),
        }
    }
}

impl FromStr for FairnessEvent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "demographic-parity" => Ok(FairnessEvent::None),
            "positive-label" | "equal-opportunity" => Ok(FairnessEvent::PositiveLabel),
            "label-equals-0" => Ok(FairnessEvent::LabelEquals(0)),
            "label-equals-1" => Ok(FairnessEvent::LabelEquals(1)),
            other => Err(Error::invalid("event", format!("unknown fairness event `{other}`"))),
        }
    }
}

impl From<FairnessEvent> for String {
    fn from(e: FairnessEvent) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for FairnessEvent {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Rows of group `k` admitted by `event`.
pub fn event_subset(ds: &TabularDataset, part: &GroupPartition, k: usize, event: FairnessEvent) -> Result<Vec<usize>> {
    if k >= part.num_groups() {
        return Err(Error::invalid(
            "k",
            format!("group {k} outside [0, {})", part.num_groups()),
        ));
    }
    let rows: Vec<usize> = part
        .group(k)
        .iter()
        .copied()
        .filter(|&i| event.admits(ds.y(i)))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyEvent {
            group: k,
            event: event.to_string(),
        });
    }
    Ok(rows)
}

/// Cap every group at `floor(rho · n_min)` rows by uniform sampling without
/// replacement. The smallest group is never touched; row order is preserved.
pub fn subsample_major(ds: &TabularDataset, rho: f64, rng: &mut RngStream) -> Result<TabularDataset> {
    if !(rho >= 1.0) {
        return Err(Error::invalid("rho", format!("must be >= 1, got {rho}")));
    }
    let part = partition_by_group(ds)?;
    let n_min = part.sizes().into_iter().min().unwrap_or(0);
    let cap = (rho * n_min as f64).floor() as usize;

    let mut keep = Vec::with_capacity(ds.len());
    for group in part.groups() {
        if group.len() <= cap {
            keep.extend_from_slice(group);
            continue;
        }
        let mut idx = group.clone();
        // partial Fisher-Yates: the first `cap` slots become a uniform sample
        for i in 0..cap {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        keep.extend_from_slice(&idx[..cap]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Seeded train/test split, stratified by (group, label).
pub fn stratified_split(
    ds: &TabularDataset,
    test_fraction: f64,
    rng: &mut RngStream,
) -> Result<(TabularDataset, TabularDataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(
            "test_fraction",
            format!("must be in [0, 1), got {test_fraction}"),
        ));
    }
    let mut strata: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for i in 0..ds.len() {
        strata.entry((ds.protected()[i], ds.y(i))).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rows in strata.values_mut() {
        for i in (1..rows.len()).rev() {
            let j = rng.below(i + 1);
            rows.swap(i, j);
        }
        let n_test = (rows.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Poisson sample of group `k`: each row kept independently with probability `q`.
pub fn poisson_batch(part: &GroupPartition, k: usize, q: f64, rng: &mut RngStream) -> Vec<usize> {
    part.group(k).iter().copied().filter(|_| rng.uniform() < q).collect()
}
