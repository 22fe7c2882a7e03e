//! Experiment orchestration for the `fairdp` binary: TOML experiment specs,
//! run directories, post-hoc certification and grid sweeps.

pub mod run;
pub mod spec;
pub mod sweep;

use fairdp::data::{load_csv, partition_by_group, subsample_major};
use fairdp::RngStream;
use serde::{Deserialize, Serialize};

pub use run::{certify_run, evaluate_run, execute, run_experiment, RunOutput, RunSummary};
pub use spec::{DatasetSpec, ExperimentSpec, Mechanism};
pub use sweep::{sweep, SweepAxis, SweepRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub size: usize,
    pub positives: usize,
    pub positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub rows: usize,
    pub features: usize,
    pub groups: Vec<GroupReport>,
    /// Largest over smallest group size.
    pub imbalance: f64,
    /// The same table after capping the imbalance at `rho`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsampled: Option<Box<PartitionReport>>,
}

fn report(ds: &fairdp::TabularDataset) -> anyhow::Result<PartitionReport> {
    let part = partition_by_group(ds)?;
    let groups: Vec<GroupReport> = part
        .groups()
        .iter()
        .enumerate()
        .map(|(k, rows)| {
            let positives = rows.iter().filter(|&&i| ds.y(i) == 1).count();
            GroupReport {
                group: ds.group_names()[k].clone(),
                size: rows.len(),
                positives,
                positive_rate: positives as f64 / rows.len() as f64,
            }
        })
        .collect();
    let max = groups.iter().map(|g| g.size).max().unwrap_or(0);
    let min = groups.iter().map(|g| g.size).min().unwrap_or(0);
    Ok(PartitionReport {
        rows: ds.len(),
        features: ds.dim(),
        imbalance: max as f64 / min as f64,
        groups,
        subsampled: None,
    })
}

/// Group sizes and base rates of the spec's dataset, before and after `rho`.
pub fn partition_report(spec: &ExperimentSpec) -> anyhow::Result<PartitionReport> {
    let ds = load_csv(&spec.dataset.path, &spec.dataset.schema())?;
    let mut rep = report(&ds)?;
    if let Some(rho) = spec.rho {
        let mut rng = RngStream::new(spec.seed, 0);
        rep.subsampled = Some(Box::new(report(&subsample_major(&ds, rho, &mut rng)?)?));
    }
    Ok(rep)
}
