use std::fmt;
use std::io::Write;
use std::str::FromStr;

use anyhow::bail;
use serde::{Deserialize, Serialize};

use crate::run::run_experiment;
use crate::spec::ExperimentSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Epsilon,
    Rho,
    ClipM,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Rho => "rho",
            SweepAxis::ClipM => "clip-m",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "epsilon" => SweepAxis::Epsilon,
            "rho" => SweepAxis::Rho,
            "clip-m" | "m" | "M" => SweepAxis::ClipM,
            other => bail!("unknown sweep axis `{other}` (expected epsilon, rho or clip-m)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub demographic_parity: Option<f64>,
    pub equal_opportunity: Option<f64>,
    pub equal_odds: Option<f64>,
    pub tau_theoretical: Option<f64>,
    pub tau_empirical: Option<f64>,
    pub error: Option<String>,
}

/// The spec for one grid point.
pub fn grid_point(base: &ExperimentSpec, axis: SweepAxis, value: f64, seed: u64) -> ExperimentSpec {
    let mut spec = base.clone();
    spec.seed = seed;
    spec.train.seed = seed;
    match axis {
        SweepAxis::Epsilon => spec.target_epsilon = Some(value),
        SweepAxis::Rho => spec.rho = Some(value),
        SweepAxis::ClipM => {
            spec.train.clip_m = value;
            spec.mark_explicit("clip_m");
        }
    }
    spec.out = base.out.join(format!("{axis}={value}")).join(format!("seed={seed}"));
    spec
}

/// Run every `(value, seed)` grid point in order. Failures are recorded in
/// the row and the sweep moves on.
pub fn sweep(base: &ExperimentSpec, axis: SweepAxis, values: &[f64], seeds: &[u64]) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            let spec = grid_point(base, axis, value, seed);
            let row = match run_experiment(&spec) {
                Ok(out) => {
                    let s = out.summary;
                    SweepRow {
                        axis,
                        value,
                        seed,
                        epsilon: Some(s.epsilon),
                        accuracy: Some(s.accuracy),
                        precision: s.precision,
                        demographic_parity: s.demographic_parity,
                        equal_opportunity: s.equal_opportunity,
                        equal_odds: s.equal_odds,
                        tau_theoretical: s.tau_theoretical,
                        tau_empirical: s.tau_empirical,
                        error: None,
                    }
                }
                Err(e) => SweepRow {
                    axis,
                    value,
                    seed,
                    epsilon: None,
                    accuracy: None,
                    precision: None,
                    demographic_parity: None,
                    equal_opportunity: None,
                    equal_odds: None,
                    tau_theoretical: None,
                    tau_empirical: None,
                    error: Some(format!("{e:#}")),
                },
            };
            rows.push(row);
        }
    }
    rows
}

pub fn write_csv<W: Write>(rows: &[SweepRow], w: W) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "axis",
        "value",
        "seed",
        "epsilon",
        "accuracy",
        "precision",
        "dp_gap",
        "eo_gap",
        "odds_gap",
        "tau_theoretical",
        "tau_empirical",
        "error",
    ])?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.axis.to_string(),
            r.value.to_string(),
            r.seed.to_string(),
            f(r.epsilon),
            f(r.accuracy),
            f(r.precision),
            f(r.demographic_parity),
            f(r.equal_opportunity),
            f(r.equal_odds),
            f(r.tau_theoretical),
            f(r.tau_empirical),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
