//! Accuracy, precision and group-fairness gaps on labelled data.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::max_pairwise_gap;
use crate::data::{GroupPartition, TabularDataset};
use crate::error::{Error, Result};
use crate::model::Classifier;

/// Confusion counts and rates of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub group: String,
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub positive_rate: f64,
    /// Absent when the group has no positive labels.
    pub tpr: Option<f64>,
    /// Absent when the group has no negative labels.
    pub fpr: Option<f64>,
}

impl GroupOutcome {
    pub fn from_counts(group: impl Into<String>, tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let n = tp + fp + tn + fn_;
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        GroupOutcome {
            group: group.into(),
            n,
            tp,
            fp,
            tn,
            fn_,
            positive_rate: ratio(tp + fp, n).unwrap_or(0.0),
            tpr: ratio(tp, tp + fn_),
            fpr: ratio(fp, fp + tn),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcomeTable {
    pub groups: Vec<GroupOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessMetric {
    DemographicParity,
    EqualOpportunity,
    EqualOdds,
}

impl FairnessMetric {
    pub const ALL: [FairnessMetric; 3] = [
        FairnessMetric::DemographicParity,
        FairnessMetric::EqualOpportunity,
        FairnessMetric::EqualOdds,
    ];
}

impl fmt::Display for FairnessMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FairnessMetric::DemographicParity => "demographic-parity",
            FairnessMetric::EqualOpportunity => "equal-opportunity",
            FairnessMetric::EqualOdds => "equal-odds",
        })
    }
}

impl FromStr for FairnessMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "demographic-parity" => Ok(FairnessMetric::DemographicParity),
            "equal-opportunity" => Ok(FairnessMetric::EqualOpportunity),
            "equal-odds" | "equalized-odds" => Ok(FairnessMetric::EqualOdds),
            other => Err(Error::invalid("metric", format!("unknown fairness metric `{other}`"))),
        }
    }
}

fn gap_of(values: Option<Vec<f64>>) -> Option<f64> {
    values.map(|v| max_pairwise_gap(&v))
}

/// Max pairwise gap of the metric's rate across groups. `None` when some
/// group has an empty conditioning event.
pub fn fairness_gap(table: &GroupOutcomeTable, metric: FairnessMetric) -> Option<f64> {
    let tprs = || table.groups.iter().map(|g| g.tpr).collect::<Option<Vec<_>>>();
    let fprs = || table.groups.iter().map(|g| g.fpr).collect::<Option<Vec<_>>>();
    match metric {
        FairnessMetric::DemographicParity => Some(max_pairwise_gap(
            &table.groups.iter().map(|g| g.positive_rate).collect::<Vec<_>>(),
        )),
        FairnessMetric::EqualOpportunity => gap_of(tprs()),
        FairnessMetric::EqualOdds => Some(gap_of(tprs())?.max(gap_of(fprs())?)),
    }
}

/// Hard prediction: positive only when the probability strictly exceeds the threshold.
pub fn hard_label(p: f64, threshold: f64) -> u8 {
    u8::from(p > threshold)
}

pub fn predict_all<C: Classifier + ?Sized>(model: &C, ds: &TabularDataset, threshold: f64) -> Vec<u8> {
    (0..ds.len())
        .into_par_iter()
        .map(|i| hard_label(model.predict_proba(ds.x(i)), threshold))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub accuracy: f64,
    /// Absent when nothing was predicted positive.
    pub precision: Option<f64>,
    pub demographic_parity: Option<f64>,
    pub equal_opportunity: Option<f64>,
    pub equal_odds: Option<f64>,
    pub table: GroupOutcomeTable,
}

impl Evaluation {
    pub fn gap(&self, metric: FairnessMetric) -> Option<f64> {
        match metric {
            FairnessMetric::DemographicParity => self.demographic_parity,
            FairnessMetric::EqualOpportunity => self.equal_opportunity,
            FairnessMetric::EqualOdds => self.equal_odds,
        }
    }

    /// One CSV row per group.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "n", "tp", "fp", "tn", "fn", "positive_rate", "tpr", "fpr"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for g in &self.table.groups {
            out.write_record([
                g.group.clone(),
                g.n.to_string(),
                g.tp.to_string(),
                g.fp.to_string(),
                g.tn.to_string(),
                g.fn_.to_string(),
                g.positive_rate.to_string(),
                opt(g.tpr),
                opt(g.fpr),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<metrics csv>", e))?;
        Ok(())
    }
}

/// Tabulate predictions against labels per group.
pub fn evaluate_predictions(preds: &[u8], ds: &TabularDataset, part: &GroupPartition) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::invalid("dataset", "cannot evaluate on an empty set"));
    }
    if preds.len() != ds.len() {
        return Err(Error::DimensionMismatch {
            expected: ds.len(),
            actual: preds.len(),
        });
    }
    let mut groups = Vec::with_capacity(part.num_groups());
    let (mut correct, mut tp_all, mut fp_all) = (0, 0, 0);
    for (k, rows) in part.groups().iter().enumerate() {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for &i in rows {
            match (preds[i], ds.y(i)) {
                (1, 1) => tp += 1,
                (1, _) => fp += 1,
                (_, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
        correct += tp + tn;
        tp_all += tp;
        fp_all += fp;
        let name = ds.group_names().get(k).cloned().unwrap_or_else(|| k.to_string());
        groups.push(GroupOutcome::from_counts(name, tp, fp, tn, fn_));
    }
    let n: usize = groups.iter().map(|g| g.n).sum();
    let table = GroupOutcomeTable { groups };
    Ok(Evaluation {
        n,
        accuracy: correct as f64 / n as f64,
        precision: (tp_all + fp_all > 0).then(|| tp_all as f64 / (tp_all + fp_all) as f64),
        demographic_parity: fairness_gap(&table, FairnessMetric::DemographicParity),
        equal_opportunity: fairness_gap(&table, FairnessMetric::EqualOpportunity),
        equal_odds: fairness_gap(&table, FairnessMetric::EqualOdds),
        table,
    })
}

pub fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    ds: &TabularDataset,
    part: &GroupPartition,
    threshold: f64,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::invalid("dataset", "cannot evaluate on an empty set"));
    }
    evaluate_predictions(&predict_all(model, ds, threshold), ds, part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::partition_by_group;
    use crate::linalg::Mat;
    use proptest::prelude::*;

    struct Fixed(Vec<f64>);

    // looks the probability up by the single feature, which holds the row index
    impl Classifier for Fixed {
        fn predict_proba(&self, x: &[f64]) -> f64 {
            self.0[x[0] as usize]
        }
    }

    fn ds(groups: Vec<usize>, labels: Vec<u8>) -> TabularDataset {
        let n = labels.len();
        let x = Mat::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let k = groups.iter().max().unwrap() + 1;
        TabularDataset::new(x, groups, labels, k).unwrap()
    }

    #[test]
    fn hand_table() {
        let d = ds(vec![0, 0, 0, 0, 1, 1, 1, 1], vec![1, 0, 0, 1, 1, 1, 0, 0]);
        let part = partition_by_group(&d).unwrap();
        let preds = [1, 1, 0, 1, 0, 1, 0, 0];
        let e = evaluate_predictions(&preds, &d, &part).unwrap();
        assert_eq!(e.table.groups[0].positive_rate, 0.75);
        assert_eq!(e.table.groups[1].positive_rate, 0.25);
        assert_eq!(e.demographic_parity, Some(0.5));
        let g0 = &e.table.groups[0];
        assert_eq!((g0.tp, g0.fp, g0.tn, g0.fn_), (2, 1, 1, 0));
        assert_eq!(e.accuracy, 6.0 / 8.0);
        assert_eq!(e.precision, Some(3.0 / 4.0));
    }

    #[test]
    fn degenerate_predictors() {
        let labels = vec![1, 0, 1, 1, 0, 0];
        let d = ds(vec![0, 0, 0, 1, 1, 1], labels.clone());
        let part = partition_by_group(&d).unwrap();
        let perfect = Fixed(labels.iter().map(|&y| f64::from(y)).collect());
        let e = evaluate(&perfect, &d, &part, 0.5).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.equal_odds, Some(0.0));
        // base rates 2/3 vs 1/3 differ, so parity does not hold
        assert!(e.demographic_parity.unwrap() > 0.0);

        let always = Fixed(vec![0.9; 6]);
        let e = evaluate(&always, &d, &part, 0.5).unwrap();
        assert_eq!(e.demographic_parity, Some(0.0));

        let never = Fixed(vec![0.1; 6]);
        assert_eq!(evaluate(&never, &d, &part, 0.5).unwrap().precision, None);
    }

    #[test]
    fn ties_predict_negative() {
        assert_eq!(hard_label(0.5, 0.5), 0);
        assert_eq!(hard_label(0.5 + 1e-12, 0.5), 1);
    }

    #[test]
    fn gap_examples() {
        let g = |tpr: f64, fpr: f64| GroupOutcome {
            group: String::new(),
            n: 1,
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
            positive_rate: 0.0,
            tpr: Some(tpr),
            fpr: Some(fpr),
        };
        let t = GroupOutcomeTable {
            groups: vec![g(0.5, 0.1), g(0.5, 0.4), g(0.5, 0.2)],
        };
        assert_eq!(fairness_gap(&t, FairnessMetric::EqualOpportunity), Some(0.0));
        let t = GroupOutcomeTable {
            groups: vec![g(0.5, 0.1), g(0.6, 0.4)],
        };
        assert!((fairness_gap(&t, FairnessMetric::EqualOdds).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn missing_event_is_undefined() {
        let d = ds(vec![0, 0, 1, 1], vec![1, 0, 0, 0]);
        let part = partition_by_group(&d).unwrap();
        let e = evaluate_predictions(&[1, 0, 0, 1], &d, &part).unwrap();
        assert_eq!(e.equal_opportunity, None);
        assert_eq!(e.equal_odds, None);
        assert!(e.demographic_parity.is_some());
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("\"equal_opportunity\":null"));
    }

    #[test]
    fn csv_has_one_row_per_group() {
        let d = ds(vec![0, 1, 2], vec![1, 0, 1]);
        let part = partition_by_group(&d).unwrap();
        let e = evaluate_predictions(&[1, 1, 0], &d, &part).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    proptest! {
        #[test]
        fn parity_two_paths_and_permutation(
            rows in proptest::collection::vec((0usize..3, 0u8..2, 0u8..2), 6..60)
        ) {
            let groups: Vec<usize> = rows.iter().map(|r| r.0).collect();
            prop_assume!((0..3).all(|k| groups.contains(&k)));
            let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let preds: Vec<u8> = rows.iter().map(|r| r.2).collect();
            let d = ds(groups.clone(), labels);
            let part = partition_by_group(&d).unwrap();
            let e = evaluate_predictions(&preds, &d, &part).unwrap();

            // direct path from raw predictions
            let rates: Vec<f64> = (0..3).map(|k| {
                let idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == k).collect();
                idx.iter().filter(|&&i| preds[i] == 1).count() as f64 / idx.len() as f64
            }).collect();
            let direct = rates.iter().cloned().fold(f64::MIN, f64::max) - rates.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert!((e.demographic_parity.unwrap() - direct).abs() < 1e-15);

            let mut rev = e.table.clone();
            rev.groups.reverse();
            for m in FairnessMetric::ALL {
                prop_assert_eq!(fairness_gap(&rev, m), fairness_gap(&e.table, m));
                if let Some(g) = fairness_gap(&e.table, m) {
                    prop_assert!((0.0..=1.0).contains(&g));
                }
            }
        }
    }
}
