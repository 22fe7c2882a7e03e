//! Fairness certificates for models trained with last-layer Gaussian noise.
//!
//! Conditioned on the previous round, the released last-layer weights are
//! Gaussian with mean `W_prev − η·μ` and per-coordinate variance
//! `η²σ²C²/K`. For a fixed penultimate activation `z` the output logit is
//! then a scalar Gaussian, which gives a closed-form probability of a
//! positive prediction and, averaged over each group, an empirical bound on
//! the group gap.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{event_subset, FairnessEvent, GroupPartition, TabularDataset};
use crate::error::{Error, Result};
use crate::fairdp::{RoundRecord, TrainConfig, TrainOutcome};
use crate::linalg::{erf, gaussian, inner, l2_norm, logit, RngStream};
use crate::model::{penultimate, Classifier, ModelParams, OptimizerMode};
use crate::privacy::finite_or_null;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Everything the certificate needs from one SGD round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertContext {
    pub round: usize,
    pub w_prev: Vec<f64>,
    pub mu: Vec<f64>,
    pub eta: f64,
    pub sigma: f64,
    pub clip_c: f64,
    #[serde(with = "finite_or_null")]
    pub clip_m: f64,
    pub num_groups: usize,
    pub m: usize,
    pub threshold: f64,
}

impl CertContext {
    /// Context of an SGD round; Adam rounds do not admit a certificate.
    pub fn from_round(record: &RoundRecord, cfg: &TrainConfig) -> Result<Self> {
        if record.mode != OptimizerMode::Sgd {
            return Err(Error::ContractViolation(format!(
                "round {} used {:?}; certificates need an SGD round",
                record.round, record.mode
            )));
        }
        Ok(CertContext {
            round: record.round,
            w_prev: record.w_prev.clone(),
            mu: record.mu.clone(),
            eta: record.eta,
            sigma: cfg.sigma,
            clip_c: cfg.clip_c,
            clip_m: cfg.clip_m,
            num_groups: record.group_sums.len(),
            m: record.m,
            threshold: cfg.threshold,
        })
    }

    /// Context of the last SGD round of a training run.
    pub fn from_outcome(outcome: &TrainOutcome, cfg: &TrainConfig) -> Result<Self> {
        let record = outcome.final_sgd_round().ok_or_else(|| {
            Error::ContractViolation("no SGD rounds were run (switch_fraction = 1); refusing to certify".into())
        })?;
        Self::from_round(record, cfg)
    }

    /// `W_prev − η·μ`, the mean of the released last-layer weights.
    pub fn center(&self) -> Vec<f64> {
        self.w_prev
            .iter()
            .zip(&self.mu)
            .map(|(w, m)| w - self.eta * m)
            .collect()
    }

    /// Standard deviation of each released last-layer weight.
    pub fn weight_std(&self) -> f64 {
        self.eta * self.sigma * self.clip_c / (self.num_groups as f64).sqrt()
    }

    fn logit_threshold(&self) -> f64 {
        if self.threshold == 0.5 {
            0.0
        } else {
            logit(self.threshold)
        }
    }
}

/// `Pr(ŷ = 1)` for penultimate activation `z` under the last-layer noise.
///
/// A zero activation or zero noise makes the logit deterministic; the result
/// is then the indicator of a positive decision, with ½ on an exact tie.
pub fn pred_prob(ctx: &CertContext, z: &[f64]) -> Result<f64> {
    if z.len() != ctx.w_prev.len() {
        return Err(Error::DimensionMismatch {
            expected: ctx.w_prev.len(),
            actual: z.len(),
        });
    }
    let mean = inner(&ctx.center(), z)?;
    let t0 = ctx.logit_threshold();
    let norm = l2_norm(z);
    if norm == 0.0 || ctx.sigma == 0.0 {
        return Ok(if mean > t0 {
            1.0
        } else if mean < t0 {
            0.0
        } else {
            0.5
        });
    }
    let scale = norm * ctx.weight_std() * SQRT_2;
    Ok(0.5 + 0.5 * erf((mean - t0) / scale))
}

/// `A = ||W_prev − ημ|| · √K / (ησC√2)`.
pub fn sandwich_argument(ctx: &CertContext) -> f64 {
    let norm = l2_norm(&ctx.center());
    let denom = ctx.weight_std() * SQRT_2;
    if norm == 0.0 {
        0.0
    } else if denom == 0.0 {
        f64::INFINITY
    } else {
        norm / denom
    }
}

/// `(½ − ½·erf(A), ½ + ½·erf(A))`, which brackets `pred_prob` for every `z`.
pub fn prob_sandwich(ctx: &CertContext) -> Result<(f64, f64)> {
    if ctx.logit_threshold() != 0.0 {
        return Err(Error::ContractViolation(format!(
            "the probability sandwich holds only at threshold 0.5, got {}",
            ctx.threshold
        )));
    }
    let e = erf(sandwich_argument(ctx));
    Ok((0.5 - 0.5 * e, 0.5 + 0.5 * e))
}

/// Worst-case gap bound `erf((MK + ηmC)·√K / (K·η·σ·C·√2))`.
pub fn worst_case_bound(clip_m: f64, num_groups: usize, eta: f64, m: usize, clip_c: f64, sigma: f64) -> Result<f64> {
    for (name, v) in [("clip_m", clip_m), ("eta", eta), ("clip_c", clip_c), ("sigma", sigma)] {
        if !(v > 0.0) {
            return Err(Error::invalid(name, format!("must be > 0, got {v}")));
        }
    }
    if num_groups == 0 {
        return Err(Error::invalid("num_groups", "must be >= 1"));
    }
    let k = num_groups as f64;
    let arg = (clip_m * k + eta * m as f64 * clip_c) * k.sqrt() / (k * eta * sigma * clip_c * SQRT_2);
    Ok(erf(arg))
}

/// Conditioning for a certificate: a single event, or both label values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CertificateEvent {
    Event(FairnessEvent),
    /// Max of the gaps conditioned on `y = 1` and on `y = 0`.
    EqualOdds,
}

impl CertificateEvent {
    pub const DEMOGRAPHIC_PARITY: Self = CertificateEvent::Event(FairnessEvent::None);
    pub const EQUAL_OPPORTUNITY: Self = CertificateEvent::Event(FairnessEvent::PositiveLabel);

    fn events(self) -> Vec<FairnessEvent> {
        match self {
            CertificateEvent::Event(e) => vec![e],
            CertificateEvent::EqualOdds => vec![FairnessEvent::LabelEquals(1), FairnessEvent::LabelEquals(0)],
        }
    }
}

impl From<FairnessEvent> for CertificateEvent {
    fn from(e: FairnessEvent) -> Self {
        CertificateEvent::Event(e)
    }
}

impl fmt::Display for CertificateEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CertificateEvent::Event(e) => e.fmt(f),
            CertificateEvent::EqualOdds => f.write_str("equal-odds"),
        }
    }
}

impl FromStr for CertificateEvent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-odds" | "equalized-odds" => Ok(CertificateEvent::EqualOdds),
            other => other.parse().map(CertificateEvent::Event),
        }
    }
}

impl From<CertificateEvent> for String {
    fn from(e: CertificateEvent) -> String {
        e.to_string()
    }
}

impl TryFrom<String> for CertificateEvent {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessCertificate {
    /// Worst-case bound from the clipping constants alone.
    pub tau_theoretical: f64,
    /// `erf(A)` with the measured centre norm; sits between the other two.
    pub tau_center: f64,
    /// Max pairwise gap of the per-group mean positive probability.
    pub tau_empirical: f64,
    pub event: CertificateEvent,
    pub per_group: BTreeMap<String, f64>,
    pub context: CertContext,
}

/// Mean of `pred_prob` over the given rows, using the model's hidden layers
/// for the penultimate activations.
pub fn mean_pred_prob(ctx: &CertContext, model: &ModelParams, ds: &TabularDataset, rows: &[usize]) -> Result<f64> {
    if model.penultimate_dim() != ctx.w_prev.len() {
        return Err(Error::DimensionMismatch {
            expected: ctx.w_prev.len(),
            actual: model.penultimate_dim(),
        });
    }
    let probs: Vec<f64> = rows
        .par_iter()
        .map(|&i| pred_prob(ctx, &penultimate(model, ds.x(i))))
        .collect::<Result<_>>()?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

/// Largest pairwise absolute difference.
pub fn max_pairwise_gap(values: &[f64]) -> f64 {
    let mut gap = 0.0f64;
    for (i, a) in values.iter().enumerate() {
        for b in &values[i + 1..] {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

pub fn empirical_certificate(
    ctx: &CertContext,
    ds: &TabularDataset,
    part: &GroupPartition,
    event: CertificateEvent,
    model: &ModelParams,
) -> Result<FairnessCertificate> {
    let names: Vec<String> = (0..part.num_groups())
        .map(|k| ds.group_names().get(k).cloned().unwrap_or_else(|| k.to_string()))
        .collect();
    let events = event.events();
    let mut per_group = BTreeMap::new();
    let mut tau_empirical = 0.0f64;
    for &e in &events {
        let mut p = Vec::with_capacity(part.num_groups());
        for (k, name) in names.iter().enumerate() {
            let rows = event_subset(ds, part, k, e)?;
            let v = mean_pred_prob(ctx, model, ds, &rows)?;
            let key = if events.len() == 1 {
                name.clone()
            } else {
                format!("{name}/{e}")
            };
            per_group.insert(key, v);
            p.push(v);
        }
        tau_empirical = tau_empirical.max(max_pairwise_gap(&p));
    }
    let tau_theoretical = worst_case_bound(ctx.clip_m, ctx.num_groups, ctx.eta, ctx.m, ctx.clip_c, ctx.sigma)?;
    Ok(FairnessCertificate {
        tau_theoretical,
        tau_center: erf(sandwich_argument(ctx)),
        tau_empirical,
        event,
        per_group,
        context: ctx.clone(),
    })
}

/// Certificate of every SGD round of a run, each evaluated with the
/// released model's hidden layers.
pub fn certificate_trajectory(
    outcome: &TrainOutcome,
    cfg: &TrainConfig,
    ds: &TabularDataset,
    part: &GroupPartition,
    event: CertificateEvent,
) -> Result<Vec<FairnessCertificate>> {
    outcome
        .rounds
        .iter()
        .filter(|r| r.mode == OptimizerMode::Sgd)
        .map(|r| {
            let ctx = CertContext::from_round(r, cfg)?;
            empirical_certificate(&ctx, ds, part, event, &outcome.model)
        })
        .collect()
}

/// Monte-Carlo smoothed classifier `x ↦ E_ν[h_{θ+ν}(x)]` with
/// `ν ~ N(0, σ̄² I)` over all parameters. The perturbed models are drawn once.
#[derive(Debug, Clone)]
pub struct SmoothClassifier {
    samples: Vec<ModelParams>,
}

impl SmoothClassifier {
    pub fn new(model: &ModelParams, sigma_bar: f64, n_samples: usize, rng: &mut RngStream) -> Result<Self> {
        if !(sigma_bar > 0.0 && sigma_bar.is_finite()) {
            return Err(Error::invalid("sigma_bar", format!("must be > 0, got {sigma_bar}")));
        }
        if n_samples == 0 {
            return Err(Error::invalid("n_samples", "must be >= 1"));
        }
        let samples = (0..n_samples)
            .map(|_| {
                let noise = gaussian(rng, 0.0, sigma_bar, model.num_params())?;
                let mut m = model.clone();
                for (p, v) in m.as_flat_mut().iter_mut().zip(noise) {
                    *p += v;
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;
        Ok(SmoothClassifier { samples })
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// Per-sample probabilities at `x`.
    pub fn sample_probas(&self, x: &[f64]) -> Vec<f64> {
        self.samples.iter().map(|m| m.predict_proba(x)).collect()
    }
}

impl Classifier for SmoothClassifier {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        self.sample_probas(x).iter().sum::<f64>() / self.samples.len() as f64
    }
}

/// One-shot smoothed probability at `x`.
pub fn smooth_inference(
    model: &ModelParams,
    sigma_bar: f64,
    n_samples: usize,
    rng: &mut RngStream,
    x: &[f64],
) -> Result<f64> {
    if !(sigma_bar > 0.0 && sigma_bar.is_finite()) {
        return Err(Error::invalid("sigma_bar", format!("must be > 0, got {sigma_bar}")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be >= 1"));
    }
    let mut sum = 0.0;
    let mut m = model.clone();
    for _ in 0..n_samples {
        m.as_flat_mut().copy_from_slice(model.as_flat());
        for p in m.as_flat_mut() {
            *p += sigma_bar * rng.standard_normal();
        }
        sum += m.predict_proba(x);
    }
    Ok(sum / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use proptest::prelude::*;

    fn ctx(w_prev: Vec<f64>, mu: Vec<f64>, eta: f64, sigma: f64, k: usize) -> CertContext {
        CertContext {
            round: 1,
            w_prev,
            mu,
            eta,
            sigma,
            clip_c: 1.0,
            clip_m: 1.0,
            num_groups: k,
            m: 0,
            threshold: 0.5,
        }
    }

    #[test]
    fn pred_prob_examples() {
        let c = ctx(vec![1.0, 0.0], vec![0.0, 0.0], 1.0, 1.0, 1);
        assert_eq!(pred_prob(&c, &[0.0, 1.0]).unwrap(), 0.5);
        let p = pred_prob(&c, &[1.0, 0.0]).unwrap();
        assert!((p - 0.841_344_746_068_543).abs() < 1e-12);
        let q = pred_prob(&c, &[-1.0, 0.0]).unwrap();
        assert_eq!(p + q, 1.0);
        assert_eq!(pred_prob(&c, &[0.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn pred_prob_matches_sampling() {
        // z_L = <W, z> with W ~ N(center, I): fraction of positive draws
        let c = ctx(vec![1.0, 0.0], vec![0.0, 0.0], 1.0, 1.0, 1);
        let mut rng = RngStream::new(12, 0);
        let n = 1_000_000;
        let pos = (0..n).filter(|_| 1.0 + rng.standard_normal() > 0.0).count();
        let mc = pos as f64 / n as f64;
        let p = pred_prob(&c, &[1.0, 0.0]).unwrap();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((mc - p).abs() < 4.0 * se, "mc {mc} vs {p}");
    }

    #[test]
    fn noiseless_pred_prob_is_indicator() {
        let c = ctx(vec![1.0, -1.0], vec![0.0, 0.0], 0.1, 0.0, 2);
        assert_eq!(pred_prob(&c, &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(pred_prob(&c, &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(pred_prob(&c, &[1.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn threshold_shifts_the_decision_point() {
        let mut c = ctx(vec![1.0], vec![0.0], 1.0, 1.0, 1);
        c.threshold = crate::linalg::sigmoid(1.0);
        // mean logit 1 sits exactly on the shifted threshold
        assert!((pred_prob(&c, &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(prob_sandwich(&c).is_err());
    }

    #[test]
    fn sandwich_examples() {
        let c = ctx(vec![0.5, 0.5], vec![50.0, 50.0], 0.01, 1.0, 2);
        assert_eq!(prob_sandwich(&c).unwrap(), (0.5, 0.5));
        let c = ctx(vec![0.3, -0.2, 0.1], vec![1.0, 2.0, -1.0], 0.05, 0.7, 3);
        let (lo, hi) = prob_sandwich(&c).unwrap();
        let mut rng = RngStream::new(5, 0);
        for _ in 0..100 {
            let z = gaussian(&mut rng, 0.0, 3.0, 3).unwrap();
            let p = pred_prob(&c, &z).unwrap();
            assert!(lo <= p && p <= hi);
        }
    }

    #[test]
    fn worst_case_bound_examples() {
        assert!(worst_case_bound(1.0, 2, 1.0, 10, 1.0, 1e9).unwrap() < 1e-6);
        let arg = (0.1 * 2.0 + 0.005 * 256.0 * 1.0) * 2f64.sqrt() / (2.0 * 0.005 * 2.0 * 1.0 * SQRT_2);
        assert!((arg - 74.0).abs() < 0.05);
        assert_eq!(worst_case_bound(0.1, 2, 0.005, 256, 1.0, 2.0).unwrap(), 1.0);
        assert!(worst_case_bound(0.0, 2, 0.005, 256, 1.0, 2.0).is_err());
        assert!(worst_case_bound(1.0, 0, 0.005, 256, 1.0, 2.0).is_err());
    }

    #[test]
    fn gap_examples() {
        assert!((max_pairwise_gap(&[0.9, 0.3]) - 0.6).abs() < 1e-15);
        assert!((max_pairwise_gap(&[0.2, 0.5, 0.9]) - 0.7).abs() < 1e-15);
        assert_eq!(max_pairwise_gap(&[0.4]), 0.0);
    }

    fn two_group_ds() -> (TabularDataset, GroupPartition) {
        // identical rows in both groups
        let x = Mat::from_vec(4, 2, vec![0.1, 0.9, 0.7, 0.2, 0.1, 0.9, 0.7, 0.2]).unwrap();
        let ds = TabularDataset::new(x, vec![0, 0, 1, 1], vec![1, 0, 1, 0], 2).unwrap();
        let part = crate::data::partition_by_group(&ds).unwrap();
        (ds, part)
    }

    #[test]
    fn identical_groups_certify_zero_gap() {
        let (ds, part) = two_group_ds();
        let mut rng = RngStream::new(0, 0);
        let model = ModelParams::init(2, &[3], &mut rng).unwrap();
        let c = ctx(vec![0.4, -0.3, 0.2], vec![0.1, 0.1, 0.1], 0.1, 1.0, 2);
        for ev in [
            CertificateEvent::DEMOGRAPHIC_PARITY,
            CertificateEvent::EQUAL_OPPORTUNITY,
            CertificateEvent::EqualOdds,
        ] {
            let cert = empirical_certificate(&c, &ds, &part, ev, &model).unwrap();
            assert_eq!(cert.tau_empirical, 0.0);
            assert!(cert.tau_center <= cert.tau_theoretical);
        }
        let odds = empirical_certificate(&c, &ds, &part, CertificateEvent::EqualOdds, &model).unwrap();
        assert_eq!(odds.per_group.len(), 4);
        let dp = empirical_certificate(&c, &ds, &part, CertificateEvent::DEMOGRAPHIC_PARITY, &model).unwrap();
        assert_eq!(dp.per_group.len(), 2);
    }

    #[test]
    fn empty_event_names_group() {
        let x = Mat::from_vec(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let ds = TabularDataset::new(x, vec![0, 0, 1], vec![1, 0, 0], 2).unwrap();
        let part = crate::data::partition_by_group(&ds).unwrap();
        let mut rng = RngStream::new(0, 0);
        let model = ModelParams::init(1, &[2], &mut rng).unwrap();
        let c = ctx(vec![0.1, 0.2], vec![0.0, 0.0], 0.1, 1.0, 2);
        let err = empirical_certificate(&c, &ds, &part, CertificateEvent::EQUAL_OPPORTUNITY, &model).unwrap_err();
        assert!(matches!(err, Error::EmptyEvent { group: 1, .. }));
    }

    #[test]
    fn certificate_event_strings() {
        for s in ["none", "positive-label", "label-equals-0", "equal-odds"] {
            let e: CertificateEvent = s.parse().unwrap();
            assert_eq!(e.to_string(), s);
        }
        let e: CertificateEvent = "demographic-parity".parse().unwrap();
        assert_eq!(e, CertificateEvent::DEMOGRAPHIC_PARITY);
    }

    #[test]
    fn smoothing_examples() {
        let mut rng = RngStream::new(1, 0);
        let model = ModelParams::init(3, &[4], &mut rng).unwrap();
        let x = [0.2, 0.5, 0.8];
        let plain = model.predict_proba(&x);
        let p = smooth_inference(&model, 1e-12, 10, &mut rng, &x).unwrap();
        assert!((p - plain).abs() < 1e-6);
        let s = SmoothClassifier::new(&model, 1e-12, 3, &mut rng).unwrap();
        assert!((s.predict_proba(&x) - plain).abs() < 1e-6);
        assert!(smooth_inference(&model, 0.0, 10, &mut rng, &x).is_err());
        assert!(smooth_inference(&model, 0.1, 0, &mut rng, &x).is_err());
        let a = smooth_inference(&model, 0.5, 50, &mut RngStream::new(9, 0), &x).unwrap();
        let b = smooth_inference(&model, 0.5, 50, &mut RngStream::new(9, 0), &x).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn pred_prob_scale_invariant_and_sandwiched(
            z in proptest::collection::vec(-5.0f64..5.0, 3),
            s in 0.01f64..100.0,
        ) {
            let c = ctx(vec![0.3, -0.6, 0.2], vec![2.0, -1.0, 0.5], 0.05, 0.8, 2);
            prop_assume!(l2_norm(&z) > 1e-6);
            let p = pred_prob(&c, &z).unwrap();
            let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
            prop_assert!((pred_prob(&c, &scaled).unwrap() - p).abs() < 1e-12);
            let (lo, hi) = prob_sandwich(&c).unwrap();
            prop_assert!(lo <= p && p <= hi);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
