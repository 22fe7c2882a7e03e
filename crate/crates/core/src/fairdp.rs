//! Group-partitioned DP-SGD with last-layer norm control.
//!
//! Each round clips the last-layer weights of the shared model to `M`, lets
//! every protected group take one noisy clipped-gradient step from the shared
//! model on its own Poisson batch, and averages the group models. Plain DP-SGD
//! is the single-group case with `M = ∞`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{poisson_batch, GroupPartition, TabularDataset};
use crate::error::{Error, Result};
use crate::linalg::{clip_norm, l2_norm, RngStream};
use crate::model::{
    self, last_layer_norm, order_free_mean, per_example_grad_and_loss, ModelParams, OptimizerMode, OptimizerState,
};
use crate::privacy::{self, finite_or_null, PrivacyLedger};

pub const SITE_INIT: u64 = 0;
pub const SITE_BATCH: u64 = 1;
pub const SITE_NOISE: u64 = 2;

/// RNG stream id for a `(group, site)` pair. Streams are keyed by group id so
/// the processing order of groups never changes the draws.
pub fn stream_id(group: usize, site: u64) -> u64 {
    group as u64 * 16 + site
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Poisson sampling rate per group.
    pub q: f64,
    pub eta_adam: f64,
    pub eta_sgd: f64,
    /// Noise multiplier; the noise std on a gradient sum is `sigma · clip_c`.
    pub sigma: f64,
    /// Per-example gradient norm bound.
    pub clip_c: f64,
    /// Last-layer weight norm bound; infinite disables clipping.
    #[serde(with = "finite_or_null")]
    pub clip_m: f64,
    pub steps: usize,
    pub delta: f64,
    /// Fraction of rounds run with Adam before switching to SGD.
    pub switch_fraction: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Probability threshold for hard predictions.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            q: 0.01,
            eta_adam: 0.02,
            eta_sgd: 0.005,
            sigma: 1.0,
            clip_c: 1.0,
            clip_m: 1.0,
            steps: 1000,
            delta: privacy::DEFAULT_DELTA,
            switch_fraction: 0.9,
            seed: 0,
            hidden: vec![32],
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid("q", format!("must be in (0, 1], got {}", self.q)));
        }
        for (name, v) in [("eta_adam", self.eta_adam), ("eta_sgd", self.eta_sgd)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(
                "sigma",
                format!("must be finite and >= 0, got {}", self.sigma),
            ));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::invalid("clip_c", format!("must be > 0, got {}", self.clip_c)));
        }
        if !(self.clip_m > 0.0) {
            return Err(Error::invalid("clip_m", format!("must be > 0, got {}", self.clip_m)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(
                "delta",
                format!("must be in (0, 1), got {}", self.delta),
            ));
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(Error::invalid(
                "switch_fraction",
                format!("must be in [0, 1], got {}", self.switch_fraction),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(
                "threshold",
                format!("must be in (0, 1), got {}", self.threshold),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }

    /// Number of leading rounds run with Adam.
    pub fn adam_rounds(&self) -> usize {
        ((self.switch_fraction * self.steps as f64).floor() as usize).min(self.steps)
    }

    /// Optimizer used in 1-based round `t`.
    pub fn mode_at(&self, t: usize) -> OptimizerMode {
        if t <= self.adam_rounds() {
            OptimizerMode::Adam
        } else {
            OptimizerMode::Sgd
        }
    }

    pub fn eta(&self, mode: OptimizerMode) -> f64 {
        match mode {
            OptimizerMode::Adam => self.eta_adam,
            OptimizerMode::Sgd => self.eta_sgd,
        }
    }
}

/// Quantities of one round needed to certify the model it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub mode: OptimizerMode,
    pub eta: f64,
    /// Per group, the last-layer slice of the clipped-gradient sum (no noise).
    pub group_sums: Vec<Vec<f64>>,
    /// Mean of `group_sums` over groups.
    pub mu: Vec<f64>,
    /// Aggregated last-layer weights right after norm clipping.
    pub w_prev: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Total batch size over groups.
    pub m: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub mode: OptimizerMode,
    pub batch_sizes: Vec<usize>,
    pub last_layer_norm_before_clip: f64,
    pub last_layer_norm: f64,
    pub mu_norm: f64,
    /// Mean batch loss before the update; absent when every batch is empty.
    pub mean_loss: Option<f64>,
    pub clipped_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub rounds: Vec<RoundRecord>,
    pub ledger: PrivacyLedger,
    pub log: Vec<RoundSummary>,
}

impl TrainOutcome {
    pub fn final_round(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    /// Last round run with SGD, if any.
    pub fn final_sgd_round(&self) -> Option<&RoundRecord> {
        self.rounds.iter().rev().find(|r| r.mode == OptimizerMode::Sgd)
    }

    pub fn epsilon(&self) -> f64 {
        privacy::account(&self.ledger)
    }

    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.log {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }
}

/// Clipped-gradient sum of one group's batch, before noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradient {
    pub clipped_sum: Vec<f64>,
    pub batch_size: usize,
    pub clipped: usize,
    pub loss_sum: f64,
}

/// Per-example gradients over `batch`, each clipped to `clip_c`, summed in
/// batch order.
pub fn group_gradient(theta: &ModelParams, ds: &TabularDataset, batch: &[usize], clip_c: f64) -> Result<GroupGradient> {
    let per_example: Vec<(Vec<f64>, f64, f64)> = batch
        .par_iter()
        .map(|&i| {
            let (mut g, l) = per_example_grad_and_loss(theta, ds.x(i), ds.y(i))?;
            let pre = clip_norm(&mut g, clip_c);
            Ok((g, l, pre))
        })
        .collect::<Result<_>>()?;
    let mut clipped = 0;
    let mut loss_sum = 0.0;
    let mut grads = Vec::with_capacity(per_example.len());
    for (g, l, pre) in per_example {
        if pre > clip_c {
            clipped += 1;
        }
        loss_sum += l;
        grads.push(g);
    }
    let clipped_sum = privacy::clipped_sum(&grads, theta.num_params(), clip_c)?;
    Ok(GroupGradient {
        clipped_sum,
        batch_size: batch.len(),
        clipped,
        loss_sum,
    })
}

/// `θ_k = step(θ, Σ ḡ + N(0, σ²C²I))` for one group.
pub fn noisy_group_update(
    theta: &ModelParams,
    clipped_sum: Vec<f64>,
    clip_c: f64,
    sigma: f64,
    opt: &mut OptimizerState,
    noise: &mut RngStream,
) -> Result<ModelParams> {
    let noisy = privacy::add_gaussian_noise(clipped_sum, clip_c, sigma, noise)?;
    let mut out = theta.clone();
    model::step(&mut out, opt, &noisy)?;
    Ok(out)
}

/// Coordinate-wise mean of the group models; independent of their order.
pub fn aggregate(models: &[ModelParams]) -> Result<ModelParams> {
    model::average(models)
}

struct GroupState {
    opt: OptimizerState,
    batch_rng: RngStream,
    noise_rng: RngStream,
}

pub fn train(ds: &TabularDataset, part: &GroupPartition, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = part.num_groups();
    if k == 0 {
        return Err(Error::invalid("partition", "needs at least one group"));
    }
    for (g, rows) in part.groups().iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::DegenerateGroup {
                group: ds.group_names().get(g).cloned().unwrap_or_else(|| g.to_string()),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::invalid(
                "partition",
                format!("row {bad} out of range for {} rows", ds.len()),
            ));
        }
    }

    let mut init_rng = RngStream::new(cfg.seed, stream_id(0, SITE_INIT));
    let mut theta = ModelParams::init(ds.dim(), &cfg.hidden, &mut init_rng)?;
    let n_params = theta.num_params();
    let last = theta.last_layer_range();

    let first_mode = cfg.mode_at(1);
    let mut groups: Vec<GroupState> = (0..k)
        .map(|g| {
            let opt = match first_mode {
                OptimizerMode::Adam => OptimizerState::adam(cfg.eta_adam, n_params),
                OptimizerMode::Sgd => OptimizerState::sgd(cfg.eta_sgd),
            }?;
            Ok(GroupState {
                opt,
                batch_rng: RngStream::new(cfg.seed, stream_id(g, SITE_BATCH)),
                noise_rng: RngStream::new(cfg.seed, stream_id(g, SITE_NOISE)),
            })
        })
        .collect::<Result<_>>()?;

    let mut rounds = Vec::with_capacity(cfg.steps);
    let mut log = Vec::with_capacity(cfg.steps);

    for t in 1..=cfg.steps {
        let mode = cfg.mode_at(t);
        if mode == OptimizerMode::Sgd {
            for gs in groups.iter_mut().filter(|gs| gs.opt.mode() != OptimizerMode::Sgd) {
                gs.opt.switch_to_sgd(cfg.eta_sgd)?;
            }
        }

        let norm_before = if cfg.clip_m.is_finite() {
            model::clip_last_layer(&mut theta, cfg.clip_m)
        } else {
            last_layer_norm(&theta)
        };
        let w_prev = theta.last_layer().to_vec();

        let theta_ref = &theta;
        let results: Vec<(ModelParams, GroupGradient)> = groups
            .par_iter_mut()
            .enumerate()
            .map(|(g, gs)| {
                let batch = poisson_batch(part, g, cfg.q, &mut gs.batch_rng);
                let grad = group_gradient(theta_ref, ds, &batch, cfg.clip_c)?;
                let mut summary = grad.clone();
                summary.clipped_sum = grad.clipped_sum[last.clone()].to_vec();
                let updated = noisy_group_update(
                    theta_ref,
                    grad.clipped_sum,
                    cfg.clip_c,
                    cfg.sigma,
                    &mut gs.opt,
                    &mut gs.noise_rng,
                )?;
                Ok((updated, summary))
            })
            .collect::<Result<_>>()?;

        let (models, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        theta = aggregate(&models)?;
        if !theta.is_finite() {
            return Err(Error::Divergence {
                round: t,
                detail: format!(
                    "non-finite parameters after aggregation (mode {mode:?}, last-layer norm before clip {norm_before}, batch sizes {:?})",
                    grads.iter().map(|g| g.batch_size).collect::<Vec<_>>()
                ),
            });
        }

        let group_sums: Vec<Vec<f64>> = grads.iter().map(|g| g.clipped_sum.clone()).collect();
        let mut mu = vec![0.0; w_prev.len()];
        let cols: Vec<&[f64]> = group_sums.iter().map(Vec::as_slice).collect();
        order_free_mean(&cols, &mut mu);
        let batch_sizes: Vec<usize> = grads.iter().map(|g| g.batch_size).collect();
        let m: usize = batch_sizes.iter().sum();
        let clipped: usize = grads.iter().map(|g| g.clipped).sum();
        let loss_sum: f64 = grads.iter().map(|g| g.loss_sum).sum();

        log.push(RoundSummary {
            round: t,
            mode,
            batch_sizes: batch_sizes.clone(),
            last_layer_norm_before_clip: norm_before,
            last_layer_norm: last_layer_norm(&theta),
            mu_norm: l2_norm(&mu),
            mean_loss: (m > 0).then(|| loss_sum / m as f64),
            clipped_fraction: (m > 0).then(|| clipped as f64 / m as f64),
        });
        rounds.push(RoundRecord {
            round: t,
            mode,
            eta: cfg.eta(mode),
            group_sums,
            mu,
            w_prev,
            batch_sizes,
            m,
        });
    }

    // every group samples with rate q for T steps; disjoint groups compose in parallel
    let mut ledger = PrivacyLedger::new(cfg.q, cfg.sigma, cfg.delta)?;
    ledger.record_steps(cfg.steps as u64);

    Ok(TrainOutcome {
        model: theta,
        rounds,
        ledger,
        log,
    })
}

/// Standard DP-SGD over the undivided dataset: one group, no last-layer clipping.
pub fn train_dpsgd_baseline(ds: &TabularDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        clip_m: f64::INFINITY,
        ..cfg.clone()
    };
    train(ds, &GroupPartition::single(ds.len()), &cfg)
}
