use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fairdp::certify::{self, empirical_certificate, CertContext, FairnessCertificate, SmoothClassifier};
use fairdp::data::{load_csv, partition_by_group, stratified_split, subsample_major};
use fairdp::fairdp::{train, train_dpsgd_baseline, RoundRecord, TrainOutcome};
use fairdp::fairfm::train_fairfm;
use fairdp::metrics::{evaluate, Evaluation};
use fairdp::privacy::{calibrate_sigma, LedgerReport};
use fairdp::{Classifier, GroupPartition, ModelParams, TabularDataset, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::spec::{ExperimentSpec, Mechanism};

// RNG streams for data handling, clear of the per-group training streams
const STREAM_SPLIT: u64 = 1 << 40;
const STREAM_SUBSAMPLE: u64 = (1 << 40) + 1;
const STREAM_SMOOTH: u64 = (1 << 40) + 2;

pub const MODEL_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const PRIVACY_FILE: &str = "privacy.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const SPEC_FILE: &str = "spec.toml";
pub const ROUND_FILE: &str = "round_record.json";
pub const TRAJECTORY_FILE: &str = "certificate_trajectory.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Training and test splits after preprocessing.
pub struct PreparedData {
    pub train: TabularDataset,
    pub train_part: GroupPartition,
    pub test: TabularDataset,
    pub test_part: GroupPartition,
}

pub fn prepare_data(spec: &ExperimentSpec) -> anyhow::Result<PreparedData> {
    let ds = load_csv(&spec.dataset.path, &spec.dataset.schema())
        .with_context(|| format!("loading {}", spec.dataset.path.display()))?;
    let mut split_rng = fairdp::RngStream::new(spec.seed, STREAM_SPLIT);
    let (mut train, test) = stratified_split(&ds, spec.test_fraction, &mut split_rng)?;
    if let Some(rho) = spec.rho {
        let mut rng = fairdp::RngStream::new(spec.seed, STREAM_SUBSAMPLE);
        train = subsample_major(&train, rho, &mut rng)?;
    }
    let train_part = partition_by_group(&train)?;
    let test_part = partition_by_group(&test)?;
    Ok(PreparedData {
        train,
        train_part,
        test,
        test_part,
    })
}

/// How the privacy budget was spent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "kebab-case")]
pub enum PrivacyReport {
    SubsampledGaussian(LedgerReport),
    /// Pure ε-DP coefficient perturbation.
    Laplace {
        epsilon: f64,
    },
}

impl PrivacyReport {
    pub fn epsilon(&self) -> f64 {
        match self {
            PrivacyReport::SubsampledGaussian(l) => l.epsilon,
            PrivacyReport::Laplace { epsilon } => *epsilon,
        }
    }
}

/// Final SGD round together with what is needed to recompute its certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRound {
    pub model_sha256: String,
    pub config: TrainConfig,
    pub record: RoundRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub test: Evaluation,
    pub train: Evaluation,
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub mechanism: Mechanism,
    pub seed: u64,
    pub epsilon: f64,
    pub sigma: Option<f64>,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub demographic_parity: Option<f64>,
    pub equal_opportunity: Option<f64>,
    pub equal_odds: Option<f64>,
    pub tau_theoretical: Option<f64>,
    pub tau_empirical: Option<f64>,
}

/// Everything a run produced, in memory.
pub struct RunOutput {
    pub summary: RunSummary,
    pub model: ModelParams,
    pub privacy: PrivacyReport,
    pub metrics: MetricsReport,
    pub certificate: Option<FairnessCertificate>,
    pub outcome: Option<TrainOutcome>,
    pub data: PreparedData,
    pub effective: ExperimentSpec,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn pretty<T: Serialize>(v: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Resolve σ from the target ε where requested.
pub fn effective_spec(spec: &ExperimentSpec) -> anyhow::Result<ExperimentSpec> {
    let mut eff = spec.clone();
    eff.train.seed = eff.seed;
    if matches!(eff.mechanism, Mechanism::Dpsgd | Mechanism::DpsgdSmooth) {
        if eff.is_explicit("clip_m") && eff.train.clip_m.is_finite() {
            eprintln!("warning: clip_m is ignored for mechanism {}", eff.mechanism);
        }
        eff.train.clip_m = f64::INFINITY;
        eff.explicit_train.remove("clip_m");
        // the baseline runs Adam throughout unless told otherwise
        if !eff.is_explicit("switch_fraction") {
            eff.train.switch_fraction = 1.0;
            eff.mark_explicit("switch_fraction");
        }
    }
    if eff.mechanism.is_sgd() {
        if let Some(target) = eff.target_epsilon {
            eff.train.sigma = calibrate_sigma(target, eff.train.q, eff.train.steps as u64, eff.train.delta)?;
        }
    }
    eff.validate()?;
    Ok(eff)
}

/// Train, certify and evaluate without touching the filesystem beyond the dataset.
pub fn execute(spec: &ExperimentSpec) -> anyhow::Result<RunOutput> {
    let eff = effective_spec(spec)?;
    let data = prepare_data(&eff)?;
    let cfg = &eff.train;

    let (model, outcome, privacy) = match eff.mechanism {
        Mechanism::Fairdp | Mechanism::Dpsgd | Mechanism::DpsgdSmooth => {
            let outcome = if eff.mechanism == Mechanism::Fairdp {
                train(&data.train, &data.train_part, cfg)?
            } else {
                train_dpsgd_baseline(&data.train, cfg)?
            };
            let privacy = PrivacyReport::SubsampledGaussian(outcome.ledger.report());
            (outcome.model.clone(), Some(outcome), privacy)
        }
        Mechanism::Fairfm | Mechanism::FairfmSmooth => {
            let eps = eff.target_epsilon.expect("validated");
            let model = train_fairfm(
                &data.train,
                &data.train_part,
                eps,
                eff.fairfm.eta,
                eff.fairfm.steps,
                eff.seed,
            )?;
            (model, None, PrivacyReport::Laplace { epsilon: eps })
        }
    };

    let certificate = match (&outcome, eff.mechanism) {
        (Some(out), Mechanism::Fairdp) => {
            let ctx = CertContext::from_outcome(out, cfg)?;
            Some(empirical_certificate(
                &ctx,
                &data.train,
                &data.train_part,
                eff.event,
                &out.model,
            )?)
        }
        _ => None,
    };

    let metrics = if eff.mechanism.is_smooth() {
        let mut rng = fairdp::RngStream::new(eff.seed, STREAM_SMOOTH);
        let smooth = SmoothClassifier::new(&model, eff.smoothing.sigma_bar, eff.smoothing.samples, &mut rng)?;
        measure(&smooth, &data, cfg.threshold)?
    } else {
        measure(&model, &data, cfg.threshold)?
    };

    let listed = |m| eff.metrics.contains(&m).then(|| metrics.test.gap(m)).flatten();
    use fairdp::FairnessMetric::*;
    let summary = RunSummary {
        run_dir: eff.out.clone(),
        mechanism: eff.mechanism,
        seed: eff.seed,
        epsilon: privacy.epsilon(),
        sigma: eff.mechanism.is_sgd().then_some(cfg.sigma),
        accuracy: metrics.test.accuracy,
        precision: metrics.test.precision,
        demographic_parity: listed(DemographicParity),
        equal_opportunity: listed(EqualOpportunity),
        equal_odds: listed(EqualOdds),
        tau_theoretical: certificate.as_ref().map(|c| c.tau_theoretical),
        tau_empirical: certificate.as_ref().map(|c| c.tau_empirical),
    };
    Ok(RunOutput {
        summary,
        model,
        privacy,
        metrics,
        certificate,
        outcome,
        data,
        effective: eff,
    })
}

fn measure<C: Classifier + ?Sized>(model: &C, data: &PreparedData, threshold: f64) -> anyhow::Result<MetricsReport> {
    Ok(MetricsReport {
        test: evaluate(model, &data.test, &data.test_part, threshold)?,
        train: evaluate(model, &data.train, &data.train_part, threshold)?,
    })
}

/// Run an experiment and write its artifacts to `spec.out`.
pub fn run_experiment(spec: &ExperimentSpec) -> anyhow::Result<RunOutput> {
    let out = execute(spec)?;
    let dir = &out.effective.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let model_json = out.model.to_json()?;
    write(dir, MODEL_FILE, &model_json)?;
    write(dir, SPEC_FILE, out.effective.to_toml()?)?;
    write(dir, PRIVACY_FILE, pretty(&out.privacy)?)?;
    write(dir, METRICS_FILE, pretty(&out.metrics)?)?;
    let mut csv = Vec::new();
    out.metrics.test.write_csv(&mut csv)?;
    write(dir, METRICS_CSV_FILE, csv)?;
    write(dir, SUMMARY_FILE, pretty(&out.summary)?)?;

    if let Some(outcome) = &out.outcome {
        let mut log = Vec::new();
        outcome.write_log(&mut log)?;
        write(dir, LOG_FILE, log)?;
        if let Some(record) = outcome.final_sgd_round() {
            let stored = StoredRound {
                model_sha256: sha256_hex(model_json.as_bytes()),
                config: out.effective.train.clone(),
                record: record.clone(),
            };
            write(dir, ROUND_FILE, pretty(&stored)?)?;
        }
        if out.effective.trajectory && out.effective.mechanism == Mechanism::Fairdp {
            let traj = certify::certificate_trajectory(
                outcome,
                &out.effective.train,
                &out.data.train,
                &out.data.train_part,
                out.effective.event,
            )?;
            write(dir, TRAJECTORY_FILE, pretty(&traj)?)?;
        }
    }
    if let Some(cert) = &out.certificate {
        write(dir, CERTIFICATE_FILE, pretty(cert)?)?;
    }
    Ok(out)
}

fn load_run(run_dir: &Path) -> anyhow::Result<(ExperimentSpec, String, ModelParams)> {
    let spec = ExperimentSpec::load(&run_dir.join(SPEC_FILE))?;
    let path = run_dir.join(MODEL_FILE);
    let model_json = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let model = ModelParams::from_json(&model_json)?;
    Ok((spec, model_json, model))
}

/// Recompute a run's certificate from its checkpoint and stored round.
/// `event` overrides the run's event; `dataset` overrides its data path.
pub fn certify_run(
    run_dir: &Path,
    event: Option<fairdp::CertificateEvent>,
    dataset: Option<&Path>,
) -> anyhow::Result<FairnessCertificate> {
    let (mut spec, model_json, model) = load_run(run_dir)?;
    let path = run_dir.join(ROUND_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let stored: StoredRound = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let digest = sha256_hex(model_json.as_bytes());
    if digest != stored.model_sha256 {
        bail!(
            "round record does not match checkpoint: record expects model {}, found {}",
            stored.model_sha256,
            digest
        );
    }
    if let Some(p) = dataset {
        spec.dataset.path = p.to_path_buf();
    }
    let data = prepare_data(&spec)?;
    let ctx = CertContext::from_round(&stored.record, &stored.config)?;
    Ok(empirical_certificate(
        &ctx,
        &data.train,
        &data.train_part,
        event.unwrap_or(spec.event),
        &model,
    )?)
}

/// Re-evaluate a run's checkpoint on its held-out split.
pub fn evaluate_run(run_dir: &Path, dataset: Option<&Path>) -> anyhow::Result<MetricsReport> {
    let (mut spec, _, model) = load_run(run_dir)?;
    if let Some(p) = dataset {
        spec.dataset.path = p.to_path_buf();
    }
    let data = prepare_data(&spec)?;
    if spec.mechanism.is_smooth() {
        let mut rng = fairdp::RngStream::new(spec.seed, STREAM_SMOOTH);
        let smooth = SmoothClassifier::new(&model, spec.smoothing.sigma_bar, spec.smoothing.samples, &mut rng)?;
        measure(&smooth, &data, spec.train.threshold)
    } else {
        measure(&model, &data, spec.train.threshold)
    }
}

pub fn to_pretty_json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    pretty(v)
}
