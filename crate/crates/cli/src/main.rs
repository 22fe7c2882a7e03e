use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fairdp::CertificateEvent;
use fairdp_cli::run::to_pretty_json;
use fairdp_cli::{
    certify_run, evaluate_run, partition_report, run_experiment, sweep, DatasetSpec, ExperimentSpec, Mechanism,
    SweepAxis,
};

#[derive(Parser)]
#[command(name = "fairdp", version, about = "Private training with certified group fairness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train(Common),
    /// Recompute the fairness certificate of a run.
    Certify {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        event: Option<CertificateEvent>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write the certificate here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a run's checkpoint on its held-out split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train over a grid of one parameter and write a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds per grid point; defaults to the spec's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Show group sizes and base rates.
    PartitionReport(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long, value_delimiter = ',')]
    protected: Vec<String>,
    #[arg(long)]
    mechanism: Option<Mechanism>,
    /// Target ε; calibrates σ for the SGD mechanisms.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long = "clip-c")]
    clip_c: Option<f64>,
    #[arg(long = "clip-m")]
    clip_m: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    event: Option<CertificateEvent>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    /// Also write per-round certificates.
    #[arg(long)]
    trajectory: bool,
}

impl Common {
    fn spec(&self) -> anyhow::Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => {
                let (Some(path), Some(label)) = (&self.dataset, &self.label) else {
                    bail!("without --config, --dataset and --label are required");
                };
                if self.protected.is_empty() {
                    bail!("without --config, --protected is required");
                }
                let Some(seed) = self.seed else {
                    bail!("a seed is required: pass --seed or set it in the config");
                };
                let dataset = DatasetSpec {
                    path: path.clone(),
                    label: label.clone(),
                    protected: self.protected.clone(),
                    features: Vec::new(),
                };
                ExperimentSpec::new(
                    seed,
                    self.mechanism.unwrap_or(Mechanism::Fairdp),
                    dataset,
                    self.out.clone().unwrap_or_else(|| PathBuf::from("runs/run")),
                )
            }
        };
        if let Some(p) = &self.dataset {
            spec.dataset.path = p.clone();
        }
        if let Some(l) = &self.label {
            spec.dataset.label = l.clone();
        }
        if !self.protected.is_empty() {
            spec.dataset.protected = self.protected.clone();
        }
        if let Some(m) = self.mechanism {
            spec.mechanism = m;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
            spec.train.seed = s;
        }
        if let Some(o) = &self.out {
            spec.out = o.clone();
        }
        if self.epsilon.is_some() {
            spec.target_epsilon = self.epsilon;
        }
        if self.rho.is_some() {
            spec.rho = self.rho;
        }
        if let Some(e) = self.event {
            spec.event = e;
        }
        if let Some(v) = self.sigma {
            spec.train.sigma = v;
            spec.mark_explicit("sigma");
        }
        if let Some(v) = self.clip_c {
            spec.train.clip_c = v;
            spec.mark_explicit("clip_c");
        }
        if let Some(v) = self.clip_m {
            spec.train.clip_m = v;
            spec.mark_explicit("clip_m");
        }
        if let Some(v) = self.steps {
            spec.train.steps = v;
            spec.mark_explicit("steps");
            spec.fairfm.steps = v;
        }
        if let Some(v) = self.q {
            spec.train.q = v;
            spec.mark_explicit("q");
        }
        if let Some(v) = self.delta {
            spec.train.delta = v;
            spec.mark_explicit("delta");
        }
        if !self.hidden.is_empty() {
            spec.train.hidden = self.hidden.clone();
            spec.mark_explicit("hidden");
        }
        if self.trajectory {
            spec.trajectory = true;
        }
        Ok(spec)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(common) => {
            let out = run_experiment(&common.spec()?)?;
            print!("{}", to_pretty_json(&out.summary)?);
        }
        Command::Certify {
            run,
            event,
            dataset,
            out,
        } => {
            let cert = certify_run(&run, event, dataset.as_deref())?;
            let text = to_pretty_json(&cert)?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Evaluate { run, dataset } => {
            let m = evaluate_run(&run, dataset.as_deref())?;
            print!("{}", to_pretty_json(&m)?);
        }
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
        } => {
            let spec = common.spec()?;
            let seeds = if seeds.is_empty() { vec![spec.seed] } else { seeds };
            let rows = sweep(&spec, axis, &values, &seeds);
            std::fs::create_dir_all(&spec.out)?;
            let path = spec.out.join(format!("sweep_{axis}.csv"));
            let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            fairdp_cli::sweep::write_csv(&rows, file)?;
            fairdp_cli::sweep::write_csv(&rows, std::io::stdout())?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!(
                    "warning: {failed} of {} grid points failed; see the error column",
                    rows.len()
                );
            }
        }
        Command::PartitionReport(common) => {
            print!("{}", to_pretty_json(&partition_report(&common.spec()?)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let body = serde_json::json!({ "error": e.to_string(), "causes": chain });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
