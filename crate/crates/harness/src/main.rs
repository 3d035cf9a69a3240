use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scopegen_core::human::{HumanQueue, DEFAULT_LEASE};
use scopegen_core::oracle::{read_ndjson, write_ndjson, ExactMatch, ReplayJudge};
use scopegen_core::world::{SyntheticWorld, TokenMetric};
use scopegen_core::{AdmissionOracle, Prediction, RiskSplit};

use scopegen_harness::config::{ExperimentConfig, Method, Nonconformity};
use scopegen_harness::experiment::{predict_one, Calibrated, TrialData};
use scopegen_harness::results::emit_results;
use scopegen_harness::server::{self, BIND_ENV, DEFAULT_BIND};
use scopegen_harness::session::{calibrate_once, human_oracle};
use scopegen_harness::run_experiment;

#[derive(Parser)]
#[command(name = "scopegen", version, about = "Sequential conformal prediction sets on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Repeated calibrate/evaluate trials; writes a CSV and its config sidecar.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        /// Base seed (required).
        #[arg(long)]
        seed: u64,
    },
    /// One calibration on the trial-0 calibration set; writes the result as JSON.
    Calibrate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = OracleKind::Automated)]
        oracle: OracleKind,
        /// Verdict log to replay (`--oracle replay`).
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Where to write the verdict log of this run.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "calibration.json")]
        out: PathBuf,
    },
    /// Prediction sets for the trial-0 test conditions, one JSON line each.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Output of `calibrate` or `serve-oracle`.
        #[arg(long, default_value = "calibration.json")]
        calibration: PathBuf,
    },
    /// Runs a calibration whose admissibility checks are answered over HTTP.
    ServeOracle {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = BIND_ENV, default_value = DEFAULT_BIND)]
        bind: String,
        /// Append every verdict to this NDJSON file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replay verdicts from an earlier checkpoint before asking.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Seconds to wait for each verdict.
        #[arg(long, default_value_t = 600)]
        timeout: u64,
        #[arg(long, default_value = "calibration.json")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleKind {
    Automated,
    Replay,
}

/// Flags mirroring config keys; a flag wins over the config file.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    nonconformity: Option<Nonconformity>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_calibration: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    max: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Generation-stage emphasis M; 0 spreads risk uniformly.
    #[arg(long)]
    emphasis: Option<u32>,
    #[arg(long)]
    clm_grid: Option<usize>,
    #[arg(long)]
    hard_cap_multiple: Option<usize>,
    #[arg(long)]
    vocab: Option<u32>,
    #[arg(long)]
    p_lo: Option<f64>,
    #[arg(long)]
    p_hi: Option<f64>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Write 0 for time_seconds so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Ordinal,
    Discrete,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        self.resolve_onto(base, seed)
    }

    fn resolve_onto(&self, mut c: ExperimentConfig, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() { c.$field = v; }
            )*};
        }
        set!(method, alpha, nonconformity, n_calibration, n_test, trials, max, output, workers, clm_grid, hard_cap_multiple);
        if self.gamma.is_some() {
            c.gamma = self.gamma;
        }
        if let Some(m) = self.emphasis {
            c.risk_split = if m == 0 { RiskSplit::Uniform } else { RiskSplit::Emphasis(m) };
        }
        if let Some(v) = self.vocab {
            c.world.vocab = v;
        }
        if let Some(v) = self.p_lo {
            c.world.p_lo = v;
        }
        if let Some(v) = self.p_hi {
            c.world.p_hi = v;
        }
        if let Some(m) = self.metric {
            c.world.metric = match m {
                MetricArg::Ordinal => TokenMetric::Ordinal,
                MetricArg::Discrete => TokenMetric::Discrete,
            };
        }
        if self.no_timing {
            c.record_timing = false;
        }
        if seed.is_some() {
            c.seed = seed;
        }
        c.validate()?;
        Ok(c)
    }
}

fn write_json(path: &PathBuf, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn calibration_artifact(config: &ExperimentConfig, calibrated: &Calibrated) -> serde_json::Value {
    json!({ "config": config, "calibration": calibrated })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Experiment { config, seed } => {
            let cfg = config.resolve(Some(seed))?;
            let rows = run_experiment(&cfg)?;
            emit_results(&rows, &cfg.output, &cfg)?;
            log::info!("{} rows written to {}", rows.len(), cfg.output.display());
        }
        Command::Calibrate { config, seed, oracle, replay, log, out } => {
            let cfg = config.resolve(seed)?;
            let oracle = match (oracle, replay) {
                (OracleKind::Automated, _) => AdmissionOracle::new(ExactMatch),
                (OracleKind::Replay, Some(p)) => AdmissionOracle::new(ReplayJudge::new(read_ndjson(&p)?)),
                (OracleKind::Replay, None) => bail!("--oracle replay needs --replay <log>"),
            };
            let calibrated = calibrate_once(&cfg, &oracle)?;
            if let Some(p) = log {
                write_ndjson(&oracle.records(), &p)?;
            }
            write_json(&out, &calibration_artifact(&cfg, &calibrated))?;
            log::info!("{} queries; rejected={}; written to {}", calibrated.query_count(), calibrated.rejected(), out.display());
        }
        Command::Predict { config, seed, calibration } => {
            let text = std::fs::read_to_string(&calibration).with_context(|| format!("reading {}", calibration.display()))?;
            let mut artifact: serde_json::Value = serde_json::from_str(&text)?;
            let calibrated: Calibrated = serde_json::from_value(artifact["calibration"].take())?;
            // without --config, start from the config stored with the calibration
            let cfg = match &config.config {
                Some(_) => config.resolve(seed)?,
                None => config.resolve_onto(serde_json::from_value(artifact["config"].take())?, seed)?,
            };
            let world = SyntheticWorld::new(cfg.world.clone())?;
            let data = TrialData::new(&cfg, &world, 0);
            for t in &data.test {
                let p = predict_one(&cfg, cfg.method, &world, &calibrated, &t.condition, data.prediction_seed(t.id))?;
                let line = match p {
                    Prediction::EntireSpace => json!({ "instance_id": t.id, "set": "entire_space", "admissible": true }),
                    Prediction::Set(s) => {
                        let outputs: Vec<u32> = s.outputs().copied().collect();
                        json!({ "instance_id": t.id, "admissible": outputs.contains(&t.reference), "set": outputs })
                    }
                };
                println!("{line}");
            }
        }
        Command::ServeOracle { config, seed, bind, checkpoint, resume, timeout, out } => {
            let cfg = config.resolve(seed)?;
            let queue = HumanQueue::with_lease(Duration::from_secs(timeout), DEFAULT_LEASE);
            let oracle = human_oracle(Arc::clone(&queue), checkpoint.as_deref(), resume.as_deref())?;
            let rt = tokio::runtime::Runtime::new()?;
            let listener = rt.block_on(tokio::net::TcpListener::bind(&bind)).with_context(|| format!("binding {bind}"))?;
            log::info!("oracle service listening on http://{}", listener.local_addr()?);
            let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
            let handle = rt.spawn(server::serve(listener, Arc::clone(&queue), async {
                let _ = stop_rx.await;
            }));
            let result = calibrate_once(&cfg, &oracle);
            let _ = stop_tx.send(());
            rt.block_on(handle)??;
            let calibrated = result.context("calibration aborted; rerun with --resume to continue from the checkpoint")?;
            write_json(&out, &calibration_artifact(&cfg, &calibrated))?;
            log::info!("{} queries answered; written to {}", calibrated.query_count(), out.display());
        }
    }
    Ok(())
}
