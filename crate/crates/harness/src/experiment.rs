use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scopegen_core::calibrator::GenerationBudget;
use scopegen_core::clm::{beta_grid_with, clm_predict, collect_samples, ClmCalibration, ClmResult, REDUCED_MAX};
use scopegen_core::oracle::{ExactMatch, Judge};
use scopegen_core::seed;
use scopegen_core::world::{SyntheticInstance, SyntheticTask, SyntheticWorld, Token};
use scopegen_core::{calibrate, AdmissionOracle, CalibrationResult, FilterKind, FilterSpec, Prediction};

use crate::config::{ExperimentConfig, Method};
use crate::results::MetricsRow;

pub type SyntheticOracle = AdmissionOracle<SyntheticInstance, Token, Token>;

/// Filters of a SCOPE-Gen variant, in pipeline order.
pub fn scope_filters(method: Method, world: &SyntheticWorld) -> Vec<FilterSpec<Token>> {
    let div = || FilterKind::Diversity(world.metric());
    match method {
        Method::ScopeGen => vec![FilterSpec::new(div(), 1), FilterSpec::new(FilterKind::Quality, 2)],
        Method::ScopeGenFlipped => vec![FilterSpec::new(FilterKind::Quality, 1), FilterSpec::new(div(), 2)],
        Method::ScopeGenGenOnly | Method::Clm | Method::ClmReducedMax => Vec::new(),
    }
}

/// Calibration and test instances of one trial, plus the seeds derived for it.
pub struct TrialData {
    pub calibration: Vec<SyntheticTask>,
    pub test: Vec<SyntheticTask>,
    pub calibration_seed: u64,
    pub trial_seed: u64,
}

impl TrialData {
    pub fn new(config: &ExperimentConfig, world: &SyntheticWorld, trial: usize) -> Self {
        let base = config.seed.unwrap_or_default();
        let ts = seed::derive(base, &[trial as u64]);
        Self {
            calibration: world.draw_instances(config.n_calibration, 0, seed::derive(ts, &[0])),
            test: world.draw_instances(config.n_test, config.n_calibration as u64, seed::derive(ts, &[1])),
            calibration_seed: seed::derive(ts, &[2]),
            trial_seed: ts,
        }
    }

    pub fn prediction_seed(&self, instance_id: u64) -> u64 {
        seed::derive(self.trial_seed, &[3, instance_id])
    }
}

/// Result of calibrating one method once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrated {
    Scope(CalibrationResult),
    Clm(ClmResult),
}

impl Calibrated {
    pub fn rejected(&self) -> bool {
        match self {
            Calibrated::Scope(r) => r.rejected,
            Calibrated::Clm(r) => r.rejected,
        }
    }

    pub fn per_instance_queries(&self) -> Vec<usize> {
        match self {
            Calibrated::Scope(r) => r.per_instance_queries.iter().map(|a| a.queries).collect(),
            Calibrated::Clm(r) => r.queries_per_instance.clone(),
        }
    }

    pub fn query_count(&self) -> usize {
        match self {
            Calibrated::Scope(r) => r.query_count,
            Calibrated::Clm(r) => r.query_count,
        }
    }
}

fn clm_budget(config: &ExperimentConfig, method: Method) -> GenerationBudget {
    match method {
        Method::ClmReducedMax => GenerationBudget { max: REDUCED_MAX },
        _ => config.budget(),
    }
}

/// Calibrates `method` on `data` against `oracle`.
pub fn calibrate_method(
    config: &ExperimentConfig,
    method: Method,
    world: &SyntheticWorld,
    data: &[SyntheticTask],
    oracle: &SyntheticOracle,
    seed: u64,
) -> anyhow::Result<Calibrated> {
    let generator = world.generator();
    if method.is_clm() {
        let rule = config.generation_rule();
        let metric = world.metric();
        let samples = collect_samples(data, &generator, oracle, clm_budget(config, method), seed)?;
        let cal = ClmCalibration::new(samples, config.clm_grid, &rule, &metric)?;
        Ok(Calibrated::Clm(cal.select_best(&beta_grid_with(config.alpha, config.beta1_formula))))
    } else {
        let filters = scope_filters(method, world);
        let cfg = config.calibration_config(seed);
        Ok(Calibrated::Scope(calibrate(data, &generator, &filters, &cfg, oracle)?))
    }
}

/// Prediction for one condition under a finished calibration.
pub fn predict_one(
    config: &ExperimentConfig,
    method: Method,
    world: &SyntheticWorld,
    calibrated: &Calibrated,
    condition: &SyntheticInstance,
    seed: u64,
) -> anyhow::Result<Prediction<Token>> {
    let generator = world.generator();
    match calibrated {
        Calibrated::Scope(r) => {
            let cfg = config.calibration_config(0);
            let pipeline = r.pipeline(&generator, scope_filters(method, world), &cfg);
            Ok(pipeline.predict(condition, seed)?)
        }
        Calibrated::Clm(r) => Ok(clm_predict(
            condition,
            &generator,
            r,
            clm_budget(config, method),
            &config.generation_rule(),
            &world.metric(),
            seed,
        )?),
    }
}

/// One trial's metrics together with the calibration behind them.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub row: MetricsRow,
    pub calibrated: Calibrated,
}

pub fn run_trial(config: &ExperimentConfig, method: Method, trial: usize) -> anyhow::Result<TrialOutcome> {
    run_trial_with(config, method, trial, ExactMatch)
}

/// Like [`run_trial`] with a caller-chosen judge.
pub fn run_trial_with(
    config: &ExperimentConfig,
    method: Method,
    trial: usize,
    judge: impl Judge<SyntheticInstance, Token, Token> + 'static,
) -> anyhow::Result<TrialOutcome> {
    let world = SyntheticWorld::new(config.world.clone())?;
    let data = TrialData::new(config, &world, trial);
    let oracle = AdmissionOracle::new(judge);

    let start = Instant::now();
    let calibrated = calibrate_method(config, method, &world, &data.calibration, &oracle, data.calibration_seed)
        .with_context(|| format!("trial {trial}: calibrating {}", method.name()))?;
    let elapsed = start.elapsed().as_secs_f64();

    let queries = calibrated.per_instance_queries();
    let queries_mean = queries.iter().sum::<usize>() as f64 / queries.len().max(1) as f64;
    let (set_size_mean, admissibility) = if calibrated.rejected() {
        // entire output space: admissible by definition, size not reported
        (None, 1.0)
    } else {
        let mut size = 0usize;
        let mut hits = 0usize;
        for t in &data.test {
            let p = predict_one(config, method, &world, &calibrated, &t.condition, data.prediction_seed(t.id))?;
            let set = p.set().expect("non-rejected calibration yields a set");
            size += set.len();
            if set.outputs().any(|o| *o == t.reference) {
                hits += 1;
            }
        }
        let n = data.test.len().max(1) as f64;
        (Some(size as f64 / n), hits as f64 / n)
    };
    Ok(TrialOutcome {
        row: MetricsRow {
            method: method.name().to_string(),
            trial,
            queries_mean,
            time_seconds: if config.record_timing { elapsed } else { 0.0 },
            set_size_mean,
            frac_reject: if calibrated.rejected() { 1.0 } else { 0.0 },
            admissibility_empirical: admissibility,
        },
        calibrated,
    })
}

fn pool(workers: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

/// Every trial of `method`, in trial order.
pub fn run_trials(config: &ExperimentConfig, method: Method) -> anyhow::Result<Vec<TrialOutcome>> {
    config.validate()?;
    pool(config.workers)?.install(|| {
        (0..config.trials)
            .into_par_iter()
            .map(|t| run_trial(config, method, t))
            .collect()
    })
}

/// One row per trial of the configured method.
pub fn run_experiment(config: &ExperimentConfig) -> anyhow::Result<Vec<MetricsRow>> {
    Ok(run_trials(config, config.method)?.into_iter().map(|o| o.row).collect())
}
