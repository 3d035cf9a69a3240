//! Sequential prediction: a generation stage followed by greedy filter stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{ContractError, GeneratorError};
use crate::filters::{dedup, Candidate, FilterKind, FilterSpec, GreedyCursor, PredictionSet};
use crate::nonconformity::{clamp_quality, update_generation, NonConformityState, UpdateRule};
use crate::seed;
use crate::world::GenerativeModel;

pub const DEFAULT_HARD_CAP_MULTIPLE: usize = 10;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error("no threshold for stage {0}")]
    MissingThreshold(usize),
}

/// Calibrated thresholds, one per calibrated stage (generation first, then
/// each filter except threshold-free ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(with = "crate::extended::vec")]
    pub lambdas: Vec<f64>,
    pub rejected: bool,
}

impl Thresholds {
    pub fn new(lambdas: Vec<f64>) -> Self {
        Self { lambdas, rejected: false }
    }

    pub fn rejected() -> Self {
        Self {
            lambdas: Vec::new(),
            rejected: true,
        }
    }
}

/// Outcome of a prediction: a concrete set, or the whole output space when
/// the calibration was rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction<O> {
    Set(PredictionSet<O>),
    EntireSpace,
}

impl<O> Prediction<O> {
    pub fn set(&self) -> Option<&PredictionSet<O>> {
        match self {
            Prediction::Set(s) => Some(s),
            Prediction::EntireSpace => None,
        }
    }

    pub fn is_entire_space(&self) -> bool {
        matches!(self, Prediction::EntireSpace)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// An update pushed the score above the stage threshold.
    Threshold,
    /// Every element of the previous stage was taken.
    Exhausted,
    /// Generation hit the safety cap.
    HardCap,
    /// Threshold-free stage.
    Fixed,
}

/// One stage's result plus the scores it produced, including the one that broke the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace<O> {
    pub stage: usize,
    pub set: PredictionSet<O>,
    pub nus: Vec<f64>,
    pub stop: StopReason,
}

pub struct PredictPipeline<'g, G: GenerativeModel> {
    pub generator: &'g G,
    pub generation_rule: UpdateRule,
    pub filters: Vec<FilterSpec<G::Output>>,
    pub thresholds: Thresholds,
    pub hard_cap: usize,
}

impl<G: GenerativeModel> Clone for PredictPipeline<'_, G> {
    fn clone(&self) -> Self {
        Self {
            generator: self.generator,
            generation_rule: self.generation_rule,
            filters: self.filters.clone(),
            thresholds: self.thresholds.clone(),
            hard_cap: self.hard_cap,
        }
    }
}

/// Draws the `k`-th candidate of a prediction seeded with `seed`.
pub(crate) fn draw<G: GenerativeModel>(
    generator: &G,
    condition: &G::Condition,
    seed: u64,
    k: usize,
) -> Result<Candidate<G::Output>, GeneratorError> {
    let output = generator.sample(condition, seed::derive(seed, &[0, k as u64]))?;
    let quality = clamp_quality(generator.quality(condition, &output));
    Ok(Candidate { id: k, output, quality })
}

pub(crate) fn filter_rng(seed: u64, stage: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed::derive(seed, &[1, stage as u64]))
}

impl<'g, G: GenerativeModel> PredictPipeline<'g, G> {
    pub fn new(
        generator: &'g G,
        generation_rule: UpdateRule,
        filters: Vec<FilterSpec<G::Output>>,
        thresholds: Thresholds,
        hard_cap: usize,
    ) -> Self {
        Self {
            generator,
            generation_rule,
            filters,
            thresholds,
            hard_cap,
        }
    }

    /// Number of pipeline stages (generation plus filters).
    pub fn stage_count(&self) -> usize {
        1 + self.filters.len()
    }

    /// Number of stages carrying a calibrated threshold.
    pub fn calibrated_stage_count(&self) -> usize {
        1 + self.filters.iter().filter(|f| f.kind.is_calibrated()).count()
    }

    /// Threshold index of a pipeline stage, `None` for threshold-free filters.
    pub fn lambda_index(&self, stage: usize) -> Option<usize> {
        if stage == 0 {
            return Some(0);
        }
        let f = self.filters.get(stage - 1)?;
        if !f.kind.is_calibrated() {
            return None;
        }
        Some(1 + self.filters[..stage - 1].iter().filter(|f| f.kind.is_calibrated()).count())
    }

    fn lambda(&self, stage: usize) -> Result<f64, PredictError> {
        self.lambda_index(stage)
            .and_then(|i| self.thresholds.lambdas.get(i).copied())
            .ok_or(PredictError::MissingThreshold(stage))
    }

    pub fn predict(&self, condition: &G::Condition, seed: u64) -> Result<Prediction<G::Output>, PredictError> {
        if self.thresholds.rejected {
            return Ok(Prediction::EntireSpace);
        }
        let mut trace = self.run_stages(condition, seed, self.stage_count())?;
        Ok(Prediction::Set(trace.pop().expect("at least one stage").set))
    }

    /// Full per-stage trace, or `None` when the calibration was rejected.
    pub fn predict_trace(
        &self,
        condition: &G::Condition,
        seed: u64,
    ) -> Result<Option<Vec<StageTrace<G::Output>>>, PredictError> {
        if self.thresholds.rejected {
            return Ok(None);
        }
        self.run_stages(condition, seed, self.stage_count()).map(Some)
    }

    /// The integer set `{1, ..., j}` accepted at `stage`; `None` when rejected.
    pub fn predict_integer_set(
        &self,
        condition: &G::Condition,
        stage: usize,
        seed: u64,
    ) -> Result<Option<Vec<usize>>, PredictError> {
        if self.thresholds.rejected {
            return Ok(None);
        }
        let trace = self.run_stages(condition, seed, stage + 1)?;
        let j = trace[stage].set.len();
        Ok(Some((1..=j).collect()))
    }

    /// Runs the first `stages` stages, ignoring the rejection flag; used by
    /// calibration to sample previous-stage sets.
    pub fn run_stages(
        &self,
        condition: &G::Condition,
        seed: u64,
        stages: usize,
    ) -> Result<Vec<StageTrace<G::Output>>, PredictError> {
        let mut out: Vec<StageTrace<G::Output>> = Vec::with_capacity(stages);
        for stage in 0..stages.min(self.stage_count()) {
            let trace = if stage == 0 {
                self.generate(condition, seed)?
            } else {
                let previous = &out[stage - 1].set;
                self.filter(stage, previous, seed)?
            };
            out.push(trace);
        }
        Ok(out)
    }

    fn generate(&self, condition: &G::Condition, seed: u64) -> Result<StageTrace<G::Output>, PredictError> {
        let lambda = self.lambda(0)?;
        let mut set = PredictionSet::new(0);
        let mut state = NonConformityState::new();
        let mut nus = Vec::new();
        let stop = loop {
            if set.len() >= self.hard_cap {
                log::info!("generation hit hard cap of {} candidates", self.hard_cap);
                break StopReason::HardCap;
            }
            let candidate = draw(self.generator, condition, seed, state.step)?;
            state = update_generation(state, candidate.quality, &self.generation_rule)?;
            nus.push(state.nu);
            if state.nu > lambda {
                break StopReason::Threshold;
            }
            set.items.push(candidate);
        };
        Ok(StageTrace {
            stage: 0,
            set,
            nus,
            stop,
        })
    }

    fn filter(
        &self,
        stage: usize,
        previous: &PredictionSet<G::Output>,
        seed: u64,
    ) -> Result<StageTrace<G::Output>, PredictError> {
        let spec = &self.filters[stage - 1];
        if let FilterKind::Dedup(eq) = &spec.kind {
            let mut set = dedup(previous, eq);
            set.source_stage = stage;
            return Ok(StageTrace {
                stage,
                set,
                nus: Vec::new(),
                stop: StopReason::Fixed,
            });
        }
        let lambda = self.lambda(stage)?;
        let mut rng = filter_rng(seed, stage);
        let mut cursor = GreedyCursor::new(&previous.items, &spec.kind);
        let mut set = PredictionSet::new(stage);
        let mut nus = Vec::new();
        let stop = loop {
            let Some(idx) = cursor.next_pick(&mut rng)? else {
                break StopReason::Exhausted;
            };
            nus.push(cursor.state.nu);
            if cursor.state.nu > lambda {
                break StopReason::Threshold;
            }
            set.items.push(previous.items[idx].clone());
        };
        Ok(StageTrace { stage, set, nus, stop })
    }
}
