//! Conformal language modeling (CLM) baseline: a joint grid over a stopping
//! threshold, a quality floor and a minimum pairwise distance, ordered along
//! the empirical Pareto frontier on one half of the data and certified by
//! fixed-sequence binomial tests on the other half.
//!
//! Unlike the sequential method, every one of the `max` candidates drawn per
//! instance is shown to the oracle.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::calibrator::{split_data, GenerationBudget};
use crate::conformal::check_probability;
use crate::error::{CalibrationError, ContractError, GeneratorError, InvalidInput};
use crate::filters::{Candidate, Metric, PredictionSet};
use crate::nonconformity::{update_generation, NonConformityState, UpdateRule};
use crate::oracle::{AdmissionOracle, Query};
use crate::predictor::{draw, Prediction};
use crate::seed;
use crate::world::{GenerativeModel, Instance, InstanceId};

pub const DEFAULT_GRID_SIZE: usize = 10;
pub const REDUCED_MAX: usize = 10;
const PAIR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClmRiskPair {
    pub beta1: f64,
    pub beta2: f64,
}

impl ClmRiskPair {
    /// `beta1 + beta2 - beta1 * beta2`.
    pub fn combined(&self) -> f64 {
        self.beta1 + self.beta2 - self.beta1 * self.beta2
    }
}

/// Which expression produces `beta1` from `beta2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Beta1Formula {
    /// `(alpha - beta2) / (1 - beta2)`, so the pair combines to `alpha`.
    #[default]
    Combined,
    /// `(1 - alpha - beta2) / (1 - beta2)`, which combines to `1 - alpha`.
    /// Kept only for comparison runs.
    Complement,
}

/// Ten `beta2` values evenly spaced over `[alpha/15, alpha/5]`, each paired
/// with the `beta1` that makes the pair combine to `alpha`.
pub fn beta_grid(alpha: f64) -> Vec<ClmRiskPair> {
    beta_grid_with(alpha, Beta1Formula::Combined)
}

pub fn beta_grid_with(alpha: f64, formula: Beta1Formula) -> Vec<ClmRiskPair> {
    let lo = alpha / 15.0;
    let hi = alpha / 5.0;
    (0..10)
        .map(|i| {
            let beta2 = lo + i as f64 * (hi - lo) / 9.0;
            let beta1 = match formula {
                Beta1Formula::Combined => (alpha - beta2) / (1.0 - beta2),
                Beta1Formula::Complement => (1.0 - alpha - beta2) / (1.0 - beta2),
            };
            ClmRiskPair { beta1, beta2 }
        })
        .collect()
}

/// Sanity check on a pair: `(1 - beta1)(1 - beta2) <= 1 - alpha`, i.e. the
/// pair spends at least `alpha`. Pairs from [`beta_grid`] hit equality.
pub fn ltt_bound_check(pair: ClmRiskPair, alpha: f64) -> bool {
    (1.0 - pair.beta1) * (1.0 - pair.beta2) <= 1.0 - alpha + PAIR_TOL
}

/// One point of the CLM grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClmConfig {
    /// Stop once the running score over kept candidates exceeds this.
    #[serde(with = "crate::extended")]
    pub stop: f64,
    /// Skip candidates with quality below this.
    #[serde(with = "crate::extended")]
    pub min_quality: f64,
    /// Skip candidates closer than this to an already kept one.
    #[serde(with = "crate::extended")]
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClmGrid {
    #[serde(with = "crate::extended::vec")]
    pub stop: Vec<f64>,
    #[serde(with = "crate::extended::vec")]
    pub min_quality: Vec<f64>,
    #[serde(with = "crate::extended::vec")]
    pub min_distance: Vec<f64>,
}

impl ClmGrid {
    pub fn len(&self) -> usize {
        self.stop.len() * self.min_quality.len() * self.min_distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Config at flat index `i` (stop varies fastest).
    pub fn config(&self, i: usize) -> ClmConfig {
        let ns = self.stop.len();
        let nq = self.min_quality.len();
        ClmConfig {
            stop: self.stop[i % ns],
            min_quality: self.min_quality[(i / ns) % nq],
            min_distance: self.min_distance[i / (ns * nq)],
        }
    }

    pub fn configs(&self) -> Vec<ClmConfig> {
        (0..self.len()).map(|i| self.config(i)).collect()
    }
}

/// Candidates drawn for one instance with every one of them labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSamples<O> {
    pub instance_id: InstanceId,
    pub candidates: Vec<Candidate<O>>,
    pub admissible: Vec<bool>,
}

/// Draws `budget.max` candidates per instance and queries all of them.
pub fn collect_samples<G: GenerativeModel, R>(
    data: &[Instance<G::Condition, R>],
    generator: &G,
    oracle: &AdmissionOracle<G::Condition, G::Output, R>,
    budget: GenerationBudget,
    seed: u64,
) -> Result<Vec<LabeledSamples<G::Output>>, CalibrationError>
where
    G::Output: Serialize,
{
    let mut out = Vec::with_capacity(data.len());
    for inst in data {
        let s = seed::derive(seed, &[inst.id]);
        let mut candidates = Vec::with_capacity(budget.max);
        let mut admissible = Vec::with_capacity(budget.max);
        for k in 0..budget.max {
            let c = match draw(generator, &inst.condition, s, k) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("instance {}: {e}; keeping {k} candidates", inst.id);
                    break;
                }
            };
            admissible.push(oracle.admit(Query {
                instance_id: inst.id,
                stage: 0,
                position: k,
                condition: &inst.condition,
                candidate: &c.output,
                reference: &inst.reference,
            })?);
            candidates.push(c);
        }
        out.push(LabeledSamples {
            instance_id: inst.id,
            candidates,
            admissible,
        });
    }
    Ok(out)
}

fn passes_filters<O>(
    c: &Candidate<O>,
    kept: &[usize],
    all: &[Candidate<O>],
    min_quality: f64,
    min_distance: f64,
    metric: &Metric<O>,
) -> bool {
    c.quality >= min_quality
        && kept
            .iter()
            .all(|&k| metric.distance(&c.output, &all[k].output) >= min_distance)
}

/// Indices (in draw order) of the candidates a config keeps.
pub fn clm_set<O>(
    candidates: &[Candidate<O>],
    config: &ClmConfig,
    rule: &UpdateRule,
    metric: &Metric<O>,
) -> Result<Vec<usize>, ContractError> {
    let mut kept = Vec::new();
    let mut state = NonConformityState::new();
    for (i, c) in candidates.iter().enumerate() {
        if !passes_filters(c, &kept, candidates, config.min_quality, config.min_distance, metric) {
            continue;
        }
        state = update_generation(state, c.quality, rule)?;
        if state.nu > config.stop {
            break;
        }
        kept.push(i);
    }
    Ok(kept)
}

/// Empirical inadmissibility and set size of one config on a set of instances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfigStats {
    pub inadmissible: usize,
    pub total_size: usize,
    pub n: usize,
}

impl ConfigStats {
    pub fn risk(&self) -> f64 {
        self.inadmissible as f64 / self.n.max(1) as f64
    }

    pub fn mean_size(&self) -> f64 {
        self.total_size as f64 / self.n.max(1) as f64
    }
}

/// Stats of every grid config over `samples`. Candidates passing the
/// quality/distance filters are computed once per filter pair; the stop
/// dimension is then a prefix count on the (strictly increasing) running score.
pub fn evaluate_grid<O>(
    samples: &[&LabeledSamples<O>],
    grid: &ClmGrid,
    rule: &UpdateRule,
    metric: &Metric<O>,
) -> Result<Vec<ConfigStats>, ContractError> {
    let ns = grid.stop.len();
    let nq = grid.min_quality.len();
    let mut stats = vec![ConfigStats::default(); grid.len()];
    for (di, &min_d) in grid.min_distance.iter().enumerate() {
        for (qi, &min_q) in grid.min_quality.iter().enumerate() {
            let base = di * ns * nq + qi * ns;
            for s in samples {
                let mut kept = Vec::new();
                let mut nus = Vec::new();
                let mut state = NonConformityState::new();
                let mut first_ok = None;
                for (i, c) in s.candidates.iter().enumerate() {
                    if !passes_filters(c, &kept, &s.candidates, min_q, min_d, metric) {
                        continue;
                    }
                    state = update_generation(state, c.quality, rule)?;
                    if first_ok.is_none() && s.admissible[i] {
                        first_ok = Some(kept.len());
                    }
                    kept.push(i);
                    nus.push(state.nu);
                }
                for (si, &stop) in grid.stop.iter().enumerate() {
                    let size = nus.partition_point(|&nu| nu <= stop);
                    let st = &mut stats[base + si];
                    st.n += 1;
                    st.total_size += size;
                    if !first_ok.is_some_and(|a| a < size) {
                        st.inadmissible += 1;
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Non-dominated configs in (risk, size), ordered by ascending risk.
/// Ties in risk keep the smaller set; a config enters only if its size is
/// strictly below every config already on the frontier.
pub fn pareto_order(stats: &[ConfigStats]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..stats.len()).collect();
    idx.sort_by(|&a, &b| {
        stats[a]
            .risk()
            .total_cmp(&stats[b].risk())
            .then(stats[a].mean_size().total_cmp(&stats[b].mean_size()))
            .then(a.cmp(&b))
    });
    let mut frontier = Vec::new();
    let mut best = f64::INFINITY;
    for i in idx {
        let size = stats[i].mean_size();
        if size < best {
            best = size;
            frontier.push(i);
        }
    }
    frontier
}

/// `P(Bin(n, beta1) <= failures)`: p-value for `H0: risk > beta1`.
pub fn binomial_p_value(failures: usize, n: usize, beta1: f64) -> f64 {
    if failures >= n {
        return 1.0;
    }
    Binomial::new(beta1, n as u64)
        .map(|b| b.cdf(failures as u64))
        .unwrap_or(1.0)
}

/// Walks `sequence` of (failures, n) in order, rejecting while the p-value is
/// at most `beta2`. Returns the position of the last rejected hypothesis.
pub fn fixed_sequence_test(sequence: &[(usize, usize)], pair: ClmRiskPair) -> Option<usize> {
    let mut last = None;
    for (pos, &(failures, n)) in sequence.iter().enumerate() {
        if binomial_p_value(failures, n, pair.beta1) <= pair.beta2 {
            last = Some(pos);
        } else {
            break;
        }
    }
    last
}

fn quantile_grid(mut values: Vec<f64>, g: usize, permissive_low: bool) -> Vec<f64> {
    values.retain(|v| v.is_finite());
    values.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = if values.is_empty() || g < 2 {
        Vec::new()
    } else {
        (0..g)
            .map(|i| values[(i * (values.len() - 1)) / (g - 1)])
            .collect()
    };
    // make the most permissive end a true no-op
    if permissive_low {
        if out.is_empty() {
            out.push(f64::NEG_INFINITY);
        } else {
            out[0] = f64::NEG_INFINITY;
        }
    } else if out.is_empty() {
        out.push(f64::INFINITY);
    } else {
        let last = out.len() - 1;
        out[last] = f64::INFINITY;
    }
    out.dedup();
    out
}

/// Data-driven grid with `g` values per dimension: empirical quantiles of the
/// running score, of candidate quality and of within-instance pairwise
/// distances, with the permissive end of each dimension replaced by a no-op.
pub fn build_grid<O>(
    samples: &[&LabeledSamples<O>],
    g: usize,
    rule: &UpdateRule,
    metric: &Metric<O>,
) -> Result<ClmGrid, ContractError> {
    let mut scores = Vec::new();
    let mut qualities = Vec::new();
    let mut dists = Vec::new();
    for s in samples {
        let mut state = NonConformityState::new();
        for (i, c) in s.candidates.iter().enumerate() {
            state = update_generation(state, c.quality, rule)?;
            scores.push(state.nu);
            qualities.push(c.quality);
            for d in &s.candidates[..i] {
                dists.push(metric.distance(&c.output, &d.output));
            }
        }
    }
    Ok(ClmGrid {
        stop: quantile_grid(scores, g, false),
        min_quality: quantile_grid(qualities, g, true),
        min_distance: quantile_grid(dists, g, true),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClmResult {
    pub pair: ClmRiskPair,
    pub config: Option<ClmConfig>,
    pub rejected: bool,
    /// Frontier length on split A.
    pub frontier_len: usize,
    /// Hypotheses rejected on split B before the walk stopped.
    pub certified: usize,
    /// Split-B stats of the selected config.
    pub selected_stats: Option<ConfigStats>,
    pub query_count: usize,
    pub queries_per_instance: Vec<usize>,
}

impl ClmResult {
    pub fn mean_queries(&self) -> f64 {
        if self.queries_per_instance.is_empty() {
            0.0
        } else {
            self.query_count as f64 / self.queries_per_instance.len() as f64
        }
    }
}

type Halves<'a, O> = (Vec<&'a LabeledSamples<O>>, Vec<&'a LabeledSamples<O>>);

fn halves<O>(samples: &[LabeledSamples<O>]) -> Result<Halves<'_, O>, CalibrationError> {
    if samples.len() < 2 {
        return Err(InvalidInput::msg("CLM needs at least two calibration instances").into());
    }
    let split = split_data(samples.len(), 2, None)?;
    Ok((
        samples[split.folds[0].clone()].iter().collect(),
        samples[split.folds[1].clone()].iter().collect(),
    ))
}

/// Labeled samples split into halves, the grid fitted on half A and the
/// frontier ordering; selection for any risk pair reuses all of it.
pub struct ClmCalibration<O> {
    pub samples: Vec<LabeledSamples<O>>,
    pub grid: ClmGrid,
    pub split_a: Vec<ConfigStats>,
    pub split_b: Vec<ConfigStats>,
    pub frontier: Vec<usize>,
}

impl<O> ClmCalibration<O> {
    pub fn new(samples: Vec<LabeledSamples<O>>, g: usize, rule: &UpdateRule, metric: &Metric<O>) -> Result<Self, CalibrationError> {
        let (a, _) = halves(&samples)?;
        let grid = build_grid(&a, g, rule, metric)?;
        Self::with_grid(samples, grid, rule, metric)
    }

    /// Uses a caller-supplied grid instead of fitting one on split A.
    pub fn with_grid(samples: Vec<LabeledSamples<O>>, grid: ClmGrid, rule: &UpdateRule, metric: &Metric<O>) -> Result<Self, CalibrationError> {
        if grid.is_empty() {
            return Err(InvalidInput::msg("empty CLM grid").into());
        }
        let (a, b) = halves(&samples)?;
        let split_a = evaluate_grid(&a, &grid, rule, metric)?;
        let split_b = evaluate_grid(&b, &grid, rule, metric)?;
        let frontier = pareto_order(&split_a);
        Ok(Self {
            samples,
            grid,
            split_a,
            split_b,
            frontier,
        })
    }

    pub fn query_counts(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.candidates.len()).collect()
    }

    pub fn select(&self, pair: ClmRiskPair) -> ClmResult {
        let sequence: Vec<(usize, usize)> = self
            .frontier
            .iter()
            .map(|&i| (self.split_b[i].inadmissible, self.split_b[i].n))
            .collect();
        let last = fixed_sequence_test(&sequence, pair);
        let chosen = last.map(|p| self.frontier[p]);
        let queries = self.query_counts();
        ClmResult {
            pair,
            config: chosen.map(|i| self.grid.config(i)),
            rejected: chosen.is_none(),
            frontier_len: self.frontier.len(),
            certified: last.map_or(0, |p| p + 1),
            selected_stats: chosen.map(|i| self.split_b[i]),
            query_count: queries.iter().sum(),
            queries_per_instance: queries,
        }
    }

    /// Runs every pair and keeps the least conservative certified result:
    /// highest split-B inadmissibility, then smallest split-B set size.
    /// Rejected only if every pair rejects.
    pub fn select_best(&self, pairs: &[ClmRiskPair]) -> ClmResult {
        let results: Vec<ClmResult> = pairs.iter().map(|&p| self.select(p)).collect();
        results
            .iter()
            .filter(|r| !r.rejected)
            .max_by(|x, y| {
                let (sx, sy) = (x.selected_stats.unwrap(), y.selected_stats.unwrap());
                sx.risk()
                    .total_cmp(&sy.risk())
                    .then(sy.mean_size().total_cmp(&sx.mean_size()))
            })
            .cloned()
            .unwrap_or_else(|| results.into_iter().next().expect("at least one pair"))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn clm_calibrate<G: GenerativeModel, R>(
    data: &[Instance<G::Condition, R>],
    generator: &G,
    oracle: &AdmissionOracle<G::Condition, G::Output, R>,
    grid_size: usize,
    pair: ClmRiskPair,
    budget: GenerationBudget,
    rule: &UpdateRule,
    metric: &Metric<G::Output>,
    seed: u64,
) -> Result<ClmResult, CalibrationError>
where
    G::Output: Serialize,
{
    check_probability("beta1", pair.beta1)?;
    check_probability("beta2", pair.beta2)?;
    let samples = collect_samples(data, generator, oracle, budget, seed)?;
    Ok(ClmCalibration::new(samples, grid_size, rule, metric)?.select(pair))
}

/// [`clm_calibrate`] with the generation budget cut to ten draws.
#[allow(clippy::too_many_arguments)]
pub fn clm_reduced_max<G: GenerativeModel, R>(
    data: &[Instance<G::Condition, R>],
    generator: &G,
    oracle: &AdmissionOracle<G::Condition, G::Output, R>,
    grid_size: usize,
    pair: ClmRiskPair,
    rule: &UpdateRule,
    metric: &Metric<G::Output>,
    seed: u64,
) -> Result<ClmResult, CalibrationError>
where
    G::Output: Serialize,
{
    clm_calibrate(data, generator, oracle, grid_size, pair, GenerationBudget { max: REDUCED_MAX }, rule, metric, seed)
}

/// CLM prediction: draw `budget.max` candidates and apply the selected config.
pub fn clm_predict<G: GenerativeModel>(
    condition: &G::Condition,
    generator: &G,
    result: &ClmResult,
    budget: GenerationBudget,
    rule: &UpdateRule,
    metric: &Metric<G::Output>,
    seed: u64,
) -> Result<Prediction<G::Output>, CalibrationError> {
    let Some(config) = result.config else {
        return Ok(Prediction::EntireSpace);
    };
    let candidates = (0..budget.max)
        .map(|k| draw(generator, condition, seed, k))
        .collect::<Result<Vec<_>, GeneratorError>>()?;
    let kept = clm_set(&candidates, &config, rule, metric)?;
    let mut by_index: Vec<Option<Candidate<G::Output>>> = candidates.into_iter().map(Some).collect();
    let items = kept.into_iter().filter_map(|i| by_index[i].take()).collect();
    Ok(Prediction::Set(PredictionSet::from_items(items, 0)))
}
