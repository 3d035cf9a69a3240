//! Stage-wise calibration on disjoint folds.
//!
//! Generation is calibrated by drawing until the first admissible candidate;
//! each filter is calibrated on instances whose previous-stage set turns out
//! admissible, walking the filter's greedy order until the first admissible
//! pick. Only candidates up to the first admissible one are ever shown to the
//! oracle.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::conformal::{allocate_risk, check_probability, quantile_of_values, ConformalThreshold, RiskLevels, RiskSplit};
use crate::error::{CalibrationError, InvalidInput};
use crate::filters::{FilterSpec, GreedyCursor};
use crate::nonconformity::{update_generation, NonConformityState, UpdateRule};
use crate::oracle::{AdmissionOracle, Query};
use crate::predictor::{draw, filter_rng, PredictPipeline, Thresholds, DEFAULT_HARD_CAP_MULTIPLE};
use crate::seed;
use crate::world::{GenerativeModel, Instance};

pub const DEFAULT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationBudget {
    pub max: usize,
}

impl GenerationBudget {
    pub fn new(max: usize) -> Result<Self, InvalidInput> {
        if max == 0 {
            return Err(InvalidInput::msg("generation budget must be at least 1"));
        }
        Ok(Self { max })
    }
}

impl Default for GenerationBudget {
    fn default() -> Self {
        Self { max: DEFAULT_MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSplit {
    pub folds: Vec<Range<usize>>,
}

impl CalibrationSplit {
    /// Cumulative fold ends.
    pub fn boundaries(&self) -> Vec<usize> {
        self.folds.iter().map(|f| f.end).collect()
    }
}

/// Contiguous folds sized by `proportions` (equal when `None`) with
/// largest-remainder rounding; ties in the remainder go to earlier folds.
pub fn split_data(n: usize, k: usize, proportions: Option<&[f64]>) -> Result<CalibrationSplit, InvalidInput> {
    if k == 0 {
        return Err(InvalidInput::msg("need at least one fold"));
    }
    let props: Vec<f64> = match proportions {
        Some(p) => {
            if p.len() != k {
                return Err(InvalidInput::msg(format!("{} proportions for {k} folds", p.len())));
            }
            if p.iter().any(|x| x.is_nan() || *x <= 0.0 || !x.is_finite()) {
                return Err(InvalidInput::msg("fold proportions must be positive"));
            }
            let total: f64 = p.iter().sum();
            p.iter().map(|x| x / total).collect()
        }
        None => vec![1.0 / k as f64; k],
    };
    let quotas: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if let Some(fold) = sizes.iter().position(|&s| s == 0) {
        return Err(InvalidInput::EmptyFold { fold, n, folds: k });
    }
    let mut start = 0;
    let folds = sizes
        .into_iter()
        .map(|s| {
            let r = start..start + s;
            start += s;
            r
        })
        .collect();
    Ok(CalibrationSplit { folds })
}

/// Per-instance calibration audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAudit {
    pub instance_id: u64,
    pub stage: usize,
    pub queries: usize,
    /// Recorded non-conformity; `None` when the instance contributed no score
    /// (filter stage with an inadmissible previous set).
    #[serde(with = "crate::extended::option")]
    pub score: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageCalibration {
    pub threshold: ConformalThreshold,
    pub audits: Vec<InstanceAudit>,
    /// Instances that yielded a score.
    pub scored: usize,
}

impl StageCalibration {
    fn from_audits(audits: Vec<InstanceAudit>, alpha: f64) -> Result<Self, InvalidInput> {
        let scores: Vec<f64> = audits.iter().filter_map(|a| a.score).collect();
        let threshold = if scores.is_empty() {
            ConformalThreshold {
                lambda: f64::INFINITY,
                rank: 0,
                n: 0,
                rejected: true,
            }
        } else {
            quantile_of_values(&scores, alpha)?
        };
        Ok(Self {
            threshold,
            scored: scores.len(),
            audits,
        })
    }

    pub fn queries(&self) -> usize {
        self.audits.iter().map(|a| a.queries).sum()
    }
}

fn instance_seed(seed: u64, id: u64) -> u64 {
    seed::derive(seed, &[id])
}

/// Calibrates the generation threshold on one fold.
pub fn calibrate_generation<G: GenerativeModel, R>(
    fold: &[Instance<G::Condition, R>],
    generator: &G,
    rule: &UpdateRule,
    budget: GenerationBudget,
    oracle: &AdmissionOracle<G::Condition, G::Output, R>,
    alpha0: f64,
    seed: u64,
) -> Result<StageCalibration, CalibrationError>
where
    G::Output: Serialize,
{
    check_probability("alpha0", alpha0)?;
    if fold.is_empty() {
        return Err(InvalidInput::msg("generation fold is empty").into());
    }
    rule.validate()?;
    let mut audits = Vec::with_capacity(fold.len());
    for inst in fold {
        let s = instance_seed(seed, inst.id);
        let mut state = NonConformityState::new();
        let mut score = f64::INFINITY;
        let mut failed = false;
        let mut queries = 0;
        while state.step < budget.max {
            let candidate = match draw(generator, &inst.condition, s, state.step) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("instance {}: {e}; scoring as +inf", inst.id);
                    failed = true;
                    break;
                }
            };
            state = update_generation(state, candidate.quality, rule)?;
            queries += 1;
            let admissible = oracle.admit(Query {
                instance_id: inst.id,
                stage: 0,
                position: state.step - 1,
                condition: &inst.condition,
                candidate: &candidate.output,
                reference: &inst.reference,
            })?;
            if admissible {
                score = state.nu;
                break;
            }
        }
        audits.push(InstanceAudit {
            instance_id: inst.id,
            stage: 0,
            queries,
            score: Some(score),
            failed,
        });
    }
    Ok(StageCalibration::from_audits(audits, alpha0)?)
}

/// Calibrates the filter at pipeline position `stage` on one fold.
/// `pipeline` must carry thresholds for every calibrated stage before `stage`.
pub fn calibrate_filter<G: GenerativeModel, R>(
    fold: &[Instance<G::Condition, R>],
    pipeline: &PredictPipeline<'_, G>,
    stage: usize,
    oracle: &AdmissionOracle<G::Condition, G::Output, R>,
    alpha_s: f64,
    seed: u64,
) -> Result<StageCalibration, CalibrationError>
where
    G::Output: Serialize,
{
    check_probability("alpha_s", alpha_s)?;
    let spec: &FilterSpec<G::Output> = pipeline
        .filters
        .get(stage.wrapping_sub(1))
        .ok_or_else(|| InvalidInput::msg(format!("no filter at stage {stage}")))?;
    if !spec.kind.is_calibrated() {
        return Err(InvalidInput::msg(format!("stage {stage} ({}) takes no threshold", spec.kind.name())).into());
    }
    let mut audits = Vec::with_capacity(fold.len());
    for inst in fold {
        let s = instance_seed(seed, inst.id);
        let previous = match pipeline.run_stages(&inst.condition, s, stage) {
            Ok(mut t) => t.pop().expect("stage >= 1").set,
            Err(e) => {
                log::warn!("instance {}: previous stage failed ({e}); scoring as +inf", inst.id);
                audits.push(InstanceAudit {
                    instance_id: inst.id,
                    stage,
                    queries: 0,
                    score: Some(f64::INFINITY),
                    failed: true,
                });
                continue;
            }
        };
        let mut rng = filter_rng(s, stage);
        let mut cursor = GreedyCursor::new(&previous.items, &spec.kind);
        let mut score = None;
        let mut queries = 0;
        while let Some(idx) = cursor.next_pick(&mut rng)? {
            queries += 1;
            let admissible = oracle.admit(Query {
                instance_id: inst.id,
                stage,
                position: queries - 1,
                condition: &inst.condition,
                candidate: &previous.items[idx].output,
                reference: &inst.reference,
            })?;
            if admissible {
                score = Some(cursor.state.nu);
                break;
            }
        }
        audits.push(InstanceAudit {
            instance_id: inst.id,
            stage,
            queries,
            score,
            failed: false,
        });
    }
    Ok(StageCalibration::from_audits(audits, alpha_s)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub risk_split: RiskSplit,
    pub generation_rule: UpdateRule,
    pub budget: GenerationBudget,
    /// Relative fold sizes, one per calibrated stage; equal when absent.
    pub proportions: Option<Vec<f64>>,
    pub seed: u64,
    /// Prediction-time generation cap as a multiple of `budget.max`.
    pub hard_cap_multiple: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            risk_split: RiskSplit::default(),
            generation_rule: UpdateRule::sum(),
            budget: GenerationBudget::default(),
            proportions: None,
            seed: 0,
            hard_cap_multiple: DEFAULT_HARD_CAP_MULTIPLE,
        }
    }
}

impl CalibrationConfig {
    pub fn hard_cap(&self) -> usize {
        self.budget.max.saturating_mul(self.hard_cap_multiple).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// One threshold per calibrated stage; `+inf` for a rejected stage and
    /// every stage after it.
    #[serde(with = "crate::extended::vec")]
    pub lambdas: Vec<f64>,
    pub risk: RiskLevels,
    pub rejected: bool,
    /// Pipeline position of the first rejecting stage.
    pub rejected_stage: Option<usize>,
    pub query_count: usize,
    pub per_instance_queries: Vec<InstanceAudit>,
    /// Per calibrated filter: instances that produced a finite score.
    pub m_effective: Vec<usize>,
    pub thresholds: Vec<ConformalThreshold>,
}

impl CalibrationResult {
    pub fn thresholds(&self) -> Thresholds {
        if self.rejected {
            Thresholds::rejected()
        } else {
            Thresholds::new(self.lambdas.clone())
        }
    }

    /// Builds the prediction pipeline these thresholds were calibrated for.
    pub fn pipeline<'g, G: GenerativeModel>(
        &self,
        generator: &'g G,
        filters: Vec<FilterSpec<G::Output>>,
        config: &CalibrationConfig,
    ) -> PredictPipeline<'g, G> {
        PredictPipeline::new(generator, config.generation_rule, filters, self.thresholds(), config.hard_cap())
    }

    pub fn mean_queries(&self) -> f64 {
        if self.per_instance_queries.is_empty() {
            0.0
        } else {
            self.query_count as f64 / self.per_instance_queries.len() as f64
        }
    }
}

/// Splits `all` into one fold per calibrated stage and calibrates the stages
/// in pipeline order.
pub fn calibrate<G: GenerativeModel, R>(
    all: &[Instance<G::Condition, R>],
    generator: &G,
    filters: &[FilterSpec<G::Output>],
    config: &CalibrationConfig,
    oracle: &AdmissionOracle<G::Condition, G::Output, R>,
) -> Result<CalibrationResult, CalibrationError>
where
    G::Output: Serialize,
{
    let mut ids = HashSet::with_capacity(all.len());
    if let Some(dup) = all.iter().find(|i| !ids.insert(i.id)) {
        return Err(InvalidInput::msg(format!("instance id {} appears twice; folds would overlap", dup.id)).into());
    }
    let mut pipeline = PredictPipeline::new(
        generator,
        config.generation_rule,
        filters.to_vec(),
        Thresholds::new(Vec::new()),
        config.hard_cap(),
    );
    let k = pipeline.calibrated_stage_count();
    let risk = allocate_risk(config.alpha, k, config.risk_split)?;
    let split = split_data(all.len(), k, config.proportions.as_deref())?;
    let queries_before = oracle.query_count();

    let mut audits = Vec::with_capacity(all.len());
    let mut thresholds = Vec::with_capacity(k);
    let mut m_effective = Vec::with_capacity(k - 1);
    let mut rejected_stage = None;

    let gen = calibrate_generation(
        &all[split.folds[0].clone()],
        generator,
        &config.generation_rule,
        config.budget,
        oracle,
        risk.per_stage[0],
        config.seed,
    )?;
    audits.extend(gen.audits);
    thresholds.push(gen.threshold);
    pipeline.thresholds.lambdas.push(gen.threshold.lambda);
    if gen.threshold.rejected {
        rejected_stage = Some(0);
    }

    for stage in 1..pipeline.stage_count() {
        if rejected_stage.is_some() {
            break;
        }
        let Some(fold_idx) = pipeline.lambda_index(stage) else {
            continue;
        };
        let fold = &all[split.folds[fold_idx].clone()];
        let cal = calibrate_filter(fold, &pipeline, stage, oracle, risk.per_stage[fold_idx], config.seed)?;
        audits.extend(cal.audits);
        m_effective.push(cal.scored);
        thresholds.push(cal.threshold);
        pipeline.thresholds.lambdas.push(cal.threshold.lambda);
        if cal.threshold.rejected {
            rejected_stage = Some(stage);
        }
    }

    let mut lambdas = pipeline.thresholds.lambdas;
    lambdas.resize(k, f64::INFINITY);
    let query_count = audits.iter().map(|a| a.queries).sum();
    debug_assert_eq!(oracle.query_count() - queries_before, query_count);
    Ok(CalibrationResult {
        lambdas,
        risk,
        rejected: rejected_stage.is_some(),
        rejected_stage,
        query_count,
        per_instance_queries: audits,
        m_effective,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::GeneratorError;
    use crate::filters::FilterKind;
    use crate::oracle::{Judge, Verdict};
    use crate::OracleError;

    #[test]
    fn equal_thirds() {
        let s = split_data(600, 3, None).unwrap();
        assert_eq!(s.folds, vec![0..200, 200..400, 400..600]);
        let s = split_data(601, 3, None).unwrap();
        assert_eq!(s.folds.iter().map(|f| f.len()).collect::<Vec<_>>(), vec![201, 200, 200]);
        assert_eq!(s.boundaries(), vec![201, 401, 601]);
        assert!(matches!(split_data(2, 3, None), Err(InvalidInput::EmptyFold { .. })));
    }

    #[test]
    fn weighted_split() {
        let s = split_data(10, 2, Some(&[3.0, 1.0])).unwrap();
        assert_eq!(s.folds, vec![0..8, 8..10]);
        assert!(split_data(10, 2, Some(&[1.0])).is_err());
        assert!(split_data(10, 2, Some(&[1.0, 0.0])).is_err());
    }

    /// Generator whose k-th draw is the token `k` (as u32); admissibility is
    /// scripted per instance through the reference list of admissible draw indices.
    struct Counter;

    impl GenerativeModel for Counter {
        type Condition = u64;
        type Output = u32;

        fn sample(&self, base: &u64, seed: u64) -> Result<u32, GeneratorError> {
            (0..1000u64)
                .find(|&k| seed::derive(*base, &[0, k]) == seed)
                .map(|k| k as u32)
                .ok_or_else(|| GeneratorError("unexpected seed".into()))
        }

        fn quality(&self, _: &u64, _: &u32) -> f64 {
            0.2
        }
    }

    struct Scripted;

    impl Judge<u64, u32, Vec<bool>> for Scripted {
        fn judge(&self, q: &Query<'_, u64, u32, Vec<bool>>) -> Result<Verdict, OracleError> {
            Ok(Verdict::automated(q.reference.get(*q.candidate as usize).copied().unwrap_or(false)))
        }
    }

    /// Instances whose condition equals the per-instance seed so `Counter` can invert it.
    fn instances(flags: &[Vec<bool>], seed: u64) -> Vec<Instance<u64, Vec<bool>>> {
        flags
            .iter()
            .enumerate()
            .map(|(i, f)| Instance {
                id: i as u64,
                condition: instance_seed(seed, i as u64),
                reference: f.clone(),
            })
            .collect()
    }

    #[test]
    fn generation_trace() {
        let oracle = AdmissionOracle::new(Scripted);
        let fold = instances(&[vec![false, false, true], vec![false; 20], vec![true]], 5);
        let cal = calibrate_generation(&fold, &Counter, &UpdateRule::Count, GenerationBudget::new(20).unwrap(), &oracle, 0.5, 5).unwrap();
        assert_eq!(cal.audits[0].score, Some(3.0));
        assert_eq!(cal.audits[0].queries, 3);
        assert_eq!(cal.audits[1].score, Some(f64::INFINITY));
        assert_eq!(cal.audits[1].queries, 20);
        assert_eq!(cal.audits[2].score, Some(1.0));
        assert_eq!(oracle.query_count(), 24);
        // sorted scores 1, 3, inf; rank ceil(0.5 * 4) = 2
        assert_eq!(cal.threshold.lambda, 3.0);

        let oracle = AdmissionOracle::new(Scripted);
        let cal = calibrate_generation(&fold[2..], &Counter, &UpdateRule::Sum { gamma: 0.5 }, GenerationBudget::default(), &oracle, 0.5, 5).unwrap();
        assert_eq!(cal.audits[0].score, Some(0.2));
    }

    #[test]
    fn admissible_exactly_at_budget_is_finite() {
        let mut flags = vec![false; 20];
        flags[19] = true;
        let oracle = AdmissionOracle::new(Scripted);
        let fold = instances(&[flags], 1);
        let cal = calibrate_generation(&fold, &Counter, &UpdateRule::Count, GenerationBudget::new(20).unwrap(), &oracle, 0.5, 1).unwrap();
        assert_eq!(cal.audits[0].score, Some(20.0));
    }

    fn filter_pipeline<'a>(kind: FilterKind<u32>, lambda0: f64) -> PredictPipeline<'a, Counter> {
        PredictPipeline::new(&Counter, UpdateRule::Count, vec![FilterSpec::new(kind, 1)], Thresholds::new(vec![lambda0]), 100)
    }

    #[test]
    fn filter_trace_records_first_admissible() {
        // previous set = draws 0..4; quality filter order = position order (equal quality)
        let p = filter_pipeline(FilterKind::Quality, 4.0);
        let oracle = AdmissionOracle::new(Scripted);
        let fold = instances(&[vec![false, true, false, false], vec![false, false, false, false]], 3);
        let cal = calibrate_filter(&fold, &p, 1, &oracle, 0.4, 3).unwrap();
        assert_eq!(cal.audits[0].queries, 2);
        assert_eq!(cal.audits[0].score, Some(-0.2));
        assert_eq!(cal.audits[1].queries, 4);
        assert_eq!(cal.audits[1].score, None);
        assert_eq!(cal.scored, 1);
    }

    #[test]
    fn filter_single_element() {
        let p = filter_pipeline(FilterKind::Quality, 1.0);
        let oracle = AdmissionOracle::new(Scripted);
        let fold = instances(&[vec![true]], 3);
        let cal = calibrate_filter(&fold, &p, 1, &oracle, 0.4, 3).unwrap();
        assert_eq!((cal.audits[0].queries, cal.audits[0].score), (1, Some(-0.2)));
    }

    #[test]
    fn admissible_last_pick_still_scores() {
        let p = filter_pipeline(FilterKind::Quality, 3.0);
        let oracle = AdmissionOracle::new(Scripted);
        let fold = instances(&[vec![false, false, true]], 3);
        let cal = calibrate_filter(&fold, &p, 1, &oracle, 0.4, 3).unwrap();
        assert_eq!((cal.audits[0].queries, cal.audits[0].score), (3, Some(-0.2)));
    }

    #[test]
    fn all_previous_inadmissible_rejects_stage() {
        let p = filter_pipeline(FilterKind::Quality, 2.0);
        let oracle = AdmissionOracle::new(Scripted);
        let fold = instances(&[vec![false; 5], vec![false; 5]], 3);
        let cal = calibrate_filter(&fold, &p, 1, &oracle, 0.4, 3).unwrap();
        assert!(cal.threshold.rejected);
        assert_eq!(cal.scored, 0);
    }

    #[test]
    fn end_to_end_and_rejection() {
        let flags: Vec<Vec<bool>> = (0..6).map(|i| (0..20).map(|k| k == i % 3).collect()).collect();
        let oracle = AdmissionOracle::new(Scripted);
        let cfg = CalibrationConfig {
            alpha: 0.9,
            generation_rule: UpdateRule::Count,
            seed: 11,
            ..Default::default()
        };
        let all = instances(&flags, 11);
        let filters = vec![FilterSpec::new(FilterKind::Quality, 1)];
        let r = calibrate(&all, &Counter, &filters, &cfg, &oracle).unwrap();
        assert_eq!(r.lambdas.len(), 2);
        assert_eq!(r.query_count, oracle.query_count());
        assert_eq!(r.per_instance_queries.len(), 6);

        // gen-only with K = 1 uses all data in one fold
        let oracle = AdmissionOracle::new(Scripted);
        let r = calibrate(&all, &Counter, &[], &cfg, &oracle).unwrap();
        assert_eq!(r.lambdas.len(), 1);
        assert_eq!(r.risk.per_stage, vec![0.9]);
        assert_eq!(r.per_instance_queries.len(), 6);

        // alpha too small for n = 3 per fold
        let oracle = AdmissionOracle::new(Scripted);
        let strict = CalibrationConfig { alpha: 0.05, ..cfg.clone() };
        let r = calibrate(&all, &Counter, &filters, &strict, &oracle).unwrap();
        assert!(r.rejected);
        assert_eq!(r.rejected_stage, Some(0));
        assert!(r.thresholds().rejected);
        assert_eq!(r.lambdas, vec![f64::INFINITY, f64::INFINITY]);
    }

    #[test]
    fn duplicate_ids_are_refused() {
        let mut all = instances(&[vec![true], vec![true]], 1);
        all[1].id = 0;
        let oracle = AdmissionOracle::new(Scripted);
        assert!(calibrate(&all, &Counter, &[], &CalibrationConfig::default(), &oracle).is_err());
    }

    #[test]
    fn result_json_round_trip() {
        let flags: Vec<Vec<bool>> = (0..6).map(|i| (0..20).map(|k| k == i % 3).collect()).collect();
        let oracle = AdmissionOracle::new(Scripted);
        let cfg = CalibrationConfig { alpha: 0.05, generation_rule: UpdateRule::Count, ..Default::default() };
        let r = calibrate(&instances(&flags, 0), &Counter, &[], &cfg, &oracle).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<CalibrationResult>(&s).unwrap(), r);
    }
}
