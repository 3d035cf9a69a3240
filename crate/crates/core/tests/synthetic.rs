use scopegen_core::calibrator::calibrate_generation;
use scopegen_core::oracle::{ExactMatch, ReplayJudge};
use scopegen_core::seed;
use scopegen_core::world::{closed_form_admissibility, SyntheticWorld, WorldParams};
use scopegen_core::{
    calibrate, AdmissionOracle, CalibrationConfig, FilterKind, FilterSpec, GenerationBudget, UpdateRule,
};

fn world() -> SyntheticWorld {
    SyntheticWorld::new(WorldParams::default()).unwrap()
}

fn full_filters(w: &SyntheticWorld) -> Vec<FilterSpec<u32>> {
    vec![
        FilterSpec::new(FilterKind::Diversity(w.metric()), 1),
        FilterSpec::new(FilterKind::Quality, 2),
    ]
}

#[test]
fn count_rule_threshold_meets_closed_form_level() {
    // lambda under the count rule fixes a set size j; its analytic admissibility
    // averaged over fresh instances must reach 1 - alpha on average.
    let w = world();
    let g = w.generator();
    let alpha = 0.3;
    let trials = 200;
    let mut per_trial = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let cal = w.draw_instances(200, 0, seed::derive(11, &[t, 0]));
        let oracle = AdmissionOracle::new(ExactMatch);
        let st = calibrate_generation(&cal, &g, &UpdateRule::Count, GenerationBudget::default(), &oracle, alpha, t)
            .unwrap();
        let test = w.draw_instances(2000, 10_000, seed::derive(11, &[t, 1]));
        let a = if st.threshold.rejected {
            1.0
        } else {
            let j = st.threshold.lambda.floor() as usize;
            test.iter().map(|i| closed_form_admissibility(&i.condition, j)).sum::<f64>() / test.len() as f64
        };
        per_trial.push(a);
    }
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    let se = (alpha * (1.0 - alpha) / (200.0 * trials as f64)).sqrt();
    assert!(mean >= 1.0 - alpha - 3.0 * se, "mean closed-form admissibility {mean}");
}

#[test]
fn query_log_matches_internal_counter() {
    let w = world();
    let g = w.generator();
    let data = w.draw_instances(300, 0, 5);
    let oracle = AdmissionOracle::new(ExactMatch);
    let cfg = CalibrationConfig { seed: 9, ..Default::default() };
    let r = calibrate(&data, &g, &full_filters(&w), &cfg, &oracle).unwrap();
    assert_eq!(oracle.query_count(), r.query_count);
    assert_eq!(oracle.records().len(), r.query_count);
    assert!(r.per_instance_queries.iter().all(|a| a.queries <= cfg.budget.max || a.stage > 0));
}

#[test]
fn replayed_log_reproduces_calibration() {
    let w = world();
    let g = w.generator();
    let data = w.draw_instances(300, 0, 21);
    let cfg = CalibrationConfig { seed: 4, ..Default::default() };
    let live = AdmissionOracle::new(ExactMatch);
    let first = calibrate(&data, &g, &full_filters(&w), &cfg, &live).unwrap();
    let replay = AdmissionOracle::new(ReplayJudge::new(live.records()));
    let second = calibrate(&data, &g, &full_filters(&w), &cfg, &replay).unwrap();
    assert_eq!(first, second);
}

#[test]
fn partial_log_resumes_through_fallback() {
    let w = world();
    let g = w.generator();
    let data = w.draw_instances(240, 0, 8);
    let cfg = CalibrationConfig { seed: 2, ..Default::default() };
    let live = AdmissionOracle::new(ExactMatch);
    let first = calibrate(&data, &g, &full_filters(&w), &cfg, &live).unwrap();
    let mut log = live.records();
    log.truncate(log.len() / 3);
    let resumed = AdmissionOracle::new(ReplayJudge::new(log).with_fallback(ExactMatch));
    assert_eq!(calibrate(&data, &g, &full_filters(&w), &cfg, &resumed).unwrap(), first);
}

#[test]
fn generation_only_and_flipped_pipelines_calibrate() {
    let w = world();
    let g = w.generator();
    let data = w.draw_instances(300, 0, 3);
    let cfg = CalibrationConfig::default();
    let gen_only = calibrate(&data, &g, &[], &cfg, &AdmissionOracle::new(ExactMatch)).unwrap();
    assert_eq!(gen_only.lambdas.len(), 1);
    let flipped = vec![
        FilterSpec::new(FilterKind::Quality, 1),
        FilterSpec::new(FilterKind::Diversity(w.metric()), 2),
    ];
    let r = calibrate(&data, &g, &flipped, &cfg, &AdmissionOracle::new(ExactMatch)).unwrap();
    assert_eq!(r.lambdas.len(), 3);
    assert!((r.risk.implied_total() - 0.3).abs() < 1e-12);
}
