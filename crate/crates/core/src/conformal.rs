//! Split-conformal quantiles and the per-stage risk allocation.

use serde::{Deserialize, Serialize};

use crate::error::InvalidInput;
use crate::world::InstanceId;

/// Slack absorbed when rounding `(1 - alpha)(n + 1)` up to an integer rank,
/// so that products such as `0.7 * 10` which land a hair above an integer in
/// binary floating point do not bump the rank.
const RANK_SLACK: f64 = 1e-9;

pub(crate) fn check_probability(name: &'static str, value: f64) -> Result<(), InvalidInput> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(InvalidInput::Probability { name, value })
    }
}

/// One calibration non-conformity value. `+inf` means no admissible outcome
/// was found within budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    #[serde(with = "crate::extended")]
    value: f64,
    pub instance_id: InstanceId,
}

impl ScoreSample {
    pub fn new(value: f64, instance_id: InstanceId) -> Result<Self, InvalidInput> {
        if value.is_nan() {
            return Err(InvalidInput::NanScore);
        }
        if value == f64::NEG_INFINITY {
            return Err(InvalidInput::msg("score of -inf is not allowed"));
        }
        Ok(Self { value, instance_id })
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    #[serde(with = "crate::extended")]
    pub lambda: f64,
    pub rank: usize,
    pub n: usize,
    pub rejected: bool,
}

/// `ceil((1 - alpha)(n + 1))`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let raw = (1.0 - alpha) * (n as f64 + 1.0);
    ((raw - RANK_SLACK).ceil() as usize).max(1)
}

/// The `ceil((1-alpha)(n+1))`-th smallest score. Ties are kept, `+inf` sorts
/// above every finite value, and a rank beyond `n` (or an infinite order
/// statistic) yields a rejected threshold at `+inf` rather than an error.
pub fn conformal_quantile(
    scores: &[ScoreSample],
    alpha: f64,
) -> Result<ConformalThreshold, InvalidInput> {
    let values: Vec<f64> = scores.iter().map(ScoreSample::value).collect();
    quantile_of_values(&values, alpha)
}

/// Same as [`conformal_quantile`] on raw values; NaN and `-inf` are refused.
pub fn quantile_of_values(values: &[f64], alpha: f64) -> Result<ConformalThreshold, InvalidInput> {
    check_probability("alpha", alpha)?;
    if values.is_empty() {
        return Err(InvalidInput::EmptyScores);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(InvalidInput::NanScore);
    }
    if values.contains(&f64::NEG_INFINITY) {
        return Err(InvalidInput::msg("score of -inf is not allowed"));
    }
    let n = values.len();
    let rank = conformal_rank(n, alpha);
    if rank > n {
        return Ok(ConformalThreshold {
            lambda: f64::INFINITY,
            rank,
            n,
            rejected: true,
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lambda = sorted[rank - 1];
    Ok(ConformalThreshold {
        lambda,
        rank,
        n,
        rejected: lambda == f64::INFINITY,
    })
}

/// How the total risk is spread across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskSplit {
    /// Same level at every stage.
    Uniform,
    /// Generation stage gets `(M-1)/M` of the log-budget, filters share the rest.
    Emphasis(u32),
}

impl Default for RiskSplit {
    fn default() -> Self {
        RiskSplit::Emphasis(5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskLevels {
    pub alpha_total: f64,
    pub per_stage: Vec<f64>,
    pub split: RiskSplit,
}

impl RiskLevels {
    pub fn stage_count(&self) -> usize {
        self.per_stage.len()
    }

    /// `1 - prod(1 - alpha_s)`; equals `alpha_total` up to rounding.
    pub fn implied_total(&self) -> f64 {
        1.0 - self.per_stage.iter().map(|a| 1.0 - a).product::<f64>()
    }
}

pub fn allocate_risk(alpha_total: f64, stages: usize, split: RiskSplit) -> Result<RiskLevels, InvalidInput> {
    check_probability("alpha_total", alpha_total)?;
    if stages == 0 {
        return Err(InvalidInput::msg("stage count must be at least 1"));
    }
    let keep = 1.0 - alpha_total;
    let per_stage = match split {
        _ if stages == 1 => vec![alpha_total],
        RiskSplit::Uniform => vec![1.0 - keep.powf(1.0 / stages as f64); stages],
        RiskSplit::Emphasis(m) => {
            if m < 2 {
                return Err(InvalidInput::msg(format!("emphasis M must be >= 2, got {m}")));
            }
            let m = m as f64;
            let first = 1.0 - keep.powf((m - 1.0) / m);
            let rest = 1.0 - keep.powf(1.0 / (m * (stages - 1) as f64));
            std::iter::once(first)
                .chain(std::iter::repeat_n(rest, stages - 1))
                .collect()
        }
    };
    Ok(RiskLevels {
        alpha_total,
        per_stage,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> Vec<ScoreSample> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| ScoreSample::new(x, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn quantile_of_one_to_nine() {
        let s = scores(&[3.0, 1.0, 9.0, 2.0, 8.0, 4.0, 7.0, 5.0, 6.0]);
        let t = conformal_quantile(&s, 0.2).unwrap();
        assert_eq!(t.rank, 8);
        assert_eq!(t.lambda, 8.0);
        assert!(!t.rejected);
    }

    #[test]
    fn single_score() {
        let t = conformal_quantile(&scores(&[5.0]), 0.5).unwrap();
        assert_eq!((t.rank, t.lambda, t.rejected), (1, 5.0, false));
    }

    #[test]
    fn rank_beyond_n_rejects() {
        let s = scores(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let t = conformal_quantile(&s, 0.05).unwrap();
        assert_eq!(t.rank, 10);
        assert!(t.rejected);
        assert_eq!(t.lambda, f64::INFINITY);
    }

    #[test]
    fn infinite_order_statistic_rejects() {
        let s = scores(&[1.0, f64::INFINITY, f64::INFINITY]);
        let t = conformal_quantile(&s, 0.5).unwrap();
        assert_eq!(t.rank, 2);
        assert!(t.rejected);
    }

    #[test]
    fn ties_are_kept() {
        let t = quantile_of_values(&[2.0, 2.0, 2.0, 1.0], 0.5).unwrap();
        assert_eq!(t.rank, 3);
        assert_eq!(t.lambda, 2.0);
    }

    #[test]
    fn empty_and_nan_are_errors() {
        assert_eq!(conformal_quantile(&[], 0.1), Err(InvalidInput::EmptyScores));
        assert!(ScoreSample::new(f64::NAN, 0).is_err());
        assert!(quantile_of_values(&[f64::NAN], 0.1).is_err());
        assert!(quantile_of_values(&[1.0], 0.0).is_err());
        assert!(quantile_of_values(&[1.0], 1.0).is_err());
    }

    #[test]
    fn uniform_allocation() {
        let r = allocate_risk(0.3, 3, RiskSplit::Uniform).unwrap();
        for a in &r.per_stage {
            assert!((a - 0.112_096).abs() < 1e-5);
        }
        assert!((r.implied_total() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn emphasis_allocation() {
        let r = allocate_risk(0.3, 3, RiskSplit::Emphasis(5)).unwrap();
        assert!((r.per_stage[0] - 0.24824).abs() < 1e-5);
        assert!((r.per_stage[1] - 0.03503).abs() < 1e-5);
        assert_eq!(r.per_stage[1], r.per_stage[2]);
        assert!((r.implied_total() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_stage_carries_everything() {
        for split in [RiskSplit::Uniform, RiskSplit::Emphasis(2), RiskSplit::Emphasis(7)] {
            assert_eq!(allocate_risk(0.3, 1, split).unwrap().per_stage, vec![0.3]);
        }
    }

    #[test]
    fn allocation_errors() {
        assert!(allocate_risk(0.3, 0, RiskSplit::Uniform).is_err());
        assert!(allocate_risk(0.3, 2, RiskSplit::Emphasis(1)).is_err());
        assert!(allocate_risk(1.2, 2, RiskSplit::Uniform).is_err());
    }

    #[test]
    fn product_invariant_sweep() {
        for a in 1..=10 {
            let alpha = a as f64 * 0.05;
            for k in 1..=4 {
                for m in 2..=8 {
                    let r = allocate_risk(alpha, k, RiskSplit::Emphasis(m)).unwrap();
                    assert_eq!(r.stage_count(), k);
                    assert!((r.implied_total() - alpha).abs() < 1e-12, "{alpha} {k} {m}");
                    assert!(r.per_stage.iter().all(|&x| x > 0.0 && x < 1.0));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn input_order_irrelevant(mut v in prop::collection::vec(0.0f64..100.0, 1..30), alpha in 0.01f64..0.99) {
            let a = quantile_of_values(&v, alpha).unwrap();
            v.reverse();
            let b = quantile_of_values(&v, alpha).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn monotone_in_level_and_scores(
            v in prop::collection::vec(0.0f64..100.0, 1..30),
            a1 in 0.01f64..0.99,
            a2 in 0.01f64..0.99,
            bump_idx in 0usize..30,
            bump in 0.0f64..10.0,
        ) {
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            // smaller alpha = higher level
            prop_assert!(quantile_of_values(&v, lo).unwrap().lambda >= quantile_of_values(&v, hi).unwrap().lambda);
            let mut w = v.clone();
            let i = bump_idx % w.len();
            w[i] += bump;
            prop_assert!(quantile_of_values(&w, a1).unwrap().lambda >= quantile_of_values(&v, a1).unwrap().lambda);
        }
    }
}
