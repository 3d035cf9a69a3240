//! Generator interface and the synthetic world used for exact verification.
//!
//! The synthetic world hides a per-instance success probability `p`: each draw
//! returns the true token with probability `p` and a uniformly chosen wrong
//! token otherwise, so the chance that `j` draws contain an admissible one is
//! `1 - (1 - p)^j` in closed form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GeneratorError, InvalidInput};
use crate::filters::Metric;
use crate::seed;

pub type InstanceId = u64;

/// A calibration or test example: a condition and the reference it is judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance<C, R> {
    pub id: InstanceId,
    pub condition: C,
    pub reference: R,
}

/// Black-box conditional generator.
///
/// Draws with distinct seeds must be i.i.d. given the condition; the same seed
/// must reproduce the same output.
pub trait GenerativeModel: Send + Sync {
    type Condition: Send + Sync;
    type Output: Clone + Send + Sync;

    fn sample(&self, condition: &Self::Condition, seed: u64) -> Result<Self::Output, GeneratorError>;

    /// Quality estimate `q(y) > 0`, e.g. the model's likelihood of `y`.
    fn quality(&self, condition: &Self::Condition, output: &Self::Output) -> f64;
}

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub instance_id: InstanceId,
    pub p_success: f64,
    pub y_true: Token,
    pub vocab: u32,
}

impl SyntheticInstance {
    /// Probability that `j` i.i.d. draws contain the true token.
    pub fn closed_form_admissibility(&self, j: usize) -> f64 {
        1.0 - (1.0 - self.p_success).powi(j as i32)
    }
}

pub fn closed_form_admissibility(instance: &SyntheticInstance, j: usize) -> f64 {
    instance.closed_form_admissibility(j)
}

/// Distance between tokens in the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMetric {
    /// 0 for equal tokens, 1 otherwise.
    Discrete,
    /// `|a - b| / (V - 1)`.
    #[default]
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub vocab: u32,
    pub p_lo: f64,
    pub p_hi: f64,
    pub metric: TokenMetric,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            vocab: 50,
            p_lo: 0.15,
            p_hi: 0.9,
            metric: TokenMetric::Ordinal,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), InvalidInput> {
        if self.vocab < 2 {
            return Err(InvalidInput::msg("vocab must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.p_lo) || !(0.0..=1.0).contains(&self.p_hi) || self.p_lo > self.p_hi {
            return Err(InvalidInput::msg(format!(
                "success range [{}, {}] is not a sub-interval of [0, 1]",
                self.p_lo, self.p_hi
            )));
        }
        Ok(())
    }
}

/// The synthetic world: instance factory plus generator.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub params: WorldParams,
}

pub type SyntheticTask = Instance<SyntheticInstance, Token>;

impl SyntheticWorld {
    pub fn new(params: WorldParams) -> Result<Self, InvalidInput> {
        params.validate()?;
        Ok(Self { params })
    }

    /// `n` fresh instances with ids `first_id..first_id + n`.
    pub fn draw_instances(&self, n: usize, first_id: InstanceId, seed: u64) -> Vec<SyntheticTask> {
        let mut rng = seed::rng(seed);
        (0..n as u64)
            .map(|k| {
                let id = first_id + k;
                let p = if self.params.p_hi > self.params.p_lo {
                    rng.random_range(self.params.p_lo..self.params.p_hi)
                } else {
                    self.params.p_lo
                };
                let y_true = rng.random_range(0..self.params.vocab);
                Instance {
                    id,
                    condition: SyntheticInstance {
                        instance_id: id,
                        p_success: p,
                        y_true,
                        vocab: self.params.vocab,
                    },
                    reference: y_true,
                }
            })
            .collect()
    }

    pub fn generator(&self) -> SyntheticGenerator {
        SyntheticGenerator
    }

    pub fn metric(&self) -> Metric<Token> {
        let span = (self.params.vocab - 1) as f64;
        match self.params.metric {
            TokenMetric::Discrete => Metric::new(|a: &Token, b: &Token| if a == b { 0.0 } else { 1.0 }, 1.0),
            TokenMetric::Ordinal => Metric::new(move |a: &Token, b: &Token| a.abs_diff(*b) as f64 / span, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticGenerator;

/// One draw from the synthetic world.
pub fn synthetic_sample(instance: &SyntheticInstance, seed: u64) -> Token {
    let mut rng = seed::rng(seed);
    if rng.random_bool(instance.p_success.clamp(0.0, 1.0)) {
        instance.y_true
    } else {
        // uniform over the other V-1 tokens
        let k = rng.random_range(0..instance.vocab - 1);
        if k >= instance.y_true {
            k + 1
        } else {
            k
        }
    }
}

impl GenerativeModel for SyntheticGenerator {
    type Condition = SyntheticInstance;
    type Output = Token;

    fn sample(&self, condition: &SyntheticInstance, seed: u64) -> Result<Token, GeneratorError> {
        Ok(synthetic_sample(condition, seed))
    }

    fn quality(&self, condition: &SyntheticInstance, output: &Token) -> f64 {
        if *output == condition.y_true {
            condition.p_success
        } else {
            (1.0 - condition.p_success) / (condition.vocab - 1) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(p: f64, vocab: u32) -> SyntheticInstance {
        SyntheticInstance {
            instance_id: 0,
            p_success: p,
            y_true: 1,
            vocab,
        }
    }

    #[test]
    fn certain_world_always_hits() {
        let i = inst(1.0, 10);
        assert!((0..1000).all(|s| synthetic_sample(&i, s) == 1));
    }

    #[test]
    fn admissible_fraction_matches_bernoulli_mean() {
        let i = inst(0.5, 10);
        let n = 100_000;
        let hits = (0..n).filter(|&s| synthetic_sample(&i, seed::derive(9, &[s])) == 1).count();
        let frac = hits as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((frac - 0.5).abs() <= 3.0 * se, "{frac}");
    }

    #[test]
    fn binary_vocab_is_symmetric() {
        let i = inst(0.5, 2);
        let n = 20_000;
        let ones = (0..n).filter(|&s| synthetic_sample(&i, seed::derive(3, &[s])) == 1).count();
        let zeros = n as usize - ones;
        assert!((ones as f64 - zeros as f64).abs() / (n as f64) < 0.03);
        assert!((0..n).all(|s| synthetic_sample(&i, s) < 2));
    }

    #[test]
    fn wrong_tokens_are_uniform_and_never_true() {
        let i = inst(0.0, 5);
        let mut counts = [0usize; 5];
        for s in 0..40_000 {
            counts[synthetic_sample(&i, seed::derive(5, &[s])) as usize] += 1;
        }
        assert_eq!(counts[1], 0);
        for (t, &c) in counts.iter().enumerate() {
            if t != 1 {
                assert!((c as f64 / 10_000.0 - 1.0).abs() < 0.05, "{counts:?}");
            }
        }
    }

    #[test]
    fn quality_is_the_model_likelihood() {
        let g = SyntheticGenerator;
        let i = inst(0.4, 4);
        assert_eq!(g.quality(&i, &1), 0.4);
        assert!((g.quality(&i, &0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(inst(0.5, 3).closed_form_admissibility(0), 0.0);
        assert_eq!(inst(0.5, 3).closed_form_admissibility(1), 0.5);
        assert!((inst(0.3, 3).closed_form_admissibility(5) - 0.83193).abs() < 1e-12);
    }

    #[test]
    fn instances_are_reproducible() {
        let w = SyntheticWorld::new(WorldParams::default()).unwrap();
        let a = w.draw_instances(20, 100, 7);
        assert_eq!(a, w.draw_instances(20, 100, 7));
        assert_eq!(a[0].id, 100);
        assert!(a.iter().all(|t| t.condition.p_success >= 0.15 && t.condition.p_success < 0.9));
    }
}
