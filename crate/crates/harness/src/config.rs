use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use scopegen_core::calibrator::{CalibrationConfig, GenerationBudget};
use scopegen_core::clm::{Beta1Formula, DEFAULT_GRID_SIZE};
use scopegen_core::nonconformity::{DEFAULT_MAX_GAMMA, DEFAULT_SUM_GAMMA};
use scopegen_core::predictor::DEFAULT_HARD_CAP_MULTIPLE;
use scopegen_core::world::WorldParams;
use scopegen_core::{RiskSplit, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Generation, diversity filter, quality filter.
    #[default]
    ScopeGen,
    /// Generation stage only.
    ScopeGenGenOnly,
    /// Quality filter before diversity filter.
    ScopeGenFlipped,
    /// Learn-then-test baseline with the full budget.
    Clm,
    /// Learn-then-test baseline with ten draws per instance.
    ClmReducedMax,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ScopeGen,
        Method::ScopeGenGenOnly,
        Method::ScopeGenFlipped,
        Method::Clm,
        Method::ClmReducedMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ScopeGen => "scope-gen",
            Method::ScopeGenGenOnly => "scope-gen-gen-only",
            Method::ScopeGenFlipped => "scope-gen-flipped",
            Method::Clm => "clm",
            Method::ClmReducedMax => "clm-reduced-max",
        }
    }

    pub fn is_clm(self) -> bool {
        matches!(self, Method::Clm | Method::ClmReducedMax)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Nonconformity {
    Count,
    #[default]
    Sum,
    Max,
}

/// Everything an experiment run needs. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub alpha: f64,
    pub nonconformity: Nonconformity,
    /// Slope of the sum/max rules; the rule's default when absent.
    pub gamma: Option<f64>,
    pub n_calibration: usize,
    pub n_test: usize,
    pub trials: usize,
    /// Generation budget per calibration instance.
    pub max: usize,
    pub seed: Option<u64>,
    pub world: WorldParams,
    pub output: PathBuf,
    /// Concurrent trials; 0 uses every core.
    pub workers: usize,
    pub risk_split: RiskSplit,
    /// CLM grid values per dimension.
    pub clm_grid: usize,
    pub beta1_formula: Beta1Formula,
    pub hard_cap_multiple: usize,
    /// When false, `time_seconds` is written as 0 so reruns are byte-identical.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::default(),
            alpha: 0.3,
            nonconformity: Nonconformity::default(),
            gamma: None,
            n_calibration: 600,
            n_test: 300,
            trials: 300,
            max: 20,
            seed: None,
            world: WorldParams::default(),
            output: PathBuf::from("results.csv"),
            workers: 0,
            risk_split: RiskSplit::default(),
            clm_grid: DEFAULT_GRID_SIZE,
            beta1_formula: Beta1Formula::default(),
            hard_cap_multiple: DEFAULT_HARD_CAP_MULTIPLE,
            record_timing: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.alpha >= 1.0 {
            bail!("alpha must lie in (0, 1), got {}", self.alpha);
        }
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        if self.max == 0 {
            bail!("max must be at least 1");
        }
        if self.n_calibration < 3 {
            bail!("n_calibration must be at least 3");
        }
        if self.clm_grid < 2 {
            bail!("clm_grid must be at least 2");
        }
        if let Some(g) = self.gamma {
            if g.is_nan() || g <= 0.0 {
                bail!("gamma must be positive, got {g}");
            }
        }
        self.world.validate()?;
        self.generation_rule().validate()?;
        Ok(())
    }

    pub fn generation_rule(&self) -> UpdateRule {
        match self.nonconformity {
            Nonconformity::Count => UpdateRule::Count,
            Nonconformity::Sum => UpdateRule::Sum {
                gamma: self.gamma.unwrap_or(DEFAULT_SUM_GAMMA),
            },
            Nonconformity::Max => UpdateRule::Max {
                gamma: self.gamma.unwrap_or(DEFAULT_MAX_GAMMA),
            },
        }
    }

    pub fn budget(&self) -> GenerationBudget {
        GenerationBudget { max: self.max }
    }

    pub fn calibration_config(&self, seed: u64) -> CalibrationConfig {
        CalibrationConfig {
            alpha: self.alpha,
            risk_split: self.risk_split,
            generation_rule: self.generation_rule(),
            budget: self.budget(),
            proportions: None,
            seed,
            hard_cap_multiple: self.hard_cap_multiple,
        }
    }

    /// Sidecar path: `results.csv` -> `results.config.json`.
    pub fn sidecar_path(output: &Path) -> PathBuf {
        output.with_extension("config.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_takes_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"method": "clm-reduced-max", "seed": 4, "world": {"vocab": 10}}"#).unwrap();
        assert_eq!(c.method, Method::ClmReducedMax);
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.world.vocab, 10);
        assert_eq!(c.world.p_lo, 0.15);
        assert_eq!(c.alpha, 0.3);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"alpah": 0.3}"#).is_err());
        let c = ExperimentConfig { alpha: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { trials: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn rule_defaults() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.generation_rule(), UpdateRule::Sum { gamma: 0.5 });
        c.nonconformity = Nonconformity::Max;
        assert_eq!(c.generation_rule(), UpdateRule::Max { gamma: 0.3 });
        c.gamma = Some(0.1);
        assert_eq!(c.generation_rule(), UpdateRule::Max { gamma: 0.1 });
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(ExperimentConfig::sidecar_path(Path::new("out/r.csv")), PathBuf::from("out/r.config.json"));
    }
}
