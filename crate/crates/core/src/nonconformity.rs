//! Incremental non-conformity updates for the generation and filter stages.
//!
//! Every stage keeps a running value `nu` and a step counter `j` (0-based, the
//! number of candidates already accepted). Generation rules are strictly
//! increasing in `j`; the filter rules are non-decreasing under their greedy
//! orders.

use serde::{Deserialize, Serialize};

use crate::error::ContractError;

pub const DEFAULT_SUM_GAMMA: f64 = 0.5;
pub const DEFAULT_MAX_GAMMA: f64 = 0.3;

/// Floor applied to degenerate quality estimates before they enter an update.
pub const QUALITY_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    /// `nu' = j + 1`: the l-th candidate scores l.
    Count,
    /// `nu' = nu + q(y) + gamma * j`.
    Sum { gamma: f64 },
    /// `nu' = max(nu, q(y)) + gamma * j`.
    Max { gamma: f64 },
    /// `-d_max` on the first pick, then minus the min distance to the set.
    Diversity { d_max: f64 },
    /// `nu' = -q(y)`.
    Quality,
}

impl UpdateRule {
    pub fn sum() -> Self {
        UpdateRule::Sum { gamma: DEFAULT_SUM_GAMMA }
    }

    pub fn max() -> Self {
        UpdateRule::Max { gamma: DEFAULT_MAX_GAMMA }
    }

    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Count => "count",
            UpdateRule::Sum { .. } => "sum",
            UpdateRule::Max { .. } => "max",
            UpdateRule::Diversity { .. } => "diversity",
            UpdateRule::Quality => "quality",
        }
    }

    pub fn is_generation(&self) -> bool {
        matches!(self, UpdateRule::Count | UpdateRule::Sum { .. } | UpdateRule::Max { .. })
    }

    pub fn validate(&self) -> Result<(), ContractError> {
        match *self {
            UpdateRule::Sum { gamma } | UpdateRule::Max { gamma } if gamma.is_nan() || gamma <= 0.0 => {
                Err(ContractError::NonPositiveGamma(gamma))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NonConformityState {
    pub nu: f64,
    pub step: usize,
}

impl NonConformityState {
    pub fn new() -> Self {
        Self::default()
    }

    fn advance(self, nu: f64) -> Self {
        Self {
            nu,
            step: self.step + 1,
        }
    }
}

/// Floors a quality estimate at [`QUALITY_FLOOR`], warning when it had to.
pub fn clamp_quality(q: f64) -> f64 {
    if q >= QUALITY_FLOOR {
        q
    } else {
        log::warn!("quality estimate {q} is not strictly positive, clamping to {QUALITY_FLOOR}");
        QUALITY_FLOOR
    }
}

pub fn update_generation(
    state: NonConformityState,
    quality: f64,
    rule: &UpdateRule,
) -> Result<NonConformityState, ContractError> {
    rule.validate()?;
    let j = state.step as f64;
    let nu = match *rule {
        UpdateRule::Count => j + 1.0,
        UpdateRule::Sum { gamma } => {
            check_quality(quality)?;
            state.nu + quality + gamma * j
        }
        UpdateRule::Max { gamma } => {
            check_quality(quality)?;
            state.nu.max(quality) + gamma * j
        }
        _ => return Err(ContractError::WrongRule(rule.name())),
    };
    Ok(state.advance(nu))
}

fn check_quality(q: f64) -> Result<(), ContractError> {
    if q > 0.0 {
        Ok(())
    } else {
        Err(ContractError::NonPositiveQuality(q))
    }
}

/// Diversity update. `distances` are the distances from the candidate to the
/// members already in the filtered set (the candidate itself excluded). The
/// first pick (`step == 0`) scores `-d_max`.
pub fn update_diversity(
    state: NonConformityState,
    distances: impl IntoIterator<Item = f64>,
    d_max: f64,
    nonnegative: bool,
) -> Result<NonConformityState, ContractError> {
    if state.step == 0 {
        return Ok(state.advance(-d_max));
    }
    let mut min = f64::INFINITY;
    for d in distances {
        if nonnegative && d < 0.0 {
            return Err(ContractError::NegativeDistance { distance: d });
        }
        if d > d_max {
            return Err(ContractError::DistanceAboveBound { distance: d, d_max });
        }
        min = min.min(d);
    }
    if min == f64::INFINITY {
        // nothing to compare against: behave like a first pick
        min = d_max;
    }
    Ok(state.advance(-min))
}

pub fn update_quality(state: NonConformityState, quality: f64) -> NonConformityState {
    state.advance(-quality)
}
