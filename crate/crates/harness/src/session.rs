//! Single calibrations outside the trial loop, with a live, replayed or
//! human oracle.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;

use scopegen_core::human::{HumanJudge, HumanQueue};
use scopegen_core::oracle::{read_ndjson, ReplayJudge};
use scopegen_core::world::SyntheticWorld;
use scopegen_core::AdmissionOracle;

use crate::config::ExperimentConfig;
use crate::experiment::{calibrate_method, Calibrated, SyntheticOracle, TrialData};

/// Calibrates the configured method on trial 0's calibration set.
pub fn calibrate_once(config: &ExperimentConfig, oracle: &SyntheticOracle) -> anyhow::Result<Calibrated> {
    config.validate()?;
    let world = SyntheticWorld::new(config.world.clone())?;
    let data = TrialData::new(config, &world, 0);
    calibrate_method(config, config.method, &world, &data.calibration, oracle, data.calibration_seed)
}

/// Oracle that asks `queue`, answering from `resume` first and appending every
/// verdict to `checkpoint`. When both name the same file the old log is moved
/// to `<file>.prev` before it is replayed.
pub fn human_oracle(
    queue: Arc<HumanQueue>,
    checkpoint: Option<&Path>,
    resume: Option<&Path>,
) -> anyhow::Result<SyntheticOracle> {
    let mut resume: Option<PathBuf> = resume.map(Path::to_path_buf);
    if let (Some(cp), Some(rs)) = (checkpoint, resume.as_ref()) {
        if cp == rs && cp.exists() {
            let prev = PathBuf::from(format!("{}.prev", cp.display()));
            std::fs::rename(cp, &prev).with_context(|| format!("moving {} aside", cp.display()))?;
            resume = Some(prev);
        }
    }
    let human = HumanJudge::new(queue);
    let mut oracle = match resume {
        Some(path) => {
            let records = read_ndjson(&path).with_context(|| format!("reading {}", path.display()))?;
            log::info!("replaying {} verdicts from {}", records.len(), path.display());
            AdmissionOracle::new(ReplayJudge::new(records).with_fallback(human))
        }
        None => AdmissionOracle::new(human),
    };
    if let Some(cp) = checkpoint {
        oracle = oracle.with_checkpoint(cp).with_context(|| format!("opening {}", cp.display()))?;
    }
    Ok(oracle)
}
