use std::fs::File;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const CSV_HEADER: &str = "method,trial,queries_mean,time_seconds,set_size_mean,frac_reject,admissibility_empirical";

/// One trial of one method. `set_size_mean` is empty for rejected calibrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub trial: usize,
    pub queries_mean: f64,
    pub time_seconds: f64,
    pub set_size_mean: Option<f64>,
    pub frac_reject: f64,
    pub admissibility_empirical: f64,
}

/// Writes `rows` as CSV to `path` and the resolved config next to it.
pub fn emit_results(rows: &[MetricsRow], path: &Path, config: &ExperimentConfig) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let sidecar = ExperimentConfig::sidecar_path(path);
    let mut resolved = config.clone();
    resolved.output = path.to_path_buf();
    std::fs::write(&sidecar, serde_json::to_string_pretty(&resolved)? + "\n")
        .with_context(|| format!("writing {}", sidecar.display()))?;
    Ok(())
}

pub fn read_results(path: &Path) -> anyhow::Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        anyhow::bail!("unexpected header in {}: {}", path.display(), header.join(","));
    }
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(trial: usize, size: Option<f64>) -> MetricsRow {
        MetricsRow {
            method: "scope-gen".into(),
            trial,
            queries_mean: 4.213_333_333_333_333,
            time_seconds: 0.012_345_678_9,
            set_size_mean: size,
            frac_reject: if size.is_some() { 0.0 } else { 1.0 },
            admissibility_empirical: 0.733_333_333_333_333_3,
        }
    }

    #[test]
    fn header_only_and_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let cfg = ExperimentConfig { seed: Some(3), ..Default::default() };
        emit_results(&[], &p, &cfg).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{CSV_HEADER}\n"));
        emit_results(&[row(0, Some(2.5))], &p, &cfg).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        let side: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.config.json")).unwrap()).unwrap();
        assert_eq!(side.seed, Some(3));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.csv");
        let rows = vec![row(0, Some(3.0 / 7.0)), row(1, None), row(2, Some(1e-17))];
        emit_results(&rows, &p, &ExperimentConfig::default()).unwrap();
        assert_eq!(read_results(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(2).unwrap().contains(",,"), "rejected trial leaves size empty");
    }
}
