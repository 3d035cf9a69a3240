//! Admission oracles and their audit log.
//!
//! Every call through [`AdmissionOracle::admit`] appends exactly one
//! [`AdmissionRecord`], so the number of admissibility queries a calibration
//! spent can be recomputed from the log alone.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::OracleError;
use crate::world::InstanceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Automated,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub admissible: bool,
    pub source: VerdictSource,
}

impl Verdict {
    pub fn automated(admissible: bool) -> Self {
        Self {
            admissible,
            source: VerdictSource::Automated,
        }
    }
}

/// One oracle verdict as persisted in the audit log and checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub instance_id: InstanceId,
    pub stage: usize,
    /// 0-based query index within the instance's stage.
    pub position: usize,
    pub candidate: serde_json::Value,
    pub admissible: bool,
    pub source: VerdictSource,
    pub latency_ms: f64,
}

/// What an oracle is asked: is `candidate` admissible for `reference`?
#[derive(Debug)]
pub struct Query<'a, C, O, R> {
    pub instance_id: InstanceId,
    pub stage: usize,
    pub position: usize,
    pub condition: &'a C,
    pub candidate: &'a O,
    pub reference: &'a R,
}

pub trait Judge<C, O, R>: Send + Sync {
    fn judge(&self, query: &Query<'_, C, O, R>) -> Result<Verdict, OracleError>;
}

/// Logging front for a [`Judge`]; optionally mirrors every record to an
/// NDJSON checkpoint file as it is produced.
pub struct AdmissionOracle<C, O, R> {
    judge: Box<dyn Judge<C, O, R>>,
    log: Mutex<Vec<AdmissionRecord>>,
    checkpoint: Option<Mutex<BufWriter<File>>>,
}

impl<C, O: Serialize, R> AdmissionOracle<C, O, R> {
    pub fn new(judge: impl Judge<C, O, R> + 'static) -> Self {
        Self {
            judge: Box::new(judge),
            log: Mutex::new(Vec::new()),
            checkpoint: None,
        }
    }

    /// Appends each record to `path` (created or extended) as soon as it is logged.
    pub fn with_checkpoint(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.checkpoint = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn admit(&self, query: Query<'_, C, O, R>) -> Result<bool, OracleError> {
        let start = Instant::now();
        let verdict = self.judge.judge(&query)?;
        let record = AdmissionRecord {
            instance_id: query.instance_id,
            stage: query.stage,
            position: query.position,
            candidate: serde_json::to_value(query.candidate).unwrap_or(serde_json::Value::Null),
            admissible: verdict.admissible,
            source: verdict.source,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(cp) = &self.checkpoint {
            let mut w = cp.lock().expect("checkpoint lock poisoned");
            let line = serde_json::to_string(&record).expect("record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log::warn!("failed to append checkpoint record: {e}");
            }
        }
        self.log.lock().expect("oracle log poisoned").push(record);
        Ok(verdict.admissible)
    }

    pub fn query_count(&self) -> usize {
        self.log.lock().expect("oracle log poisoned").len()
    }

    pub fn records(&self) -> Vec<AdmissionRecord> {
        self.log.lock().expect("oracle log poisoned").clone()
    }
}

pub fn admit_exact<O: PartialEq>(candidate: &O, aliases: &[O]) -> bool {
    aliases.iter().any(|a| a == candidate)
}

/// Strict threshold: admissible iff `sim > tau`.
pub fn admit_threshold<O, R>(candidate: &O, reference: &R, sim: impl Fn(&O, &R) -> f64, tau: f64) -> bool {
    sim(candidate, reference) > tau
}

/// Exact identity against a single reference output.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl<C, O: PartialEq> Judge<C, O, O> for ExactMatch {
    fn judge(&self, q: &Query<'_, C, O, O>) -> Result<Verdict, OracleError> {
        Ok(Verdict::automated(q.candidate == q.reference))
    }
}

/// Exact identity against any of several reference aliases.
#[derive(Debug, Clone, Copy, Default)]
pub struct AliasMatch;

impl<C, O: PartialEq> Judge<C, O, Vec<O>> for AliasMatch {
    fn judge(&self, q: &Query<'_, C, O, Vec<O>>) -> Result<Verdict, OracleError> {
        Ok(Verdict::automated(admit_exact(q.candidate, q.reference)))
    }
}

pub struct ThresholdSimilarity<F> {
    pub sim: F,
    pub tau: f64,
}

impl<C, O, R, F> Judge<C, O, R> for ThresholdSimilarity<F>
where
    F: Fn(&O, &R) -> f64 + Send + Sync,
{
    fn judge(&self, q: &Query<'_, C, O, R>) -> Result<Verdict, OracleError> {
        Ok(Verdict::automated(admit_threshold(q.candidate, q.reference, &self.sim, self.tau)))
    }
}

/// Re-serves verdicts from a stored log keyed by (instance, stage, position).
/// Queries missing from the log go to `fallback`, or fail when there is none.
pub struct ReplayJudge<C, O, R> {
    table: HashMap<(InstanceId, usize, usize), AdmissionRecord>,
    fallback: Option<Box<dyn Judge<C, O, R>>>,
}

impl<C, O, R> ReplayJudge<C, O, R> {
    pub fn new(records: impl IntoIterator<Item = AdmissionRecord>) -> Self {
        Self {
            table: records
                .into_iter()
                .map(|r| ((r.instance_id, r.stage, r.position), r))
                .collect(),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: impl Judge<C, O, R> + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl<C, O, R> Judge<C, O, R> for ReplayJudge<C, O, R>
where
    C: Sync,
    O: Sync,
    R: Sync,
{
    fn judge(&self, q: &Query<'_, C, O, R>) -> Result<Verdict, OracleError> {
        if let Some(r) = self.table.get(&(q.instance_id, q.stage, q.position)) {
            return Ok(Verdict {
                admissible: r.admissible,
                source: r.source,
            });
        }
        match &self.fallback {
            Some(f) => f.judge(q),
            None => Err(OracleError::MissingReplay {
                instance_id: q.instance_id,
                stage: q.stage,
                position: q.position,
            }),
        }
    }
}

pub fn write_ndjson(records: &[AdmissionRecord], path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads an NDJSON record log, skipping blank lines. A truncated last line
/// (interrupted write) is ignored with a warning.
pub fn read_ndjson(path: &Path) -> std::io::Result<Vec<AdmissionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i == last => log::warn!("ignoring truncated checkpoint line {}: {e}", i + 1),
            Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        }
    }
    Ok(out)
}
