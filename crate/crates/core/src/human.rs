//! Blocking FIFO of admissibility questions answered by a human labeler.
//!
//! The calibrating thread calls [`HumanQueue::ask`] and blocks until a verdict
//! is posted or the timeout elapses. A labeling front end pulls tasks with
//! [`HumanQueue::next_task`] and answers with [`HumanQueue::post_verdict`].
//! A task handed to one labeler is leased and not handed out again until the
//! lease expires.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::OracleError;
use crate::oracle::{Judge, Query, Verdict, VerdictSource};
use crate::world::InstanceId;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);
pub const DEFAULT_LEASE: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub query_id: u64,
    pub instance_id: InstanceId,
    pub stage: usize,
    pub position: usize,
    pub condition_payload: serde_json::Value,
    pub candidate_payload: serde_json::Value,
    pub reference_payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueStatus {
    pub pending: usize,
    pub answered: u64,
    pub calibration_stage: Option<usize>,
    /// Questions asked so far, per stage.
    pub stage_queries: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("unknown query id")]
    NotFound,
    #[error("query already answered")]
    Conflict,
}

struct Entry {
    task: LabelTask,
    verdict: Option<bool>,
    leased_until: Option<Instant>,
}

#[derive(Default)]
struct State {
    next_id: u64,
    pending: VecDeque<u64>,
    entries: HashMap<u64, Entry>,
    answered_ids: HashSet<u64>,
    answered: u64,
    stage: Option<usize>,
    stage_queries: BTreeMap<usize, u64>,
}

pub struct HumanQueue {
    state: Mutex<State>,
    cv: Condvar,
    timeout: Duration,
    lease: Duration,
}

impl HumanQueue {
    pub fn new(timeout: Duration) -> Arc<Self> {
        Self::with_lease(timeout, DEFAULT_LEASE)
    }

    pub fn with_lease(timeout: Duration, lease: Duration) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(State::default()),
            cv: Condvar::new(),
            timeout,
            lease,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("human queue poisoned")
    }

    /// Enqueues a question and blocks for its verdict.
    pub fn ask(
        &self,
        instance_id: InstanceId,
        stage: usize,
        position: usize,
        condition_payload: serde_json::Value,
        candidate_payload: serde_json::Value,
        reference_payload: serde_json::Value,
    ) -> Result<bool, OracleError> {
        let deadline = Instant::now() + self.timeout;
        let mut st = self.lock();
        let id = st.next_id;
        st.next_id += 1;
        st.stage = Some(stage);
        *st.stage_queries.entry(stage).or_default() += 1;
        st.entries.insert(
            id,
            Entry {
                task: LabelTask {
                    query_id: id,
                    instance_id,
                    stage,
                    position,
                    condition_payload,
                    candidate_payload,
                    reference_payload,
                },
                verdict: None,
                leased_until: None,
            },
        );
        st.pending.push_back(id);
        self.cv.notify_all();
        loop {
            if let Some(v) = st.entries.get(&id).and_then(|e| e.verdict) {
                st.entries.remove(&id);
                return Ok(v);
            }
            let now = Instant::now();
            if now >= deadline {
                st.pending.retain(|&p| p != id);
                st.entries.remove(&id);
                return Err(OracleError::Timeout(self.timeout));
            }
            st = self.cv.wait_timeout(st, deadline - now).expect("human queue poisoned").0;
        }
    }

    /// Oldest pending task not currently leased to another labeler.
    pub fn next_task(&self) -> Option<LabelTask> {
        let mut st = self.lock();
        let now = Instant::now();
        let lease = self.lease;
        let State { pending, entries, .. } = &mut *st;
        for id in pending.iter() {
            let e = entries.get_mut(id)?;
            if e.leased_until.is_none_or(|t| t <= now) {
                e.leased_until = Some(now + lease);
                return Some(e.task.clone());
            }
        }
        None
    }

    pub fn post_verdict(&self, query_id: u64, admissible: bool) -> Result<(), VerdictError> {
        let mut st = self.lock();
        if st.answered_ids.contains(&query_id) {
            return Err(VerdictError::Conflict);
        }
        let entry = st.entries.get_mut(&query_id).ok_or(VerdictError::NotFound)?;
        entry.verdict = Some(admissible);
        st.pending.retain(|&p| p != query_id);
        st.answered_ids.insert(query_id);
        st.answered += 1;
        self.cv.notify_all();
        Ok(())
    }

    pub fn status(&self) -> QueueStatus {
        let st = self.lock();
        QueueStatus {
            pending: st.pending.len(),
            answered: st.answered,
            calibration_stage: st.stage,
            stage_queries: st.stage_queries.clone(),
        }
    }

    /// Blocks until at least one task is pending or `wait` elapses.
    pub fn wait_for_task(&self, wait: Duration) -> bool {
        let st = self.lock();
        let (st, _) = self
            .cv
            .wait_timeout_while(st, wait, |s| s.pending.is_empty())
            .expect("human queue poisoned");
        !st.pending.is_empty()
    }
}

/// Judge that forwards every question to a [`HumanQueue`].
pub struct HumanJudge {
    queue: Arc<HumanQueue>,
}

impl HumanJudge {
    pub fn new(queue: Arc<HumanQueue>) -> Self {
        Self { queue }
    }
}

impl<C, O, R> Judge<C, O, R> for HumanJudge
where
    C: Serialize,
    O: Serialize,
    R: Serialize,
{
    fn judge(&self, q: &Query<'_, C, O, R>) -> Result<Verdict, OracleError> {
        let payload = |v: serde_json::Result<serde_json::Value>| v.map_err(|e| OracleError::Unavailable(e.to_string()));
        let admissible = self.queue.ask(
            q.instance_id,
            q.stage,
            q.position,
            payload(serde_json::to_value(q.condition))?,
            payload(serde_json::to_value(q.candidate))?,
            payload(serde_json::to_value(q.reference))?,
        )?;
        Ok(Verdict {
            admissible,
            source: VerdictSource::Human,
        })
    }
}
