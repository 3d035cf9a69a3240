//! Greedy sub-sampling filters: farthest-point diversity, max-quality and the
//! threshold-free duplicate removal.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ContractError, NoCandidates};
use crate::nonconformity::{update_diversity, update_quality, NonConformityState, UpdateRule};

/// A generated output together with its identity within one prediction and
/// its (clamped) quality estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<O> {
    /// Draw index within the instance; two candidates with equal outputs
    /// are still distinct members of a set.
    pub id: usize,
    pub output: O,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet<O> {
    pub items: Vec<Candidate<O>>,
    pub source_stage: usize,
}

impl<O> PredictionSet<O> {
    pub fn new(source_stage: usize) -> Self {
        Self {
            items: Vec::new(),
            source_stage,
        }
    }

    pub fn from_items(items: Vec<Candidate<O>>, source_stage: usize) -> Self {
        Self { items, source_stage }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains_id(&self, id: usize) -> bool {
        self.items.iter().any(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.items.iter().map(|c| c.id).collect()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &O> {
        self.items.iter().map(|c| &c.output)
    }

    /// True when every member of `self` is a member of `other`.
    pub fn is_subset_of(&self, other: &PredictionSet<O>) -> bool {
        let ids: HashSet<usize> = other.items.iter().map(|c| c.id).collect();
        self.items.iter().all(|c| ids.contains(&c.id))
    }
}

type DistanceFn<O> = dyn Fn(&O, &O) -> f64 + Send + Sync;
type EquivalenceFn<O> = dyn Fn(&O, &O) -> bool + Send + Sync;

/// A distance with a declared upper bound `d_max`.
pub struct Metric<O> {
    d: Arc<DistanceFn<O>>,
    pub d_max: f64,
    pub nonnegative: bool,
}

impl<O> Clone for Metric<O> {
    fn clone(&self) -> Self {
        Self {
            d: Arc::clone(&self.d),
            d_max: self.d_max,
            nonnegative: self.nonnegative,
        }
    }
}

impl<O> fmt::Debug for Metric<O> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Metric")
            .field("d_max", &self.d_max)
            .field("nonnegative", &self.nonnegative)
            .finish_non_exhaustive()
    }
}

impl<O: 'static> Metric<O> {
    /// A nonnegative metric bounded by `d_max`.
    pub fn new(d: impl Fn(&O, &O) -> f64 + Send + Sync + 'static, d_max: f64) -> Self {
        Self {
            d: Arc::new(d),
            d_max,
            nonnegative: true,
        }
    }

    /// `d = -sim` for a similarity in `[0, 1]`; `d_max = 1`.
    pub fn negated_similarity(sim: impl Fn(&O, &O) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            d: Arc::new(move |a, b| -sim(a, b)),
            d_max: 1.0,
            nonnegative: false,
        }
    }

    /// Wraps an unbounded nonnegative distance as `-1 / (1 + d)`, which lies in `[-1, 0)`.
    pub fn bounded(d: impl Fn(&O, &O) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            d: Arc::new(move |a, b| bounded_distance(d(a, b))),
            d_max: 1.0,
            nonnegative: false,
        }
    }
}

impl<O> Metric<O> {
    pub fn distance(&self, a: &O, b: &O) -> f64 {
        (self.d)(a, b)
    }

    /// Distance with the declared contract enforced.
    pub fn checked(&self, a: &O, b: &O) -> Result<f64, ContractError> {
        let d = self.distance(a, b);
        if self.nonnegative && d < 0.0 {
            return Err(ContractError::NegativeDistance { distance: d });
        }
        if d > self.d_max {
            return Err(ContractError::DistanceAboveBound {
                distance: d,
                d_max: self.d_max,
            });
        }
        Ok(d)
    }
}

pub fn bounded_distance(d: f64) -> f64 {
    -1.0 / (1.0 + d)
}

/// Equivalence predicate used by duplicate removal.
pub struct Equivalence<O>(Arc<EquivalenceFn<O>>);

impl<O> Clone for Equivalence<O> {
    fn clone(&self) -> Self {
        Self(Arc::clone(&self.0))
    }
}

impl<O> fmt::Debug for Equivalence<O> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Equivalence(..)")
    }
}

impl<O: 'static> Equivalence<O> {
    pub fn new(eq: impl Fn(&O, &O) -> bool + Send + Sync + 'static) -> Self {
        Self(Arc::new(eq))
    }
}

impl<O: PartialEq + 'static> Equivalence<O> {
    pub fn identity() -> Self {
        Self::new(|a: &O, b: &O| a == b)
    }
}

impl<O> Equivalence<O> {
    pub fn equivalent(&self, a: &O, b: &O) -> bool {
        (self.0)(a, b)
    }
}

#[derive(Debug, Clone)]
pub enum FilterKind<O> {
    Diversity(Metric<O>),
    Quality,
    /// Threshold-free; consumes no calibration data.
    Dedup(Equivalence<O>),
}

impl<O> FilterKind<O> {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Diversity(_) => "diversity",
            FilterKind::Quality => "quality",
            FilterKind::Dedup(_) => "dedup",
        }
    }

    pub fn is_calibrated(&self) -> bool {
        !matches!(self, FilterKind::Dedup(_))
    }

    /// The non-conformity rule paired with this filter, if any.
    pub fn rule(&self) -> Option<UpdateRule> {
        match self {
            FilterKind::Diversity(m) => Some(UpdateRule::Diversity { d_max: m.d_max }),
            FilterKind::Quality => Some(UpdateRule::Quality),
            FilterKind::Dedup(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterSpec<O> {
    pub kind: FilterKind<O>,
    /// 1-based position in the pipeline (generation is stage 0).
    pub order_index: usize,
}

impl<O> FilterSpec<O> {
    pub fn new(kind: FilterKind<O>, order_index: usize) -> Self {
        Self { kind, order_index }
    }
}

/// Farthest-point step: a uniform pick when `current` is empty, otherwise the
/// element of `previous \ current` maximizing its min distance to `current`
/// (ties to the earliest position in `previous`).
pub fn sub_sample_diversity<'a, O>(
    current: &PredictionSet<O>,
    previous: &'a PredictionSet<O>,
    metric: &Metric<O>,
    rng: &mut ChaCha8Rng,
) -> Result<&'a Candidate<O>, NoCandidates> {
    let remaining: Vec<&Candidate<O>> = previous
        .items
        .iter()
        .filter(|c| !current.contains_id(c.id))
        .collect();
    if remaining.is_empty() {
        return Err(NoCandidates);
    }
    if current.is_empty() {
        return Ok(remaining[rng.random_range(0..remaining.len())]);
    }
    let mut best = remaining[0];
    let mut best_d = f64::NEG_INFINITY;
    for c in remaining {
        let d = current
            .items
            .iter()
            .map(|m| metric.distance(&c.output, &m.output))
            .fold(f64::INFINITY, f64::min);
        if d > best_d {
            best_d = d;
            best = c;
        }
    }
    Ok(best)
}

/// Max-quality step, ties to the earliest position in `previous`.
pub fn sub_sample_quality<'a, O>(
    current: &PredictionSet<O>,
    previous: &'a PredictionSet<O>,
) -> Result<&'a Candidate<O>, NoCandidates> {
    let mut best: Option<&Candidate<O>> = None;
    for c in previous.items.iter().filter(|c| !current.contains_id(c.id)) {
        if best.is_none_or(|b| c.quality > b.quality) {
            best = Some(c);
        }
    }
    best.ok_or(NoCandidates)
}

/// Keeps the first member of each equivalence class, in order.
pub fn dedup<O: Clone>(previous: &PredictionSet<O>, eq: &Equivalence<O>) -> PredictionSet<O> {
    let mut kept: Vec<Candidate<O>> = Vec::with_capacity(previous.len());
    for c in &previous.items {
        if !kept.iter().any(|k| eq.equivalent(&k.output, &c.output)) {
            kept.push(c.clone());
        }
    }
    PredictionSet::from_items(kept, previous.source_stage + 1)
}

/// LCS-based F-measure between two token sequences; 0 if either is empty.
pub fn lcs_similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    let lcs = row[b.len()] as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / a.len() as f64;
    let precision = lcs / b.len() as f64;
    2.0 * recall * precision / (recall + precision)
}

/// Whitespace tokenization for [`lcs_similarity`] on text.
pub fn text_similarity(a: &str, b: &str) -> f64 {
    let ta: Vec<&str> = a.split_whitespace().collect();
    let tb: Vec<&str> = b.split_whitespace().collect();
    lcs_similarity(&ta, &tb)
}

/// Incremental greedy order over a previous-stage set, shared by prediction
/// and filter calibration. Each call to [`GreedyCursor::next_pick`] selects the
/// next element, applies the filter's update and marks it taken.
pub(crate) struct GreedyCursor<'a, O> {
    previous: &'a [Candidate<O>],
    kind: &'a FilterKind<O>,
    taken: Vec<bool>,
    // diversity: min distance from each element to the picked set
    min_dist: Vec<f64>,
    picked: usize,
    pub(crate) state: NonConformityState,
}

impl<'a, O> GreedyCursor<'a, O> {
    pub(crate) fn new(previous: &'a [Candidate<O>], kind: &'a FilterKind<O>) -> Self {
        Self {
            previous,
            kind,
            taken: vec![false; previous.len()],
            min_dist: vec![f64::INFINITY; previous.len()],
            picked: 0,
            state: NonConformityState::new(),
        }
    }

    pub(crate) fn exhausted(&self) -> bool {
        self.picked == self.previous.len()
    }

    /// Returns the index (into `previous`) of the next pick, or `None` once exhausted.
    pub(crate) fn next_pick(&mut self, rng: &mut ChaCha8Rng) -> Result<Option<usize>, ContractError> {
        if self.exhausted() {
            return Ok(None);
        }
        let idx = match self.kind {
            FilterKind::Diversity(metric) => {
                let idx = if self.picked == 0 {
                    rng.random_range(0..self.previous.len())
                } else {
                    self.argmax_untaken(|i| self.min_dist[i])
                };
                self.state = update_diversity(self.state, [self.min_dist[idx]], metric.d_max, metric.nonnegative)?;
                let chosen = &self.previous[idx].output;
                for (i, c) in self.previous.iter().enumerate() {
                    if !self.taken[i] && i != idx {
                        let d = metric.checked(&c.output, chosen)?;
                        self.min_dist[i] = self.min_dist[i].min(d);
                    }
                }
                idx
            }
            FilterKind::Quality => {
                let idx = self.argmax_untaken(|i| self.previous[i].quality);
                self.state = update_quality(self.state, self.previous[idx].quality);
                idx
            }
            FilterKind::Dedup(_) => return Err(ContractError::WrongRule("dedup")),
        };
        self.taken[idx] = true;
        self.picked += 1;
        Ok(Some(idx))
    }

    fn argmax_untaken(&self, key: impl Fn(usize) -> f64) -> usize {
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..self.previous.len() {
            if self.taken[i] {
                continue;
            }
            let v = key(i);
            if best == usize::MAX || v > best_v {
                best = i;
                best_v = v;
            }
        }
        best
    }
}
