//! Recall-at-tIoU metrics and the experiment runners: single-turn deltas
//! against query-only, multi-turn curves with repeated subsampling, and the
//! noisy-feedback recovery protocol.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::feedbackgen::{
    make_simple_temporal, make_simple_temporal_flipped, FeedbackTemplateBank,
};
use crate::localizer::{RefocusStack, SpanPrediction};
use crate::synthworld::Embedder;
use crate::types::{EpisodeRecord, FeedbackSample, QueryRecord, RefKind};
use crate::{tiou, Error, Result, Span};

pub const RECALL_KS: [usize; 2] = [1, 5];
pub const TIOU_THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// 1 iff any of the top-`min(k, len)` spans reaches the tIoU threshold.
pub fn recall_at_k(preds: &SpanPrediction, gt: Span, k: usize, tiou_thresh: f64) -> Result<u8> {
    if preds.ranked.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let hit = preds
        .ranked
        .iter()
        .take(k.min(preds.ranked.len()))
        .any(|(s, _)| tiou(*s, gt) >= tiou_thresh);
    Ok(u8::from(hit))
}

/// Anything that can answer queries with or without feedback.
pub trait PredictRunner {
    fn predict(
        &self,
        ep: &EpisodeRecord,
        q: &QueryRecord,
        feedback: Option<&FeedbackSample>,
    ) -> Result<SpanPrediction>;

    fn predict_multi(
        &self,
        ep: &EpisodeRecord,
        q: &QueryRecord,
        feedbacks: &[FeedbackSample],
    ) -> Result<SpanPrediction>;
}

impl PredictRunner for RefocusStack {
    fn predict(
        &self,
        ep: &EpisodeRecord,
        q: &QueryRecord,
        feedback: Option<&FeedbackSample>,
    ) -> Result<SpanPrediction> {
        RefocusStack::predict(self, ep, q, feedback)
    }

    fn predict_multi(
        &self,
        ep: &EpisodeRecord,
        q: &QueryRecord,
        feedbacks: &[FeedbackSample],
    ) -> Result<SpanPrediction> {
        RefocusStack::predict_multi(self, ep, q, feedbacks)
    }
}

/// Evaluation view over a world plus its feedback pool, keyed by query in a
/// stable order. Queries without feedback are dropped from both modes so
/// deltas stay paired.
pub struct EvalSet<'a> {
    pub world: &'a [EpisodeRecord],
    pub entries: Vec<EvalEntry<'a>>,
}

pub struct EvalEntry<'a> {
    pub episode: usize,
    pub query: usize,
    pub feedbacks: Vec<&'a FeedbackSample>,
}

impl<'a> EvalSet<'a> {
    pub fn build(world: &'a [EpisodeRecord], samples: &'a [FeedbackSample]) -> Self {
        let mut index: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (e, ep) in world.iter().enumerate() {
            for (qi, q) in ep.queries.iter().enumerate() {
                index.insert(q.id.clone(), (e, qi));
            }
        }
        let mut grouped: BTreeMap<String, Vec<&FeedbackSample>> = BTreeMap::new();
        for s in samples {
            grouped.entry(s.query_id.clone()).or_default().push(s);
        }
        let entries = grouped
            .into_iter()
            .filter_map(|(qid, feedbacks)| {
                index.get(&qid).map(|&(episode, query)| EvalEntry {
                    episode,
                    query,
                    feedbacks,
                })
            })
            .collect();
        Self { world, entries }
    }

    fn query(&self, entry: &EvalEntry<'_>) -> (&EpisodeRecord, &QueryRecord) {
        let ep = &self.world[entry.episode];
        (ep, &ep.queries[entry.query])
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    QueryOnly,
    WithFeedback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub group: String,
    pub k: usize,
    pub tiou: f64,
    pub value: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitReport {
    pub mode: EvalMode,
    pub n_queries: usize,
    pub rows: Vec<MetricRow>,
}

impl SplitReport {
    pub fn value(&self, group: &str, k: usize, tiou: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.k == k && r.tiou == tiou)
            .map(|r| r.value)
    }
}

#[derive(Default, Clone)]
struct Tally {
    hits: [[f64; 2]; 2],
    count: usize,
}

impl Tally {
    fn add(&mut self, preds: &SpanPrediction, gt: Span) -> Result<()> {
        for (ki, &k) in RECALL_KS.iter().enumerate() {
            for (ti, &t) in TIOU_THRESHOLDS.iter().enumerate() {
                self.hits[ki][ti] += recall_at_k(preds, gt, k, t)? as f64;
            }
        }
        self.count += 1;
        Ok(())
    }

    fn rows(&self, group: &str) -> Vec<MetricRow> {
        let mut out = Vec::with_capacity(4);
        for (ki, &k) in RECALL_KS.iter().enumerate() {
            for (ti, &t) in TIOU_THRESHOLDS.iter().enumerate() {
                out.push(MetricRow {
                    group: group.to_string(),
                    k,
                    tiou: t,
                    value: if self.count == 0 {
                        0.0
                    } else {
                        self.hits[ki][ti] / self.count as f64
                    },
                    count: self.count,
                });
            }
        }
        out
    }
}

/// Mean recall per (k, threshold). `WithFeedback` averages over every
/// feedback instance, reports the paired query-only numbers and their
/// deltas, and breaks results down by reference-span kind and relevance.
pub fn evaluate_split<R: PredictRunner>(
    runner: &R,
    set: &EvalSet<'_>,
    mode: EvalMode,
) -> Result<SplitReport> {
    if set.entries.is_empty() {
        return Err(Error::Config("evaluation set has no queries".into()));
    }
    let mut query_only = Tally::default();
    for entry in &set.entries {
        let (ep, q) = set.query(entry);
        let preds = runner.predict(ep, q, None)?;
        query_only.add(&preds, q.gt_span)?;
    }
    if mode == EvalMode::QueryOnly {
        return Ok(SplitReport {
            mode,
            n_queries: set.entries.len(),
            rows: query_only.rows("query_only"),
        });
    }

    let mut with_feedback = Tally::default();
    let mut by_kind: BTreeMap<&'static str, Tally> = BTreeMap::new();
    let mut by_relevance: BTreeMap<&'static str, Tally> = BTreeMap::new();
    for entry in &set.entries {
        let (ep, q) = set.query(entry);
        for fb in &entry.feedbacks {
            let preds = runner.predict(ep, q, Some(fb))?;
            with_feedback.add(&preds, q.gt_span)?;
            by_kind
                .entry(fb.ref_kind.label())
                .or_default()
                .add(&preds, q.gt_span)?;
            let rel = if fb.ref_kind.query_relevant() {
                "query_relevant"
            } else {
                "query_irrelevant"
            };
            by_relevance.entry(rel).or_default().add(&preds, q.gt_span)?;
        }
    }

    let mut rows = with_feedback.rows("with_feedback");
    rows.extend(query_only.rows("query_only"));
    for (ki, &k) in RECALL_KS.iter().enumerate() {
        for (ti, &t) in TIOU_THRESHOLDS.iter().enumerate() {
            let wf = with_feedback.hits[ki][ti] / with_feedback.count.max(1) as f64;
            let qo = query_only.hits[ki][ti] / query_only.count.max(1) as f64;
            rows.push(MetricRow {
                group: "delta".into(),
                k,
                tiou: t,
                value: wf - qo,
                count: with_feedback.count,
            });
        }
    }
    for (kind, tally) in &by_kind {
        rows.extend(tally.rows(&format!("kind:{kind}")));
    }
    for (rel, tally) in &by_relevance {
        rows.extend(tally.rows(&format!("relevance:{rel}")));
    }
    Ok(SplitReport {
        mode,
        n_queries: set.entries.len(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub k: usize,
    pub tiou: f64,
    pub mean: f64,
    pub std: f64,
}

/// Multi-turn curve: for each n, average recall over `samplings` random
/// n-subsets of each query's feedback pool (without replacement).
pub fn multi_turn_eval<R: PredictRunner>(
    runner: &R,
    set: &EvalSet<'_>,
    n_max: usize,
    samplings: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    for entry in &set.entries {
        if entry.feedbacks.len() < n_max {
            let (_, q) = set.query(entry);
            return Err(Error::InsufficientFeedback {
                query: q.id.clone(),
                have: entry.feedbacks.len(),
                need: n_max,
            });
        }
    }
    let mut points = Vec::new();
    for n in 1..=n_max {
        // recall sums per sampling round: [sampling][k][t]
        let mut rounds: Vec<[[f64; 2]; 2]> = Vec::with_capacity(samplings);
        for s in 0..samplings {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64) << 8 ^ (s as u64) << 24);
            let mut tally = Tally::default();
            for entry in &set.entries {
                let (ep, q) = set.query(entry);
                let mut idx: Vec<usize> = (0..entry.feedbacks.len()).collect();
                idx.shuffle(&mut rng);
                let chosen: Vec<FeedbackSample> = idx[..n]
                    .iter()
                    .map(|&i| entry.feedbacks[i].clone())
                    .collect();
                let preds = runner.predict_multi(ep, q, &chosen)?;
                tally.add(&preds, q.gt_span)?;
            }
            let c = tally.count.max(1) as f64;
            let mut round = [[0.0; 2]; 2];
            for ki in 0..2 {
                for ti in 0..2 {
                    round[ki][ti] = tally.hits[ki][ti] / c;
                }
            }
            rounds.push(round);
        }
        for (ki, &k) in RECALL_KS.iter().enumerate() {
            for (ti, &t) in TIOU_THRESHOLDS.iter().enumerate() {
                let vals: Vec<f64> = rounds.iter().map(|r| r[ki][ti]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / vals.len() as f64;
                points.push(CurvePoint {
                    n,
                    k,
                    tiou: t,
                    mean,
                    std: var.sqrt(),
                });
            }
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnPoint {
    pub turn: usize,
    pub correct_feedback: usize,
    pub k: usize,
    pub tiou: f64,
    pub value: f64,
}

/// Noisy-feedback recovery: turn 1 is a direction-flipped simple temporal
/// statement, later turns append correct feedback from the query's pool.
/// `flip = false` is the control where turn 1 points the right way.
pub fn noisy_recovery_eval<R: PredictRunner>(
    runner: &R,
    set: &EvalSet<'_>,
    emb: &Embedder,
    bank: &FeedbackTemplateBank,
    seed: u64,
    flip: bool,
) -> Result<Vec<TurnPoint>> {
    let max_correct = 3usize;
    let mut tallies: Vec<Tally> = vec![Tally::default(); max_correct + 1];
    for entry in &set.entries {
        let (ep, q) = set.query(entry);
        // reference for the temporal statement: prefer the pool's simple
        // temporal turn, else any disjoint reference span
        let st_ref = entry
            .feedbacks
            .iter()
            .find(|f| f.ref_kind == RefKind::SimpleTemporal)
            .map(|f| f.ref_span)
            .or_else(|| {
                entry
                    .feedbacks
                    .iter()
                    .map(|f| f.ref_span)
                    .find(|r| !r.overlaps(&q.gt_span))
            });
        let Some(st_ref) = st_ref else {
            continue;
        };
        let st_seed = seed ^ entry.episode as u64 ^ ((entry.query as u64) << 17);
        let first = if flip {
            make_simple_temporal_flipped(emb, &q.id, q.gt_span, st_ref, bank, st_seed)?
        } else {
            make_simple_temporal(emb, &q.id, q.gt_span, st_ref, bank, st_seed)?
        };

        let mut pool: Vec<FeedbackSample> = entry
            .feedbacks
            .iter()
            .filter(|f| f.ref_kind != RefKind::SimpleTemporal)
            .map(|&f| f.clone())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(st_seed.wrapping_add(1));
        pool.shuffle(&mut rng);

        let mut turns = vec![first];
        for t in 0..=max_correct.min(pool.len()) {
            if t > 0 {
                turns.push(pool[t - 1].clone());
            }
            let preds = runner.predict_multi(ep, q, &turns)?;
            tallies[t].add(&preds, q.gt_span)?;
        }
    }
    let mut out = Vec::new();
    for (t, tally) in tallies.iter().enumerate() {
        for row in tally.rows("noisy") {
            out.push(TurnPoint {
                turn: t + 1,
                correct_feedback: t,
                k: row.k,
                tiou: row.tiou,
                value: row.value,
            });
        }
    }
    Ok(out)
}
