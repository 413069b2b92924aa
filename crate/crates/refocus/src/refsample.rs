//! Reference-span sampling: the four kinds of deliberately wrong spans that
//! feedback is written about.
//!
//! Random spans draw their duration from a beta prior fitted to the training
//! split's response-span durations and must be temporally disjoint from the
//! ground truth. Similar spans slide a ground-truth-sized window and keep the
//! disjoint candidate with maximal embedding cosine. Model-failure spans come
//! from a localizer's own bad predictions, and other-query spans reuse
//! disjoint ground truths from the same episode.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::localizer::SpanPrediction;
use crate::synthworld::{cosine, span_embedding};
use crate::types::{EpisodeRecord, QueryRecord};
use crate::{tiou, Error, Result, Span};

/// Beta prior over span durations, together with the min-max bounds the
/// durations were normalized with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
    pub dur_min: f64,
    pub dur_max: f64,
}

const NUDGE: f64 = 1e-6;

/// Method-of-moments beta fit on min-max normalized durations. Values landing
/// exactly on 0 or 1 after normalization are nudged inward by `1e-6`.
/// Moments use the population (divide by n) convention.
pub fn fit_beta(durations: &[f64]) -> Result<BetaParams> {
    let mut distinct = durations.to_vec();
    distinct.sort_by(|x, y| x.partial_cmp(y).expect("finite durations"));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::DegenerateDurations(format!(
            "need >= 3 distinct durations, got {}",
            distinct.len()
        )));
    }
    let dur_min = *distinct.first().expect("nonempty");
    let dur_max = *distinct.last().expect("nonempty");
    let scale = dur_max - dur_min;

    let normalized: Vec<f64> = durations
        .iter()
        .map(|&d| ((d - dur_min) / scale).clamp(NUDGE, 1.0 - NUDGE))
        .collect();
    let n = normalized.len() as f64;
    let mu = normalized.iter().sum::<f64>() / n;
    let var = normalized.iter().map(|u| (u - mu) * (u - mu)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::DegenerateDurations("zero variance".into()));
    }
    let common = mu * (1.0 - mu) / var - 1.0;
    let a = mu * common;
    let b = (1.0 - mu) * common;
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::DegenerateDurations(format!(
            "moments gave non-positive parameters a={a}, b={b}"
        )));
    }
    Ok(BetaParams {
        a,
        b,
        dur_min,
        dur_max,
    })
}

const MAX_ATTEMPTS: usize = 100;

/// Random span with beta-drawn duration and uniform center, rejection-sampled
/// until disjoint from the ground truth (up to 100 attempts).
pub fn sample_random_span(
    ep: &EpisodeRecord,
    gt: Span,
    beta: &BetaParams,
    rng_seed: u64,
) -> Result<Span> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let m = ep.clip_count as f64;
    let dist = Beta::new(beta.a, beta.b)
        .map_err(|e| Error::DegenerateDurations(format!("beta({}, {}): {e}", beta.a, beta.b)))?;
    for _ in 0..MAX_ATTEMPTS {
        let u: f64 = dist.sample(&mut rng);
        let dur = (beta.dur_min + u * (beta.dur_max - beta.dur_min)).max(1.0);
        let center = rng.gen_range(0.0..m);
        let start = (center - dur / 2.0).max(0.0);
        let end = (center + dur / 2.0).min(m);
        if end - start < 1.0 {
            continue;
        }
        let cand = Span::new(start, end)?;
        if tiou(cand, gt) == 0.0 {
            return Ok(cand);
        }
    }
    Err(Error::SamplingExhausted {
        query: format!("gt [{}, {})", gt.start, gt.end),
        attempts: MAX_ATTEMPTS,
    })
}

/// Slide a ground-truth-sized window with stride `max(1, floor(|gt|/4))`;
/// among disjoint candidates return the one whose span embedding has maximal
/// cosine with the ground truth's, earliest start on ties.
pub fn sample_similar_span(ep: &EpisodeRecord, gt: Span) -> Result<Span> {
    let m = ep.clip_count as f64;
    let dur = gt.duration().min(m);
    let stride = (dur / 4.0).floor().max(1.0);
    let gt_emb = span_embedding(ep, gt)?;

    let mut best: Option<(f32, Span)> = None;
    let mut start = 0.0;
    while start + dur <= m + 1e-9 {
        let cand = Span::new(start, (start + dur).min(m))?;
        start += stride;
        if tiou(cand, gt) != 0.0 {
            continue;
        }
        let Ok(emb) = span_embedding(ep, cand) else {
            continue;
        };
        let sim = cosine(&emb, &gt_emb);
        let better = match &best {
            None => true,
            Some((b, _)) => sim > *b,
        };
        if better {
            best = Some((sim, cand));
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| Error::NoCandidate(format!("gt [{}, {})", gt.start, gt.end)))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureMode {
    /// Keep queries where none of the top-5 predictions reaches tIoU 0.3.
    Recall5,
    /// Keep queries where the top-1 prediction has tIoU below 0.3.
    Top1,
}

const FAILURE_TIOU: f64 = 0.3;

/// Queries a localizer failed on, mapped to its top-1 prediction as the
/// reference span.
pub fn collect_failure_spans(
    preds: &BTreeMap<String, SpanPrediction>,
    gts: &BTreeMap<String, Span>,
    mode: FailureMode,
) -> BTreeMap<String, Span> {
    let mut out = BTreeMap::new();
    for (query, pred) in preds {
        let Some(&gt) = gts.get(query) else {
            continue;
        };
        if pred.ranked.is_empty() {
            continue;
        }
        let failed = match mode {
            FailureMode::Recall5 => pred
                .ranked
                .iter()
                .take(5)
                .all(|(s, _)| tiou(*s, gt) < FAILURE_TIOU),
            FailureMode::Top1 => tiou(pred.ranked[0].0, gt) < FAILURE_TIOU,
        };
        if failed {
            out.insert(query.clone(), pred.ranked[0].0);
        }
    }
    out
}

/// Ground-truth spans of the episode's other queries that are disjoint from
/// this query's ground truth.
pub fn other_query_spans(ep: &EpisodeRecord, q: &QueryRecord) -> Vec<Span> {
    ep.queries
        .iter()
        .filter(|other| other.id != q.id && tiou(other.gt_span, q.gt_span) == 0.0)
        .map(|other| other.gt_span)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, WorldConfig};

    #[test]
    fn beta_fit_matches_hand_computed_moments() {
        // durations [2,4,4,6,8,10]: normalized (nudged) values
        // [1e-6, .25, .25, .5, .75, 1-1e-6]
        let params = fit_beta(&[2.0, 4.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
        let u = [1e-6, 0.25, 0.25, 0.5, 0.75, 1.0 - 1e-6];
        let mu: f64 = u.iter().sum::<f64>() / 6.0;
        let var: f64 = u.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / 6.0;
        let common = mu * (1.0 - mu) / var - 1.0;
        assert!((params.a - mu * common).abs() < 1e-9);
        assert!((params.b - (1.0 - mu) * common).abs() < 1e-9);
        assert_eq!(params.dur_min, 2.0);
        assert_eq!(params.dur_max, 10.0);
    }

    #[test]
    fn beta_fit_is_scale_invariant() {
        let base = [2.0, 4.0, 4.0, 6.0, 8.0, 10.0];
        let scaled: Vec<f64> = base.iter().map(|d| d * 3.5).collect();
        let p1 = fit_beta(&base).unwrap();
        let p2 = fit_beta(&scaled).unwrap();
        assert!((p1.a - p2.a).abs() < 1e-9);
        assert!((p1.b - p2.b).abs() < 1e-9);
        assert!((p2.dur_min - 7.0).abs() < 1e-9);
        assert!((p2.dur_max - 35.0).abs() < 1e-9);
    }

    #[test]
    fn beta_fit_symmetric_sample_gives_equal_shapes() {
        let params = fit_beta(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((params.a - params.b).abs() < 1e-9);
    }

    #[test]
    fn beta_fit_degenerate_inputs() {
        assert!(matches!(
            fit_beta(&[3.0, 3.0, 3.0]),
            Err(Error::DegenerateDurations(_))
        ));
        assert!(matches!(
            fit_beta(&[1.0, 2.0]),
            Err(Error::DegenerateDurations(_))
        ));
    }

    #[test]
    fn beta_refit_round_trip() {
        let params = BetaParams {
            a: 2.0,
            b: 5.0,
            dur_min: 0.0,
            dur_max: 1.0,
        };
        let dist = Beta::new(params.a, params.b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let samples: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut rng)).collect();
        let refit = fit_beta(&samples).unwrap();
        // min-max renormalization of a bounded sample shifts moments a bit;
        // 15% relative recovery is the contract
        assert!((refit.a - params.a).abs() / params.a < 0.15, "a: {}", refit.a);
        assert!((refit.b - params.b).abs() / params.b < 0.15, "b: {}", refit.b);
    }

    fn test_world() -> Vec<EpisodeRecord> {
        generate_world(&WorldConfig {
            episodes: 6,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn train_beta(world: &[EpisodeRecord]) -> BetaParams {
        let durations: Vec<f64> = world
            .iter()
            .flat_map(|ep| ep.queries.iter().map(|q| q.gt_span.duration()))
            .collect();
        fit_beta(&durations).unwrap()
    }

    #[test]
    fn random_spans_are_disjoint_and_in_bounds() {
        let world = test_world();
        let ep = &world[0];
        let beta = train_beta(&world);
        let gt = Span::new(10.0, 14.0).unwrap();
        for seed in 0..1000 {
            let s = sample_random_span(ep, gt, &beta, seed).unwrap();
            assert_eq!(tiou(s, gt), 0.0, "seed {seed}: overlap");
            assert!(s.start >= 0.0 && s.end <= ep.clip_count as f64);
        }
    }

    #[test]
    fn random_span_fixed_seed_repeats() {
        let world = test_world();
        let ep = &world[0];
        let beta = train_beta(&world);
        let gt = ep.queries[0].gt_span;
        let a = sample_random_span(ep, gt, &beta, 99).unwrap();
        let b = sample_random_span(ep, gt, &beta, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_span_exhausts_when_gt_covers_episode() {
        let world = test_world();
        let ep = &world[0];
        let beta = train_beta(&world);
        let gt = Span::new(0.0, ep.clip_count as f64).unwrap();
        assert!(matches!(
            sample_random_span(ep, gt, &beta, 3),
            Err(Error::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn similar_span_is_argmax_over_strided_candidates() {
        let world = test_world();
        for ep in &world {
            for q in &ep.queries {
                let got = match sample_similar_span(ep, q.gt_span) {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                // exhaustive oracle over the same strided candidate set
                let m = ep.clip_count as f64;
                let dur = q.gt_span.duration();
                let stride = (dur / 4.0).floor().max(1.0);
                let gt_emb = span_embedding(ep, q.gt_span).unwrap();
                let mut best: Option<(f32, Span)> = None;
                let mut start = 0.0;
                while start + dur <= m + 1e-9 {
                    let cand = Span::new(start, (start + dur).min(m)).unwrap();
                    start += stride;
                    if tiou(cand, q.gt_span) != 0.0 {
                        continue;
                    }
                    if let Ok(emb) = span_embedding(ep, cand) {
                        let sim = cosine(&emb, &gt_emb);
                        if best.map(|(b, _)| sim > b).unwrap_or(true) {
                            best = Some((sim, cand));
                        }
                    }
                }
                let want = best.unwrap().1;
                assert_eq!(got, want, "query {}", q.id);
            }
        }
    }

    #[test]
    fn similar_span_lands_on_distractor_run() {
        let cfg = WorldConfig {
            ambiguity_rate: 1.0,
            noise_sigma: 0.02,
            episodes: 10,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for ep in &world {
            for q in &ep.queries {
                let Ok(similar) = sample_similar_span(ep, q.gt_span) else {
                    continue;
                };
                // the distractor run shares the event token; the sampled
                // span should hit clips carrying it
                let clips = crate::clips_in_span(similar, ep.clip_count).unwrap();
                if clips.iter().any(|&c| ep.clip_events[c].contains(&q.terms[0])) {
                    hits += 1;
                }
                total += 1;
            }
        }
        assert!(total > 0);
        assert!(
            hits as f64 / total as f64 > 0.8,
            "similar spans rarely hit the distractor: {hits}/{total}"
        );
    }

    #[test]
    fn similar_span_no_candidate_when_gt_covers_almost_all() {
        let world = test_world();
        let ep = &world[0];
        let gt = Span::new(0.0, (ep.clip_count - 3) as f64).unwrap();
        assert!(matches!(
            sample_similar_span(ep, gt),
            Err(Error::NoCandidate(_))
        ));
    }

    #[test]
    fn failure_span_modes() {
        let gt = Span::new(10.0, 14.0).unwrap();
        let mut gts = BTreeMap::new();
        gts.insert("q0".to_string(), gt);
        gts.insert("q1".to_string(), gt);

        let far = |s: f64| (Span::new(s, s + 4.0).unwrap(), 0.9f32);
        let mut preds = BTreeMap::new();
        // q0: top-1 wrong, a later candidate right
        preds.insert(
            "q0".to_string(),
            SpanPrediction {
                ranked: vec![far(30.0), (gt, 0.5)],
            },
        );
        // q1: everything wrong
        preds.insert(
            "q1".to_string(),
            SpanPrediction {
                ranked: vec![far(30.0), far(36.0), far(42.0), far(48.0), far(54.0)],
            },
        );

        let recall5 = collect_failure_spans(&preds, &gts, FailureMode::Recall5);
        assert!(!recall5.contains_key("q0"));
        assert_eq!(recall5.get("q1"), Some(&Span::new(30.0, 34.0).unwrap()));

        let top1 = collect_failure_spans(&preds, &gts, FailureMode::Top1);
        assert!(top1.contains_key("q0"));
        assert!(top1.contains_key("q1"));

        // perfect predictions -> empty
        let mut perfect = BTreeMap::new();
        perfect.insert(
            "q0".to_string(),
            SpanPrediction {
                ranked: vec![(gt, 1.0)],
            },
        );
        assert!(collect_failure_spans(&perfect, &gts, FailureMode::Recall5).is_empty());

        // mixed tIoUs [0.1, 0.0, 0.2, 0.0, 0.1] -> included under both
        let mk = |start: f64, dur: f64| Span::new(start, start + dur).unwrap();
        // gt [10,14): tiou 0.1 -> overlap spans constructed directly
        let near = vec![
            (mk(13.3, 4.0), 0.9f32), // small overlap
            (mk(20.0, 4.0), 0.8),
            (mk(12.6, 4.0), 0.7),
            (mk(30.0, 4.0), 0.6),
            (mk(13.4, 4.0), 0.5),
        ];
        for (s, _) in &near {
            assert!(tiou(*s, gt) < 0.3);
        }
        let mut mixed = BTreeMap::new();
        mixed.insert("q0".to_string(), SpanPrediction { ranked: near });
        assert!(collect_failure_spans(&mixed, &gts, FailureMode::Recall5).contains_key("q0"));
        assert!(collect_failure_spans(&mixed, &gts, FailureMode::Top1).contains_key("q0"));
    }

    #[test]
    fn other_query_spans_rules() {
        let world = test_world();
        let mut checked_pair = false;
        for ep in &world {
            for q in &ep.queries {
                let spans = other_query_spans(ep, q);
                for s in &spans {
                    assert_eq!(tiou(*s, q.gt_span), 0.0);
                }
                if ep.queries.len() == 1 {
                    assert!(spans.is_empty());
                }
                if ep.queries.len() >= 2 {
                    checked_pair = true;
                }
            }
        }
        assert!(checked_pair);
    }
}
