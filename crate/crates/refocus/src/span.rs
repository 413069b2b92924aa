//! Span geometry. Spans are half-open real intervals in clip units; one clip
//! is one time unit, so clip `i` occupies `[i, i+1)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidSpan(format!("non-finite [{start}, {end})")));
        }
        if start < 0.0 {
            return Err(Error::InvalidSpan(format!("negative start {start}")));
        }
        if start >= end {
            return Err(Error::InvalidSpan(format!("empty interval [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// End never exceeds the clip count of the episode the span is bound to.
    pub fn fits(&self, clip_count: usize) -> bool {
        self.end <= clip_count as f64
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

pub fn span_duration(a: Span) -> f64 {
    a.duration()
}

/// Temporal intersection-over-union of two valid spans.
pub fn tiou(a: Span, b: Span) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    inter / union
}

/// Clip indices whose interval `[i, i+1)` overlaps the span by strictly more
/// than half a clip.
///
/// A span of duration >= 1 that happens to straddle clip boundaries at exact
/// half overlaps would come out empty under the strict rule; for those the
/// single highest-overlap clip (earliest on ties) is returned instead, so
/// only sub-clip spans can fail.
pub fn clips_in_span(a: Span, m: usize) -> Result<Vec<usize>> {
    let lo = a.start.floor().max(0.0) as usize;
    let hi = (a.end.ceil().max(0.0) as usize).min(m);
    let overlap = |i: usize| -> f64 { (a.end.min((i + 1) as f64) - a.start.max(i as f64)).max(0.0) };
    let mut out: Vec<usize> = (lo..hi).filter(|&i| overlap(i) > 0.5).collect();
    if out.is_empty() {
        if a.duration() >= 1.0 && lo < hi {
            let best = (lo..hi)
                .max_by(|&x, &y| overlap(x).partial_cmp(&overlap(y)).expect("finite overlaps"))
                .expect("non-empty clip range");
            // max_by keeps the last maximum; scan for the earliest tie.
            let best_val = overlap(best);
            let earliest = (lo..hi).find(|&i| overlap(i) == best_val).expect("tie exists");
            out.push(earliest);
        } else {
            return Err(Error::DegenerateSpan([a.start, a.end]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(a: f64, b: f64) -> Span {
        Span::new(a, b).unwrap()
    }

    #[test]
    fn tiou_identical_spans() {
        assert_eq!(tiou(s(3.0, 7.0), s(3.0, 7.0)), 1.0);
    }

    #[test]
    fn tiou_disjoint_half_open() {
        assert_eq!(tiou(s(0.0, 5.0), s(5.0, 9.0)), 0.0);
    }

    #[test]
    fn tiou_partial_overlap() {
        let v = tiou(s(0.0, 10.0), s(5.0, 15.0));
        assert!((v - 5.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn durations() {
        assert_eq!(span_duration(s(2.0, 6.0)), 4.0);
        assert_eq!(span_duration(s(0.0, 1.0)), 1.0);
        assert_eq!(span_duration(s(1.5, 2.75)), 1.25);
    }

    #[test]
    fn clips_basic() {
        assert_eq!(clips_in_span(s(2.0, 5.0), 10).unwrap(), vec![2, 3, 4]);
        assert_eq!(clips_in_span(s(0.0, 1.0), 4).unwrap(), vec![0]);
    }

    #[test]
    fn clips_half_overlap_rule() {
        // [2.6, 4.4): clip 2 overlaps 0.4, clip 3 overlaps 1.0, clip 4 overlaps 0.4
        assert_eq!(clips_in_span(s(2.6, 4.4), 10).unwrap(), vec![3]);
    }

    #[test]
    fn clips_whole_unit_span_never_empty() {
        // exact half overlaps on both sides; falls back to max overlap
        assert_eq!(clips_in_span(s(2.5, 3.5), 10).unwrap(), vec![2]);
    }

    #[test]
    fn sub_clip_span_is_degenerate() {
        assert!(matches!(
            clips_in_span(s(2.3, 2.7), 10),
            Err(Error::DegenerateSpan(_))
        ));
    }

    #[test]
    fn invalid_spans_rejected() {
        assert!(Span::new(3.0, 3.0).is_err());
        assert!(Span::new(5.0, 2.0).is_err());
        assert!(Span::new(-1.0, 2.0).is_err());
        assert!(Span::new(f64::NAN, 2.0).is_err());
    }

    fn arb_span() -> impl Strategy<Value = Span> {
        (0.0f64..100.0, 0.01f64..50.0).prop_map(|(a, d)| s(a, a + d))
    }

    proptest! {
        #[test]
        fn tiou_symmetric(a in arb_span(), b in arb_span()) {
            prop_assert_eq!(tiou(a, b), tiou(b, a));
        }

        #[test]
        fn tiou_bounded(a in arb_span(), b in arb_span()) {
            let v = tiou(a, b);
            prop_assert!((0.0..=1.0).contains(&v));
            if v == 1.0 {
                prop_assert_eq!(a, b);
            }
            if !a.overlaps(&b) {
                prop_assert_eq!(v, 0.0);
            } else {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn tiou_nesting_monotone(start in 0.0f64..50.0, d1 in 0.1f64..5.0, d2 in 0.1f64..5.0, d3 in 0.1f64..5.0) {
            // a ⊆ b ⊆ c sharing a start
            let a = s(start, start + d1);
            let b = s(start, start + d1 + d2);
            let c = s(start, start + d1 + d2 + d3);
            prop_assert!(tiou(b, c) >= tiou(a, c));
        }

        #[test]
        fn clips_are_within_bounds(a in arb_span()) {
            if let Ok(clips) = clips_in_span(a, 120) {
                prop_assert!(!clips.is_empty());
                prop_assert!(clips.iter().all(|&i| i < 120));
                prop_assert!(clips.windows(2).all(|w| w[0] < w[1]));
            } else {
                prop_assert!(a.duration() < 1.0);
            }
        }
    }
}
