//! Clip-level alignment supervision: clause-clip similarity, Gaussian
//! smoothing, min-max normalization, inversion of the not-contains scores,
//! threshold binarization at `mean - 3 * sigma` of the in-span scores, the
//! temporal side mask, and the final AND fusion.
//!
//! Everything here runs in f64; scores only drop to f32 when they become
//! training targets.

use serde::{Deserialize, Serialize};

use crate::synthworld::{cosine, Embedder};
use crate::types::{EpisodeRecord, FeedbackSample, QueryRecord, TemporalCue};
use crate::{clips_in_span, Error, Result, Span};

/// Per-clip supervision for one feedback sample. Components absent from the
/// feedback's clauses are `None` and count as all-ones in the AND fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLabels {
    pub s_c: Option<Vec<f64>>,
    pub s_k: Option<Vec<f64>>,
    pub l_c: Option<Vec<u8>>,
    pub l_k: Option<Vec<u8>>,
    pub l_t: Option<Vec<u8>>,
    pub l: Vec<u8>,
}

impl AlignmentLabels {
    pub fn has_contains(&self) -> bool {
        self.s_c.is_some()
    }

    pub fn has_not_contains(&self) -> bool {
        self.s_k.is_some()
    }

    pub fn has_temporal(&self) -> bool {
        self.l_t.is_some()
    }

    pub fn clip_count(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let lens = [
            self.s_c.as_ref().map(|v| v.len()),
            self.s_k.as_ref().map(|v| v.len()),
            self.l_c.as_ref().map(|v| v.len()),
            self.l_k.as_ref().map(|v| v.len()),
            self.l_t.as_ref().map(|v| v.len()),
            Some(self.l.len()),
        ];
        if lens.iter().flatten().any(|&n| n != m) {
            return Err(Error::Config(format!("label vectors disagree with m={m}")));
        }
        if self.has_contains() != self.l_c.is_some() || self.has_not_contains() != self.l_k.is_some()
        {
            return Err(Error::Config("score/label presence disagrees".into()));
        }
        Ok(())
    }
}

/// Per clip, the mean over clause terms of cosine(clip feature, term
/// embedding), mapped from [-1, 1] to [0, 1].
pub fn clause_similarity(
    emb: &Embedder,
    clause_terms: &[String],
    ep: &EpisodeRecord,
) -> Result<Vec<f64>> {
    if clause_terms.is_empty() {
        return Err(Error::Config("clause_similarity on empty clause".into()));
    }
    let rows: Vec<&[f32]> = clause_terms
        .iter()
        .map(|t| emb.token_row(t))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(ep.clip_count);
    for c in 0..ep.clip_count {
        let feat = ep.features.row(c);
        let mean = rows
            .iter()
            .map(|r| cosine(feat, r) as f64)
            .sum::<f64>()
            / rows.len() as f64;
        out.push((mean + 1.0) / 2.0);
    }
    Ok(out)
}

fn reflect(idx: i64, m: i64) -> usize {
    // numpy-style reflect padding without edge repetition: -1 -> 1,
    // m -> m-2. Folds until the index lands inside [0, m).
    if m == 1 {
        return 0;
    }
    let period = 2 * (m - 1);
    let mut i = idx.rem_euclid(period);
    if i >= m {
        i = period - i;
    }
    i as usize
}

/// Gaussian smoothing (kernel radius `ceil(3 sigma)`, reflect padding)
/// followed by min-max normalization. A constant vector maps to all 0.5.
pub fn smooth_and_normalize(scores: &[f64], sigma: f64) -> Vec<f64> {
    let m = scores.len();
    if m == 0 {
        return Vec::new();
    }
    let smoothed = if sigma > 0.0 {
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for j in -radius..=radius {
            kernel.push((-((j * j) as f64) / (2.0 * sigma * sigma)).exp());
        }
        let z: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= z;
        }
        (0..m as i64)
            .map(|i| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(kj, &w)| {
                        let j = kj as i64 - radius;
                        w * scores[reflect(i - j, m as i64)]
                    })
                    .sum()
            })
            .collect()
    } else {
        scores.to_vec()
    };

    let min = smoothed.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return vec![0.5; m];
    }
    smoothed.iter().map(|&v| (v - min) / (max - min)).collect()
}

pub fn invert_not_contains(s_n: &[f64]) -> Vec<f64> {
    s_n.iter().map(|&v| 1.0 - v).collect()
}

/// Binary labels from the `mean - 3 * sigma` threshold over the scores inside
/// the ground-truth span. Sigma is the population standard deviation; the
/// comparison is `>=`, so a single-clip span always keeps its clip positive.
pub fn binarize(scores: &[f64], gt: Span) -> Result<Vec<u8>> {
    let clips = clips_in_span(gt, scores.len())?;
    let n = clips.len() as f64;
    let mu = clips.iter().map(|&c| scores[c]).sum::<f64>() / n;
    let var = clips
        .iter()
        .map(|&c| (scores[c] - mu) * (scores[c] - mu))
        .sum::<f64>()
        / n;
    let delta = mu - 3.0 * var.sqrt();
    Ok(scores.iter().map(|&v| u8::from(v >= delta)).collect())
}

/// Side mask relative to the reference span: `Before` marks clips entirely
/// before it, `After` clips at or past its end, `None` everything.
pub fn temporal_labels(ref_span: Span, direction: TemporalCue, m: usize) -> Vec<u8> {
    (0..m)
        .map(|i| match direction {
            TemporalCue::Before => u8::from((i + 1) as f64 <= ref_span.start),
            TemporalCue::After => u8::from(i as f64 >= ref_span.end),
            TemporalCue::None => 1,
        })
        .collect()
}

fn and(acc: &mut [u8], other: &[u8]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a &= b;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Gaussian smoothing width in clips.
    pub sigma: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { sigma: 2.0 }
    }
}

/// Full pipeline for one feedback sample: similarities for the clause types
/// it actually carries, smoothing + normalization, inversion for the
/// not-contains side, binarization against the ground truth, the temporal
/// mask, and AND fusion.
pub fn make_labels(
    sample: &FeedbackSample,
    query: &QueryRecord,
    ep: &EpisodeRecord,
    emb: &Embedder,
    cfg: &LabelConfig,
) -> Result<AlignmentLabels> {
    let m = ep.clip_count;
    let mut l = vec![1u8; m];

    let (s_c, l_c) = if sample.clauses.contains.is_empty() {
        (None, None)
    } else {
        let raw = clause_similarity(emb, &sample.clauses.contains, ep)?;
        let s = smooth_and_normalize(&raw, cfg.sigma);
        let lab = binarize(&s, query.gt_span)?;
        and(&mut l, &lab);
        (Some(s), Some(lab))
    };

    let (s_k, l_k) = if sample.clauses.not_contains.is_empty() {
        (None, None)
    } else {
        let raw = clause_similarity(emb, &sample.clauses.not_contains, ep)?;
        let s_n = smooth_and_normalize(&raw, cfg.sigma);
        let s_k = invert_not_contains(&s_n);
        let lab = binarize(&s_k, query.gt_span)?;
        and(&mut l, &lab);
        (Some(s_k), Some(lab))
    };

    let l_t = if sample.clauses.temporal == TemporalCue::None {
        None
    } else {
        let lab = temporal_labels(sample.ref_span, sample.clauses.temporal, m);
        and(&mut l, &lab);
        Some(lab)
    };

    let labels = AlignmentLabels {
        s_c,
        s_k,
        l_c,
        l_k,
        l_t,
        l,
    };
    labels.validate(m)?;
    Ok(labels)
}
