//! Seeded synthetic episode generator plus the deterministic token embedder
//! that stands in for pretrained video/text encoders.
//!
//! Episodes are tilings of contiguous event runs. Each run carries one event
//! token and up to two attribute tokens; a clip's feature is the unit-norm
//! noisy mean of its tokens' embeddings, so clause-to-clip cosine similarity
//! behaves like encoder similarity while staying fully controllable.
//!
//! Ambiguity is engineered: at `ambiguity_rate`, a query's target event also
//! occurs in a disjoint distractor run with different attributes, which is
//! exactly the situation user feedback has to resolve.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tensorcore::TensorData;

use crate::types::{EpisodeRecord, QueryRecord};
use crate::{clips_in_span, Error, Result, Span};

/// Reserved direction tokens; they embed temporal cues in feedback.
pub const TOKEN_BEFORE: &str = "before";
pub const TOKEN_AFTER: &str = "after";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub episodes: usize,
    /// Inclusive range of clips per episode.
    pub clips_per_episode: (usize, usize),
    /// Inclusive range of distinct events per episode.
    pub events_per_episode: (usize, usize),
    /// Inclusive range of queries per episode.
    pub queries_per_episode: (usize, usize),
    /// Fraction of queries whose target event also occurs elsewhere with
    /// different attributes.
    pub ambiguity_rate: f64,
    pub noise_sigma: f64,
    pub max_query_terms: usize,
    /// First episode stream index; splits of one world share a seed (and so
    /// a token table) but window disjoint episode streams.
    pub episode_offset: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vocab_size: 256,
            embed_dim: 32,
            episodes: 120,
            clips_per_episode: (40, 80),
            events_per_episode: (5, 9),
            queries_per_episode: (2, 3),
            ambiguity_rate: 0.7,
            noise_sigma: 0.05,
            max_query_terms: 4,
            episode_offset: 0,
        }
    }
}

const RUN_LEN_MIN: usize = 2;
const RUN_LEN_MAX: usize = 6;

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.embed_dim < 8 {
            return err(format!("embed_dim {} < 8", self.embed_dim));
        }
        if self.episodes == 0 {
            return err("episodes must be positive".into());
        }
        let ranges = [
            ("clips_per_episode", self.clips_per_episode),
            ("events_per_episode", self.events_per_episode),
            ("queries_per_episode", self.queries_per_episode),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return err(format!("{name} range ({lo}, {hi}) is empty"));
            }
        }
        if self.events_per_episode.0 < 2 {
            return err("events_per_episode min must be >= 2".into());
        }
        if self.clips_per_episode.0 < 4 * RUN_LEN_MAX {
            return err(format!(
                "clips_per_episode min {} cannot hold enough event runs (need >= {})",
                self.clips_per_episode.0,
                4 * RUN_LEN_MAX
            ));
        }
        if self.vocab_size < 2 * self.events_per_episode.1 + 2 {
            return err(format!(
                "vocab_size {} < 2 x max events per episode + direction tokens",
                self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return err(format!("ambiguity_rate {} outside [0,1]", self.ambiguity_rate));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return err(format!("noise_sigma {} invalid", self.noise_sigma));
        }
        if self.max_query_terms == 0 {
            return err("max_query_terms must be positive".into());
        }
        Ok(())
    }
}

/// Fixed unit-norm token table derived from the world seed.
pub struct Embedder {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    table: TensorData<f32>,
    n_events: usize,
}

impl Embedder {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let content = cfg.vocab_size - 2;
        let n_events = content / 2;
        let mut tokens = vec![TOKEN_BEFORE.to_string(), TOKEN_AFTER.to_string()];
        tokens.extend((0..n_events).map(|i| format!("ev{i:03}")));
        tokens.extend((0..content - n_events).map(|i| format!("at{i:03}")));

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut data = Vec::with_capacity(tokens.len() * d);
        for _ in 0..tokens.len() {
            let mut row: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            for v in &mut row {
                *v /= norm;
            }
            data.extend(row);
        }
        let table = TensorData::matrix(tokens.len(), d, data)?;
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            tokens,
            index,
            table,
            n_events,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(term)
    }

    pub fn event_tokens(&self) -> &[String] {
        &self.tokens[2..2 + self.n_events]
    }

    pub fn attribute_tokens(&self) -> &[String] {
        &self.tokens[2 + self.n_events..]
    }

    pub fn token_row(&self, term: &str) -> Result<&[f32]> {
        let &i = self
            .index
            .get(term)
            .ok_or_else(|| Error::UnknownToken(term.to_string()))?;
        Ok(self.table.row(i))
    }

    /// Row `i` of the result is the table row for `terms[i]`.
    pub fn embed_terms(&self, terms: &[String]) -> Result<TensorData<f32>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(terms.len() * d);
        for t in terms {
            data.extend_from_slice(self.token_row(t)?);
        }
        Ok(TensorData::matrix(terms.len(), d, data)?)
    }

    /// Mean of term embeddings; the clause-level text representation.
    pub fn embed_mean(&self, terms: &[String]) -> Result<Vec<f32>> {
        if terms.is_empty() {
            return Err(Error::Config("embed_mean of no terms".into()));
        }
        let d = self.dim();
        let mut mean = vec![0.0f32; d];
        for t in terms {
            for (m, v) in mean.iter_mut().zip(self.token_row(t)?) {
                *m += v;
            }
        }
        let n = terms.len() as f32;
        for m in &mut mean {
            *m /= n;
        }
        Ok(mean)
    }
}

/// Mean of clip feature rows over the clips the span covers.
pub fn span_embedding(ep: &EpisodeRecord, s: Span) -> Result<Vec<f32>> {
    let clips = clips_in_span(s, ep.clip_count)?;
    let d = ep.features.cols();
    let mut mean = vec![0.0f32; d];
    for &c in &clips {
        for (m, v) in mean.iter_mut().zip(ep.features.row(c)) {
            *m += v;
        }
    }
    let n = clips.len() as f32;
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    dot / (na * nb).max(1e-12)
}

#[derive(Clone, Debug)]
struct Run {
    start: usize,
    end: usize,
    event: usize,      // index into episode event list
    attrs: Vec<usize>, // indices into the global attribute pool
}

impl Run {
    fn span(&self) -> Span {
        Span::new(self.start as f64, self.end as f64).expect("runs are non-empty")
    }
}

/// Deterministic function of the config: identical configs give identical
/// worlds, and each episode draws from its own stream so generation could be
/// parallelized per episode without changing the output.
pub fn generate_world(cfg: &WorldConfig) -> Result<Vec<EpisodeRecord>> {
    let emb = Embedder::new(cfg)?;
    (0..cfg.episodes)
        .map(|i| generate_episode(cfg, &emb, cfg.episode_offset + i as u64))
        .collect()
}

fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode + 1);
    rng
}

fn generate_episode(cfg: &WorldConfig, emb: &Embedder, idx: u64) -> Result<EpisodeRecord> {
    let mut rng = episode_rng(cfg.seed, idx);
    let m = rng.gen_range(cfg.clips_per_episode.0..=cfg.clips_per_episode.1);
    let n_events = rng.gen_range(cfg.events_per_episode.0..=cfg.events_per_episode.1);

    // Episode event vocabulary: distinct global events.
    let mut event_ids: Vec<usize> = (0..emb.event_tokens().len()).collect();
    event_ids.shuffle(&mut rng);
    event_ids.truncate(n_events);

    let n_attrs = emb.attribute_tokens().len();
    let mut runs: Vec<Run> = Vec::new();
    let mut pos = 0usize;
    while pos < m {
        let mut len = rng.gen_range(RUN_LEN_MIN..=RUN_LEN_MAX).min(m - pos);
        if m - pos - len < RUN_LEN_MIN && m - pos - len > 0 {
            len = m - pos; // absorb a too-short tail
        }
        let prev_event = runs.last().map(|r: &Run| r.event);
        let event = loop {
            let e = event_ids[rng.gen_range(0..event_ids.len())];
            if Some(e) != prev_event || event_ids.len() == 1 {
                break e;
            }
        };
        let attr_count = match rng.gen_range(0..10) {
            0..=1 => 0,
            2..=5 => 1,
            _ => 2,
        };
        let attrs = sample_distinct(&mut rng, n_attrs, attr_count);
        runs.push(Run {
            start: pos,
            end: pos + len,
            event,
            attrs,
        });
        pos += len;
    }

    // Plan queries and their distractors together. Targets and planted
    // distractors are protected from later conversion, so one query can
    // never destroy another's ambiguity.
    let n_queries = rng
        .gen_range(cfg.queries_per_episode.0..=cfg.queries_per_episode.1)
        .min(runs.len());
    let mut used: Vec<usize> = Vec::new();
    let mut plans: Vec<(usize, bool)> = Vec::new();
    for _ in 0..n_queries {
        let free: Vec<usize> = (0..runs.len()).filter(|i| !used.contains(i)).collect();
        if free.is_empty() {
            break;
        }
        let target = free[rng.gen_range(0..free.len())];
        used.push(target);
        let want_ambiguous = rng.gen_bool(cfg.ambiguity_rate);
        if !want_ambiguous {
            plans.push((target, false));
            continue;
        }
        let secured = ensure_distractor(&mut rng, &mut runs, target, &mut used, n_attrs);
        if secured {
            // plant a second distractor when the layout allows, so the
            // duplicate-event regions outnumber what a top-5 sweep covers
            // for free
            ensure_extra_distractor(&mut rng, &mut runs, target, &mut used, n_attrs);
            plans.push((target, true));
        } else if cfg.ambiguity_rate < 1.0 {
            plans.push((target, false));
        }
        // at rate 1.0 an unsecured query is dropped so the forced-ambiguity
        // guarantee holds for every query that exists
    }

    let mut queries = Vec::with_capacity(plans.len());
    for (qi, &(target, ambiguous)) in plans.iter().enumerate() {
        let run = &runs[target];
        let event_token = emb.event_tokens()[run.event].clone();
        let mut terms = vec![event_token.clone()];
        // Unambiguous queries sometimes pin an attribute, like a user who
        // already said which one they mean.
        if !ambiguous && !run.attrs.is_empty() && rng.gen_bool(0.3) {
            let a = run.attrs[rng.gen_range(0..run.attrs.len())];
            terms.push(emb.attribute_tokens()[a].clone());
        }
        terms.truncate(cfg.max_query_terms);
        let answer_term = if !run.attrs.is_empty() && rng.gen_bool(0.5) {
            let a = run.attrs[rng.gen_range(0..run.attrs.len())];
            Some(emb.attribute_tokens()[a].clone())
        } else {
            None
        };
        let embedding_tokens = emb.embed_terms(&terms)?;
        queries.push(QueryRecord {
            id: format!("ep{idx:05}q{qi}"),
            terms,
            embedding_tokens,
            gt_span: runs[target].span(),
            answer_term,
            ambiguous,
        });
    }

    // Clip token lists and noisy unit-norm features. The event token gets
    // triple weight in the clip mean so clips stay closest to their own
    // event under noise.
    let d = emb.dim();
    let mut clip_events = Vec::with_capacity(m);
    let mut features = Vec::with_capacity(m * d);
    for run in &runs {
        let mut tokens = vec![emb.event_tokens()[run.event].clone()];
        tokens.extend(run.attrs.iter().map(|&a| emb.attribute_tokens()[a].clone()));
        tokens.sort();
        let mut weighted = tokens.clone();
        weighted.push(emb.event_tokens()[run.event].clone());
        weighted.push(emb.event_tokens()[run.event].clone());
        let base = emb.embed_mean(&weighted)?;
        for _ in run.start..run.end {
            let mut feat: Vec<f32> = base
                .iter()
                .map(|&v| v + cfg.noise_sigma as f32 * rng.sample::<f32, _>(StandardNormal))
                .collect();
            let norm = feat.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            for v in &mut feat {
                *v /= norm;
            }
            features.extend(feat);
            clip_events.push(tokens.clone());
        }
    }

    let ep = EpisodeRecord {
        id: format!("ep{idx:05}"),
        clip_count: m,
        clip_events,
        features: TensorData::matrix(m, d, features)?,
        queries,
    };
    ep.validate()?;
    Ok(ep)
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(k.min(n));
    all
}

/// Guarantee a disjoint run with the target's event but different
/// attributes. Reuses an existing one when present, otherwise converts a
/// free run; either way the distractor joins `used` so later queries leave
/// it alone. Returns whether a distractor exists afterwards.
fn ensure_distractor(
    rng: &mut ChaCha8Rng,
    runs: &mut [Run],
    target: usize,
    used: &mut Vec<usize>,
    n_attrs: usize,
) -> bool {
    let event = runs[target].event;
    let target_attrs = runs[target].attrs.clone();
    let adjacent = |i: usize, j: usize| i + 1 == j || j + 1 == i;

    if let Some(existing) = (0..runs.len()).find(|&i| {
        i != target
            && runs[i].event == event
            && runs[i].attrs != target_attrs
            && !adjacent(i, target)
    }) {
        if !used.contains(&existing) {
            used.push(existing);
        }
        return true;
    }

    // Convert a free run. Avoiding neighbors that already carry this event
    // keeps the converted run a separate contiguous region.
    let pick = (0..runs.len()).find(|&i| {
        if used.contains(&i) || adjacent(i, target) {
            return false;
        }
        let merges = [i.wrapping_sub(1), i + 1]
            .iter()
            .any(|&j| j < runs.len() && runs[j].event == event);
        !merges
    });
    let Some(pick) = pick else {
        return false;
    };

    runs[pick].event = event;
    let count = 1 + rng.gen_range(0..2usize);
    let mut attrs = sample_distinct(rng, n_attrs, count);
    let mut guard = 0;
    while attrs == target_attrs && guard < 32 {
        let count = 1 + rng.gen_range(0..2usize);
        attrs = sample_distinct(rng, n_attrs, count);
        guard += 1;
    }
    if attrs == target_attrs {
        // n_attrs >= 2 by config validation, so a differing singleton exists
        attrs = vec![(target_attrs.first().copied().unwrap_or(0) + 1) % n_attrs];
    }
    runs[pick].attrs = attrs;
    used.push(pick);
    true
}

/// Best-effort second distractor: convert one more free run if the layout
/// allows it.
fn ensure_extra_distractor(
    rng: &mut ChaCha8Rng,
    runs: &mut [Run],
    target: usize,
    used: &mut Vec<usize>,
    n_attrs: usize,
) {
    let event = runs[target].event;
    let target_attrs = runs[target].attrs.clone();
    let adjacent = |i: usize, j: usize| i + 1 == j || j + 1 == i;
    let pick = (0..runs.len()).find(|&i| {
        if used.contains(&i) || adjacent(i, target) {
            return false;
        }
        let merges = [i.wrapping_sub(1), i + 1]
            .iter()
            .any(|&j| j < runs.len() && runs[j].event == event);
        !merges
    });
    let Some(pick) = pick else {
        return;
    };
    runs[pick].event = event;
    let count = 1 + rng.gen_range(0..2usize);
    let mut attrs = sample_distinct(rng, n_attrs, count);
    if attrs == target_attrs {
        attrs = vec![(target_attrs.first().copied().unwrap_or(0) + 1) % n_attrs];
    }
    runs[pick].attrs = attrs;
    used.push(pick);
}
