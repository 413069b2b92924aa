//! Feedback synthesis: span captions, clause composition, template
//! rendering, simple temporal feedback, and the dataset builder.
//!
//! [`SynthesizerBackend`] is the swap point standing in for an LLM stage. The
//! default [`TemplateBackend`] is deterministic under a seed and
//! clause-faithful by construction: the returned clause set is exactly what
//! the rendered text states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synthworld::{Embedder, TOKEN_AFTER, TOKEN_BEFORE};
use crate::types::{ClauseSet, EpisodeRecord, FeedbackSample, QueryRecord, RefKind, TemporalCue};
use crate::{clips_in_span, Error, Result, Span};

/// Template pools for the deterministic feedback renderer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackTemplateBank {
    /// `{terms}` placeholder.
    pub contains_templates: Vec<String>,
    /// `{terms}` placeholder.
    pub not_contains_templates: Vec<String>,
    /// `{direction}` placeholder.
    pub temporal_templates: Vec<String>,
    /// `{temporal_phrase}`, `{contains_phrase}`, `{not_contains_phrase}`
    /// placeholders; absent phrases collapse.
    pub combo_templates: Vec<String>,
    /// Fixed short statements, tagged with the direction they express.
    pub simple_temporal_pool: Vec<(TemporalCue, String)>,
}

impl Default for FeedbackTemplateBank {
    fn default() -> Self {
        let s = |v: &str| v.to_string();
        Self {
            contains_templates: vec![
                s("I'm looking for the one with {terms}"),
                s("It should show {terms}"),
                s("The moment I mean has {terms} in it"),
            ],
            not_contains_templates: vec![
                s("Not the one with {terms}"),
                s("It's not where you see {terms}"),
                s("The one without {terms}"),
            ],
            temporal_templates: vec![
                s("Try {direction} this"),
                s("Search {direction} this moment"),
                s("It happened {direction} that"),
            ],
            combo_templates: vec![
                s("{temporal_phrase}. {contains_phrase}. {not_contains_phrase}"),
                s("{contains_phrase}. {not_contains_phrase}. {temporal_phrase}"),
            ],
            simple_temporal_pool: vec![
                (TemporalCue::Before, s("I think it was before this")),
                (TemporalCue::Before, s("look before this")),
                (TemporalCue::Before, s("Before this moment")),
                (TemporalCue::After, s("After this moment")),
                (TemporalCue::After, s("I think it was after this")),
                (TemporalCue::After, s("look after this")),
            ],
        }
    }
}

impl FeedbackTemplateBank {
    pub fn validate(&self) -> Result<()> {
        let pools: [(&str, usize); 4] = [
            ("contains_templates", self.contains_templates.len()),
            ("not_contains_templates", self.not_contains_templates.len()),
            ("temporal_templates", self.temporal_templates.len()),
            ("combo_templates", self.combo_templates.len()),
        ];
        for (name, len) in pools {
            if len == 0 {
                return Err(Error::Config(format!("{name} pool is empty")));
            }
        }
        for dir in [TemporalCue::Before, TemporalCue::After] {
            if !self.simple_temporal_pool.iter().any(|(d, _)| *d == dir) {
                return Err(Error::Config(format!(
                    "simple_temporal_pool lacks {dir:?} statements"
                )));
            }
        }
        Ok(())
    }
}

/// How often the renderer drops clause components, modeling terse users.
/// The four outcomes must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsetDropProbs {
    pub keep_all: f64,
    pub drop_not_contains: f64,
    pub drop_contains: f64,
    pub temporal_only: f64,
}

impl Default for SubsetDropProbs {
    fn default() -> Self {
        Self {
            keep_all: 0.4,
            drop_not_contains: 0.2,
            drop_contains: 0.2,
            temporal_only: 0.2,
        }
    }
}

impl SubsetDropProbs {
    pub fn validate(&self) -> Result<()> {
        let parts = [
            self.keep_all,
            self.drop_not_contains,
            self.drop_contains,
            self.temporal_only,
        ];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("drop probabilities outside [0,1]".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("drop probabilities sum to {sum}")));
        }
        Ok(())
    }
}

/// Tokens visible in a span: the union of event and attribute tokens over the
/// clips it covers, sorted for determinism.
pub fn caption_span(ep: &EpisodeRecord, s: Span) -> Result<Vec<String>> {
    let clips = clips_in_span(s, ep.clip_count)?;
    let mut terms: Vec<String> = clips
        .iter()
        .flat_map(|&c| ep.clip_events[c].iter().cloned())
        .collect();
    terms.sort();
    terms.dedup();
    Ok(terms)
}

/// The non-leakage set: everything the query already states plus the token
/// that answers it.
pub fn explanation_terms(q: &QueryRecord) -> Vec<String> {
    let mut terms = q.terms.clone();
    if let Some(a) = &q.answer_term {
        terms.push(a.clone());
    }
    terms.sort();
    terms.dedup();
    terms
}

/// Compose the full clause set for a (ground truth, reference) pair.
///
/// `exclude_terms` is the explanation set: tokens the feedback must not
/// reveal (the query's own terms and, for what-questions, the answer token).
pub fn compose_clauses(
    gt: Span,
    ref_span: Span,
    d_q: &[String],
    d_f: &[String],
    exclude_terms: &[String],
) -> Result<ClauseSet> {
    let mut contains: Vec<String> = d_q
        .iter()
        .filter(|t| !exclude_terms.contains(t))
        .cloned()
        .collect();
    contains.sort();
    contains.dedup();
    let mut not_contains: Vec<String> = d_f
        .iter()
        .filter(|t| !d_q.contains(t))
        .cloned()
        .collect();
    not_contains.sort();
    not_contains.dedup();

    let temporal = if gt.end <= ref_span.start {
        TemporalCue::Before
    } else if gt.start >= ref_span.end {
        TemporalCue::After
    } else {
        TemporalCue::None
    };

    let clauses = ClauseSet {
        contains,
        not_contains,
        temporal,
    };
    if clauses.is_empty() {
        return Err(Error::NoSignal);
    }
    Ok(clauses)
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, pool: &'a [T]) -> &'a T {
    &pool[rng.gen_range(0..pool.len())]
}

fn direction_word(cue: TemporalCue) -> &'static str {
    match cue {
        TemporalCue::Before => TOKEN_BEFORE,
        TemporalCue::After => TOKEN_AFTER,
        TemporalCue::None => unreachable!("no direction word for TemporalCue::None"),
    }
}

/// Render clauses into text. A random subset of components may be dropped per
/// `probs`; the returned clause set reflects exactly what was rendered.
pub fn render_feedback(
    clauses: &ClauseSet,
    bank: &FeedbackTemplateBank,
    probs: &SubsetDropProbs,
    rng_seed: u64,
) -> Result<(String, ClauseSet)> {
    if clauses.is_empty() {
        return Err(Error::NoSignal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    // Draw the drop outcome, then intersect with what is actually present;
    // fall back to keeping everything when the outcome would erase it all.
    let roll: f64 = rng.gen_range(0.0..1.0);
    let (mut keep_c, mut keep_n, keep_t) = if roll < probs.keep_all {
        (true, true, true)
    } else if roll < probs.keep_all + probs.drop_not_contains {
        (true, false, true)
    } else if roll < probs.keep_all + probs.drop_not_contains + probs.drop_contains {
        (false, true, true)
    } else {
        (false, false, true)
    };
    keep_c &= !clauses.contains.is_empty();
    keep_n &= !clauses.not_contains.is_empty();
    let keep_t = keep_t && clauses.temporal != TemporalCue::None;
    let (keep_c, keep_n) = if !keep_c && !keep_n && !keep_t {
        (
            !clauses.contains.is_empty(),
            !clauses.not_contains.is_empty(),
        )
    } else {
        (keep_c, keep_n)
    };

    let rendered = ClauseSet {
        contains: if keep_c { clauses.contains.clone() } else { vec![] },
        not_contains: if keep_n {
            clauses.not_contains.clone()
        } else {
            vec![]
        },
        temporal: if keep_t {
            clauses.temporal
        } else {
            TemporalCue::None
        },
    };

    let contains_phrase = if keep_c {
        Some(pick(&mut rng, &bank.contains_templates).replace("{terms}", &rendered.contains.join(", ")))
    } else {
        None
    };
    let not_contains_phrase = if keep_n {
        Some(
            pick(&mut rng, &bank.not_contains_templates)
                .replace("{terms}", &rendered.not_contains.join(", ")),
        )
    } else {
        None
    };
    let temporal_phrase = if keep_t {
        Some(pick(&mut rng, &bank.temporal_templates).replace("{direction}", direction_word(rendered.temporal)))
    } else {
        None
    };

    let present = [&contains_phrase, &not_contains_phrase, &temporal_phrase]
        .iter()
        .filter(|p| p.is_some())
        .count();
    let text = if present == 1 {
        contains_phrase
            .or(not_contains_phrase)
            .or(temporal_phrase)
            .expect("one phrase present")
    } else {
        let template = pick(&mut rng, &bank.combo_templates).clone();
        let mut text = template
            .replace("{contains_phrase}", contains_phrase.as_deref().unwrap_or(""))
            .replace(
                "{not_contains_phrase}",
                not_contains_phrase.as_deref().unwrap_or(""),
            )
            .replace("{temporal_phrase}", temporal_phrase.as_deref().unwrap_or(""));
        // collapse leftover separators from absent phrases
        while text.contains(". .") {
            text = text.replace(". .", ".");
        }
        text.trim_matches(|c: char| c == '.' || c.is_whitespace())
            .to_string()
    };
    Ok((text, rendered))
}

/// Token rows a feedback statement embeds as: clause terms plus the direction
/// token when a temporal cue is present.
pub fn feedback_embedding_terms(clauses: &ClauseSet) -> Vec<String> {
    let mut terms: Vec<String> = clauses
        .contains
        .iter()
        .chain(clauses.not_contains.iter())
        .cloned()
        .collect();
    match clauses.temporal {
        TemporalCue::Before => terms.push(TOKEN_BEFORE.to_string()),
        TemporalCue::After => terms.push(TOKEN_AFTER.to_string()),
        TemporalCue::None => {}
    }
    terms
}

/// Embedding matrix for a clause set: one row per term in
/// [`feedback_embedding_terms`] order. Excluded ("not contains") terms embed
/// as the antipodal token vector, standing in for the negation a sentence
/// encoder would carry.
pub fn feedback_embedding_matrix(
    emb: &Embedder,
    clauses: &ClauseSet,
) -> Result<tensorcore::TensorData<f32>> {
    let terms = feedback_embedding_terms(clauses);
    let mut matrix = emb.embed_terms(&terms)?;
    let negate_from = clauses.contains.len();
    let negate_to = negate_from + clauses.not_contains.len();
    let cols = matrix.cols();
    for row in negate_from..negate_to {
        for v in &mut matrix.data_mut()[row * cols..(row + 1) * cols] {
            *v = -*v;
        }
    }
    Ok(matrix)
}

fn simple_temporal_with_direction(
    emb: &Embedder,
    query_id: &str,
    direction: TemporalCue,
    ref_span: Span,
    bank: &FeedbackTemplateBank,
    rng_seed: u64,
) -> Result<FeedbackSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pool: Vec<&String> = bank
        .simple_temporal_pool
        .iter()
        .filter(|(d, _)| *d == direction)
        .map(|(_, s)| s)
        .collect();
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "simple_temporal_pool lacks {direction:?} statements"
        )));
    }
    let text = (*pick(&mut rng, &pool)).clone();
    let clauses = ClauseSet {
        contains: vec![],
        not_contains: vec![],
        temporal: direction,
    };
    let embedding_tokens = feedback_embedding_matrix(emb, &clauses)?;
    Ok(FeedbackSample {
        query_id: query_id.to_string(),
        ref_span,
        clauses,
        text,
        embedding_tokens,
        ref_kind: RefKind::SimpleTemporal,
    })
}

/// Feedback that only says whether to search before or after the reference.
pub fn make_simple_temporal(
    emb: &Embedder,
    query_id: &str,
    gt: Span,
    ref_span: Span,
    bank: &FeedbackTemplateBank,
    rng_seed: u64,
) -> Result<FeedbackSample> {
    let direction = if gt.end <= ref_span.start {
        TemporalCue::Before
    } else if gt.start >= ref_span.end {
        TemporalCue::After
    } else {
        return Err(Error::OverlapError);
    };
    simple_temporal_with_direction(emb, query_id, direction, ref_span, bank, rng_seed)
}

/// Same as [`make_simple_temporal`] but pointing the wrong way; used by the
/// noisy-feedback experiments.
pub fn make_simple_temporal_flipped(
    emb: &Embedder,
    query_id: &str,
    gt: Span,
    ref_span: Span,
    bank: &FeedbackTemplateBank,
    rng_seed: u64,
) -> Result<FeedbackSample> {
    let direction = if gt.end <= ref_span.start {
        TemporalCue::After
    } else if gt.start >= ref_span.end {
        TemporalCue::Before
    } else {
        return Err(Error::OverlapError);
    };
    simple_temporal_with_direction(emb, query_id, direction, ref_span, bank, rng_seed)
}

/// Everything the feedback stage needs about one (query, reference) pair.
pub struct FeedbackRequest<'a> {
    pub gt: Span,
    pub ref_span: Span,
    pub caption_gt: &'a [String],
    pub caption_ref: &'a [String],
    pub explanation: &'a [String],
    pub rng_seed: u64,
}

/// Behavioral contract mirroring the captioning / explanation / feedback
/// stages. An external-LLM implementation can replace [`TemplateBackend`]
/// without touching the rest of the engine.
pub trait SynthesizerBackend {
    fn caption(&self, ep: &EpisodeRecord, span: Span) -> Result<Vec<String>>;
    fn explain(&self, q: &QueryRecord) -> Result<Vec<String>>;
    fn feedback(&self, req: &FeedbackRequest<'_>) -> Result<(String, ClauseSet)>;
}

/// Deterministic template renderer over the synthetic world's native tokens.
pub struct TemplateBackend {
    pub bank: FeedbackTemplateBank,
    pub probs: SubsetDropProbs,
}

impl Default for TemplateBackend {
    fn default() -> Self {
        Self {
            bank: FeedbackTemplateBank::default(),
            probs: SubsetDropProbs::default(),
        }
    }
}

impl SynthesizerBackend for TemplateBackend {
    fn caption(&self, ep: &EpisodeRecord, span: Span) -> Result<Vec<String>> {
        caption_span(ep, span)
    }

    fn explain(&self, q: &QueryRecord) -> Result<Vec<String>> {
        Ok(explanation_terms(q))
    }

    fn feedback(&self, req: &FeedbackRequest<'_>) -> Result<(String, ClauseSet)> {
        let clauses = compose_clauses(
            req.gt,
            req.ref_span,
            req.caption_gt,
            req.caption_ref,
            req.explanation,
        )?;
        render_feedback(&clauses, &self.bank, &self.probs, req.rng_seed)
    }
}

/// Reference spans sampled for one query, grouped by kind.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QueryRefs {
    pub random: Vec<Span>,
    pub similar: Vec<Span>,
    pub failure: Vec<Span>,
    pub other: Vec<Span>,
}

/// Dataset-builder policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QnfBuildConfig {
    pub seed: u64,
    /// Eval splits follow the fixed 2 relevant + 2 irrelevant + 1 simple
    /// temporal quota; the train split uses the counts below.
    pub eval_quota: bool,
    pub train_random: usize,
    pub train_similar: usize,
    pub train_other: usize,
    pub train_failure: usize,
    pub train_simple_temporal: usize,
}

impl QnfBuildConfig {
    pub fn train(seed: u64) -> Self {
        Self {
            seed,
            eval_quota: false,
            train_random: 1,
            train_similar: 1,
            train_other: 1,
            train_failure: 1,
            train_simple_temporal: 1,
        }
    }

    pub fn eval(seed: u64) -> Self {
        Self {
            seed,
            eval_quota: true,
            train_random: 0,
            train_similar: 0,
            train_other: 0,
            train_failure: 0,
            train_simple_temporal: 0,
        }
    }
}

/// Skips are recorded, never silently dropped.
#[derive(Clone, Debug, Default)]
pub struct QnfDataset {
    pub samples: Vec<FeedbackSample>,
    pub skipped: Vec<(String, String)>,
}

pub(crate) fn mix_seed(base: u64, tag: &str, salt: u64) -> u64 {
    // FNV-1a over the tag, then a splitmix-style finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h ^= salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

/// Build the feedback dataset for a world given per-query reference spans.
pub fn build_qnf_dataset<B: SynthesizerBackend>(
    world: &[EpisodeRecord],
    refs: &[Vec<QueryRefs>],
    backend: &B,
    bank: &FeedbackTemplateBank,
    emb: &Embedder,
    cfg: &QnfBuildConfig,
) -> Result<QnfDataset> {
    if world.len() != refs.len() {
        return Err(Error::Config(format!(
            "{} episodes but {} reference sets",
            world.len(),
            refs.len()
        )));
    }
    let mut out = QnfDataset::default();
    for (ep, ep_refs) in world.iter().zip(refs.iter()) {
        if ep_refs.len() != ep.queries.len() {
            return Err(Error::Config(format!(
                "episode {}: {} queries but {} reference sets",
                ep.id,
                ep.queries.len(),
                ep_refs.len()
            )));
        }
        for (q, qr) in ep.queries.iter().zip(ep_refs.iter()) {
            build_query_samples(ep, q, qr, backend, bank, emb, cfg, &mut out)?;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn build_query_samples<B: SynthesizerBackend>(
    ep: &EpisodeRecord,
    q: &QueryRecord,
    qr: &QueryRefs,
    backend: &B,
    bank: &FeedbackTemplateBank,
    emb: &Embedder,
    cfg: &QnfBuildConfig,
    out: &mut QnfDataset,
) -> Result<()> {
    let caption_gt = backend.caption(ep, q.gt_span)?;
    let explanation = backend.explain(q)?;

    let make = |span: Span, kind: RefKind, idx: usize| -> Result<FeedbackSample> {
        let seed = mix_seed(cfg.seed, &q.id, (kind_salt(kind) << 32) | idx as u64);
        if kind == RefKind::SimpleTemporal {
            return make_simple_temporal(emb, &q.id, q.gt_span, span, bank, seed);
        }
        let caption_ref = backend.caption(ep, span)?;
        let req = FeedbackRequest {
            gt: q.gt_span,
            ref_span: span,
            caption_gt: &caption_gt,
            caption_ref: &caption_ref,
            explanation: &explanation,
            rng_seed: seed,
        };
        let (text, clauses) = match backend.feedback(&req) {
            Ok(v) => v,
            // clause-free pairs fall back to simple temporal when disjoint
            Err(Error::NoSignal) => {
                return make_simple_temporal(emb, &q.id, q.gt_span, span, bank, seed)
                    .map(|mut s| {
                        s.ref_kind = kind;
                        s
                    });
            }
            Err(e) => return Err(e),
        };
        let embedding_tokens = feedback_embedding_matrix(emb, &clauses)?;
        Ok(FeedbackSample {
            query_id: q.id.clone(),
            ref_span: span,
            clauses,
            text,
            embedding_tokens,
            ref_kind: kind,
        })
    };

    let push = |sample: std::result::Result<FeedbackSample, Error>,
                    out: &mut QnfDataset|
     -> bool {
        match sample {
            Ok(s) => {
                out.samples.push(s);
                true
            }
            Err(e) => {
                out.skipped.push((q.id.clone(), e.to_string()));
                false
            }
        }
    };

    if cfg.eval_quota {
        // 2 query-relevant (when available) + 2 query-irrelevant + 1 simple
        // temporal; shortfalls on the relevant side fill from the irrelevant
        // pool so eval queries carry exactly five feedback turns.
        let mut staged: Vec<(Span, RefKind)> = Vec::new();
        let mut relevant: Vec<(Span, RefKind)> = qr
            .similar
            .iter()
            .map(|&s| (s, RefKind::SimilarSpan))
            .chain(qr.failure.iter().map(|&s| (s, RefKind::ModelFailure)))
            .collect();
        relevant.truncate(2);
        let mut irrelevant: Vec<(Span, RefKind)> = qr
            .random
            .iter()
            .map(|&s| (s, RefKind::RandomSpan))
            .chain(qr.other.iter().map(|&s| (s, RefKind::OtherQuerySpan)))
            .collect();
        let need_irrelevant = 2 + (2 - relevant.len());
        staged.extend(relevant);
        if irrelevant.len() < need_irrelevant {
            out.skipped.push((
                q.id.clone(),
                format!(
                    "eval quota unfilled: {} irrelevant spans, need {}",
                    irrelevant.len(),
                    need_irrelevant
                ),
            ));
            return Ok(());
        }
        irrelevant.truncate(need_irrelevant);
        staged.extend(irrelevant);
        let Some(&st_ref) = qr.random.last().or(qr.other.last()) else {
            out.skipped
                .push((q.id.clone(), "no disjoint span for simple temporal".into()));
            return Ok(());
        };

        let mut built: Vec<FeedbackSample> = Vec::new();
        for (idx, (span, kind)) in staged.iter().enumerate() {
            match make(*span, *kind, idx) {
                Ok(s) => built.push(s),
                Err(e) => {
                    out.skipped.push((q.id.clone(), e.to_string()));
                    return Ok(());
                }
            }
        }
        match make(st_ref, RefKind::SimpleTemporal, 4) {
            Ok(s) => built.push(s),
            Err(e) => {
                out.skipped.push((q.id.clone(), e.to_string()));
                return Ok(());
            }
        }
        debug_assert_eq!(built.len(), 5);
        out.samples.extend(built);
    } else {
        for (idx, &span) in qr.random.iter().take(cfg.train_random).enumerate() {
            push(make(span, RefKind::RandomSpan, idx), out);
        }
        for (idx, &span) in qr.similar.iter().take(cfg.train_similar).enumerate() {
            push(make(span, RefKind::SimilarSpan, idx), out);
        }
        for (idx, &span) in qr.other.iter().take(cfg.train_other).enumerate() {
            push(make(span, RefKind::OtherQuerySpan, idx), out);
        }
        for (idx, &span) in qr.failure.iter().take(cfg.train_failure).enumerate() {
            push(make(span, RefKind::ModelFailure, idx), out);
        }
        let st_refs: Vec<Span> = qr.random.iter().chain(qr.other.iter()).copied().collect();
        for (idx, &span) in st_refs.iter().take(cfg.train_simple_temporal).enumerate() {
            push(make(span, RefKind::SimpleTemporal, 100 + idx), out);
        }
    }
    Ok(())
}

fn kind_salt(kind: RefKind) -> u64 {
    match kind {
        RefKind::RandomSpan => 1,
        RefKind::SimilarSpan => 2,
        RefKind::ModelFailure => 3,
        RefKind::OtherQuerySpan => 4,
        RefKind::SimpleTemporal => 5,
    }
}
