//! Domain types shared across the pipeline. All are immutable after
//! construction and safe to share across threads.

use serde::{Deserialize, Serialize};
use tensorcore::TensorData;

use crate::{Error, Result, Span};

/// A synthetic "video": clip-event assignments, clip features, and queries.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub id: String,
    pub clip_count: usize,
    /// Per clip, the sorted event + attribute tokens visible in it.
    pub clip_events: Vec<Vec<String>>,
    /// `clip_count x d` unit-norm clip features.
    pub features: TensorData<f32>,
    pub queries: Vec<QueryRecord>,
}

impl EpisodeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.clip_events.len() != self.clip_count {
            return Err(Error::Config(format!(
                "episode {}: {} clip event sets for {} clips",
                self.id,
                self.clip_events.len(),
                self.clip_count
            )));
        }
        if self.features.rows() != self.clip_count {
            return Err(Error::Config(format!(
                "episode {}: feature rows {} != clip count {}",
                self.id,
                self.features.rows(),
                self.clip_count
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::Config(format!(
                "episode {}: non-finite feature values",
                self.id
            )));
        }
        for q in &self.queries {
            if !q.gt_span.fits(self.clip_count) {
                return Err(Error::InvalidSpan(format!(
                    "query {}: gt span ends past clip count {}",
                    q.id, self.clip_count
                )));
            }
        }
        Ok(())
    }

    pub fn query(&self, id: &str) -> Option<&QueryRecord> {
        self.queries.iter().find(|q| q.id == id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub terms: Vec<String>,
    /// `q_t x d` token embeddings for `terms`.
    pub embedding_tokens: TensorData<f32>,
    pub gt_span: Span,
    /// For what-questions, the token that answers the query; feedback must
    /// never reveal it.
    pub answer_term: Option<String>,
    /// True when the world generator planted a same-event distractor run.
    pub ambiguous: bool,
}

/// Structured cues carried by one piece of feedback.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClauseSet {
    pub contains: Vec<String>,
    pub not_contains: Vec<String>,
    pub temporal: TemporalCue,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemporalCue {
    Before,
    After,
    #[default]
    None,
}

impl ClauseSet {
    pub fn is_empty(&self) -> bool {
        self.contains.is_empty()
            && self.not_contains.is_empty()
            && self.temporal == TemporalCue::None
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .contains
            .iter()
            .any(|t| self.not_contains.contains(t))
        {
            return Err(Error::Config(
                "clause sets contains and not_contains intersect".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RefKind {
    RandomSpan,
    SimilarSpan,
    ModelFailure,
    OtherQuerySpan,
    SimpleTemporal,
}

impl RefKind {
    /// The supplementary split: model failures and similarity-mined spans may
    /// carry query information, random and other-query spans do not.
    pub fn query_relevant(&self) -> bool {
        matches!(self, RefKind::SimilarSpan | RefKind::ModelFailure)
    }

    pub fn label(&self) -> &'static str {
        match self {
            RefKind::RandomSpan => "random",
            RefKind::SimilarSpan => "similar",
            RefKind::ModelFailure => "model_failure",
            RefKind::OtherQuerySpan => "other_query",
            RefKind::SimpleTemporal => "simple_temporal",
        }
    }
}

/// One interaction turn: a reference span plus the feedback given about it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackSample {
    pub query_id: String,
    pub ref_span: Span,
    pub clauses: ClauseSet,
    pub text: String,
    /// `f_t x d` embeddings of clause terms plus the direction token.
    pub embedding_tokens: TensorData<f32>,
    pub ref_kind: RefKind,
}

impl FeedbackSample {
    pub fn validate(&self) -> Result<()> {
        self.clauses.validate()?;
        if self.embedding_tokens.rows() == 0 || self.embedding_tokens.is_empty() {
            return Err(Error::Config(format!(
                "feedback for {} has no embedding tokens",
                self.query_id
            )));
        }
        if self.clauses.is_empty() {
            return Err(Error::NoSignal);
        }
        Ok(())
    }
}
