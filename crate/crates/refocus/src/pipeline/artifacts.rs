//! Artifact files. Records go to JSONL with an explicit schema_version per
//! line; feature matrices go to a flat little-endian f32 binary with a JSON
//! sidecar carrying shape, dtype, and a sha256 checksum. Loads re-validate
//! every invariant and name the file and record index on failure. All writes
//! are write-temp-then-rename.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tensorcore::TensorData;

use super::config::{hex_string, RunConfig};
use crate::feedbackgen::{feedback_embedding_matrix, QueryRefs};
use crate::labelgen::AlignmentLabels;
use crate::localizer::SpanPrediction;
use crate::synthworld::Embedder;
use crate::types::{ClauseSet, EpisodeRecord, FeedbackSample, QueryRecord, RefKind, TemporalCue};
use crate::{Error, Result, Span};

pub const SCHEMA_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)
            .map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line)
            .map_err(|e| Error::data(path.display().to_string(), index, e.to_string()))?;
        out.push((index, row));
    }
    Ok(out)
}

fn check_version(path: &Path, found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch {
            file: path.display().to_string(),
            found,
            supported: SCHEMA_VERSION,
        });
    }
    Ok(())
}

// ---- manifest ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialize: {e}")))?;
        write_atomic(&path, text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(path.display().to_string(), 0, e.to_string()))?;
        check_version(&path, m.schema_version)?;
        if m.config_hash != m.config.hash() {
            return Err(Error::ChecksumMismatch(path.display().to_string()));
        }
        Ok(m)
    }
}

// ---- episodes + features ----

#[derive(Serialize, Deserialize)]
struct QueryRow {
    id: String,
    terms: Vec<String>,
    gt_start: f64,
    gt_end: f64,
    answer_term: Option<String>,
    ambiguous: bool,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRow {
    schema_version: u32,
    id: String,
    clip_count: usize,
    clip_events: Vec<Vec<String>>,
    feature_row_offset: usize,
    queries: Vec<QueryRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub schema_version: u32,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub checksum: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

/// Save one split: `episodes.jsonl`, `features.bin`, `features.json`.
pub fn save_split(dir: &Path, world: &[EpisodeRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rows = Vec::with_capacity(world.len());
    let mut feature_bytes: Vec<u8> = Vec::new();
    let mut row_offset = 0usize;
    let cols = world.first().map(|e| e.features.cols()).unwrap_or(0);
    for ep in world {
        rows.push(EpisodeRow {
            schema_version: SCHEMA_VERSION,
            id: ep.id.clone(),
            clip_count: ep.clip_count,
            clip_events: ep.clip_events.clone(),
            feature_row_offset: row_offset,
            queries: ep
                .queries
                .iter()
                .map(|q| QueryRow {
                    id: q.id.clone(),
                    terms: q.terms.clone(),
                    gt_start: q.gt_span.start,
                    gt_end: q.gt_span.end,
                    answer_term: q.answer_term.clone(),
                    ambiguous: q.ambiguous,
                })
                .collect(),
        });
        for &v in ep.features.data() {
            feature_bytes.extend_from_slice(&v.to_le_bytes());
        }
        row_offset += ep.clip_count;
    }
    write_jsonl(&dir.join("episodes.jsonl"), &rows)?;
    write_atomic(&dir.join("features.bin"), &feature_bytes)?;
    let sidecar = FeatureSidecar {
        schema_version: SCHEMA_VERSION,
        rows: row_offset,
        cols,
        dtype: "f32le".into(),
        checksum: sha256_hex(&feature_bytes),
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Config(format!("sidecar serialize: {e}")))?;
    write_atomic(&dir.join("features.json"), text.as_bytes())
}

/// Load one split back, re-deriving query token embeddings from the shared
/// embedder. Every record is validated; offenders are named.
pub fn load_split(dir: &Path, emb: &Embedder) -> Result<Vec<EpisodeRecord>> {
    let sidecar_path = dir.join("features.json");
    let text = std::fs::read_to_string(&sidecar_path).map_err(io_err(&sidecar_path))?;
    let sidecar: FeatureSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::data(sidecar_path.display().to_string(), 0, e.to_string()))?;
    check_version(&sidecar_path, sidecar.schema_version)?;
    if sidecar.dtype != "f32le" {
        return Err(Error::data(
            sidecar_path.display().to_string(),
            0,
            format!("unsupported dtype {}", sidecar.dtype),
        ));
    }

    let bin_path = dir.join("features.bin");
    let bytes = std::fs::read(&bin_path).map_err(io_err(&bin_path))?;
    if sha256_hex(&bytes) != sidecar.checksum || bytes.len() != sidecar.rows * sidecar.cols * 4 {
        return Err(Error::ChecksumMismatch(bin_path.display().to_string()));
    }
    let all: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let ep_path = dir.join("episodes.jsonl");
    let rows: Vec<(usize, EpisodeRow)> = read_jsonl(&ep_path)?;
    let mut world = Vec::with_capacity(rows.len());
    for (index, row) in rows {
        check_version(&ep_path, row.schema_version)?;
        let data_err =
            |detail: String| Error::data(ep_path.display().to_string(), index, detail);
        let start = row.feature_row_offset * sidecar.cols;
        let end = start + row.clip_count * sidecar.cols;
        if end > all.len() {
            return Err(data_err(format!(
                "feature rows [{}, {}) exceed {}",
                row.feature_row_offset,
                row.feature_row_offset + row.clip_count,
                sidecar.rows
            )));
        }
        let features = TensorData::matrix(row.clip_count, sidecar.cols, all[start..end].to_vec())
            .map_err(|e| data_err(e.to_string()))?;
        let mut queries = Vec::with_capacity(row.queries.len());
        for q in row.queries {
            let gt_span =
                Span::new(q.gt_start, q.gt_end).map_err(|e| data_err(e.to_string()))?;
            let embedding_tokens = emb
                .embed_terms(&q.terms)
                .map_err(|e| data_err(e.to_string()))?;
            queries.push(QueryRecord {
                id: q.id,
                terms: q.terms,
                embedding_tokens,
                gt_span,
                answer_term: q.answer_term,
                ambiguous: q.ambiguous,
            });
        }
        let ep = EpisodeRecord {
            id: row.id,
            clip_count: row.clip_count,
            clip_events: row.clip_events,
            features,
            queries,
        };
        ep.validate().map_err(|e| data_err(e.to_string()))?;
        world.push(ep);
    }
    Ok(world)
}

// ---- reference spans ----

#[derive(Serialize, Deserialize)]
struct RefsRow {
    schema_version: u32,
    query_id: String,
    random: Vec<[f64; 2]>,
    similar: Vec<[f64; 2]>,
    failure: Vec<[f64; 2]>,
    other: Vec<[f64; 2]>,
}

fn spans_to_pairs(spans: &[Span]) -> Vec<[f64; 2]> {
    spans.iter().map(|s| [s.start, s.end]).collect()
}

fn pairs_to_spans(path: &Path, index: usize, pairs: &[[f64; 2]]) -> Result<Vec<Span>> {
    pairs
        .iter()
        .map(|p| {
            Span::new(p[0], p[1])
                .map_err(|e| Error::data(path.display().to_string(), index, e.to_string()))
        })
        .collect()
}

pub fn save_refs(path: &Path, refs: &[(String, QueryRefs)]) -> Result<()> {
    let rows: Vec<RefsRow> = refs
        .iter()
        .map(|(query_id, qr)| RefsRow {
            schema_version: SCHEMA_VERSION,
            query_id: query_id.clone(),
            random: spans_to_pairs(&qr.random),
            similar: spans_to_pairs(&qr.similar),
            failure: spans_to_pairs(&qr.failure),
            other: spans_to_pairs(&qr.other),
        })
        .collect();
    write_jsonl(path, &rows)
}

pub fn load_refs(path: &Path) -> Result<Vec<(String, QueryRefs)>> {
    let rows: Vec<(usize, RefsRow)> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (index, row) in rows {
        check_version(path, row.schema_version)?;
        out.push((
            row.query_id,
            QueryRefs {
                random: pairs_to_spans(path, index, &row.random)?,
                similar: pairs_to_spans(path, index, &row.similar)?,
                failure: pairs_to_spans(path, index, &row.failure)?,
                other: pairs_to_spans(path, index, &row.other)?,
            },
        ));
    }
    Ok(out)
}

// ---- feedback ----

#[derive(Serialize, Deserialize)]
struct FeedbackRow {
    schema_version: u32,
    query_id: String,
    ref_start: f64,
    ref_end: f64,
    contains: Vec<String>,
    not_contains: Vec<String>,
    temporal: TemporalCue,
    text: String,
    ref_kind: RefKind,
}

pub fn save_feedback(path: &Path, samples: &[FeedbackSample]) -> Result<()> {
    let rows: Vec<FeedbackRow> = samples
        .iter()
        .map(|s| FeedbackRow {
            schema_version: SCHEMA_VERSION,
            query_id: s.query_id.clone(),
            ref_start: s.ref_span.start,
            ref_end: s.ref_span.end,
            contains: s.clauses.contains.clone(),
            not_contains: s.clauses.not_contains.clone(),
            temporal: s.clauses.temporal,
            text: s.text.clone(),
            ref_kind: s.ref_kind,
        })
        .collect();
    write_jsonl(path, &rows)
}

pub fn load_feedback(path: &Path, emb: &Embedder) -> Result<Vec<FeedbackSample>> {
    let rows: Vec<(usize, FeedbackRow)> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (index, row) in rows {
        check_version(path, row.schema_version)?;
        let data_err = |detail: String| Error::data(path.display().to_string(), index, detail);
        let ref_span = Span::new(row.ref_start, row.ref_end).map_err(|e| data_err(e.to_string()))?;
        let clauses = ClauseSet {
            contains: row.contains,
            not_contains: row.not_contains,
            temporal: row.temporal,
        };
        clauses.validate().map_err(|e| data_err(e.to_string()))?;
        let embedding_tokens =
            feedback_embedding_matrix(emb, &clauses).map_err(|e| data_err(e.to_string()))?;
        let sample = FeedbackSample {
            query_id: row.query_id,
            ref_span,
            clauses,
            text: row.text,
            embedding_tokens,
            ref_kind: row.ref_kind,
        };
        sample.validate().map_err(|e| data_err(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

// ---- labels ----

#[derive(Serialize, Deserialize)]
struct LabelRow {
    schema_version: u32,
    query_id: String,
    feedback_index: usize,
    #[serde(flatten)]
    labels: AlignmentLabels,
}

pub fn save_labels(path: &Path, labels: &[(String, usize, AlignmentLabels)]) -> Result<()> {
    let rows: Vec<LabelRow> = labels
        .iter()
        .map(|(query_id, feedback_index, labels)| LabelRow {
            schema_version: SCHEMA_VERSION,
            query_id: query_id.clone(),
            feedback_index: *feedback_index,
            labels: labels.clone(),
        })
        .collect();
    write_jsonl(path, &rows)
}

pub fn load_labels(path: &Path) -> Result<Vec<(String, usize, AlignmentLabels)>> {
    let rows: Vec<(usize, LabelRow)> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (index, row) in rows {
        check_version(path, row.schema_version)?;
        row.labels
            .validate(row.labels.clip_count())
            .map_err(|e| Error::data(path.display().to_string(), index, e.to_string()))?;
        out.push((row.query_id, row.feedback_index, row.labels));
    }
    Ok(out)
}

// ---- predictions ----

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    schema_version: u32,
    query_id: String,
    spans: Vec<[f64; 3]>,
}

pub fn save_predictions(path: &Path, preds: &[(String, SpanPrediction)]) -> Result<()> {
    let rows: Vec<PredictionRow> = preds
        .iter()
        .map(|(query_id, p)| PredictionRow {
            schema_version: SCHEMA_VERSION,
            query_id: query_id.clone(),
            spans: p
                .ranked
                .iter()
                .map(|(s, score)| [s.start, s.end, *score as f64])
                .collect(),
        })
        .collect();
    write_jsonl(path, &rows)
}

pub fn load_predictions(path: &Path) -> Result<Vec<(String, SpanPrediction)>> {
    let rows: Vec<(usize, PredictionRow)> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (index, row) in rows {
        check_version(path, row.schema_version)?;
        let ranked = row
            .spans
            .iter()
            .map(|p| {
                Span::new(p[0], p[1])
                    .map(|s| (s, p[2] as f32))
                    .map_err(|e| Error::data(path.display().to_string(), index, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((row.query_id, SpanPrediction { ranked }));
    }
    Ok(out)
}
