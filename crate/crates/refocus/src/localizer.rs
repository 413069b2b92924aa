//! The compact host localizer (cross-modal encoder + anchor-free span
//! decoder), the EM adapter, and the feedback-driven prediction stack.
//!
//! Feedback integration is per-clip multiplicative reweighting of the video
//! features with adapter-scaled alignment scores. An all-ones weighting is an
//! exact identity, so the no-feedback path and the neutralized-feedback path
//! reproduce the bare host bitwise. Multi-turn fusion averages the
//! cross-modal encoder outputs over turns in a canonical order, which makes
//! the fusion exactly invariant to turn order and duplicates.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{Graph, ParamStore, Scalar, TensorData, Var};

use crate::falm::{build_reference_embedding, Falm};
use crate::nn::{param_leaves, sinusoidal_positions, EncoderLayer, MlpHead};
use crate::types::{EpisodeRecord, FeedbackSample, QueryRecord};
use crate::{clips_in_span, tiou, Error, Result, Span};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HostConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub nms_tiou: f64,
    pub top_k: usize,
    pub offset_weight: f64,
    /// BCE weight on in-span clips; they are rare, unweighted training mutes
    /// every score.
    pub pos_weight: f64,
    pub use_positions: bool,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            ffn_hidden: 128,
            head_hidden: 64,
            nms_tiou: 0.5,
            top_k: 5,
            offset_weight: 1.0,
            pos_weight: 8.0,
            use_positions: true,
        }
    }
}

impl HostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.top_k == 0 || self.encoder_layers == 0 {
            return Err(Error::Config("top_k and encoder_layers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_tiou) {
            return Err(Error::Config(format!("nms_tiou {} outside [0,1]", self.nms_tiou)));
        }
        Ok(())
    }
}

/// Ranked spans, descending score, pairwise tIoU at most the NMS threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub ranked: Vec<(Span, f32)>,
}

impl SpanPrediction {
    pub fn top1(&self) -> Option<Span> {
        self.ranked.first().map(|(s, _)| *s)
    }
}

/// Two learned scalars scaling and shifting alignment scores:
/// `clamp(alpha * p + beta, 0, 1)`. Identity at the default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmAdapter {
    pub alpha: f32,
    pub beta: f32,
}

impl Default for EmAdapter {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
        }
    }
}

pub fn adapter_apply(ad: &EmAdapter, p: &[f32]) -> Vec<f32> {
    p.iter()
        .map(|&v| (ad.alpha * v + ad.beta).clamp(0.0, 1.0))
        .collect()
}

pub struct Host<T: Scalar> {
    pub cfg: HostConfig,
    pub input_dim: usize,
    pub params: ParamStore<T>,
    proj_v: crate::nn::Linear,
    proj_t: crate::nn::Linear,
    sim_proj: crate::nn::Linear,
    encoder: Vec<EncoderLayer>,
    ln_out: crate::nn::LayerNormP,
    span_head: MlpHead,
}

impl<T: Scalar> Host<T> {
    pub fn new(cfg: HostConfig, input_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let proj_v = crate::nn::Linear::new(&mut store, &mut rng, "proj_v", input_dim, d);
        let proj_t = crate::nn::Linear::new(&mut store, &mut rng, "proj_t", input_dim, d);
        let sim_proj = crate::nn::Linear::new(&mut store, &mut rng, "sim_proj", 1, d);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("enc.{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect();
        let ln_out = crate::nn::LayerNormP::new(&mut store, "ln_out", d);
        // per clip: foreground logit, left extension, right extension
        let span_head = MlpHead::new(&mut store, &mut rng, "span_head", d, cfg.head_hidden, 3);
        Ok(Self {
            cfg,
            input_dim,
            params: store,
            proj_v,
            proj_t,
            sim_proj,
            encoder,
            ln_out,
            span_head,
        })
    }

    pub fn leaves(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        param_leaves(g, &self.params, trainable)
    }

    /// Cross-modal encoder over query tokens + clip tokens; returns the fused
    /// clip rows (`m x d_model`). `e_v` is a graph var so reweighting can sit
    /// in front of it.
    pub fn encode(&self, g: &mut Graph<T>, leaves: &[Var], e_v: Var, e_q: Var) -> Result<Var> {
        let m = g.value(e_v).rows();
        let q_t = g.value(e_q).rows();
        let content_scale = T::cast((self.cfg.d_model as f64).sqrt());
        let q = self.proj_t.forward(g, leaves, e_q)?;
        let q = g.mul_scalar(q, content_scale)?;
        let mut v = self.proj_v.forward(g, leaves, e_v)?;
        v = g.mul_scalar(v, content_scale)?;

        // Early-fusion match channel: the raw clip-to-query dot product,
        // injected through a learned projection. Raw (not normalized) so
        // per-clip reweighting scales the match evidence too.
        let qt = g.transpose(e_q)?;
        let pool = g.constant(TensorData::full(
            vec![q_t, 1],
            T::one() / T::cast(q_t as f64),
        ));
        let q_mean = g.matmul(qt, pool)?;
        let sim = g.matmul(e_v, q_mean)?;
        let sim = self.sim_proj.forward(g, leaves, sim)?;
        v = g.add(v, sim)?;

        if self.cfg.use_positions {
            let pos = g.constant(sinusoidal_positions(m, self.cfg.d_model));
            v = g.add(v, pos)?;
        }
        let mut x = g.concat(0, &[q, v])?;
        for layer in &self.encoder {
            x = layer.forward(g, leaves, x)?;
        }
        let x = self.ln_out.forward(g, leaves, x)?;
        Ok(g.slice(x, 0, q_t, m)?)
    }

    /// Per-clip decode heads: foreground score in (0,1) and non-negative
    /// left/right span extensions.
    pub fn decode_heads(&self, g: &mut Graph<T>, leaves: &[Var], fused: Var) -> Result<(Var, Var, Var)> {
        let m = g.value(fused).rows();
        let out = self.span_head.forward(g, leaves, fused)?;
        let score = g.slice(out, 1, 0, 1)?;
        let score = g.sigmoid(score)?;
        let score = g.clamp(score, T::cast(1e-7), T::cast(1.0 - 1e-7))?;
        let score = g.reshape(score, vec![m])?;
        let left = g.slice(out, 1, 1, 1)?;
        let left = g.relu(left)?;
        let left = g.reshape(left, vec![m])?;
        let right = g.slice(out, 1, 2, 1)?;
        let right = g.relu(right)?;
        let right = g.reshape(right, vec![m])?;
        Ok((score, left, right))
    }

    /// BCE on foreground scores plus L1 on the span extensions of in-span
    /// clips.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        heads: (Var, Var, Var),
        gt: Span,
        m: usize,
    ) -> Result<Var> {
        let clips = clips_in_span(gt, m)?;
        let mut fg = vec![T::zero(); m];
        let mut cls_w = vec![T::one(); m];
        let mut mask = vec![T::zero(); m];
        let mut lt = vec![T::zero(); m];
        let mut rt = vec![T::zero(); m];
        for &c in &clips {
            fg[c] = T::one();
            cls_w[c] = T::cast(self.cfg.pos_weight);
            mask[c] = T::one();
            lt[c] = T::cast((c as f64 - gt.start).max(0.0));
            rt[c] = T::cast((gt.end - (c as f64 + 1.0)).max(0.0));
        }
        let (score, left, right) = heads;
        let fg = g.constant(TensorData::vector(fg));
        let cls_w = g.constant(TensorData::vector(cls_w));
        let cls = g.bce_loss(score, fg, Some(cls_w))?;
        let mask = g.constant(TensorData::vector(mask));
        let lt = g.constant(TensorData::vector(lt));
        let rt = g.constant(TensorData::vector(rt));
        let l_loss = g.l1_loss(left, lt, Some(mask))?;
        let r_loss = g.l1_loss(right, rt, Some(mask))?;
        let off = g.add(l_loss, r_loss)?;
        let off = g.mul_scalar(off, T::cast(self.cfg.offset_weight))?;
        Ok(g.add(cls, off)?)
    }
}

/// Candidate spans from per-clip scores and extensions: clip `i` proposes
/// `[i - left, i + 1 + right)` clipped to the episode, so every candidate has
/// at least unit duration. Greedy NMS keeps the top scorers.
pub fn decode_spans(
    scores: &[f32],
    left: &[f32],
    right: &[f32],
    m: usize,
    nms_tiou: f64,
    top_k: usize,
) -> Result<SpanPrediction> {
    if scores.len() != m || left.len() != m || right.len() != m {
        return Err(Error::Config("decode_spans length mismatch".into()));
    }
    let mut cands: Vec<(Span, f32)> = Vec::with_capacity(m);
    for i in 0..m {
        let start = (i as f64 - left[i] as f64).max(0.0);
        let end = (i as f64 + 1.0 + right[i] as f64).min(m as f64);
        if end > start {
            cands.push((Span::new(start, end)?, scores[i]));
        }
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .1
            .total_cmp(&cands[a].1)
            .then_with(|| a.cmp(&b))
    });
    let mut kept: Vec<(Span, f32)> = Vec::with_capacity(top_k);
    for idx in order {
        let (span, score) = cands[idx];
        if kept.iter().all(|(k, _)| tiou(span, *k) <= nms_tiou) {
            kept.push((span, score));
            if kept.len() == top_k {
                break;
            }
        }
    }
    Ok(SpanPrediction { ranked: kept })
}

/// Forward the host on raw episode data, optionally reweighting clip
/// features by `p_hat`. Returns the fused clip features and the decoded
/// prediction.
pub fn host_forward(
    host: &Host<f32>,
    ep: &EpisodeRecord,
    q: &QueryRecord,
    p_hat: Option<&[f32]>,
) -> Result<(TensorData<f32>, SpanPrediction)> {
    let fused = encode_fused(host, ep, q, p_hat)?;
    let pred = decode_fused(host, &fused)?;
    Ok((fused, pred))
}

fn encode_fused(
    host: &Host<f32>,
    ep: &EpisodeRecord,
    q: &QueryRecord,
    p_hat: Option<&[f32]>,
) -> Result<TensorData<f32>> {
    if let Some(p) = p_hat {
        if p.len() != ep.clip_count {
            return Err(Error::Config(format!(
                "p_hat length {} != clip count {}",
                p.len(),
                ep.clip_count
            )));
        }
    }
    let mut g = Graph::new();
    let leaves = host.leaves(&mut g, false);
    let mut e_v = g.constant(ep.features.clone());
    if let Some(p) = p_hat {
        let w = g.constant(TensorData::vector(p.to_vec()));
        e_v = g.scale_rows(e_v, w)?;
    }
    let e_q = g.constant(q.embedding_tokens.clone());
    let fused = host.encode(&mut g, &leaves, e_v, e_q)?;
    Ok(g.value(fused).clone())
}

fn decode_fused(host: &Host<f32>, fused: &TensorData<f32>) -> Result<SpanPrediction> {
    let m = fused.rows();
    let mut g = Graph::new();
    let leaves = host.leaves(&mut g, false);
    let fv = g.constant(fused.clone());
    let (score, left, right) = host.decode_heads(&mut g, &leaves, fv)?;
    decode_spans(
        g.value(score).data(),
        g.value(left).data(),
        g.value(right).data(),
        m,
        host.cfg.nms_tiou,
        host.cfg.top_k,
    )
}

/// Trained FALM + adapter + host, the full feedback-refinement stack.
pub struct RefocusStack {
    pub falm: Falm<f32>,
    pub host: Host<f32>,
    pub adapter: EmAdapter,
}

impl RefocusStack {
    /// Adapter-scaled alignment scores for one feedback turn.
    pub fn p_hat(&self, ep: &EpisodeRecord, q: &QueryRecord, fb: &FeedbackSample) -> Result<Vec<f32>> {
        let out = self.falm.infer(ep, q, fb)?;
        Ok(adapter_apply(&self.adapter, &out.p))
    }

    /// Single-turn prediction; without feedback this is exactly the bare
    /// host.
    pub fn predict(
        &self,
        ep: &EpisodeRecord,
        q: &QueryRecord,
        feedback: Option<&FeedbackSample>,
    ) -> Result<SpanPrediction> {
        let fused = match feedback {
            None => encode_fused(&self.host, ep, q, None)?,
            Some(fb) => {
                let p_hat = self.p_hat(ep, q, fb)?;
                encode_fused(&self.host, ep, q, Some(&p_hat))?
            }
        };
        decode_fused(&self.host, &fused)
    }

    /// Multi-turn late fusion: encode each turn independently, average the
    /// fused clip features, decode once. The summands are sorted into a
    /// canonical order first, so permuted turn lists fuse to identical bytes.
    pub fn predict_multi(
        &self,
        ep: &EpisodeRecord,
        q: &QueryRecord,
        feedbacks: &[FeedbackSample],
    ) -> Result<SpanPrediction> {
        if feedbacks.is_empty() {
            return Err(Error::EmptyFeedbackList);
        }
        let mut mats = Vec::with_capacity(feedbacks.len());
        for fb in feedbacks {
            let p_hat = self.p_hat(ep, q, fb)?;
            mats.push(encode_fused(&self.host, ep, q, Some(&p_hat))?);
        }
        mats.sort_by(canonical_cmp);
        let mut sum = mats[0].clone();
        for mat in &mats[1..] {
            sum.add_in_place(mat);
        }
        sum.scale_in_place(1.0 / feedbacks.len() as f32);
        decode_fused(&self.host, &sum)
    }
}

fn canonical_cmp(a: &TensorData<f32>, b: &TensorData<f32>) -> Ordering {
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

pub fn reference_embedding_for(ep: &EpisodeRecord, span: Span) -> Result<TensorData<f32>> {
    build_reference_embedding(ep, span)
}

/// Training-graph helper: build `p_hat = clamp(alpha * p + beta, 0, 1)` from
/// a score var and the two adapter leaves.
pub fn adapter_vars<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    alpha: Var,
    beta: Var,
) -> Result<Var> {
    let m = g.value(p).len();
    let scaled = g.scale_by(p, alpha)?;
    let ones = g.constant(TensorData::full(vec![m], T::one()));
    let shift = g.scale_by(ones, beta)?;
    let combined = g.add(scaled, shift)?;
    Ok(g.clamp(combined, T::zero(), T::one())?)
}
