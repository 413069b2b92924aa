//! The feedback alignment module: encodes (video, query, reference span,
//! feedback) and predicts per-clip alignment scores.
//!
//! Query, feedback, and reference tokens are fused by one encoder stack with
//! learned type embeddings per segment; video tokens get their own encoder
//! with sinusoidal positions; decoder blocks then use the video tokens as
//! attention queries against the fused context, and four sigmoid MLP heads
//! read the overall, contains, not-contains, and temporal scores off the
//! aligned clip embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{Graph, ParamStore, Scalar, TensorData, Var};

use crate::labelgen::AlignmentLabels;
use crate::nn::{
    param_leaves, sinusoidal_positions, to_scalar, DecoderLayer, EncoderLayer, MlpHead,
};
use crate::types::{EpisodeRecord, FeedbackSample, QueryRecord};
use crate::{clips_in_span, Error, Result, Span};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FalmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub t_q_layers: usize,
    pub t_v_layers: usize,
    pub t_m_layers: usize,
    pub head_hidden: usize,
    pub ffn_hidden: usize,
    /// Loss weights: overall, temporal, contains, not-contains.
    pub lambda: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_n: f64,
    pub use_positions: bool,
    /// Smoothing width for the similarity-landscape input channels; matches
    /// the label pipeline's default.
    pub landscape_sigma: f64,
}

impl Default for FalmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            t_q_layers: 2,
            t_v_layers: 2,
            t_m_layers: 2,
            head_hidden: 64,
            ffn_hidden: 128,
            lambda: 1.0,
            lambda_t: 0.5,
            lambda_c: 0.25,
            lambda_n: 0.25,
            use_positions: true,
            landscape_sigma: 2.0,
        }
    }
}

impl FalmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        for (name, w) in [
            ("lambda", self.lambda),
            ("lambda_t", self.lambda_t),
            ("lambda_c", self.lambda_c),
            ("lambda_n", self.lambda_n),
        ] {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::Config(format!("{name} = {w} must be >= 0")));
            }
        }
        if self.t_q_layers == 0 || self.t_v_layers == 0 || self.t_m_layers == 0 {
            return Err(Error::Config("all transformer stacks need >= 1 layer".into()));
        }
        Ok(())
    }
}

/// Graph handles for one forward pass.
pub struct FalmVars {
    pub p: Var,
    pub p_c: Var,
    pub p_k: Var,
    pub p_t: Var,
    pub e_a: Var,
}

/// Materialized per-clip predictions, all strictly inside (0, 1).
#[derive(Clone, Debug)]
pub struct FalmOutput {
    pub p: Vec<f32>,
    pub p_c: Vec<f32>,
    pub p_k: Vec<f32>,
    pub p_t: Vec<f32>,
    pub e_a: TensorData<f32>,
}

/// Reference span as three rows: first-clip, last-clip, and mean clip
/// features.
pub fn build_reference_embedding(ep: &EpisodeRecord, r: Span) -> Result<TensorData<f32>> {
    let clips = clips_in_span(r, ep.clip_count)?;
    let d = ep.features.cols();
    let first = ep.features.row(clips[0]);
    let last = ep.features.row(*clips.last().expect("non-empty"));
    let mut mean = vec![0.0f32; d];
    for &c in &clips {
        for (m, v) in mean.iter_mut().zip(ep.features.row(c)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= clips.len() as f32;
    }
    let mut data = Vec::with_capacity(3 * d);
    data.extend_from_slice(first);
    data.extend_from_slice(last);
    data.extend(mean);
    Ok(TensorData::matrix(3, d, data)?)
}

/// Mean clip-to-token cosine mapped to [0,1], Gaussian-smoothed and min-max
/// normalized across clips; one scalar per clip.
fn similarity_landscape<T: Scalar>(
    clips: &TensorData<T>,
    tokens: &TensorData<T>,
    sigma: f64,
) -> Vec<T> {
    let m = clips.rows();
    let rows = tokens.rows();
    let mut raw = Vec::with_capacity(m);
    for i in 0..m {
        let clip = clips.row(i);
        let mut acc = 0.0f64;
        for t in 0..rows {
            let tok = tokens.row(t);
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for (a, b) in clip.iter().zip(tok.iter()) {
                let (a, b) = (a.into_f64(), b.into_f64());
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            acc += dot / (na.sqrt() * nb.sqrt()).max(1e-12);
        }
        raw.push(((acc / rows as f64) + 1.0) / 2.0);
    }
    crate::labelgen::smooth_and_normalize(&raw, sigma)
        .into_iter()
        .map(T::cast)
        .collect()
}

struct Heads {
    p: MlpHead,
    p_c: MlpHead,
    p_k: MlpHead,
    p_t: MlpHead,
}

pub struct Falm<T: Scalar> {
    pub cfg: FalmConfig,
    pub input_dim: usize,
    pub params: ParamStore<T>,
    proj_v: crate::nn::Linear,
    proj_t: crate::nn::Linear,
    type_q: usize,
    type_f: usize,
    type_r: usize,
    t_q: Vec<EncoderLayer>,
    t_v: Vec<EncoderLayer>,
    t_m: Vec<DecoderLayer>,
    sim_f: crate::nn::Linear,
    sim_r: crate::nn::Linear,
    ln_ctx: crate::nn::LayerNormP,
    ln_out: crate::nn::LayerNormP,
    heads: Heads,
}

const RANGE_EPS: f64 = 1e-7;

impl<T: Scalar> Falm<T> {
    pub fn new(cfg: FalmConfig, input_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let proj_v = crate::nn::Linear::new(&mut store, &mut rng, "proj_v", input_dim, d);
        let proj_t = crate::nn::Linear::new(&mut store, &mut rng, "proj_t", input_dim, d);
        let type_q = store.insert("type_q", TensorData::zeros(vec![d]));
        let type_f = store.insert("type_f", TensorData::zeros(vec![d]));
        let type_r = store.insert("type_r", TensorData::zeros(vec![d]));
        let t_q = (0..cfg.t_q_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("t_q.{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect();
        let t_v = (0..cfg.t_v_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("t_v.{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect();
        let t_m = (0..cfg.t_m_layers)
            .map(|i| DecoderLayer::new(&mut store, &mut rng, &format!("t_m.{i}"), d, cfg.heads, cfg.ffn_hidden))
            .collect();
        let sim_f = crate::nn::Linear::new(&mut store, &mut rng, "sim_f", 1, d);
        let sim_r = crate::nn::Linear::new(&mut store, &mut rng, "sim_r", 1, d);
        let ln_ctx = crate::nn::LayerNormP::new(&mut store, "ln_ctx", d);
        let ln_out = crate::nn::LayerNormP::new(&mut store, "ln_out", d);
        let heads = Heads {
            p: MlpHead::new(&mut store, &mut rng, "head_p", d, cfg.head_hidden, 1),
            p_c: MlpHead::new(&mut store, &mut rng, "head_c", d, cfg.head_hidden, 1),
            p_k: MlpHead::new(&mut store, &mut rng, "head_k", d, cfg.head_hidden, 1),
            p_t: MlpHead::new(&mut store, &mut rng, "head_t", d, cfg.head_hidden, 1),
        };
        Ok(Self {
            cfg,
            input_dim,
            params: store,
            proj_v,
            proj_t,
            type_q,
            type_f,
            type_r,
            t_q,
            t_v,
            t_m,
            sim_f,
            sim_r,
            ln_ctx,
            ln_out,
            heads,
        })
    }

    pub fn leaves(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        param_leaves(g, &self.params, trainable)
    }

    /// Forward pass. Inputs must share the model's input embedding dim; the
    /// query and feedback need at least one token each.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        leaves: &[Var],
        e_v: Var,
        e_q: Var,
        e_f: Var,
        e_r: Var,
    ) -> Result<FalmVars> {
        for (name, var) in [("e_v", e_v), ("e_q", e_q), ("e_f", e_f), ("e_r", e_r)] {
            let shape = g.value(var).shape();
            if shape.len() != 2 || shape[1] != self.input_dim {
                return Err(Error::Config(format!(
                    "{name} has shape {shape:?}, want [*, {}]",
                    self.input_dim
                )));
            }
            if shape[0] == 0 {
                return Err(Error::Config(format!("{name} has no tokens")));
            }
        }
        let m = g.value(e_v).rows();
        // balance content against unit-scale positions and type embeddings
        let content_scale = T::cast((self.cfg.d_model as f64).sqrt());

        // Fused context: typed projections of query, feedback, reference.
        let q = self.proj_t.forward(g, leaves, e_q)?;
        let q = g.mul_scalar(q, content_scale)?;
        let q = g.bias_add(q, leaves[self.type_q])?;
        let f = self.proj_t.forward(g, leaves, e_f)?;
        let f = g.mul_scalar(f, content_scale)?;
        let f = g.bias_add(f, leaves[self.type_f])?;
        let r = self.proj_v.forward(g, leaves, e_r)?;
        let r = g.mul_scalar(r, content_scale)?;
        let r = g.bias_add(r, leaves[self.type_r])?;
        let mut ctx = g.concat(0, &[q, f, r])?;
        for layer in &self.t_q {
            ctx = layer.forward(g, leaves, ctx)?;
        }
        let ctx = self.ln_ctx.forward(g, leaves, ctx)?;

        // Video track. The projection carries two early-fusion channels: the
        // smoothed, min-max normalized per-clip similarity landscape of the
        // feedback tokens and of the reference rows, the same preprocessing
        // the alignment supervision is built on. Both inputs are constants,
        // so the landscapes are plain data.
        let mut vid = self.proj_v.forward(g, leaves, e_v)?;
        vid = g.mul_scalar(vid, content_scale)?;
        let land_f = similarity_landscape(
            g.value(e_v),
            g.value(e_f),
            self.cfg.landscape_sigma,
        );
        let land_r = similarity_landscape(
            g.value(e_v),
            g.value(e_r),
            self.cfg.landscape_sigma,
        );
        let land_f = g.constant(TensorData::matrix(m, 1, land_f)?);
        let land_f = g.mul_scalar(land_f, content_scale)?;
        let sim = self.sim_f.forward(g, leaves, land_f)?;
        vid = g.add(vid, sim)?;
        let land_r = g.constant(TensorData::matrix(m, 1, land_r)?);
        let land_r = g.mul_scalar(land_r, content_scale)?;
        let sim = self.sim_r.forward(g, leaves, land_r)?;
        vid = g.add(vid, sim)?;
        if self.cfg.use_positions {
            let pos = g.constant(sinusoidal_positions(m, self.cfg.d_model));
            vid = g.add(vid, pos)?;
        }
        for layer in &self.t_v {
            vid = layer.forward(g, leaves, vid)?;
        }

        // Video tokens attend into the fused context.
        let mut aligned = vid;
        for layer in &self.t_m {
            aligned = layer.forward(g, leaves, aligned, ctx)?;
        }
        let aligned = self.ln_out.forward(g, leaves, aligned)?;

        let head = |g: &mut Graph<T>, mlp: &MlpHead| -> Result<Var> {
            let s = mlp.forward(g, leaves, aligned)?;
            let s = g.sigmoid(s)?;
            let s = g.clamp(s, T::cast(RANGE_EPS), T::cast(1.0 - RANGE_EPS))?;
            Ok(g.reshape(s, vec![m])?)
        };
        Ok(FalmVars {
            p: head(g, &self.heads.p)?,
            p_c: head(g, &self.heads.p_c)?,
            p_k: head(g, &self.heads.p_k)?,
            p_t: head(g, &self.heads.p_t)?,
            e_a: aligned,
        })
    }

    /// Four-term objective. Terms for clause types absent from the labels
    /// are masked out entirely: their weight drops to exactly zero, which
    /// zeroes both the contribution and the gradient while keeping every
    /// head connected to the loss.
    pub fn loss(&self, g: &mut Graph<T>, vars: &FalmVars, labels: &AlignmentLabels) -> Result<Var> {
        let m = labels.clip_count();
        let to_t = |v: &[u8]| TensorData::vector(v.iter().map(|&x| T::cast(x as f64)).collect());
        let to_s = |v: &[f64]| TensorData::vector(v.iter().map(|&x| T::cast(x)).collect());
        let zeros = || TensorData::zeros(vec![m]);

        let l = g.constant(to_t(&labels.l));
        let bce = g.bce_loss(vars.p, l, None)?;
        let mut total = g.mul_scalar(bce, T::cast(self.cfg.lambda))?;

        let t = g.constant(labels.l_t.as_ref().map(|v| to_t(v)).unwrap_or_else(zeros));
        let weight_t = if labels.l_t.is_some() { self.cfg.lambda_t } else { 0.0 };
        let term = g.bce_loss(vars.p_t, t, None)?;
        let term = g.mul_scalar(term, T::cast(weight_t))?;
        total = g.add(total, term)?;

        let t = g.constant(labels.s_c.as_ref().map(|v| to_s(v)).unwrap_or_else(zeros));
        let weight_c = if labels.s_c.is_some() { self.cfg.lambda_c } else { 0.0 };
        let term = g.mse_loss(vars.p_c, t, None)?;
        let term = g.mul_scalar(term, T::cast(weight_c))?;
        total = g.add(total, term)?;

        let t = g.constant(labels.s_k.as_ref().map(|v| to_s(v)).unwrap_or_else(zeros));
        let weight_n = if labels.s_k.is_some() { self.cfg.lambda_n } else { 0.0 };
        let term = g.mse_loss(vars.p_k, t, None)?;
        let term = g.mul_scalar(term, T::cast(weight_n))?;
        total = g.add(total, term)?;

        Ok(total)
    }

    /// Inference-only forward on raw episode data.
    pub fn infer(&self, ep: &EpisodeRecord, q: &QueryRecord, fb: &FeedbackSample) -> Result<FalmOutput> {
        let e_r = build_reference_embedding(ep, fb.ref_span)?;
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g, false);
        let e_v = g.constant(to_scalar::<T>(&ep.features));
        let e_q = g.constant(to_scalar::<T>(&q.embedding_tokens));
        let e_f = g.constant(to_scalar::<T>(&fb.embedding_tokens));
        let e_r = g.constant(to_scalar::<T>(&e_r));
        let vars = self.forward(&mut g, &leaves, e_v, e_q, e_f, e_r)?;
        let vec_of = |v: Var, g: &Graph<T>| -> Vec<f32> {
            g.value(v).data().iter().map(|&x| x.into_f32()).collect()
        };
        Ok(FalmOutput {
            p: vec_of(vars.p, &g),
            p_c: vec_of(vars.p_c, &g),
            p_k: vec_of(vars.p_k, &g),
            p_t: vec_of(vars.p_t, &g),
            e_a: g.value(vars.e_a).to_f32(),
        })
    }
}
