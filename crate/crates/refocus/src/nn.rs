//! Shared transformer building blocks. Layers hold parameter-store indices;
//! a forward pass maps every parameter to a graph leaf first (`leaves`), so
//! the same layer structs drive trainable and frozen passes alike.

use rand_chacha::ChaCha8Rng;
use tensorcore::{xavier_uniform, Graph, ParamStore, Scalar, TensorData, Var};

use crate::Result;

pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), xavier_uniform(fan_in, fan_out, rng));
        let b = store.insert(format!("{name}.b"), TensorData::zeros(vec![fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, leaves: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, leaves[self.w])?;
        Ok(g.bias_add(y, leaves[self.b])?)
    }
}

pub(crate) struct LayerNormP {
    gamma: usize,
    beta: usize,
}

impl LayerNormP {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), TensorData::full(vec![dim], T::one()));
        let beta = store.insert(format!("{name}.beta"), TensorData::zeros(vec![dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, leaves: &[Var], x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, leaves[self.gamma], leaves[self.beta])?)
    }
}

pub(crate) struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d_model: usize,
}

impl MultiHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        assert!(d_model % heads == 0, "d_model must divide into heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            o: Linear::new(store, rng, &format!("{name}.o"), d_model, d_model),
            heads,
            d_model,
        }
    }

    /// `queries` attend over `memory` (pass the same var for self-attention).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        leaves: &[Var],
        queries: Var,
        memory: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, leaves, queries)?;
        let k = self.k.forward(g, leaves, memory)?;
        let v = self.v.forward(g, leaves, memory)?;
        let dk = self.d_model / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dk, dk)?;
            let kh = g.slice(k, 1, h * dk, dk)?;
            let vh = g.slice(v, 1, h * dk, dk)?;
            outs.push(g.scaled_dot_attention(qh, kh, vh, None)?);
        }
        let cat = g.concat(1, &outs)?;
        self.o.forward(g, leaves, cat)
    }
}

pub(crate) struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        hidden: usize,
    ) -> Self {
        Self {
            lin1: Linear::new(store, rng, &format!("{name}.ff1"), d_model, hidden),
            lin2: Linear::new(store, rng, &format!("{name}.ff2"), hidden, d_model),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, leaves: &[Var], x: Var) -> Result<Var> {
        let h = self.lin1.forward(g, leaves, x)?;
        let h = g.gelu(h)?;
        self.lin2.forward(g, leaves, h)
    }
}

/// Pre-norm transformer encoder layer; stacks should apply a final layer
/// norm after the last block.
pub(crate) struct EncoderLayer {
    attn: MultiHead,
    ln1: LayerNormP,
    ff: FeedForward,
    ln2: LayerNormP,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            attn: MultiHead::new(store, rng, &format!("{name}.attn"), d_model, heads),
            ln1: LayerNormP::new(store, &format!("{name}.ln1"), d_model),
            ff: FeedForward::new(store, rng, name, d_model, ffn_hidden),
            ln2: LayerNormP::new(store, &format!("{name}.ln2"), d_model),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, leaves: &[Var], x: Var) -> Result<Var> {
        let n = self.ln1.forward(g, leaves, x)?;
        let a = self.attn.forward(g, leaves, n, n)?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, leaves, x)?;
        let f = self.ff.forward(g, leaves, n)?;
        Ok(g.add(x, f)?)
    }
}

/// Pre-norm decoder block: self-attention over the queries, cross-attention
/// into the memory, then the feed-forward.
pub(crate) struct DecoderLayer {
    self_attn: MultiHead,
    ln1: LayerNormP,
    cross_attn: MultiHead,
    ln2: LayerNormP,
    ff: FeedForward,
    ln3: LayerNormP,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            self_attn: MultiHead::new(store, rng, &format!("{name}.self"), d_model, heads),
            ln1: LayerNormP::new(store, &format!("{name}.ln1"), d_model),
            cross_attn: MultiHead::new(store, rng, &format!("{name}.cross"), d_model, heads),
            ln2: LayerNormP::new(store, &format!("{name}.ln2"), d_model),
            ff: FeedForward::new(store, rng, name, d_model, ffn_hidden),
            ln3: LayerNormP::new(store, &format!("{name}.ln3"), d_model),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        leaves: &[Var],
        x: Var,
        memory: Var,
    ) -> Result<Var> {
        let n = self.ln1.forward(g, leaves, x)?;
        let a = self.self_attn.forward(g, leaves, n, n)?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, leaves, x)?;
        let c = self.cross_attn.forward(g, leaves, n, memory)?;
        let x = g.add(x, c)?;
        let n = self.ln3.forward(g, leaves, x)?;
        let f = self.ff.forward(g, leaves, n)?;
        Ok(g.add(x, f)?)
    }
}

/// Two-layer MLP head with a relu in between.
pub(crate) struct MlpHead {
    lin1: Linear,
    lin2: Linear,
}

impl MlpHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            lin1: Linear::new(store, rng, &format!("{name}.h1"), d_in, hidden),
            lin2: Linear::new(store, rng, &format!("{name}.h2"), hidden, d_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, leaves: &[Var], x: Var) -> Result<Var> {
        let h = self.lin1.forward(g, leaves, x)?;
        let h = g.relu(h)?;
        self.lin2.forward(g, leaves, h)
    }
}

/// Standard sinusoidal positional encodings, `m x d`.
pub(crate) fn sinusoidal_positions<T: Scalar>(m: usize, d: usize) -> TensorData<T> {
    let mut data = Vec::with_capacity(m * d);
    for pos in 0..m {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            data.push(T::cast(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    TensorData::matrix(m, d, data).expect("positional encoding shape")
}

/// Map every parameter in the store to a graph leaf, in store order.
pub(crate) fn param_leaves<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    trainable: bool,
) -> Vec<Var> {
    store
        .tensors()
        .iter()
        .map(|t| g.leaf(t.clone(), trainable))
        .collect()
}

/// Convert stored f32 data into the graph scalar type.
pub(crate) fn to_scalar<T: Scalar>(t: &TensorData<f32>) -> TensorData<T> {
    t.map(|v| T::cast(v as f64))
}
