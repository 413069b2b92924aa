use crate::{Result, Scalar, TensorData, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(T),
    Matmul,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    Sum,
    Mean,
    SoftmaxRows,
    LayerNorm { x_hat: Vec<T>, inv_std: Vec<T> },
    Relu,
    Gelu,
    Sigmoid,
    BiasAdd,
    ScaleRows,
    ScaleBy,
    Clamp { lo: T, hi: T },
    Bce { weight_sum: T },
    Mse { weight_sum: T },
    L1 { weight_sum: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::BiasAdd => "bias_add",
            Op::ScaleRows => "scale_rows",
            Op::ScaleBy => "scale_by",
            Op::Clamp { .. } => "clamp",
            Op::Bce { .. } => "bce_loss",
            Op::Mse { .. } => "mse_loss",
            Op::L1 { .. } => "l1_loss",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: TensorData<T>,
    grad: Option<TensorData<T>>,
    /// True when this node's value depends on some requires_grad leaf.
    needs_grad: bool,
}

const BCE_EPS: f64 = 1e-7;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Computation tape. Nodes are appended in evaluation order, so descending
/// node index is a reverse topological order and backward visits each node
/// exactly once.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&TensorData<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: TensorData<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            grad: None,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: TensorData<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: TensorData<T>) -> Result<Var> {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                phase: "forward",
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            needs_grad,
        });
        Ok(Var(id))
    }

    fn shape_err(op: &'static str, detail: String) -> TensorError {
        TensorError::ShapeMismatch { op, detail }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_in_place(self.value(b));
        self.push(Op::Add, vec![a, b], out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub, vec![a, b], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul, vec![a, b], out)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> TensorData<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        TensorData::new(va.shape().to_vec(), data).expect("zip preserves shape")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar, vec![a], out)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::MulScalar(c), vec![a], out)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_data(va, vb);
        self.push(Op::Matmul, vec![a, b], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Self::shape_err("transpose", format!("{:?}", va.shape())));
        }
        let out = transpose_data(va);
        self.push(Op::Transpose, vec![a], out)
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = cols).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Self::shape_err("concat", "no parts or bad axis".into()));
        }
        let other = 1 - axis;
        let fixed = self.value(parts[0]).shape()[other];
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[other] != fixed {
                return Err(Self::shape_err("concat", format!("{:?}", s)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).shape()[axis]).sum();
        let out = if axis == 0 {
            let cols = fixed;
            let mut data = Vec::with_capacity(total * cols);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            TensorData::matrix(total, cols, data)?
        } else {
            let rows = fixed;
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            TensorData::matrix(rows, total, data)?
        };
        self.push(Op::Concat { axis }, parts.to_vec(), out)
    }

    /// Slice rank-2 tensor along `axis`, keeping `[start, start+len)`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || axis > 1 || start + len > va.shape()[axis] {
            return Err(Self::shape_err(
                "slice",
                format!("{:?} axis {axis} [{start}, {})", va.shape(), start + len),
            ));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let out = if axis == 0 {
            let data = va.data()[start * cols..(start + len) * cols].to_vec();
            TensorData::matrix(len, cols, data)?
        } else {
            let mut data = Vec::with_capacity(rows * len);
            for i in 0..rows {
                data.extend_from_slice(&va.row(i)[start..start + len]);
            }
            TensorData::matrix(rows, len, data)?
        };
        self.push(Op::Slice { axis, start }, vec![a], out)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} -> {:?}", va.shape(), shape),
            ));
        }
        let out = TensorData::new(shape, va.data().to_vec())?;
        self.push(Op::Reshape, vec![a], out)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Sum, vec![a], TensorData::scalar(total))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Self::shape_err("mean", "empty tensor".into()));
        }
        let n = T::cast(va.len() as f64);
        let total = va.data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Mean, vec![a], TensorData::scalar(total / n))
    }

    // ---- nonlinearities ----

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Self::shape_err("softmax_rows", format!("{:?}", va.shape())));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = va.row(i);
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z = exps.iter().fold(T::zero(), |acc, &v| acc + v);
            data.extend(exps.iter().map(|&e| e / z));
        }
        let out = TensorData::matrix(rows, cols, data)?;
        self.push(Op::SoftmaxRows, vec![a], out)
    }

    /// Row-wise layer normalization with learned gain and bias (each a
    /// length-`cols` vector).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Self::shape_err("layer_norm", format!("{:?}", vx.shape())));
        }
        let (rows, cols) = (vx.rows(), vx.cols());
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Self::shape_err(
                "layer_norm",
                format!("gain/bias must have length {cols}"),
            ));
        }
        let eps = T::cast(LAYER_NORM_EPS);
        let nc = T::cast(cols as f64);
        let mut x_hat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        {
            let vx = self.value(x);
            let vg = self.value(gamma);
            let vb = self.value(beta);
            for i in 0..rows {
                let row = vx.row(i);
                let mu = row.iter().fold(T::zero(), |a, &v| a + v) / nc;
                let var = row
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu))
                    / nc;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for (j, &v) in row.iter().enumerate() {
                    let xh = (v - mu) * is;
                    x_hat.push(xh);
                    data.push(xh * vg.data()[j] + vb.data()[j]);
                }
            }
        }
        let out = TensorData::matrix(rows, cols, data)?;
        self.push(Op::LayerNorm { x_hat, inv_std }, vec![x, gamma, beta], out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(Op::Relu, vec![a], out)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_fwd);
        self.push(Op::Gelu, vec![a], out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid_fwd);
        self.push(Op::Sigmoid, vec![a], out)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp { lo, hi }, vec![a], out)
    }

    // ---- structured ops ----

    /// Add a length-`cols` bias vector to every row of a rank-2 tensor.
    /// The single permitted broadcast.
    pub fn bias_add(&mut self, mat: Var, bias: Var) -> Result<Var> {
        let vm = self.value(mat);
        let vb = self.value(bias);
        if vm.rank() != 2 || vb.len() != vm.cols() {
            return Err(Self::shape_err(
                "bias_add",
                format!("{:?} + {:?}", vm.shape(), vb.shape()),
            ));
        }
        let (rows, cols) = (vm.rows(), vm.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (j, &v) in vm.row(i).iter().enumerate() {
                data.push(v + vb.data()[j]);
            }
        }
        let out = TensorData::matrix(rows, cols, data)?;
        self.push(Op::BiasAdd, vec![mat, bias], out)
    }

    /// Scale row `i` of an `m x d` matrix by `scales[i]`.
    pub fn scale_rows(&mut self, mat: Var, scales: Var) -> Result<Var> {
        let vm = self.value(mat);
        let vs = self.value(scales);
        if vm.rank() != 2 || vs.len() != vm.rows() {
            return Err(Self::shape_err(
                "scale_rows",
                format!("{:?} * {:?}", vm.shape(), vs.shape()),
            ));
        }
        let (rows, cols) = (vm.rows(), vm.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let s = vs.data()[i];
            data.extend(vm.row(i).iter().map(|&v| v * s));
        }
        let out = TensorData::matrix(rows, cols, data)?;
        self.push(Op::ScaleRows, vec![mat, scales], out)
    }

    /// Multiply every element by a single-element tensor (a learned scalar).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Self::shape_err(
                "scale_by",
                format!("scale has shape {:?}", self.value(s).shape()),
            ));
        }
        let c = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * c);
        self.push(Op::ScaleBy, vec![a, s], out)
    }

    /// softmax(Q Kᵀ / sqrt(d_k)) V with an optional additive mask on the
    /// score matrix. Composed from primitive ops, so backward is inherited.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let dk = self.value(q).cols();
        if self.value(k).cols() != dk {
            return Err(Self::shape_err(
                "scaled_dot_attention",
                format!("q cols {} vs k cols {}", dk, self.value(k).cols()),
            ));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scale = T::one() / T::cast(dk as f64).sqrt();
        let mut scores = self.mul_scalar(scores, scale)?;
        if let Some(m) = mask {
            scores = self.add(scores, m)?;
        }
        let attn = self.softmax_rows(scores)?;
        self.matmul(attn, v)
    }

    // ---- losses ----
    //
    // The optional third operand is a per-element weight vector; the loss is
    // sum(w_i * term_i) / sum(w_i). A 0/1 mask is the special case that
    // drops elements from the mean.

    fn loss_inputs(&self, op: &'static str, pred: Var, target: Var, mask: Option<Var>) -> Result<T> {
        self.same_shape(op, pred, target)?;
        if let Some(m) = mask {
            self.same_shape(op, pred, m)?;
            let wsum = self
                .value(m)
                .data()
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            Ok(wsum)
        } else {
            Ok(T::cast(self.value(pred).len() as f64))
        }
    }

    fn weighted_reduce(
        &mut self,
        op: Op<T>,
        pred: Var,
        target: Var,
        mask: Option<Var>,
        weight_sum: T,
        term: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let mut total = T::zero();
        {
            let vp = self.value(pred);
            let vt = self.value(target);
            let vm = mask.map(|m| self.value(m));
            for i in 0..vp.len() {
                let w = vm.map(|m| m.data()[i]).unwrap_or(T::one());
                if w == T::zero() {
                    continue;
                }
                total = total + w * term(vp.data()[i], vt.data()[i]);
            }
        }
        let out = if weight_sum == T::zero() {
            TensorData::scalar(T::zero())
        } else {
            TensorData::scalar(total / weight_sum)
        };
        let mut inputs = vec![pred, target];
        inputs.extend(mask);
        self.push(op, inputs, out)
    }

    /// Weighted mean binary cross-entropy. Predictions are clamped to
    /// `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce_loss(&mut self, pred: Var, target: Var, mask: Option<Var>) -> Result<Var> {
        let weight_sum = self.loss_inputs("bce_loss", pred, target, mask)?;
        let eps = T::cast(BCE_EPS);
        let one = T::one();
        self.weighted_reduce(
            Op::Bce { weight_sum },
            pred,
            target,
            mask,
            weight_sum,
            move |p, t| {
                let p = p.max(eps).min(one - eps);
                -(t * p.ln() + (one - t) * (one - p).ln())
            },
        )
    }

    /// Weighted mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var, mask: Option<Var>) -> Result<Var> {
        let weight_sum = self.loss_inputs("mse_loss", pred, target, mask)?;
        self.weighted_reduce(
            Op::Mse { weight_sum },
            pred,
            target,
            mask,
            weight_sum,
            |p, t| (p - t) * (p - t),
        )
    }

    /// Weighted mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var, mask: Option<Var>) -> Result<Var> {
        let weight_sum = self.loss_inputs("l1_loss", pred, target, mask)?;
        self.weighted_reduce(
            Op::L1 { weight_sum },
            pred,
            target,
            mask,
            weight_sum,
            |p, t| (p - t).abs(),
        )
    }

    // ---- backward ----

    /// Accumulate gradients of `loss` onto every reachable node. Gradients
    /// from repeated calls add up until [`Graph::zero_grads`].
    ///
    /// Errors with `DisconnectedGraph` if some requires_grad leaf cannot be
    /// reached from the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }

        // Reachability sweep: which nodes sit on a path from loss to a leaf.
        let mut reachable = vec![false; self.nodes.len()];
        reachable[loss.0] = true;
        for id in (0..=loss.0).rev() {
            if !reachable[id] {
                continue;
            }
            for inp in &self.nodes[id].inputs {
                reachable[inp.0] = true;
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && !reachable[id] {
                return Err(TensorError::DisconnectedGraph { node: id });
            }
        }

        // Seed and propagate through per-pass buffers, so repeated backward
        // calls each contribute exactly one pass worth of gradient.
        let mut pass: Vec<Option<TensorData<T>>> = vec![None; self.nodes.len()];
        pass[loss.0] = Some(TensorData::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if !reachable[id] || !self.nodes[id].needs_grad {
                continue;
            }
            let gout = match &pass[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let input_grads = self.input_grads(id, &gout)?;
            for (inp, g) in input_grads {
                if !g.all_finite() {
                    return Err(TensorError::NonFinite {
                        phase: "backward",
                        node: id,
                        op: self.nodes[id].op.name(),
                    });
                }
                accumulate(&mut pass[inp.0], &g);
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(pass.into_iter()) {
            if let Some(g) = g {
                accumulate(&mut node.grad, &g);
            }
        }
        Ok(())
    }

    /// Gradient of node `id`'s inputs given the output gradient, skipping
    /// inputs that do not need gradients.
    fn input_grads(&self, id: usize, gout: &TensorData<T>) -> Result<Vec<(Var, TensorData<T>)>> {
        let node = &self.nodes[id];
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let needs = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
        let mut out: Vec<(Var, TensorData<T>)> = Vec::new();
        let mut emit = |k: usize, g: TensorData<T>| out.push((node.inputs[k], g));

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if needs(0) {
                    emit(0, gout.clone());
                }
                if needs(1) {
                    emit(1, gout.clone());
                }
            }
            Op::Sub => {
                if needs(0) {
                    emit(0, gout.clone());
                }
                if needs(1) {
                    emit(1, gout.map(|g| -g));
                }
            }
            Op::Mul => {
                if needs(0) {
                    emit(0, zip_data(gout, inp(1), |g, b| g * b));
                }
                if needs(1) {
                    emit(1, zip_data(gout, inp(0), |g, a| g * a));
                }
            }
            Op::AddScalar => {
                if needs(0) {
                    emit(0, gout.clone());
                }
            }
            Op::MulScalar(c) => {
                if needs(0) {
                    let c = *c;
                    emit(0, gout.map(|g| g * c));
                }
            }
            Op::Matmul => {
                let (a, b) = (inp(0), inp(1));
                if needs(0) {
                    let bt = transpose_data(b);
                    emit(0, matmul_data(gout, &bt));
                }
                if needs(1) {
                    let at = transpose_data(a);
                    emit(1, matmul_data(&at, gout));
                }
            }
            Op::Transpose => {
                if needs(0) {
                    emit(0, transpose_data(gout));
                }
            }
            Op::Concat { axis } => {
                let mut offset = 0usize;
                for part in node.inputs.iter() {
                    let s = self.nodes[part.0].value.shape().to_vec();
                    let len = s[*axis];
                    if self.nodes[part.0].needs_grad {
                        let g = slice_data(gout, *axis, offset, len);
                        out.push((*part, g));
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start } => {
                if needs(0) {
                    let src = inp(0);
                    let mut g = TensorData::zeros(src.shape().to_vec());
                    scatter_slice(&mut g, gout, *axis, *start);
                    emit(0, g);
                }
            }
            Op::Reshape => {
                if needs(0) {
                    let src_shape = inp(0).shape().to_vec();
                    emit(
                        0,
                        TensorData::new(src_shape, gout.data().to_vec())
                            .expect("reshape grad shape"),
                    );
                }
            }
            Op::Sum => {
                if needs(0) {
                    let g = gout.item();
                    emit(0, TensorData::full(inp(0).shape().to_vec(), g));
                }
            }
            Op::Mean => {
                if needs(0) {
                    let n = T::cast(inp(0).len() as f64);
                    let g = gout.item() / n;
                    emit(0, TensorData::full(inp(0).shape().to_vec(), g));
                }
            }
            Op::SoftmaxRows => {
                if needs(0) {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        let yr = y.row(i);
                        let gr = gout.row(i);
                        let dot = yr
                            .iter()
                            .zip(gr.iter())
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        data.extend(yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * (gv - dot)));
                    }
                    emit(0, TensorData::matrix(rows, cols, data).expect("softmax grad"));
                }
            }
            Op::LayerNorm { x_hat, inv_std } => {
                let x = inp(0);
                let (rows, cols) = (x.rows(), x.cols());
                let gamma = inp(1);
                let nc = T::cast(cols as f64);
                if needs(0) {
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        let gr = gout.row(i);
                        let xh = &x_hat[i * cols..(i + 1) * cols];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        let dxh: Vec<T> = gr
                            .iter()
                            .enumerate()
                            .map(|(j, &g)| {
                                let d = g * gamma.data()[j];
                                sum_dxh = sum_dxh + d;
                                sum_dxh_xh = sum_dxh_xh + d * xh[j];
                                d
                            })
                            .collect();
                        let is = inv_std[i];
                        for j in 0..cols {
                            data.push(is * (dxh[j] - sum_dxh / nc - xh[j] * sum_dxh_xh / nc));
                        }
                    }
                    emit(0, TensorData::matrix(rows, cols, data).expect("ln grad"));
                }
                if needs(1) {
                    let mut dg = vec![T::zero(); cols];
                    for i in 0..rows {
                        let gr = gout.row(i);
                        for j in 0..cols {
                            dg[j] = dg[j] + gr[j] * x_hat[i * cols + j];
                        }
                    }
                    emit(1, TensorData::vector(dg));
                }
                if needs(2) {
                    let mut db = vec![T::zero(); cols];
                    for i in 0..rows {
                        for (j, &g) in gout.row(i).iter().enumerate() {
                            db[j] = db[j] + g;
                        }
                    }
                    emit(2, TensorData::vector(db));
                }
            }
            Op::Relu => {
                if needs(0) {
                    emit(0, zip_data(gout, inp(0), |g, x| {
                        if x > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    }));
                }
            }
            Op::Gelu => {
                if needs(0) {
                    emit(0, zip_data(gout, inp(0), |g, x| g * gelu_bwd(x)));
                }
            }
            Op::Sigmoid => {
                if needs(0) {
                    emit(0, zip_data(gout, &node.value, |g, y| g * y * (T::one() - y)));
                }
            }
            Op::BiasAdd => {
                if needs(0) {
                    emit(0, gout.clone());
                }
                if needs(1) {
                    let cols = gout.cols();
                    let mut db = vec![T::zero(); cols];
                    for i in 0..gout.rows() {
                        for (j, &g) in gout.row(i).iter().enumerate() {
                            db[j] = db[j] + g;
                        }
                    }
                    emit(1, TensorData::vector(db));
                }
            }
            Op::ScaleRows => {
                let mat = inp(0);
                let scales = inp(1);
                let (rows, cols) = (mat.rows(), mat.cols());
                if needs(0) {
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        let s = scales.data()[i];
                        data.extend(gout.row(i).iter().map(|&g| g * s));
                    }
                    emit(0, TensorData::matrix(rows, cols, data).expect("scale_rows grad"));
                }
                if needs(1) {
                    let mut ds = Vec::with_capacity(rows);
                    for i in 0..rows {
                        let dot = gout
                            .row(i)
                            .iter()
                            .zip(mat.row(i).iter())
                            .fold(T::zero(), |acc, (&g, &m)| acc + g * m);
                        ds.push(dot);
                    }
                    emit(1, TensorData::vector(ds));
                }
            }
            Op::ScaleBy => {
                let a = inp(0);
                let s = inp(1).data()[0];
                if needs(0) {
                    emit(0, gout.map(|g| g * s));
                }
                if needs(1) {
                    let dot = gout
                        .data()
                        .iter()
                        .zip(a.data().iter())
                        .fold(T::zero(), |acc, (&g, &x)| acc + g * x);
                    emit(1, TensorData::scalar(dot));
                }
            }
            Op::Clamp { lo, hi } => {
                if needs(0) {
                    let (lo, hi) = (*lo, *hi);
                    emit(0, zip_data(gout, inp(0), |g, x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            T::zero()
                        }
                    }));
                }
            }
            Op::Bce { weight_sum } => {
                let g = gout.item();
                let scale = if *weight_sum == T::zero() {
                    T::zero()
                } else {
                    g / *weight_sum
                };
                let eps = T::cast(BCE_EPS);
                let one = T::one();
                let vp = inp(0);
                let vt = inp(1);
                let vm = node.inputs.get(2).map(|m| &self.nodes[m.0].value);
                let w = |i: usize| vm.map(|m| m.data()[i]).unwrap_or(T::one());
                if needs(0) {
                    let data = (0..vp.len())
                        .map(|i| {
                            let p = vp.data()[i];
                            if w(i) == T::zero() || p < eps || p > one - eps {
                                return T::zero();
                            }
                            w(i) * scale * (p - vt.data()[i]) / (p * (one - p))
                        })
                        .collect();
                    emit(0, TensorData::new(vp.shape().to_vec(), data).expect("bce grad"));
                }
                if needs(1) {
                    let data = (0..vp.len())
                        .map(|i| {
                            if w(i) == T::zero() {
                                return T::zero();
                            }
                            let p = vp.data()[i].max(eps).min(one - eps);
                            w(i) * scale * ((one - p).ln() - p.ln())
                        })
                        .collect();
                    emit(1, TensorData::new(vt.shape().to_vec(), data).expect("bce grad"));
                }
            }
            Op::Mse { weight_sum } => {
                let g = gout.item();
                let scale = if *weight_sum == T::zero() {
                    T::zero()
                } else {
                    g / *weight_sum
                };
                let two = T::cast(2.0);
                let vp = inp(0);
                let vt = inp(1);
                let vm = node.inputs.get(2).map(|m| &self.nodes[m.0].value);
                let w = |i: usize| vm.map(|m| m.data()[i]).unwrap_or(T::one());
                let diff: Vec<T> = (0..vp.len())
                    .map(|i| w(i) * scale * two * (vp.data()[i] - vt.data()[i]))
                    .collect();
                if needs(0) {
                    emit(
                        0,
                        TensorData::new(vp.shape().to_vec(), diff.clone()).expect("mse grad"),
                    );
                }
                if needs(1) {
                    let neg: Vec<T> = diff.iter().map(|&d| -d).collect();
                    emit(1, TensorData::new(vt.shape().to_vec(), neg).expect("mse grad"));
                }
            }
            Op::L1 { weight_sum } => {
                let g = gout.item();
                let scale = if *weight_sum == T::zero() {
                    T::zero()
                } else {
                    g / *weight_sum
                };
                let vp = inp(0);
                let vt = inp(1);
                let vm = node.inputs.get(2).map(|m| &self.nodes[m.0].value);
                let w = |i: usize| vm.map(|m| m.data()[i]).unwrap_or(T::one());
                let sign: Vec<T> = (0..vp.len())
                    .map(|i| {
                        let d = vp.data()[i] - vt.data()[i];
                        if d > T::zero() {
                            w(i) * scale
                        } else if d < T::zero() {
                            -(w(i) * scale)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if needs(0) {
                    emit(
                        0,
                        TensorData::new(vp.shape().to_vec(), sign.clone()).expect("l1 grad"),
                    );
                }
                if needs(1) {
                    let neg: Vec<T> = sign.iter().map(|&d| -d).collect();
                    emit(1, TensorData::new(vt.shape().to_vec(), neg).expect("l1 grad"));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<TensorData<T>>, g: &TensorData<T>) {
    match slot {
        Some(acc) => acc.add_in_place(g),
        None => *slot = Some(g.clone()),
    }
}

fn zip_data<T: Scalar>(
    a: &TensorData<T>,
    b: &TensorData<T>,
    f: impl Fn(T, T) -> T,
) -> TensorData<T> {
    debug_assert_eq!(a.len(), b.len());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    TensorData::new(a.shape().to_vec(), data).expect("zip_data preserves shape")
}

/// ikj-ordered dense matmul: the inner loop is a row-axpy, which keeps the
/// accumulation order fixed (deterministic) and lets the compiler vectorize.
pub(crate) fn matmul_data<T: Scalar>(a: &TensorData<T>, b: &TensorData<T>) -> TensorData<T> {
    let (m, _k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data()[kk * n..(kk + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aik * bkj;
            }
        }
    }
    TensorData::matrix(m, n, out).expect("matmul shape")
}

pub(crate) fn transpose_data<T: Scalar>(a: &TensorData<T>) -> TensorData<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for (j, &v) in a.row(i).iter().enumerate() {
            out[j * m + i] = v;
        }
    }
    TensorData::matrix(n, m, out).expect("transpose shape")
}

fn slice_data<T: Scalar>(a: &TensorData<T>, axis: usize, start: usize, len: usize) -> TensorData<T> {
    let (rows, cols) = (a.rows(), a.cols());
    if axis == 0 {
        let data = a.data()[start * cols..(start + len) * cols].to_vec();
        TensorData::matrix(len, cols, data).expect("slice shape")
    } else {
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&a.row(i)[start..start + len]);
        }
        TensorData::matrix(rows, len, data).expect("slice shape")
    }
}

fn scatter_slice<T: Scalar>(dst: &mut TensorData<T>, src: &TensorData<T>, axis: usize, start: usize) {
    let cols = dst.cols();
    if axis == 0 {
        let (srows, scols) = (src.rows(), src.cols());
        for i in 0..srows {
            for j in 0..scols {
                let v = src.get2(i, j);
                let idx = (start + i) * cols + j;
                dst.data_mut()[idx] = dst.data_mut()[idx] + v;
            }
        }
    } else {
        for i in 0..src.rows() {
            for j in 0..src.cols() {
                let v = src.get2(i, j);
                let idx = i * cols + start + j;
                dst.data_mut()[idx] = dst.data_mut()[idx] + v;
            }
        }
    }
}

fn sigmoid_fwd<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// tanh approximation of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    let three = T::cast(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
