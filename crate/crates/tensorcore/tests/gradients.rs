//! Finite-difference verification of every differentiable op, in f64 with
//! h = 1e-5 and a 1e-3 relative-error budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorcore::{check_loss_gradients, xavier_uniform, Graph, ParamStore, TensorData, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    // Keep values away from relu/clamp kinks and sigmoid saturation.
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-1.5..1.5);
            if v.abs() < 0.1 {
                v += 0.2 * v.signum().max(0.5);
            }
            v
        })
        .collect();
    TensorData::new(shape, data).unwrap()
}

fn check<F>(name: &str, store: &mut ParamStore<f64>, build: F)
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> tensorcore::Result<Var>,
{
    let report = check_loss_gradients(store, H, build).unwrap();
    assert!(
        report.max_rel_err <= TOL,
        "{name}: max rel err {} at {}[{}] over {} scalars",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.checked
    );
}

/// Reduce any tensor to a scalar with non-uniform weights so the output
/// gradient is not a constant pattern.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> tensorcore::Result<Var> {
    let n = g.value(v).len();
    let shape = g.value(v).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
    let w = g.constant(TensorData::new(shape, w)?);
    let prod = g.mul(v, w)?;
    g.sum(prod)
}

#[test]
fn add_sub_mul_scalar_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(vec![3, 4], &mut rng));
    store.insert("b", rand_tensor(vec![3, 4], &mut rng));
    check("add_sub_mul", &mut store, |g, vars| {
        let s = g.add(vars[0], vars[1])?;
        let d = g.sub(s, vars[1])?;
        let m = g.mul(d, vars[0])?;
        let m = g.mul_scalar(m, 1.7)?;
        let m = g.add_scalar(m, 0.3)?;
        weighted_sum(g, m)
    });
}

#[test]
fn matmul_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(vec![2, 3], &mut rng));
    store.insert("b", rand_tensor(vec![3, 4], &mut rng));
    check("matmul", &mut store, |g, vars| {
        let c = g.matmul(vars[0], vars[1])?;
        let ct = g.transpose(c)?;
        weighted_sum(g, ct)
    });
}

#[test]
fn concat_and_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(vec![2, 3], &mut rng));
    store.insert("b", rand_tensor(vec![4, 3], &mut rng));
    check("concat_rows_slice", &mut store, |g, vars| {
        let c = g.concat(0, &[vars[0], vars[1]])?;
        let s = g.slice(c, 0, 1, 3)?;
        weighted_sum(g, s)
    });
    check("concat_cols_slice", &mut store, |g, vars| {
        let bt = g.transpose(vars[1])?; // 3 x 4
        let at = g.transpose(vars[0])?; // 3 x 2
        let c = g.concat(1, &[at, bt])?; // 3 x 6
        let s = g.slice(c, 1, 1, 4)?;
        weighted_sum(g, s)
    });
}

#[test]
fn reshape_mean_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(vec![2, 6], &mut rng));
    check("reshape_mean", &mut store, |g, vars| {
        let r = g.reshape(vars[0], vec![3, 4])?;
        let w = weighted_sum(g, r)?;
        let m = g.mean(vars[0])?;
        g.add(w, m)
    });
}

#[test]
fn softmax_rows_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(vec![3, 5], &mut rng));
    check("softmax_rows", &mut store, |g, vars| {
        let y = g.softmax_rows(vars[0])?;
        weighted_sum(g, y)
    });
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    store.insert("x", rand_tensor(vec![4, 6], &mut rng));
    store.insert("gamma", rand_tensor(vec![6], &mut rng));
    store.insert("beta", rand_tensor(vec![6], &mut rng));
    check("layer_norm", &mut store, |g, vars| {
        let y = g.layer_norm(vars[0], vars[1], vars[2])?;
        weighted_sum(g, y)
    });
}

#[test]
fn pointwise_nonlinearities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    store.insert("x", rand_tensor(vec![3, 4], &mut rng));
    check("relu", &mut store, |g, vars| {
        let y = g.relu(vars[0])?;
        weighted_sum(g, y)
    });
    check("gelu", &mut store, |g, vars| {
        let y = g.gelu(vars[0])?;
        weighted_sum(g, y)
    });
    check("sigmoid", &mut store, |g, vars| {
        let y = g.sigmoid(vars[0])?;
        weighted_sum(g, y)
    });
    check("clamp", &mut store, |g, vars| {
        let y = g.clamp(vars[0], -1.2, 1.2)?;
        weighted_sum(g, y)
    });
}

#[test]
fn structured_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut store = ParamStore::new();
    store.insert("mat", rand_tensor(vec![4, 3], &mut rng));
    store.insert("bias", rand_tensor(vec![3], &mut rng));
    check("bias_add", &mut store, |g, vars| {
        let y = g.bias_add(vars[0], vars[1])?;
        weighted_sum(g, y)
    });

    let mut store = ParamStore::new();
    store.insert("mat", rand_tensor(vec![4, 3], &mut rng));
    store.insert("scales", rand_tensor(vec![4], &mut rng));
    check("scale_rows", &mut store, |g, vars| {
        let y = g.scale_rows(vars[0], vars[1])?;
        weighted_sum(g, y)
    });

    let mut store = ParamStore::new();
    store.insert("mat", rand_tensor(vec![4, 3], &mut rng));
    store.insert("alpha", rand_tensor(vec![1], &mut rng));
    check("scale_by", &mut store, |g, vars| {
        let y = g.scale_by(vars[0], vars[1])?;
        weighted_sum(g, y)
    });
}

#[test]
fn attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    store.insert("q", rand_tensor(vec![3, 4], &mut rng));
    store.insert("k", rand_tensor(vec![5, 4], &mut rng));
    store.insert("v", rand_tensor(vec![5, 2], &mut rng));
    check("scaled_dot_attention", &mut store, |g, vars| {
        let y = g.scaled_dot_attention(vars[0], vars[1], vars[2], None)?;
        weighted_sum(g, y)
    });
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let target: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let treg: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    let mask: Vec<f64> = (0..8).map(|i| if i < 6 { 1.0 } else { 0.0 }).collect();

    let mut store = ParamStore::new();
    store.insert("logits", rand_tensor(vec![8], &mut rng));
    let (t1, m1) = (target.clone(), mask.clone());
    check("bce_loss", &mut store, move |g, vars| {
        let p = g.sigmoid(vars[0])?;
        let t = g.constant(TensorData::vector(t1.clone()));
        let m = g.constant(TensorData::vector(m1.clone()));
        g.bce_loss(p, t, Some(m))
    });

    let mut store = ParamStore::new();
    store.insert("reg", rand_tensor(vec![8], &mut rng));
    let t2 = treg.clone();
    check("mse_loss", &mut store, move |g, vars| {
        let t = g.constant(TensorData::vector(t2.clone()));
        g.mse_loss(vars[0], t, None)
    });
    let t3 = treg.clone();
    check("l1_loss", &mut store, move |g, vars| {
        let t = g.constant(TensorData::vector(t3.clone()));
        g.l1_loss(vars[0], t, None)
    });
}

/// Random 3-layer MLP: every parameter gradient against central differences.
#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    store.insert("w1", xavier_uniform(5, 8, &mut rng));
    store.insert("b1", rand_tensor(vec![8], &mut rng));
    store.insert("w2", xavier_uniform(8, 6, &mut rng));
    store.insert("b2", rand_tensor(vec![6], &mut rng));
    store.insert("w3", xavier_uniform(6, 1, &mut rng));
    store.insert("b3", rand_tensor(vec![1], &mut rng));

    let x = rand_tensor(vec![4, 5], &mut rng);
    let t = TensorData::vector(vec![1.0, 0.0, 1.0, 1.0]);
    check("mlp3", &mut store, move |g, vars| {
        let xv = g.constant(x.clone());
        let h1 = g.matmul(xv, vars[0])?;
        let h1 = g.bias_add(h1, vars[1])?;
        let h1 = g.gelu(h1)?;
        let h2 = g.matmul(h1, vars[2])?;
        let h2 = g.bias_add(h2, vars[3])?;
        let h2 = g.relu(h2)?;
        let h3 = g.matmul(h2, vars[4])?;
        let h3 = g.bias_add(h3, vars[5])?;
        let p = g.sigmoid(h3)?;
        let p = g.reshape(p, vec![4])?;
        let tv = g.constant(t.clone());
        g.bce_loss(p, tv, None)
    });
}
