//! Central finite-difference gradient verification.
//!
//! The numeric side never touches [`Graph::backward`]: it only re-evaluates
//! the loss at perturbed parameter values, so it stays an independent oracle
//! for the analytic gradients.

use crate::{Graph, ParamStore, Result, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences for every scalar
/// in `store`.
///
/// `build_loss` must construct the loss from the given graph and the leaves
/// created for the store's parameters (same order as the store). It is called
/// once for the analytic pass and twice per parameter scalar for the numeric
/// passes; it must be a pure function of the parameter values.
pub fn check_loss_gradients<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    mut build_loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    // Analytic gradients.
    let mut graph = Graph::new();
    let leaves: Vec<Var> = store
        .tensors()
        .iter()
        .map(|t| graph.leaf(t.clone(), true))
        .collect();
    let loss = build_loss(&mut graph, &leaves)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            graph
                .grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.tensor(i).len()])
        })
        .collect();

    let eval = |store: &ParamStore<f64>, build_loss: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = store
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), false))
            .collect();
        let loss = build_loss(&mut g, &leaves)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for p in 0..store.len() {
        for j in 0..store.tensor(p).len() {
            let orig = store.tensor(p).data()[j];
            store.tensor_mut(p).data_mut()[j] = orig + h;
            let plus = eval(store, &mut build_loss)?;
            store.tensor_mut(p).data_mut()[j] = orig - h;
            let minus = eval(store, &mut build_loss)?;
            store.tensor_mut(p).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(analytic[p][j], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = store.name(p).to_string();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
