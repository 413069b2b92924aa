//! Training loops: FALM pretraining on alignment labels, host pretraining on
//! query-only data, and joint fine-tuning with mixed sampling and simple
//! temporal augmentation. Single-threaded, seeded, and deterministic to the
//! byte.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{Adam, AdamConfig, Graph, ParamStore, Scalar, TensorData, TensorError, Var};

use crate::falm::{build_reference_embedding, Falm};
use crate::feedbackgen::{make_simple_temporal, FeedbackTemplateBank};
use crate::labelgen::AlignmentLabels;
use crate::localizer::{adapter_vars, EmAdapter, Host};
use crate::nn::to_scalar;
use crate::synthworld::Embedder;
use crate::types::{EpisodeRecord, FeedbackSample};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fine-tuning draws equal counts of query-only and feedback samples.
    pub mixed_sampling: bool,
    /// Fraction of feedback samples regenerated as simple temporal feedback
    /// each fine-tuning epoch.
    pub temporal_aug_rate: f64,
    /// Keep FALM parameters fixed during fine-tuning.
    pub falm_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 1,
            mixed_sampling: true,
            temporal_aug_rate: 0.20,
            falm_frozen: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.temporal_aug_rate) {
            return Err(Error::Config(format!(
                "temporal_aug_rate {} outside [0,1]",
                self.temporal_aug_rate
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One FALM training example, resolved against its episode.
#[derive(Clone, Debug)]
pub struct FalmSample {
    pub episode: usize,
    pub query: usize,
    pub feedback: FeedbackSample,
    pub labels: AlignmentLabels,
}

/// Map feedback samples to (episode, query) indices by query id.
pub fn resolve_query_index(world: &[EpisodeRecord]) -> BTreeMap<String, (usize, usize)> {
    let mut index = BTreeMap::new();
    for (e, ep) in world.iter().enumerate() {
        for (qi, q) in ep.queries.iter().enumerate() {
            index.insert(q.id.clone(), (e, qi));
        }
    }
    index
}

fn epoch_rng(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn wrap_nonfinite(e: Error, context: String) -> Error {
    match e {
        Error::Tensor(src @ TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
            context,
            source: src,
        },
        other => other,
    }
}

/// Accumulate per-leaf gradients from a finished backward pass.
fn collect_grads<T: Scalar>(
    g: &Graph<T>,
    leaves: &[Var],
    into: &mut [Option<TensorData<T>>],
) {
    for (slot, &var) in into.iter_mut().zip(leaves) {
        if let Some(grad) = g.grad(var) {
            match slot {
                Some(acc) => acc.add_in_place(grad),
                None => *slot = Some(grad.clone()),
            }
        }
    }
}

fn scale_grads<T: Scalar>(grads: &mut [Option<TensorData<T>>], factor: f64) {
    for slot in grads.iter_mut().flatten() {
        slot.scale_in_place(T::cast(factor));
    }
}

/// Pretrain FALM on labeled feedback data. Returns the per-epoch mean loss.
pub fn pretrain_falm(
    cfg: &TrainConfig,
    falm: &mut Falm<f32>,
    world: &[EpisodeRecord],
    data: &[FalmSample],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty FALM training set".into()));
    }
    let mut optimizer = Adam::new(AdamConfig::with_lr(cfg.lr), &falm.params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0xFA11));
        let mut epoch_loss = 0.0;
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let context = || format!("falm epoch {epoch} batch {batch_id}");
            let mut grads: Vec<Option<TensorData<f32>>> = vec![None; falm.params.len()];
            for &i in batch {
                let sample = &data[i];
                let ep = &world[sample.episode];
                let q = &ep.queries[sample.query];
                let loss = (|| -> Result<f64> {
                    let e_r = build_reference_embedding(ep, sample.feedback.ref_span)?;
                    let mut g = Graph::new();
                    let leaves = falm.leaves(&mut g, true);
                    let e_v = g.constant(ep.features.clone());
                    let e_q = g.constant(q.embedding_tokens.clone());
                    let e_f = g.constant(sample.feedback.embedding_tokens.clone());
                    let e_r = g.constant(e_r);
                    let vars = falm.forward(&mut g, &leaves, e_v, e_q, e_f, e_r)?;
                    let loss = falm.loss(&mut g, &vars, &sample.labels)?;
                    g.backward(loss)?;
                    collect_grads(&g, &leaves, &mut grads);
                    Ok(g.value(loss).item() as f64)
                })()
                .map_err(|e| wrap_nonfinite(e, context()))?;
                epoch_loss += loss;
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            optimizer.step(&mut falm.params, &grads)?;
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    Ok(curve)
}

/// Pretrain the host on query-only samples (`(episode, query)` pairs).
pub fn pretrain_host(
    cfg: &TrainConfig,
    host: &mut Host<f32>,
    world: &[EpisodeRecord],
    queries: &[(usize, usize)],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(Error::Config("empty host training set".into()));
    }
    let mut optimizer = Adam::new(AdamConfig::with_lr(cfg.lr), &host.params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0x4057));
        let mut epoch_loss = 0.0;
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let context = || format!("host epoch {epoch} batch {batch_id}");
            let mut grads: Vec<Option<TensorData<f32>>> = vec![None; host.params.len()];
            for &i in batch {
                let (e, qi) = queries[i];
                let ep = &world[e];
                let q = &ep.queries[qi];
                let loss = (|| -> Result<f64> {
                    let mut g = Graph::new();
                    let leaves = host.leaves(&mut g, true);
                    let e_v = g.constant(ep.features.clone());
                    let e_q = g.constant(q.embedding_tokens.clone());
                    let fused = host.encode(&mut g, &leaves, e_v, e_q)?;
                    let heads = host.decode_heads(&mut g, &leaves, fused)?;
                    let loss = host.loss(&mut g, heads, q.gt_span, ep.clip_count)?;
                    g.backward(loss)?;
                    collect_grads(&g, &leaves, &mut grads);
                    Ok(g.value(loss).item() as f64)
                })()
                .map_err(|e| wrap_nonfinite(e, context()))?;
                epoch_loss += loss;
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            optimizer.step(&mut host.params, &grads)?;
        }
        curve.push(epoch_loss / queries.len() as f64);
    }
    Ok(curve)
}

/// Everything fine-tuning needs beyond the models themselves.
pub struct FinetuneData<'a> {
    pub world: &'a [EpisodeRecord],
    pub feedback: &'a [FalmSample],
    /// Query-only pool; defaults to every query in the world.
    pub queries: &'a [(usize, usize)],
    pub embedder: &'a Embedder,
    pub bank: &'a FeedbackTemplateBank,
}

enum Entry {
    Feedback { index: usize, augmented: Option<FeedbackSample> },
    QueryOnly(usize),
}

/// Fine-tune host + adapter (and FALM too unless frozen) on mixed query-only
/// and feedback batches. Returns the per-epoch mean loss and the trained
/// adapter.
pub fn finetune_refocus(
    cfg: &TrainConfig,
    host: &mut Host<f32>,
    falm: &mut Falm<f32>,
    adapter: EmAdapter,
    data: &FinetuneData<'_>,
) -> Result<(Vec<f64>, EmAdapter)> {
    cfg.validate()?;
    if data.feedback.is_empty() {
        return Err(Error::Config("empty fine-tuning feedback set".into()));
    }
    if data.queries.is_empty() {
        return Err(Error::Config("empty query-only pool".into()));
    }

    let mut adapter_params: ParamStore<f32> = ParamStore::new();
    adapter_params.insert("alpha", TensorData::scalar(adapter.alpha));
    adapter_params.insert("beta", TensorData::scalar(adapter.beta));

    let mut opt_host = Adam::new(AdamConfig::with_lr(cfg.lr), &host.params);
    // two scalars shaping every reweighting; they can take much larger steps
    let mut opt_adapter = Adam::new(AdamConfig::with_lr(cfg.lr * 10.0), &adapter_params);
    let mut opt_falm = (!cfg.falm_frozen).then(|| Adam::new(AdamConfig::with_lr(cfg.lr), &falm.params));

    // Frozen FALM makes each sample's alignment scores a constant; compute
    // them once up front.
    let p_cache: Vec<Option<Vec<f32>>> = if cfg.falm_frozen {
        data.feedback
            .iter()
            .map(|s| {
                let ep = &data.world[s.episode];
                let q = &ep.queries[s.query];
                falm.infer(ep, q, &s.feedback).map(|out| Some(out.p))
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; data.feedback.len()]
    };

    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch, 0xF17E);
        let mut entries: Vec<Entry> = Vec::new();
        for index in 0..data.feedback.len() {
            let sample = &data.feedback[index];
            let augmented = if cfg.temporal_aug_rate > 0.0
                && rng.gen_bool(cfg.temporal_aug_rate)
            {
                let ep = &data.world[sample.episode];
                let q = &ep.queries[sample.query];
                make_simple_temporal(
                    data.embedder,
                    &q.id,
                    q.gt_span,
                    sample.feedback.ref_span,
                    data.bank,
                    rng.gen(),
                )
                .ok()
            } else {
                None
            };
            entries.push(Entry::Feedback { index, augmented });
        }
        if cfg.mixed_sampling {
            for _ in 0..data.feedback.len() {
                entries.push(Entry::QueryOnly(rng.gen_range(0..data.queries.len())));
            }
        }
        entries.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch_id, batch) in entries.chunks(cfg.batch_size).enumerate() {
            let context = || format!("finetune epoch {epoch} batch {batch_id}");
            let mut g_host: Vec<Option<TensorData<f32>>> = vec![None; host.params.len()];
            let mut g_adapter: Vec<Option<TensorData<f32>>> = vec![None; adapter_params.len()];
            let mut g_falm: Vec<Option<TensorData<f32>>> = vec![None; falm.params.len()];
            for entry in batch {
                let loss = run_finetune_entry(
                    entry,
                    cfg,
                    host,
                    falm,
                    &adapter_params,
                    data,
                    &p_cache,
                    &mut g_host,
                    &mut g_adapter,
                    &mut g_falm,
                )
                .map_err(|e| wrap_nonfinite(e, context()))?;
                epoch_loss += loss;
            }
            let inv = 1.0 / batch.len() as f64;
            scale_grads(&mut g_host, inv);
            scale_grads(&mut g_adapter, inv);
            opt_host.step(&mut host.params, &g_host)?;
            opt_adapter.step(&mut adapter_params, &g_adapter)?;
            if let Some(opt) = opt_falm.as_mut() {
                scale_grads(&mut g_falm, inv);
                opt.step(&mut falm.params, &g_falm)?;
            }
        }
        curve.push(epoch_loss / entries.len() as f64);
    }

    let trained = EmAdapter {
        alpha: adapter_params.get("alpha").expect("alpha param").data()[0],
        beta: adapter_params.get("beta").expect("beta param").data()[0],
    };
    Ok((curve, trained))
}

#[allow(clippy::too_many_arguments)]
fn run_finetune_entry(
    entry: &Entry,
    cfg: &TrainConfig,
    host: &Host<f32>,
    falm: &Falm<f32>,
    adapter_params: &ParamStore<f32>,
    data: &FinetuneData<'_>,
    p_cache: &[Option<Vec<f32>>],
    g_host: &mut [Option<TensorData<f32>>],
    g_adapter: &mut [Option<TensorData<f32>>],
    g_falm: &mut [Option<TensorData<f32>>],
) -> Result<f64> {
    match entry {
        Entry::QueryOnly(i) => {
            let (e, qi) = data.queries[*i];
            let ep = &data.world[e];
            let q = &ep.queries[qi];
            let mut g = Graph::new();
            let host_leaves = host.leaves(&mut g, true);
            let e_v = g.constant(ep.features.clone());
            let e_q = g.constant(q.embedding_tokens.clone());
            let fused = host.encode(&mut g, &host_leaves, e_v, e_q)?;
            let heads = host.decode_heads(&mut g, &host_leaves, fused)?;
            let loss = host.loss(&mut g, heads, q.gt_span, ep.clip_count)?;
            g.backward(loss)?;
            collect_grads(&g, &host_leaves, g_host);
            Ok(g.value(loss).item() as f64)
        }
        Entry::Feedback { index, augmented } => {
            let sample = &data.feedback[*index];
            let feedback = augmented.as_ref().unwrap_or(&sample.feedback);
            let ep = &data.world[sample.episode];
            let q = &ep.queries[sample.query];
            let e_r = build_reference_embedding(ep, feedback.ref_span)?;

            let mut g = Graph::new();
            let host_leaves = host.leaves(&mut g, true);
            let adapter_leaves = crate::nn::param_leaves(&mut g, adapter_params, true);
            let mut unused_heads: Option<[Var; 3]> = None;
            let (p_var, falm_leaves): (Var, Option<Vec<Var>>) = if cfg.falm_frozen {
                // augmented turns differ from the cached sample; rerun FALM
                let p = match (augmented, &p_cache[*index]) {
                    (None, Some(p)) => p.clone(),
                    _ => falm.infer(ep, q, feedback)?.p,
                };
                (g.constant(TensorData::vector(p)), None)
            } else {
                let falm_leaves = falm.leaves(&mut g, true);
                let e_v = g.constant(to_scalar::<f32>(&ep.features));
                let e_q = g.constant(q.embedding_tokens.clone());
                let e_f = g.constant(feedback.embedding_tokens.clone());
                let e_r = g.constant(e_r.clone());
                let vars = falm.forward(&mut g, &falm_leaves, e_v, e_q, e_f, e_r)?;
                unused_heads = Some([vars.p_c, vars.p_k, vars.p_t]);
                (vars.p, Some(falm_leaves))
            };

            let p_hat = adapter_vars(&mut g, p_var, adapter_leaves[0], adapter_leaves[1])?;
            let e_v = g.constant(ep.features.clone());
            let e_v = g.scale_rows(e_v, p_hat)?;
            let e_q = g.constant(q.embedding_tokens.clone());
            let fused = host.encode(&mut g, &host_leaves, e_v, e_q)?;
            let heads = host.decode_heads(&mut g, &host_leaves, fused)?;
            let mut loss = host.loss(&mut g, heads, q.gt_span, ep.clip_count)?;
            if let Some(heads) = unused_heads {
                // the side heads do not feed this objective; keep their
                // parameters connected with exactly-zero weight
                for h in heads {
                    let s = g.mean(h)?;
                    let s = g.mul_scalar(s, 0.0)?;
                    loss = g.add(loss, s)?;
                }
            }
            g.backward(loss)?;
            collect_grads(&g, &host_leaves, g_host);
            collect_grads(&g, &adapter_leaves, g_adapter);
            if let Some(fl) = falm_leaves {
                collect_grads(&g, &fl, g_falm);
            }
            Ok(g.value(loss).item() as f64)
        }
    }
}

/// Per-phase knobs for [`train_full_stack`].
#[derive(Clone, Debug)]
pub struct StackSchedule {
    pub falm_epochs: usize,
    pub host_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub falm_lr: f64,
    pub host_lr: f64,
    pub finetune_lr: f64,
    pub temporal_aug_rate: f64,
}

impl Default for StackSchedule {
    fn default() -> Self {
        Self {
            falm_epochs: 14,
            host_epochs: 12,
            finetune_epochs: 6,
            batch_size: 16,
            falm_lr: 1e-3,
            host_lr: 1e-3,
            finetune_lr: 1e-4,
            temporal_aug_rate: 0.20,
        }
    }
}

/// Pretrain FALM and the host, then fine-tune host plus adapter: the whole
/// training pipeline in one call, deterministic in `seed`.
pub fn train_full_stack(
    falm_cfg: crate::falm::FalmConfig,
    host_cfg: crate::localizer::HostConfig,
    schedule: &StackSchedule,
    world: &[EpisodeRecord],
    data: &[FalmSample],
    embedder: &Embedder,
    bank: &FeedbackTemplateBank,
    seed: u64,
) -> Result<crate::localizer::RefocusStack> {
    let input_dim = world
        .first()
        .map(|ep| ep.features.cols())
        .ok_or_else(|| Error::Config("empty world".into()))?;
    let queries: Vec<(usize, usize)> = world
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.queries.len()).map(move |qi| (e, qi)))
        .collect();

    let mut falm = Falm::new(falm_cfg, input_dim, seed ^ 0xA11)?;
    let tc = TrainConfig {
        epochs: schedule.falm_epochs,
        batch_size: schedule.batch_size,
        lr: schedule.falm_lr,
        seed: seed ^ 0xA12,
        ..TrainConfig::default()
    };
    pretrain_falm(&tc, &mut falm, world, data)?;

    let mut host = Host::new(host_cfg, input_dim, seed ^ 0xB11)?;
    let tc = TrainConfig {
        epochs: schedule.host_epochs,
        batch_size: schedule.batch_size,
        lr: schedule.host_lr,
        seed: seed ^ 0xB12,
        ..TrainConfig::default()
    };
    pretrain_host(&tc, &mut host, world, &queries)?;

    let tc = TrainConfig {
        epochs: schedule.finetune_epochs,
        batch_size: schedule.batch_size,
        lr: schedule.finetune_lr,
        seed: seed ^ 0xC11,
        temporal_aug_rate: schedule.temporal_aug_rate,
        ..TrainConfig::default()
    };
    let (_, adapter) = finetune_refocus(
        &tc,
        &mut host,
        &mut falm,
        EmAdapter::default(),
        &FinetuneData {
            world,
            feedback: data,
            queries: &queries,
            embedder,
            bank,
        },
    )?;
    Ok(crate::localizer::RefocusStack {
        falm,
        host,
        adapter,
    })
}

/// Resolve a feedback + label stream against its world.
pub fn pair_samples(
    world: &[EpisodeRecord],
    feedback: Vec<FeedbackSample>,
    labels: Vec<crate::labelgen::AlignmentLabels>,
) -> Result<Vec<FalmSample>> {
    if feedback.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} feedback samples but {} label sets",
            feedback.len(),
            labels.len()
        )));
    }
    let index = resolve_query_index(world);
    feedback
        .into_iter()
        .zip(labels)
        .map(|(fb, labels)| {
            let &(episode, query) = index
                .get(&fb.query_id)
                .ok_or_else(|| Error::Config(format!("unknown query {}", fb.query_id)))?;
            Ok(FalmSample {
                episode,
                query,
                feedback: fb,
                labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::falm::FalmConfig;
    use crate::feedbackgen::{
        build_qnf_dataset, QnfBuildConfig, QueryRefs, TemplateBackend,
    };
    use crate::labelgen::{make_labels, LabelConfig};
    use crate::localizer::HostConfig;
    use crate::refsample::{fit_beta, sample_random_span, sample_similar_span};
    use crate::synthworld::{generate_world, WorldConfig};
    use tensorcore::Checkpoint;

    fn tiny_world() -> (Vec<EpisodeRecord>, Embedder, WorldConfig) {
        let cfg = WorldConfig {
            episodes: 4,
            clips_per_episode: (24, 32),
            ..WorldConfig::default()
        };
        (
            generate_world(&cfg).unwrap(),
            Embedder::new(&cfg).unwrap(),
            cfg,
        )
    }

    fn tiny_falm(dim: usize, seed: u64) -> Falm<f32> {
        Falm::new(
            FalmConfig {
                d_model: 16,
                heads: 2,
                t_q_layers: 1,
                t_v_layers: 1,
                t_m_layers: 1,
                head_hidden: 16,
                ffn_hidden: 32,
                ..FalmConfig::default()
            },
            dim,
            seed,
        )
        .unwrap()
    }

    fn tiny_host(dim: usize, seed: u64) -> Host<f32> {
        Host::new(
            HostConfig {
                d_model: 16,
                heads: 2,
                encoder_layers: 1,
                ffn_hidden: 32,
                head_hidden: 16,
                ..HostConfig::default()
            },
            dim,
            seed,
        )
        .unwrap()
    }

    fn falm_dataset(
        world: &[EpisodeRecord],
        emb: &Embedder,
    ) -> Vec<FalmSample> {
        let durations: Vec<f64> = world
            .iter()
            .flat_map(|ep| ep.queries.iter().map(|q| q.gt_span.duration()))
            .collect();
        let beta = fit_beta(&durations).unwrap();
        let refs: Vec<Vec<QueryRefs>> = world
            .iter()
            .map(|ep| {
                ep.queries
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        let mut qr = QueryRefs::default();
                        if let Ok(r) = sample_random_span(ep, q.gt_span, &beta, 31 + qi as u64) {
                            qr.random.push(r);
                        }
                        if let Ok(s) = sample_similar_span(ep, q.gt_span) {
                            qr.similar.push(s);
                        }
                        qr
                    })
                    .collect()
            })
            .collect();
        let backend = TemplateBackend::default();
        let bank = FeedbackTemplateBank::default();
        let ds = build_qnf_dataset(world, &refs, &backend, &bank, emb, &QnfBuildConfig::train(9))
            .unwrap();
        let index = resolve_query_index(world);
        let label_cfg = LabelConfig::default();
        ds.samples
            .into_iter()
            .map(|feedback| {
                let (e, qi) = index[&feedback.query_id];
                let labels =
                    make_labels(&feedback, &world[e].queries[qi], &world[e], emb, &label_cfg)
                        .unwrap();
                FalmSample {
                    episode: e,
                    query: qi,
                    feedback,
                    labels,
                }
            })
            .collect()
    }

    fn params_bytes(params: &ParamStore<f32>) -> Vec<u8> {
        let mut ckpt = Checkpoint::new();
        params.export("x.", &mut ckpt);
        ckpt.to_bytes()
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let (world, emb, cfg) = tiny_world();
        let data = falm_dataset(&world, &emb);
        let mut falm = tiny_falm(cfg.embed_dim, 3);
        let before = params_bytes(&falm.params);
        let curve = pretrain_falm(
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            &mut falm,
            &world,
            &data,
        )
        .unwrap();
        assert!(curve.is_empty());
        assert_eq!(before, params_bytes(&falm.params));
    }

    #[test]
    fn falm_training_is_seed_deterministic_and_decreases_loss() {
        let (world, emb, cfg) = tiny_world();
        let data = falm_dataset(&world, &emb);
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 8,
            lr: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut f1 = tiny_falm(cfg.embed_dim, 3);
        let c1 = pretrain_falm(&tc, &mut f1, &world, &data).unwrap();
        let mut f2 = tiny_falm(cfg.embed_dim, 3);
        let c2 = pretrain_falm(&tc, &mut f2, &world, &data).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(params_bytes(&f1.params), params_bytes(&f2.params));
        assert!(
            c1.last().unwrap() < c1.first().unwrap(),
            "loss did not drop: {c1:?}"
        );
    }

    #[test]
    fn host_training_decreases_loss_and_is_deterministic() {
        let (world, _, cfg) = tiny_world();
        let queries: Vec<(usize, usize)> = world
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.queries.len()).map(move |qi| (e, qi)))
            .collect();
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut h1 = tiny_host(cfg.embed_dim, 4);
        let c1 = pretrain_host(&tc, &mut h1, &world, &queries).unwrap();
        let mut h2 = tiny_host(cfg.embed_dim, 4);
        let c2 = pretrain_host(&tc, &mut h2, &world, &queries).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(params_bytes(&h1.params), params_bytes(&h2.params));
        assert!(c1.last().unwrap() < c1.first().unwrap());
    }

    #[test]
    fn finetune_freezes_falm_and_trains_adapter() {
        let (world, emb, cfg) = tiny_world();
        let data = falm_dataset(&world, &emb);
        let queries: Vec<(usize, usize)> = world
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.queries.len()).map(move |qi| (e, qi)))
            .collect();
        let mut falm = tiny_falm(cfg.embed_dim, 3);
        let mut host = tiny_host(cfg.embed_dim, 4);
        let bank = FeedbackTemplateBank::default();
        let falm_before = params_bytes(&falm.params);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (curve, adapter) = finetune_refocus(
            &tc,
            &mut host,
            &mut falm,
            EmAdapter::default(),
            &FinetuneData {
                world: &world,
                feedback: &data,
                queries: &queries,
                embedder: &emb,
                bank: &bank,
            },
        )
        .unwrap();
        assert_eq!(curve.len(), 3);
        // frozen FALM: identical bytes before and after
        assert_eq!(falm_before, params_bytes(&falm.params));
        // the adapter actually moved
        assert!(
            adapter.alpha != 1.0 || adapter.beta != 0.0,
            "adapter stayed at identity: {adapter:?}"
        );
    }

    #[test]
    fn finetune_without_augmentation_never_builds_temporal_substitutes() {
        let (world, emb, cfg) = tiny_world();
        let data = falm_dataset(&world, &emb);
        let queries: Vec<(usize, usize)> = world
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.queries.len()).map(move |qi| (e, qi)))
            .collect();
        let mut falm = tiny_falm(cfg.embed_dim, 3);
        let mut host = tiny_host(cfg.embed_dim, 4);
        let bank = FeedbackTemplateBank::default();
        let tc = TrainConfig {
            epochs: 1,
            temporal_aug_rate: 0.0,
            seed: 6,
            ..TrainConfig::default()
        };
        // rate 0 must not alter behavior vs a second identical run
        let (c1, a1) = finetune_refocus(
            &tc,
            &mut host,
            &mut falm,
            EmAdapter::default(),
            &FinetuneData {
                world: &world,
                feedback: &data,
                queries: &queries,
                embedder: &emb,
                bank: &bank,
            },
        )
        .unwrap();
        let mut falm2 = tiny_falm(cfg.embed_dim, 3);
        let mut host2 = tiny_host(cfg.embed_dim, 4);
        let (c2, a2) = finetune_refocus(
            &tc,
            &mut host2,
            &mut falm2,
            EmAdapter::default(),
            &FinetuneData {
                world: &world,
                feedback: &data,
                queries: &queries,
                embedder: &emb,
                bank: &bank,
            },
        )
        .unwrap();
        assert_eq!(c1, c2);
        assert_eq!(a1, a2);
    }
}
