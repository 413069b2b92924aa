//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (visible with `--nocapture`). Trained stacks are
//! built once and shared across the experiment criteria.

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refocus::evalkit::{
    evaluate_split, multi_turn_eval, noisy_recovery_eval, recall_at_k, EvalMode, EvalSet,
};
use refocus::falm::{Falm, FalmConfig};
use refocus::feedbackgen::{
    build_qnf_dataset, FeedbackTemplateBank, QnfBuildConfig, QueryRefs, TemplateBackend,
};
use refocus::labelgen::{
    binarize, clause_similarity, invert_not_contains, make_labels, smooth_and_normalize,
    temporal_labels, LabelConfig,
};
use refocus::localizer::{adapter_apply, host_forward, EmAdapter, HostConfig, SpanPrediction};
use refocus::pipeline::{RunConfig, Split};
use refocus::refsample::{
    fit_beta, other_query_spans, sample_random_span, sample_similar_span, BetaParams,
};
use refocus::synthworld::{generate_world, Embedder};
use refocus::trainer::{
    pair_samples, pretrain_falm, resolve_query_index, train_full_stack, FalmSample, StackSchedule,
    TrainConfig,
};
use refocus::types::{EpisodeRecord, TemporalCue};
use refocus::{clips_in_span, tiou, Span};
use tensorcore::{check_loss_gradients, Graph, ParamStore, TensorData, Var};

// ---- shared fixtures ----

/// The timed criteria hold this lock so their wall-clock budgets are not
/// distorted by running concurrently on a small machine.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct Corpus {
    emb: Embedder,
    train: Vec<EpisodeRecord>,
    val: Vec<EpisodeRecord>,
    test: Vec<EpisodeRecord>,
    beta: BetaParams,
    train_data: Vec<FalmSample>,
    val_data: Vec<FalmSample>,
    test_feedback: Vec<refocus::types::FeedbackSample>,
    bank: FeedbackTemplateBank,
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let cfg = RunConfig::default();
        let emb = Embedder::new(&cfg.world_for(Split::Train)).expect("embedder");
        let train = generate_world(&cfg.world_for(Split::Train)).expect("train world");
        let val = generate_world(&cfg.world_for(Split::Val)).expect("val world");
        let test = generate_world(&cfg.world_for(Split::Test)).expect("test world");
        let durations: Vec<f64> = train
            .iter()
            .flat_map(|ep| ep.queries.iter().map(|q| q.gt_span.duration()))
            .collect();
        let beta = fit_beta(&durations).expect("beta fit");
        let bank = FeedbackTemplateBank::default();

        let train_data = labeled_samples(&train, &emb, &beta, QnfBuildConfig::train(5));
        let val_data = labeled_samples(&val, &emb, &beta, QnfBuildConfig::eval(6));
        let test_feedback = feedback_only(&test, &emb, &beta, QnfBuildConfig::eval(7));
        Corpus {
            emb,
            train,
            val,
            test,
            beta,
            train_data,
            val_data,
            test_feedback,
            bank,
        }
    })
}

fn refs_for(
    world: &[EpisodeRecord],
    beta: &BetaParams,
) -> Vec<Vec<QueryRefs>> {
    world
        .iter()
        .map(|ep| {
            ep.queries
                .iter()
                .enumerate()
                .map(|(qi, q)| {
                    let mut qr = QueryRefs::default();
                    for k in 0..3u64 {
                        if let Ok(r) =
                            sample_random_span(ep, q.gt_span, beta, 4000 + qi as u64 * 13 + k)
                        {
                            qr.random.push(r);
                        }
                    }
                    if let Ok(s) = sample_similar_span(ep, q.gt_span) {
                        qr.similar.push(s);
                    }
                    qr.other = other_query_spans(ep, q);
                    qr
                })
                .collect()
        })
        .collect()
}

fn feedback_only(
    world: &[EpisodeRecord],
    emb: &Embedder,
    beta: &BetaParams,
    cfg: QnfBuildConfig,
) -> Vec<refocus::types::FeedbackSample> {
    let refs = refs_for(world, beta);
    let backend = TemplateBackend::default();
    let bank = FeedbackTemplateBank::default();
    build_qnf_dataset(world, &refs, &backend, &bank, emb, &cfg)
        .expect("qnf dataset")
        .samples
}

fn labeled_samples(
    world: &[EpisodeRecord],
    emb: &Embedder,
    beta: &BetaParams,
    cfg: QnfBuildConfig,
) -> Vec<FalmSample> {
    let samples = feedback_only(world, emb, beta, cfg);
    let lc = LabelConfig::default();
    let index = resolve_query_index(world);
    let labels: Vec<_> = samples
        .iter()
        .map(|fb| {
            let (e, qi) = index[&fb.query_id];
            make_labels(fb, &world[e].queries[qi], &world[e], emb, &lc).expect("labels")
        })
        .collect();
    pair_samples(world, samples, labels).expect("pairing")
}

struct SeedRun {
    stack: refocus::localizer::RefocusStack,
    report: refocus::evalkit::SplitReport,
}

fn stacks() -> &'static Vec<SeedRun> {
    static STACKS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    STACKS.get_or_init(|| {
        let c = corpus();
        let set = EvalSet::build(&c.test, &c.test_feedback);
        [42u64, 43, 44]
            .iter()
            .map(|&seed| {
                let stack = train_full_stack(
                    FalmConfig::default(),
                    HostConfig::default(),
                    &StackSchedule::default(),
                    &c.train,
                    &c.train_data,
                    &c.emb,
                    &c.bank,
                    seed,
                )
                .expect("stack training");
                let report =
                    evaluate_split(&stack, &set, EvalMode::WithFeedback).expect("evaluation");
                SeedRun { stack, report }
            })
            .collect()
    })
}

fn auc(scores: &[(f32, u8)]) -> f64 {
    let mut sorted: Vec<_> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = sorted.iter().filter(|(_, l)| *l == 1).count() as f64;
    let n_neg = sorted.len() as f64 - n_pos;
    assert!(n_pos > 0.0 && n_neg > 0.0, "degenerate AUC labels");
    let mut rank_sum = 0.0;
    let mut i = 0;
    let mut rank = 1.0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg = (rank + rank + (j - i) as f64 - 1.0) / 2.0;
        for item in &sorted[i..j] {
            if item.1 == 1 {
                rank_sum += avg;
            }
        }
        rank += (j - i) as f64;
        i = j;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

// ---- criterion 1 ----

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..200 {
        let gt = random_span(&mut rng, 80.0);
        let preds: Vec<(Span, f32)> = (0..rng.gen_range(1..8))
            .map(|i| (random_span(&mut rng, 80.0), 1.0 - i as f32 * 0.05))
            .collect();
        let pred = SpanPrediction {
            ranked: preds.clone(),
        };
        for (a, _) in &preds {
            // brute-force tiou oracle from interval endpoints
            let lo = a.start.max(gt.start);
            let hi = a.end.min(gt.end);
            let inter = (hi - lo).max(0.0);
            let union = (a.end - a.start) + (gt.end - gt.start) - inter;
            let want = inter / union;
            let got = tiou(*a, gt);
            assert!(
                (got - want).abs() <= 1e-6,
                "case {case}: tiou {got} vs oracle {want}"
            );
        }
        for k in [1usize, 5] {
            for thresh in [0.3, 0.5] {
                let want = preds
                    .iter()
                    .take(k)
                    .any(|(s, _)| tiou(*s, gt) >= thresh) as u8;
                let got = recall_at_k(&pred, gt, k, thresh).unwrap();
                assert_eq!(got, want, "case {case}: recall R{k}@{thresh}");
            }
        }
    }
    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 1.0, "criterion 1 took {dt:?}");
    println!("criterion 1 (metric oracle equivalence, 200 fixtures, {dt:?}): PASS");
}

fn random_span(rng: &mut ChaCha8Rng, m: f64) -> Span {
    let start = rng.gen_range(0.0..m - 1.0);
    let dur = rng.gen_range(0.5..12.0);
    Span::new(start, (start + dur).min(m)).unwrap()
}

// ---- criterion 2 ----

#[test]
fn criterion_2_label_pipeline_golden_fixtures() {
    // 8-clip fixtures, every stage against hand-computed values
    // binarization: gt clips [2,5) have scores [0.8, 0.9, 1.0]
    let scores = [0.7, 0.6551, 0.8, 0.9, 1.0, 0.6550, 0.1, 0.9];
    let labels = binarize(&scores, Span::new(2.0, 5.0).unwrap()).unwrap();
    // mu = 0.9, population sigma = sqrt(0.02/3), delta = 0.9 - 3 sigma
    let delta = 0.9 - 3.0 * (0.02f64 / 3.0).sqrt();
    assert!((delta - 0.655_051_025_721_682_3).abs() < 1e-9);
    assert_eq!(labels.to_vec(), vec![1, 1, 1, 1, 1, 0, 0, 1]);

    // inversion
    let s_n = [0.0, 0.25, 0.5, 0.75, 1.0, 0.3, 0.6, 0.9];
    let s_k = invert_not_contains(&s_n);
    for (k, n) in s_k.iter().zip(s_n.iter()) {
        assert!((k + n - 1.0).abs() <= 1e-6);
    }

    // gaussian smoothing + min-max normalization on an 8-clip impulse,
    // against a directly convolved oracle
    let impulse = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let got = smooth_and_normalize(&impulse, 1.0);
    let radius = 3i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|j| (-(j * j) as f64 / 2.0).exp())
        .collect();
    let z: f64 = kernel.iter().sum();
    let m = impulse.len() as i64;
    let mut smoothed = [0.0f64; 8];
    for i in 0..m {
        for j in -radius..=radius {
            let mut idx = i - j;
            while idx < 0 || idx >= m {
                idx = if idx < 0 { -idx } else { 2 * (m - 1) - idx };
            }
            smoothed[i as usize] += kernel[(j + radius) as usize] / z * impulse[idx as usize];
        }
    }
    let mn = smoothed.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (g, s) in got.iter().zip(smoothed.iter()) {
        let want = (s - mn) / (mx - mn);
        assert!((g - want).abs() <= 1e-6, "smoothing: {g} vs {want}");
    }
    assert_eq!(smooth_and_normalize(&[0.4; 8], 2.0), vec![0.5; 8]);

    // temporal side masks
    assert_eq!(
        temporal_labels(Span::new(4.0, 6.0).unwrap(), TemporalCue::Before, 8),
        vec![1, 1, 1, 1, 0, 0, 0, 0]
    );
    assert_eq!(
        temporal_labels(Span::new(4.0, 6.0).unwrap(), TemporalCue::After, 8),
        vec![0, 0, 0, 0, 0, 0, 1, 1]
    );

    // AND fusion
    let l_c = [1u8, 1, 0, 1, 1, 0, 1, 1];
    let l_k = [1u8, 0, 1, 1, 1, 1, 1, 0];
    let l_t = [1u8, 1, 1, 0, 1, 1, 1, 1];
    let fused: Vec<u8> = (0..8).map(|i| l_c[i] & l_k[i] & l_t[i]).collect();
    assert_eq!(fused, vec![1, 0, 0, 0, 1, 0, 1, 0]);

    println!("criterion 2 (label-pipeline golden fixtures): PASS");
}

// ---- criterion 3 ----

#[test]
fn criterion_3_gradient_integrity() {
    let _guard = serial();
    let start = Instant::now();
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-3;

    // every tensorcore op through central finite differences
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut rand_t = |shape: Vec<usize>| -> TensorData<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.4..1.4);
                if v.abs() < 0.15 {
                    v + 0.3
                } else {
                    v
                }
            })
            .collect();
        TensorData::new(shape, data).unwrap()
    };
    let weighted = |g: &mut Graph<f64>, v: Var| -> tensorcore::Result<Var> {
        let n = g.value(v).len();
        let shape = g.value(v).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|i| 0.25 + 0.13 * i as f64).collect();
        let w = g.constant(TensorData::new(shape, w)?);
        let p = g.mul(v, w)?;
        g.sum(p)
    };

    type OpBuild = Box<dyn FnMut(&mut Graph<f64>, &[Var]) -> tensorcore::Result<Var>>;
    let target = TensorData::vector(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let svec = TensorData::vector(vec![0.4, -0.2, 0.9, 0.1, -0.6, 0.3]);
    let cases: Vec<(&str, Vec<TensorData<f64>>, OpBuild)> = vec![
        ("add", vec![rand_t(vec![2, 3]), rand_t(vec![2, 3])], {
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y)
            })
        }),
        ("sub", vec![rand_t(vec![2, 3]), rand_t(vec![2, 3])], {
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted(g, y)
            })
        }),
        ("mul", vec![rand_t(vec![2, 3]), rand_t(vec![2, 3])], {
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y)
            })
        }),
        ("scalar_ops", vec![rand_t(vec![2, 3])], {
            Box::new(move |g, v| {
                let y = g.mul_scalar(v[0], 1.3)?;
                let y = g.add_scalar(y, -0.2)?;
                weighted(g, y)
            })
        }),
        ("matmul", vec![rand_t(vec![2, 3]), rand_t(vec![3, 4])], {
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted(g, y)
            })
        }),
        ("transpose", vec![rand_t(vec![3, 2])], {
            Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                weighted(g, y)
            })
        }),
        ("concat_slice", vec![rand_t(vec![2, 3]), rand_t(vec![2, 3])], {
            Box::new(move |g, v| {
                let c0 = g.concat(0, &[v[0], v[1]])?;
                let s0 = g.slice(c0, 0, 1, 2)?;
                let c1 = g.concat(1, &[v[0], v[1]])?;
                let s1 = g.slice(c1, 1, 2, 3)?;
                let a = weighted(g, s0)?;
                let b = weighted(g, s1)?;
                g.add(a, b)
            })
        }),
        ("reshape_mean_sum", vec![rand_t(vec![2, 6])], {
            Box::new(move |g, v| {
                let r = g.reshape(v[0], vec![3, 4])?;
                let a = weighted(g, r)?;
                let b = g.mean(v[0])?;
                let t = g.sum(v[0])?;
                let ab = g.add(a, b)?;
                let t = g.mul_scalar(t, 0.1)?;
                g.add(ab, t)
            })
        }),
        ("softmax_rows", vec![rand_t(vec![3, 5])], {
            Box::new(move |g, v| {
                let y = g.softmax_rows(v[0])?;
                weighted(g, y)
            })
        }),
        (
            "layer_norm",
            vec![rand_t(vec![3, 6]), rand_t(vec![6]), rand_t(vec![6])],
            {
                Box::new(move |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2])?;
                    weighted(g, y)
                })
            },
        ),
        ("relu", vec![rand_t(vec![3, 4])], {
            Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                weighted(g, y)
            })
        }),
        ("gelu", vec![rand_t(vec![3, 4])], {
            Box::new(move |g, v| {
                let y = g.gelu(v[0])?;
                weighted(g, y)
            })
        }),
        ("sigmoid", vec![rand_t(vec![3, 4])], {
            Box::new(move |g, v| {
                let y = g.sigmoid(v[0])?;
                weighted(g, y)
            })
        }),
        ("clamp", vec![rand_t(vec![3, 4])], {
            Box::new(move |g, v| {
                let y = g.clamp(v[0], -1.1, 1.1)?;
                weighted(g, y)
            })
        }),
        ("bias_add", vec![rand_t(vec![4, 3]), rand_t(vec![3])], {
            Box::new(move |g, v| {
                let y = g.bias_add(v[0], v[1])?;
                weighted(g, y)
            })
        }),
        ("scale_rows", vec![rand_t(vec![4, 3]), rand_t(vec![4])], {
            Box::new(move |g, v| {
                let y = g.scale_rows(v[0], v[1])?;
                weighted(g, y)
            })
        }),
        ("scale_by", vec![rand_t(vec![4, 3]), rand_t(vec![1])], {
            Box::new(move |g, v| {
                let y = g.scale_by(v[0], v[1])?;
                weighted(g, y)
            })
        }),
        (
            "attention",
            vec![rand_t(vec![3, 4]), rand_t(vec![5, 4]), rand_t(vec![5, 2])],
            {
                Box::new(move |g, v| {
                    let y = g.scaled_dot_attention(v[0], v[1], v[2], None)?;
                    weighted(g, y)
                })
            },
        ),
        ("bce_loss", vec![rand_t(vec![6])], {
            let t = target.clone();
            Box::new(move |g, v| {
                let p = g.sigmoid(v[0])?;
                let tv = g.constant(t.clone());
                g.bce_loss(p, tv, None)
            })
        }),
        ("mse_loss", vec![rand_t(vec![6])], {
            let t = svec.clone();
            Box::new(move |g, v| {
                let tv = g.constant(t.clone());
                g.mse_loss(v[0], tv, None)
            })
        }),
        ("l1_loss", vec![rand_t(vec![6])], {
            let t = svec.clone();
            Box::new(move |g, v| {
                let tv = g.constant(t.clone());
                g.l1_loss(v[0], tv, None)
            })
        }),
        ("weighted_losses", vec![rand_t(vec![6])], {
            let t = target.clone();
            Box::new(move |g, v| {
                let p = g.sigmoid(v[0])?;
                let tv = g.constant(t.clone());
                let w = g.constant(TensorData::vector(vec![1.0, 4.0, 0.0, 2.0, 1.0, 3.0]));
                g.bce_loss(p, tv, Some(w))
            })
        }),
    ];
    for (name, tensors, mut build) in cases {
        let mut store = ParamStore::new();
        for (i, t) in tensors.into_iter().enumerate() {
            store.insert(format!("{name}.{i}"), t);
        }
        let report = check_loss_gradients(&mut store, H, &mut build).unwrap();
        assert!(
            report.max_rel_err <= TOL,
            "{name}: rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    // full FALM loss on a d_model=8 configuration in f64
    let c = corpus();
    let tiny = FalmConfig {
        d_model: 8,
        heads: 2,
        t_q_layers: 1,
        t_v_layers: 1,
        t_m_layers: 1,
        head_hidden: 8,
        ffn_hidden: 16,
        ..FalmConfig::default()
    };
    let falm: Falm<f64> = Falm::new(tiny, c.emb.dim(), 9).unwrap();
    let sample = &c.train_data[0];
    let ep = &c.train[sample.episode];
    let q = &ep.queries[sample.query];
    // shrink to m = 6 clips so the check stays fast
    let m = 6usize;
    let e_v = ep.features.to_f64();
    let e_v = TensorData::matrix(m, c.emb.dim(), e_v.data()[..m * c.emb.dim()].to_vec()).unwrap();
    let e_q = q.embedding_tokens.to_f64();
    let e_f = sample.feedback.embedding_tokens.to_f64();
    let e_r = refocus::falm::build_reference_embedding(ep, sample.feedback.ref_span)
        .unwrap()
        .to_f64();
    let mut labels = sample.labels.clone();
    labels.l.truncate(m);
    if let Some(v) = labels.l_t.as_mut() {
        v.truncate(m);
    }
    if let Some(v) = labels.l_c.as_mut() {
        v.truncate(m);
    }
    if let Some(v) = labels.l_k.as_mut() {
        v.truncate(m);
    }
    if let Some(v) = labels.s_c.as_mut() {
        v.truncate(m);
    }
    if let Some(v) = labels.s_k.as_mut() {
        v.truncate(m);
    }
    let mut store = falm.params.clone();
    let report = check_loss_gradients(&mut store, H, |g, leaves| {
        let e_v = g.constant(e_v.clone());
        let e_q = g.constant(e_q.clone());
        let e_f = g.constant(e_f.clone());
        let e_r = g.constant(e_r.clone());
        let vars = falm.forward(g, leaves, e_v, e_q, e_f, e_r).map_err(unwrap_tensor)?;
        falm.loss(g, &vars, &labels).map_err(unwrap_tensor)
    })
    .unwrap();
    assert!(
        report.max_rel_err <= TOL,
        "falm loss: rel err {} at {}[{}] over {} scalars",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.checked
    );

    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 30.0, "criterion 3 took {dt:?}");
    println!(
        "criterion 3 (gradient integrity, {} falm scalars, {dt:?}): PASS",
        report.checked
    );
}

fn unwrap_tensor(e: refocus::Error) -> tensorcore::TensorError {
    match e {
        refocus::Error::Tensor(t) => t,
        other => panic!("expected tensor error, got {other}"),
    }
}

// ---- criterion 4 ----

#[test]
fn criterion_4_falm_learnability() {
    let _guard = serial();
    let start = Instant::now();
    let c = corpus();
    let mut falm: Falm<f32> = Falm::new(FalmConfig::default(), c.emb.dim(), 3).unwrap();
    let tc = TrainConfig {
        epochs: 30,
        batch_size: 16,
        lr: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    };
    let curve = pretrain_falm(&tc, &mut falm, &c.train, &c.train_data).unwrap();
    let ratio = curve.last().unwrap() / curve.first().unwrap();
    assert!(
        ratio < 0.5,
        "training loss only fell to {:.1}% of epoch 0",
        ratio * 100.0
    );

    let mut scores: Vec<(f32, u8)> = Vec::new();
    for s in &c.val_data {
        let ep = &c.val[s.episode];
        let q = &ep.queries[s.query];
        let out = falm.infer(ep, q, &s.feedback).unwrap();
        scores.extend(out.p.iter().copied().zip(s.labels.l.iter().copied()));
    }
    let auc_value = auc(&scores);
    assert!(
        auc_value >= 0.85,
        "held-out per-clip AUC {auc_value:.4} below 0.85"
    );

    let dt = start.elapsed();
    assert!(dt.as_secs_f64() < 300.0, "criterion 4 took {dt:?}");
    println!(
        "criterion 4 (FALM learnability: loss ratio {:.3}, AUC {:.4}, {dt:?}): PASS",
        ratio, auc_value
    );
}

// ---- criterion 5 ----

#[test]
fn criterion_5_end_to_end_feedback_gain() {
    let _guard = serial();
    let start = Instant::now();
    let runs = stacks();
    let mut d_r1 = Vec::new();
    let mut d_r5 = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let r1 = run.report.value("delta", 1, 0.3).unwrap();
        let r5 = run.report.value("delta", 5, 0.3).unwrap();
        assert!(r1 > 0.0, "seed {i}: delta R1@0.3 {r1:.4} not positive");
        assert!(r5 > 0.0, "seed {i}: delta R5@0.3 {r5:.4} not positive");
        d_r1.push(r1);
        d_r5.push(r5);
    }
    let mean_r1 = d_r1.iter().sum::<f64>() / d_r1.len() as f64;
    let mean_r5 = d_r5.iter().sum::<f64>() / d_r5.len() as f64;
    assert!(
        mean_r1 >= 0.05,
        "mean delta R1@0.3 {:.2} points below +5 ({d_r1:?})",
        mean_r1 * 100.0
    );
    assert!(
        mean_r5 >= 0.05,
        "mean delta R5@0.3 {:.2} points below +5 ({d_r5:?})",
        mean_r5 * 100.0
    );
    let dt = start.elapsed();
    println!(
        "criterion 5 (feedback gain over 3 seeds: dR1@0.3 {:+.1} pts, dR5@0.3 {:+.1} pts, {dt:?}): PASS",
        mean_r1 * 100.0,
        mean_r5 * 100.0
    );
}

// ---- criterion 6 ----

#[test]
fn criterion_6_query_only_preservation() {
    let runs = stacks();
    let c = corpus();
    let stack = &runs[0].stack;
    let mut checked = 0;
    for ep in c.test.iter().take(20) {
        for q in &ep.queries {
            let bare = host_forward(&stack.host, ep, q, None).unwrap().1;
            let via_stack = stack.predict(ep, q, None).unwrap();
            assert_eq!(bare, via_stack, "no-feedback path diverged on {}", q.id);
            let ones = vec![1.0f32; ep.clip_count];
            let forced = host_forward(&stack.host, ep, q, Some(&ones)).unwrap().1;
            assert_eq!(bare, forced, "all-ones reweighting diverged on {}", q.id);
            checked += 1;
        }
    }
    // the neutralized adapter (alpha 0, beta 1) is the operational bypass
    let neutral = refocus::localizer::RefocusStack {
        falm: Falm::new(FalmConfig::default(), c.emb.dim(), 99).unwrap(),
        host: clone_host(&stack.host),
        adapter: EmAdapter {
            alpha: 0.0,
            beta: 1.0,
        },
    };
    let fb = c
        .test_feedback
        .iter()
        .find(|f| f.query_id == c.test[0].queries[0].id)
        .unwrap();
    let q = &c.test[0].queries[0];
    let bare = neutral.predict(&c.test[0], q, None).unwrap();
    let with_fb = neutral.predict(&c.test[0], q, Some(fb)).unwrap();
    assert_eq!(bare, with_fb, "bypass adapter altered the prediction");
    assert_eq!(adapter_apply(&neutral.adapter, &[0.1, 0.7]), vec![1.0, 1.0]);

    println!("criterion 6 (query-only preservation, {checked} queries, bitwise): PASS");
}

fn clone_host(host: &refocus::localizer::Host<f32>) -> refocus::localizer::Host<f32> {
    let mut fresh =
        refocus::localizer::Host::new(host.cfg.clone(), host.input_dim, 0).unwrap();
    let mut ckpt = tensorcore::Checkpoint::new();
    host.params.export("h.", &mut ckpt);
    fresh.params.import("h.", &ckpt).unwrap();
    fresh
}

// ---- criterion 7 ----

#[test]
fn criterion_7_multi_turn_behavior() {
    let _guard = serial();
    let start = Instant::now();
    let runs = stacks();
    let c = corpus();
    let stack = &runs[0].stack;
    let set = EvalSet::build(&c.test, &c.test_feedback);
    let curve = multi_turn_eval(stack, &set, 3, 5, 1234).unwrap();
    let value = |n: usize| {
        curve
            .iter()
            .find(|p| p.n == n && p.k == 5 && p.tiou == 0.3)
            .map(|p| p.mean)
            .unwrap()
    };
    let (r5_n1, r5_n3) = (value(1), value(3));
    assert!(
        r5_n3 >= r5_n1 - 0.01,
        "R5@0.3 degraded across turns: n=1 {r5_n1:.4}, n=3 {r5_n3:.4}"
    );

    // exact duplicate- and permutation-invariance on real feedback
    let entry_query = &c.test[0].queries[0];
    let pool: Vec<_> = c
        .test_feedback
        .iter()
        .filter(|f| f.query_id == entry_query.id)
        .cloned()
        .collect();
    assert!(pool.len() >= 3);
    let single = stack
        .predict_multi(&c.test[0], entry_query, &pool[..1])
        .unwrap();
    let dup = stack
        .predict_multi(&c.test[0], entry_query, &[pool[0].clone(), pool[0].clone()])
        .unwrap();
    assert_eq!(single, dup, "duplicate feedback changed the prediction");
    let abc = stack
        .predict_multi(&c.test[0], entry_query, &pool[..3])
        .unwrap();
    let mut rev = pool[..3].to_vec();
    rev.reverse();
    let cba = stack.predict_multi(&c.test[0], entry_query, &rev).unwrap();
    assert_eq!(abc, cba, "permuted feedback changed the prediction");

    let dt = start.elapsed();
    println!(
        "criterion 7 (multi-turn: R5@0.3 n=1 {:.4} -> n=3 {:.4}; exact invariances, {dt:?}): PASS",
        r5_n1, r5_n3
    );
}

// ---- criterion 8 ----

#[test]
fn criterion_8_noisy_recovery() {
    let _guard = serial();
    let start = Instant::now();
    let runs = stacks();
    let c = corpus();
    let set = EvalSet::build(&c.test, &c.test_feedback);

    let mut turn1 = Vec::new();
    let mut recovered = Vec::new();
    let mut clean3 = Vec::new();
    let mut query_only = Vec::new();
    for run in runs.iter() {
        let noisy = noisy_recovery_eval(&run.stack, &set, &c.emb, &c.bank, 77, true).unwrap();
        let at = |correct: usize, k: usize| {
            noisy
                .iter()
                .find(|p| p.correct_feedback == correct && p.k == k && p.tiou == 0.3)
                .map(|p| p.value)
                .unwrap()
        };
        turn1.push(at(0, 1));
        recovered.push(at(3, 1));
        let curve = multi_turn_eval(&run.stack, &set, 3, 5, 1234).unwrap();
        clean3.push(
            curve
                .iter()
                .find(|p| p.n == 3 && p.k == 1 && p.tiou == 0.3)
                .map(|p| p.mean)
                .unwrap(),
        );
        query_only.push(run.report.value("query_only", 1, 0.3).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (t1, qo, rec, clean) = (mean(&turn1), mean(&query_only), mean(&recovered), mean(&clean3));
    assert!(
        t1 < qo,
        "wrong-direction feedback did not hurt: turn-1 R1 {t1:.4} vs query-only {qo:.4}"
    );
    assert!(
        rec >= 0.9 * clean,
        "no recovery: R1 after 3 correct turns {rec:.4} < 0.9 x clean {clean:.4}"
    );
    let dt = start.elapsed();
    println!(
        "criterion 8 (noisy recovery: turn-1 {t1:.4} < query-only {qo:.4}; recovered {rec:.4} >= 0.9 x {clean:.4}, {dt:?}): PASS"
    );
}

// ---- criterion 9 ----

#[test]
fn criterion_9_pipeline_determinism() {
    let _guard = serial();
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_refocus");
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("tiny.toml");
    std::fs::write(
        &config_path,
        "seed = 31\n\
         [splits]\ntrain = 6\nval = 3\ntest = 4\n\
         [train_falm]\nepochs = 2\n\
         [train_host]\nepochs = 2\n\
         [finetune]\nepochs = 1\n",
    )
    .unwrap();

    let run = |dir: &std::path::Path| {
        let steps: Vec<Vec<&str>> = vec![
            vec!["gen"],
            vec!["sample-refs", "--split", "train"],
            vec!["sample-refs", "--split", "test"],
            vec!["make-feedback", "--split", "train"],
            vec!["make-feedback", "--split", "test"],
            vec!["make-labels", "--split", "train"],
            vec!["train-falm"],
            vec!["train-host"],
            vec!["finetune"],
            vec!["eval", "--split", "test", "--mode", "query-only"],
            vec!["eval", "--split", "test", "--mode", "feedback"],
            vec!["report"],
        ];
        for step in steps {
            let out = std::process::Command::new(bin)
                .arg("--config")
                .arg(&config_path)
                .arg("--dir")
                .arg(dir)
                .args(&step)
                .output()
                .expect("spawn refocus");
            assert!(
                out.status.success(),
                "step {:?} failed: {}",
                step,
                String::from_utf8_lossy(&out.stderr)
            );
        }
    };

    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    run(&dir_a);
    run(&dir_b);

    let mut files = BTreeMap::new();
    collect_files(&dir_a, &dir_a, &mut files);
    assert!(files.len() > 15, "expected a full artifact tree");
    for (rel, bytes_a) in files {
        let bytes_b = std::fs::read(dir_b.join(&rel)).expect("file exists in second run");
        assert_eq!(
            bytes_a,
            bytes_b,
            "artifact {rel:?} differs between identical runs"
        );
    }
    let dt = start.elapsed();
    println!("criterion 9 (pipeline determinism, byte-identical artifacts, {dt:?}): PASS");
}

fn collect_files(
    root: &std::path::Path,
    dir: &std::path::Path,
    out: &mut BTreeMap<std::path::PathBuf, Vec<u8>>,
) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

// ---- supporting experiment: trained host vs random-span baseline ----

#[test]
fn trained_host_beats_random_span_baseline() {
    let _guard = serial();
    let runs = stacks();
    let c = corpus();
    let stack = &runs[0].stack;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut host_hits = 0.0;
    let mut rand_hits = 0.0;
    let mut n = 0.0;
    for ep in &c.val {
        for q in &ep.queries {
            let pred = stack.predict(ep, q, None).unwrap();
            host_hits += recall_at_k(&pred, q.gt_span, 1, 0.3).unwrap() as f64;
            let span = sample_random_span(ep, Span::new(0.0, 0.5).unwrap(), &c.beta, rng.gen())
                .unwrap();
            let baseline = SpanPrediction {
                ranked: vec![(span, 1.0)],
            };
            rand_hits += recall_at_k(&baseline, q.gt_span, 1, 0.3).unwrap() as f64;
            n += 1.0;
        }
    }
    let (host_r1, rand_r1) = (host_hits / n, rand_hits / n);
    assert!(
        host_r1 - rand_r1 >= 0.20,
        "host R1@0.3 {host_r1:.3} vs random baseline {rand_r1:.3}: margin below 20 points"
    );
    println!(
        "supporting (host beats random baseline: {:.3} vs {:.3}): PASS",
        host_r1, rand_r1
    );
}
