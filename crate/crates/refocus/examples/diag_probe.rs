// Scratch diagnostics: FALM AUC and host quality, measured separately.

use std::time::Instant;

use refocus::falm::{Falm, FalmConfig};
use refocus::feedbackgen::{
    build_qnf_dataset, FeedbackTemplateBank, QnfBuildConfig, QueryRefs, TemplateBackend,
};
use refocus::labelgen::{make_labels, LabelConfig};
use refocus::localizer::{decode_spans, Host, HostConfig};
use refocus::refsample::{fit_beta, other_query_spans, sample_random_span, sample_similar_span};
use refocus::synthworld::{generate_world, Embedder, WorldConfig};
use refocus::trainer::{
    pair_samples, pretrain_falm, pretrain_host, resolve_query_index, FalmSample, TrainConfig,
};
use refocus::types::EpisodeRecord;
use refocus::{clips_in_span, tiou};
use tensorcore::Graph;

fn make_refs(world: &[EpisodeRecord], beta: &refocus::refsample::BetaParams) -> Vec<Vec<QueryRefs>> {
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
                            sample_random_span(ep, q.gt_span, beta, 1000 + qi as u64 * 7 + k)
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

fn build_data(
    world: &[EpisodeRecord],
    emb: &Embedder,
    beta: &refocus::refsample::BetaParams,
    train_split: bool,
    seed: u64,
) -> Vec<FalmSample> {
    let refs = make_refs(world, beta);
    let backend = TemplateBackend::default();
    let bank = FeedbackTemplateBank::default();
    let cfg = if train_split {
        QnfBuildConfig::train(seed)
    } else {
        QnfBuildConfig::eval(seed)
    };
    let ds = build_qnf_dataset(world, &refs, &backend, &bank, emb, &cfg).unwrap();
    let lc = LabelConfig::default();
    let index = resolve_query_index(world);
    let labels: Vec<_> = ds
        .samples
        .iter()
        .map(|fb| {
            let (e, qi) = index[&fb.query_id];
            make_labels(fb, &world[e].queries[qi], &world[e], emb, &lc).unwrap()
        })
        .collect();
    pair_samples(world, ds.samples, labels).unwrap()
}

fn auc(scores: &[(f32, u8)]) -> f64 {
    // rank-based AUC
    let mut sorted: Vec<_> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = sorted.iter().filter(|(_, l)| *l == 1).count() as f64;
    let n_neg = sorted.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    let mut rank = 1.0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (rank + (rank + (j - i) as f64 - 1.0)) / 2.0;
        for item in &sorted[i..j] {
            if item.1 == 1 {
                rank_sum += avg_rank;
            }
        }
        rank += (j - i) as f64;
        i = j;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

fn main() {
    let base = WorldConfig::default();
    let train_cfg = WorldConfig { episodes: 60, episode_offset: 0, ..base.clone() };
    let val_cfg = WorldConfig { episodes: 30, episode_offset: 60, ..base.clone() };
    let emb = Embedder::new(&base).unwrap();
    let train = generate_world(&train_cfg).unwrap();
    let val = generate_world(&val_cfg).unwrap();

    let durations: Vec<f64> = train
        .iter()
        .flat_map(|ep| ep.queries.iter().map(|q| q.gt_span.duration()))
        .collect();
    let beta = fit_beta(&durations).unwrap();
    let data = build_data(&train, &emb, &beta, true, 5);
    let val_data = build_data(&val, &emb, &beta, false, 6);
    println!("train {} samples, val {}", data.len(), val_data.len());

    // --- FALM: 30 epochs, loss halving + held-out AUC ---
    let mut falm: Falm<f32> = Falm::new(FalmConfig::default(), base.embed_dim, 3).unwrap();
    let tc = TrainConfig {
        epochs: 30,
        batch_size: 16,
        lr: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let curve = pretrain_falm(&tc, &mut falm, &train, &data).unwrap();
    println!(
        "falm 30 epochs: {:?}; loss {:.4} -> {:.4} (ratio {:.3})",
        t0.elapsed(),
        curve[0],
        curve[curve.len() - 1],
        curve[curve.len() - 1] / curve[0]
    );
    let mut scores: Vec<(f32, u8)> = Vec::new();
    let mut by_subset: std::collections::BTreeMap<&str, Vec<(f32, u8)>> = Default::default();
    for s in &val_data {
        let ep = &val[s.episode];
        let q = &ep.queries[s.query];
        let out = falm.infer(ep, q, &s.feedback).unwrap();
        let key = match (
            !s.feedback.clauses.contains.is_empty(),
            !s.feedback.clauses.not_contains.is_empty(),
            s.feedback.clauses.temporal != refocus::types::TemporalCue::None,
        ) {
            (false, false, true) => "temporal_only",
            (true, false, _) => "contains",
            (false, true, _) => "not_contains",
            (true, true, _) => "both",
            _ => "other",
        };
        for (p, l) in out.p.iter().zip(s.labels.l.iter()) {
            scores.push((*p, *l));
            by_subset.entry(key).or_default().push((*p, *l));
        }
    }
    println!("falm held-out per-clip AUC: {:.4}", auc(&scores));
    for (key, subset) in &by_subset {
        println!("  {key}: AUC {:.4} over {} clips", auc(subset), subset.len());
    }

    // --- host alone: longer training, quality check ---
    for epochs in [15usize, 40] {
        let mut host: Host<f32> = Host::new(HostConfig::default(), base.embed_dim, 4).unwrap();
        let queries: Vec<(usize, usize)> = train
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.queries.len()).map(move |qi| (e, qi)))
            .collect();
        let tc = TrainConfig {
            epochs,
            batch_size: 16,
            lr: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let curve = pretrain_host(&tc, &mut host, &train, &queries).unwrap();
        // quick R1/R5 on val, query-only
        let mut hits1 = 0.0;
        let mut hits5 = 0.0;
        let mut n = 0.0;
        for ep in &val {
            for q in &ep.queries {
                let mut g = Graph::new();
                let leaves = host.leaves(&mut g, false);
                let e_v = g.constant(ep.features.clone());
                let e_q = g.constant(q.embedding_tokens.clone());
                let fused = host.encode(&mut g, &leaves, e_v, e_q).unwrap();
                let (sc, l, r) = host.decode_heads(&mut g, &leaves, fused).unwrap();
                let pred = decode_spans(
                    g.value(sc).data(),
                    g.value(l).data(),
                    g.value(r).data(),
                    ep.clip_count,
                    0.5,
                    5,
                )
                .unwrap();
                let hit = |k: usize| {
                    pred.ranked
                        .iter()
                        .take(k)
                        .any(|(s, _)| tiou(*s, q.gt_span) >= 0.3) as u8 as f64
                };
                hits1 += hit(1);
                hits5 += hit(5);
                n += 1.0;
            }
        }
        println!(
            "host {} epochs ({:?}): loss {:.4} -> {:.4}; val R1@0.3 {:.3} R5@0.3 {:.3}",
            epochs,
            t0.elapsed(),
            curve[0],
            curve[curve.len() - 1],
            hits1 / n,
            hits5 / n
        );
        // where do gt clips rank in scores?
        let ep = &val[0];
        let q = &ep.queries[0];
        let mut g = Graph::new();
        let leaves = host.leaves(&mut g, false);
        let e_v = g.constant(ep.features.clone());
        let e_q = g.constant(q.embedding_tokens.clone());
        let fused = host.encode(&mut g, &leaves, e_v, e_q).unwrap();
        let (sc, l, r) = host.decode_heads(&mut g, &leaves, fused).unwrap();
        let scores = g.value(sc).data();
        let gt_clips = clips_in_span(q.gt_span, ep.clip_count).unwrap();
        println!(
            "  sample query {}: gt clips {:?}, their scores {:?}, max score {:.3}, l/r at gt {:?}/{:?}",
            q.id,
            gt_clips,
            gt_clips.iter().map(|&c| scores[c]).collect::<Vec<_>>(),
            scores.iter().cloned().fold(f32::MIN, f32::max),
            gt_clips.iter().map(|&c| g.value(l).data()[c]).collect::<Vec<_>>(),
            gt_clips.iter().map(|&c| g.value(r).data()[c]).collect::<Vec<_>>(),
        );
    }
}
