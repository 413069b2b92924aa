// Scratch probe: end-to-end stack training + feedback-gain measurement at
// the default scale. Used to calibrate epochs; superseded by the real
// examples.

use std::time::Instant;

use refocus::evalkit::{evaluate_split, EvalMode, EvalSet};
use refocus::falm::FalmConfig;
use refocus::feedbackgen::{
    build_qnf_dataset, FeedbackTemplateBank, QnfBuildConfig, QueryRefs, TemplateBackend,
};
use refocus::labelgen::{make_labels, LabelConfig};
use refocus::localizer::HostConfig;
use refocus::refsample::{fit_beta, other_query_spans, sample_random_span, sample_similar_span};
use refocus::synthworld::{generate_world, Embedder, WorldConfig};
use refocus::trainer::{pair_samples, train_full_stack, StackSchedule};
use refocus::types::EpisodeRecord;

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

fn main() {
    let base = WorldConfig::default();
    let train_cfg = WorldConfig { episodes: 60, episode_offset: 0, ..base.clone() };
    let test_cfg = WorldConfig { episodes: 200, episode_offset: 90, ..base.clone() };
    let emb = Embedder::new(&base).unwrap();

    let t0 = Instant::now();
    let train = generate_world(&train_cfg).unwrap();
    let test = generate_world(&test_cfg).unwrap();
    println!("worlds: {:?}", t0.elapsed());

    let durations: Vec<f64> = train
        .iter()
        .flat_map(|ep| ep.queries.iter().map(|q| q.gt_span.duration()))
        .collect();
    let beta = fit_beta(&durations).unwrap();
    let backend = TemplateBackend::default();
    let bank = FeedbackTemplateBank::default();

    let train_refs = make_refs(&train, &beta);
    let train_ds =
        build_qnf_dataset(&train, &train_refs, &backend, &bank, &emb, &QnfBuildConfig::train(5))
            .unwrap();
    let lc = LabelConfig::default();
    let index = refocus::trainer::resolve_query_index(&train);
    let labels: Vec<_> = train_ds
        .samples
        .iter()
        .map(|fb| {
            let (e, qi) = index[&fb.query_id];
            make_labels(fb, &train[e].queries[qi], &train[e], &emb, &lc).unwrap()
        })
        .collect();
    let data = pair_samples(&train, train_ds.samples, labels).unwrap();
    println!("train samples: {}", data.len());

    let test_refs = make_refs(&test, &beta);
    let test_ds =
        build_qnf_dataset(&test, &test_refs, &backend, &bank, &emb, &QnfBuildConfig::eval(6))
            .unwrap();
    println!(
        "test samples: {} (skipped {})",
        test_ds.samples.len(),
        test_ds.skipped.len()
    );

    let set = EvalSet::build(&test, &test_ds.samples);
    for seed in [42u64, 43, 44] {
        let t0 = Instant::now();
        let stack = train_full_stack(
            FalmConfig::default(),
            HostConfig::default(),
            &StackSchedule::default(),
            &train,
            &data,
            &emb,
            &bank,
            seed,
        )
        .unwrap();
        let train_dt = t0.elapsed();
        let t0 = Instant::now();
        let report = evaluate_split(&stack, &set, EvalMode::WithFeedback).unwrap();
        println!(
            "seed {seed}: train {:?} eval {:?} adapter {:?}",
            train_dt,
            t0.elapsed(),
            stack.adapter
        );
        for group in ["query_only", "with_feedback", "delta"] {
            print!("{group:>14}:");
            for k in [1usize, 5] {
                for t in [0.3, 0.5] {
                    print!("  R{k}@{t}={:+.4}", report.value(group, k, t).unwrap());
                }
            }
            println!();
        }
    }
}
