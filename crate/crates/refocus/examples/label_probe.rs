// Scratch probe: how predictable are the alignment labels from the
// similarity landscapes they were derived from?

use refocus::feedbackgen::{
    build_qnf_dataset, FeedbackTemplateBank, QnfBuildConfig, QueryRefs, TemplateBackend,
};
use refocus::labelgen::{
    clause_similarity, invert_not_contains, make_labels, smooth_and_normalize, LabelConfig,
};
use refocus::refsample::{fit_beta, other_query_spans, sample_random_span, sample_similar_span};
use refocus::synthworld::{generate_world, Embedder, WorldConfig};
use refocus::trainer::resolve_query_index;
use refocus::types::{EpisodeRecord, TemporalCue};

fn auc(scores: &[(f64, u8)]) -> f64 {
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

fn main() {
    let cfg = WorldConfig {
        episodes: 30,
        episode_offset: 60,
        ..WorldConfig::default()
    };
    let world = generate_world(&cfg).unwrap();
    let emb = Embedder::new(&cfg).unwrap();
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
                    for k in 0..3u64 {
                        if let Ok(r) = sample_random_span(ep, q.gt_span, &beta, 900 + qi as u64 * 7 + k) {
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
        .collect();
    let backend = TemplateBackend::default();
    let bank = FeedbackTemplateBank::default();
    let ds = build_qnf_dataset(&world, &refs, &backend, &bank, &emb, &QnfBuildConfig::eval(6)).unwrap();
    let index = resolve_query_index(&world);
    let lc = LabelConfig::default();

    let mut oracle: std::collections::BTreeMap<&str, Vec<(f64, u8)>> = Default::default();
    let mut base: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
    for fb in &ds.samples {
        let (e, qi) = index[&fb.query_id];
        let ep: &EpisodeRecord = &world[e];
        let q = &ep.queries[qi];
        let labels = make_labels(fb, q, ep, &emb, &lc).unwrap();
        let key = match (
            !fb.clauses.contains.is_empty(),
            !fb.clauses.not_contains.is_empty(),
            fb.clauses.temporal != TemporalCue::None,
        ) {
            (false, false, true) => "temporal_only",
            (true, false, _) => "contains",
            (false, true, _) => "not_contains",
            (true, true, _) => "both",
            _ => "other",
        };
        // oracle predictor: product of the per-component ideal scores
        let mut pred = vec![1.0f64; ep.clip_count];
        if !fb.clauses.contains.is_empty() {
            let s = smooth_and_normalize(&clause_similarity(&emb, &fb.clauses.contains, ep).unwrap(), lc.sigma);
            for (p, v) in pred.iter_mut().zip(&s) {
                *p *= v;
            }
        }
        if !fb.clauses.not_contains.is_empty() {
            let s = invert_not_contains(&smooth_and_normalize(
                &clause_similarity(&emb, &fb.clauses.not_contains, ep).unwrap(),
                lc.sigma,
            ));
            for (p, v) in pred.iter_mut().zip(&s) {
                *p *= v;
            }
        }
        if fb.clauses.temporal != TemporalCue::None {
            let t = refocus::labelgen::temporal_labels(fb.ref_span, fb.clauses.temporal, ep.clip_count);
            for (p, v) in pred.iter_mut().zip(&t) {
                *p *= *v as f64;
            }
        }
        let entry = oracle.entry(key).or_default();
        let b = base.entry(key).or_default();
        for (p, l) in pred.iter().zip(labels.l.iter()) {
            entry.push((*p, *l));
            b.0 += *l as usize;
            b.1 += 1;
        }
    }
    for (key, scores) in &oracle {
        let (pos, n) = base[key];
        println!(
            "{key}: oracle AUC {:.4} over {} clips (positive rate {:.3})",
            auc(scores),
            scores.len(),
            pos as f64 / n as f64
        );
    }
}
