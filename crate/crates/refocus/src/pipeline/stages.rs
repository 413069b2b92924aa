//! Stage functions behind the CLI subcommands. Every stage reads the
//! manifest written by `gen`, so a whole run is a pure function of
//! (seed, config).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tensorcore::{load_checkpoint, save_checkpoint, Checkpoint};

use super::artifacts::{
    load_feedback, load_labels, load_predictions, load_refs, load_split, save_feedback,
    save_labels, save_predictions, save_refs, save_split, write_atomic, Manifest,
};
use super::config::{RunConfig, Split};
use crate::evalkit::{
    evaluate_split, multi_turn_eval, noisy_recovery_eval, EvalMode, EvalSet, SplitReport,
};
use crate::falm::Falm;
use crate::feedbackgen::{
    build_qnf_dataset, mix_seed, FeedbackTemplateBank, QnfBuildConfig, QueryRefs, TemplateBackend,
};
use crate::labelgen::make_labels;
use crate::localizer::{EmAdapter, Host, RefocusStack};
use crate::refsample::{
    collect_failure_spans, fit_beta, other_query_spans, sample_random_span, sample_similar_span,
    BetaParams,
};
use crate::synthworld::Embedder;
use crate::trainer::{
    finetune_refocus, pretrain_falm, pretrain_host, resolve_query_index, FalmSample, FinetuneData,
    TrainConfig,
};
use crate::types::EpisodeRecord;
use crate::{Error, Result, Span};

fn split_dir(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.dir_name())
}

fn models_dir(dir: &Path) -> PathBuf {
    dir.join("models")
}

fn eval_dir(dir: &Path) -> PathBuf {
    dir.join("eval")
}

fn embedder_for(cfg: &RunConfig) -> Result<Embedder> {
    Embedder::new(&cfg.world_for(Split::Train))
}

/// Generate all three splits plus the manifest.
pub fn cmd_gen(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for split in Split::ALL {
        let world = crate::synthworld::generate_world(&cfg.world_for(split))?;
        save_split(&split_dir(dir, split), &world)?;
        eprintln!(
            "gen: {} episodes -> {}",
            world.len(),
            split_dir(dir, split).display()
        );
    }
    Manifest::new(cfg).save(dir)
}

fn train_beta(dir: &Path, cfg: &RunConfig, emb: &Embedder) -> Result<BetaParams> {
    let train = load_split(&split_dir(dir, Split::Train), emb)?;
    let durations: Vec<f64> = train
        .iter()
        .flat_map(|ep| ep.queries.iter().map(|q| q.gt_span.duration()))
        .collect();
    let _ = cfg;
    fit_beta(&durations)
}

/// Sample reference spans of every kind for one split. Model-failure spans
/// come from a predictions file when one is provided.
pub fn cmd_sample_refs(dir: &Path, split: Split, preds: Option<&Path>) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let cfg = &manifest.config;
    let emb = embedder_for(cfg)?;
    let world = load_split(&split_dir(dir, split), &emb)?;
    let beta = train_beta(dir, cfg, &emb)?;

    let failures: BTreeMap<String, Span> = match preds {
        None => BTreeMap::new(),
        Some(path) => {
            let preds: BTreeMap<String, crate::localizer::SpanPrediction> =
                load_predictions(path)?.into_iter().collect();
            let gts: BTreeMap<String, Span> = world
                .iter()
                .flat_map(|ep| ep.queries.iter().map(|q| (q.id.clone(), q.gt_span)))
                .collect();
            collect_failure_spans(&preds, &gts, cfg.qnf.failure_mode)
        }
    };

    let n_random = 3.max(cfg.qnf.train_random + cfg.qnf.train_simple_temporal);
    let mut refs: Vec<(String, QueryRefs)> = Vec::new();
    for ep in &world {
        for q in &ep.queries {
            let mut qr = QueryRefs::default();
            for k in 0..n_random {
                match sample_random_span(
                    ep,
                    q.gt_span,
                    &beta,
                    mix_seed(cfg.seed, &q.id, 0x5EED_0000 + k as u64),
                ) {
                    Ok(s) => qr.random.push(s),
                    Err(Error::SamplingExhausted { .. }) => break,
                    Err(e) => return Err(e),
                }
            }
            match sample_similar_span(ep, q.gt_span) {
                Ok(s) => qr.similar.push(s),
                Err(Error::NoCandidate(_)) | Err(Error::DegenerateSpan(_)) => {}
                Err(e) => return Err(e),
            }
            if let Some(&f) = failures.get(&q.id) {
                qr.failure.push(f);
            }
            qr.other = other_query_spans(ep, q);
            refs.push((q.id.clone(), qr));
        }
    }
    let out = split_dir(dir, split).join("refs.jsonl");
    save_refs(&out, &refs)?;
    eprintln!("sample-refs: {} queries -> {}", refs.len(), out.display());
    Ok(())
}

/// Render feedback for one split from its sampled reference spans.
pub fn cmd_make_feedback(dir: &Path, split: Split) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let cfg = &manifest.config;
    let emb = embedder_for(cfg)?;
    let world = load_split(&split_dir(dir, split), &emb)?;
    let refs_path = split_dir(dir, split).join("refs.jsonl");
    let by_query: BTreeMap<String, QueryRefs> = load_refs(&refs_path)?.into_iter().collect();
    let refs: Vec<Vec<QueryRefs>> = world
        .iter()
        .map(|ep| {
            ep.queries
                .iter()
                .map(|q| by_query.get(&q.id).cloned().unwrap_or_default())
                .collect()
        })
        .collect();

    let bank = FeedbackTemplateBank::default();
    bank.validate()?;
    let backend = TemplateBackend {
        bank: bank.clone(),
        probs: cfg.qnf.drop_probs,
    };
    let build = if split == Split::Train {
        QnfBuildConfig {
            seed: mix_seed(cfg.seed, split.dir_name(), 0xF00D),
            eval_quota: false,
            train_random: cfg.qnf.train_random,
            train_similar: cfg.qnf.train_similar,
            train_other: cfg.qnf.train_other,
            train_failure: cfg.qnf.train_failure,
            train_simple_temporal: cfg.qnf.train_simple_temporal,
        }
    } else {
        QnfBuildConfig::eval(mix_seed(cfg.seed, split.dir_name(), 0xF00D))
    };
    let ds = build_qnf_dataset(&world, &refs, &backend, &bank, &emb, &build)?;
    let out = split_dir(dir, split).join("feedback.jsonl");
    save_feedback(&out, &ds.samples)?;

    #[derive(Serialize)]
    struct SkipRow<'a> {
        query_id: &'a str,
        reason: &'a str,
    }
    let mut buf = Vec::new();
    for (query_id, reason) in &ds.skipped {
        serde_json::to_writer(&mut buf, &SkipRow { query_id, reason })
            .map_err(|e| Error::Config(format!("skip row: {e}")))?;
        buf.push(b'\n');
    }
    write_atomic(&split_dir(dir, split).join("skipped.jsonl"), &buf)?;
    eprintln!(
        "make-feedback: {} samples ({} skipped) -> {}",
        ds.samples.len(),
        ds.skipped.len(),
        out.display()
    );
    Ok(())
}

/// Alignment labels for one split's feedback file, in file order.
pub fn cmd_make_labels(dir: &Path, split: Split) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let cfg = &manifest.config;
    let emb = embedder_for(cfg)?;
    let world = load_split(&split_dir(dir, split), &emb)?;
    let feedback = load_feedback(&split_dir(dir, split).join("feedback.jsonl"), &emb)?;
    let index = resolve_query_index(&world);
    let mut labels = Vec::with_capacity(feedback.len());
    for (i, sample) in feedback.iter().enumerate() {
        let &(e, qi) = index.get(&sample.query_id).ok_or_else(|| {
            Error::data("feedback.jsonl", i, format!("unknown query {}", sample.query_id))
        })?;
        let l = make_labels(sample, &world[e].queries[qi], &world[e], &emb, &cfg.labels)?;
        labels.push((sample.query_id.clone(), i, l));
    }
    let out = split_dir(dir, split).join("labels.jsonl");
    save_labels(&out, &labels)?;
    eprintln!("make-labels: {} rows -> {}", labels.len(), out.display());
    Ok(())
}

fn loss_curve_csv(path: &Path, phase: &str, curve: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,split,loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        text.push_str(&format!("{epoch},{phase},{loss}\n"));
    }
    write_atomic(path, text.as_bytes())
}

fn load_falm_samples(
    dir: &Path,
    split: Split,
    emb: &Embedder,
    world: &[EpisodeRecord],
) -> Result<Vec<FalmSample>> {
    let sdir = split_dir(dir, split);
    let feedback = load_feedback(&sdir.join("feedback.jsonl"), emb)?;
    let labels = load_labels(&sdir.join("labels.jsonl"))?;
    if feedback.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} feedback rows but {} label rows",
            feedback.len(),
            labels.len()
        )));
    }
    let index = resolve_query_index(world);
    feedback
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (fb, (qid, fi, labels)))| {
            if fb.query_id != qid || fi != i {
                return Err(Error::data(
                    "labels.jsonl",
                    i,
                    format!("label row {fi} for {qid} does not match feedback row"),
                ));
            }
            let &(episode, query) = index
                .get(&fb.query_id)
                .ok_or_else(|| Error::data("feedback.jsonl", i, "unknown query".to_string()))?;
            Ok(FalmSample {
                episode,
                query,
                feedback: fb,
                labels,
            })
        })
        .collect()
}

pub fn cmd_train_falm(dir: &Path, epochs: Option<usize>) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let cfg = &manifest.config;
    let emb = embedder_for(cfg)?;
    let world = load_split(&split_dir(dir, Split::Train), &emb)?;
    let data = load_falm_samples(dir, Split::Train, &emb, &world)?;

    let mut falm = Falm::new(cfg.falm.clone(), cfg.world.embed_dim, mix_seed(cfg.seed, "falm-init", 0))?;
    let tc = TrainConfig {
        epochs: epochs.unwrap_or(cfg.train_falm.epochs),
        batch_size: cfg.train_falm.batch_size,
        lr: cfg.train_falm.lr,
        seed: mix_seed(cfg.seed, "falm-train", 0),
        ..TrainConfig::default()
    };
    let curve = pretrain_falm(&tc, &mut falm, &world, &data)?;

    let mdir = models_dir(dir);
    std::fs::create_dir_all(&mdir).map_err(|e| Error::io(mdir.display().to_string(), e))?;
    let mut ckpt = Checkpoint::new();
    falm.params.export("falm.", &mut ckpt);
    save_checkpoint(&ckpt, &mdir.join("falm.tckp"))?;
    loss_curve_csv(&mdir.join("falm_loss.csv"), "train", &curve)?;
    eprintln!(
        "train-falm: {} samples, {} epochs, loss {:.4} -> {:.4}",
        data.len(),
        curve.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_train_host(dir: &Path, epochs: Option<usize>) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let cfg = &manifest.config;
    let emb = embedder_for(cfg)?;
    let world = load_split(&split_dir(dir, Split::Train), &emb)?;
    let queries: Vec<(usize, usize)> = world
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.queries.len()).map(move |qi| (e, qi)))
        .collect();

    let mut host = Host::new(cfg.host.clone(), cfg.world.embed_dim, mix_seed(cfg.seed, "host-init", 0))?;
    let tc = TrainConfig {
        epochs: epochs.unwrap_or(cfg.train_host.epochs),
        batch_size: cfg.train_host.batch_size,
        lr: cfg.train_host.lr,
        seed: mix_seed(cfg.seed, "host-train", 0),
        ..TrainConfig::default()
    };
    let curve = pretrain_host(&tc, &mut host, &world, &queries)?;

    let mdir = models_dir(dir);
    std::fs::create_dir_all(&mdir).map_err(|e| Error::io(mdir.display().to_string(), e))?;
    let mut ckpt = Checkpoint::new();
    host.params.export("host.", &mut ckpt);
    save_checkpoint(&ckpt, &mdir.join("host.tckp"))?;
    loss_curve_csv(&mdir.join("host_loss.csv"), "train", &curve)?;
    eprintln!(
        "train-host: {} queries, {} epochs, loss {:.4} -> {:.4}",
        queries.len(),
        curve.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_finetune(dir: &Path, epochs: Option<usize>) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let cfg = &manifest.config;
    let emb = embedder_for(cfg)?;
    let world = load_split(&split_dir(dir, Split::Train), &emb)?;
    let data = load_falm_samples(dir, Split::Train, &emb, &world)?;
    let queries: Vec<(usize, usize)> = world
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.queries.len()).map(move |qi| (e, qi)))
        .collect();

    let mdir = models_dir(dir);
    let mut falm = Falm::new(cfg.falm.clone(), cfg.world.embed_dim, 0)?;
    falm.params
        .import("falm.", &load_checkpoint(&mdir.join("falm.tckp"))?)?;
    let mut host = Host::new(cfg.host.clone(), cfg.world.embed_dim, 0)?;
    host.params
        .import("host.", &load_checkpoint(&mdir.join("host.tckp"))?)?;

    let bank = FeedbackTemplateBank::default();
    let tc = TrainConfig {
        epochs: epochs.unwrap_or(cfg.finetune.epochs),
        batch_size: cfg.finetune.batch_size,
        lr: cfg.finetune.lr,
        seed: mix_seed(cfg.seed, "finetune", 0),
        mixed_sampling: cfg.finetune.mixed_sampling,
        temporal_aug_rate: cfg.finetune.temporal_aug_rate,
        falm_frozen: cfg.finetune.falm_frozen,
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
    )?;

    let mut ckpt = Checkpoint::new();
    falm.params.export("falm.", &mut ckpt);
    host.params.export("host.", &mut ckpt);
    ckpt.insert("adapter.alpha", tensorcore::TensorData::scalar(adapter.alpha));
    ckpt.insert("adapter.beta", tensorcore::TensorData::scalar(adapter.beta));
    save_checkpoint(&ckpt, &mdir.join("refocus.tckp"))?;
    loss_curve_csv(&mdir.join("finetune_loss.csv"), "train", &curve)?;
    eprintln!(
        "finetune: adapter alpha {:.4} beta {:.4}, loss {:.4} -> {:.4}",
        adapter.alpha,
        adapter.beta,
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Rebuild a full stack from a checkpoint. `refocus.tckp` restores FALM,
/// host, and adapter; a bare `host.tckp` loads with a freshly initialized
/// FALM and identity adapter, which is only meaningful for query-only runs.
pub fn load_stack(cfg: &RunConfig, ckpt_path: &Path) -> Result<RefocusStack> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let mut host = Host::new(cfg.host.clone(), cfg.world.embed_dim, 0)?;
    host.params.import("host.", &ckpt)?;
    let mut falm = Falm::new(cfg.falm.clone(), cfg.world.embed_dim, 0)?;
    let adapter = if ckpt.names().any(|n| n.starts_with("falm.")) {
        falm.params.import("falm.", &ckpt)?;
        EmAdapter {
            alpha: ckpt
                .get("adapter.alpha")
                .map(|t| t.data()[0])
                .unwrap_or(1.0),
            beta: ckpt.get("adapter.beta").map(|t| t.data()[0]).unwrap_or(0.0),
        }
    } else {
        EmAdapter::default()
    };
    Ok(RefocusStack {
        falm,
        host,
        adapter,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EvalModeArg {
    QueryOnly,
    Feedback,
    MultiTurn,
    Noisy,
}

impl std::str::FromStr for EvalModeArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query-only" => Ok(Self::QueryOnly),
            "feedback" => Ok(Self::Feedback),
            "multi-turn" => Ok(Self::MultiTurn),
            "noisy" => Ok(Self::Noisy),
            other => Err(Error::Config(format!("unknown eval mode {other:?}"))),
        }
    }
}

pub struct EvalArgs {
    pub split: Split,
    pub mode: EvalModeArg,
    pub stack: PathBuf,
    /// Force all-ones reweighting (adapter alpha 0, beta 1).
    pub bypass: bool,
    pub n_max: usize,
    pub samplings: usize,
    pub dump_preds: Option<PathBuf>,
}

fn report_csv(report: &SplitReport) -> String {
    let mut text = String::from("group,k,tiou,value,count\n");
    for r in &report.rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.group, r.k, r.tiou, r.value, r.count));
    }
    text
}

pub fn cmd_eval(dir: &Path, args: &EvalArgs) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let cfg = &manifest.config;
    let emb = embedder_for(cfg)?;
    let world = load_split(&split_dir(dir, args.split), &emb)?;
    let feedback = load_feedback(&split_dir(dir, args.split).join("feedback.jsonl"), &emb)?;
    let set = EvalSet::build(&world, &feedback);

    let mut stack = load_stack(cfg, &args.stack)?;
    if args.bypass {
        stack.adapter = EmAdapter {
            alpha: 0.0,
            beta: 1.0,
        };
    }

    let edir = eval_dir(dir);
    std::fs::create_dir_all(&edir).map_err(|e| Error::io(edir.display().to_string(), e))?;
    let tag = |name: &str| {
        (
            edir.join(format!("{}_{}.csv", args.split.dir_name(), name)),
            edir.join(format!("{}_{}.json", args.split.dir_name(), name)),
        )
    };

    match args.mode {
        EvalModeArg::QueryOnly | EvalModeArg::Feedback => {
            let mode = if args.mode == EvalModeArg::QueryOnly {
                EvalMode::QueryOnly
            } else {
                EvalMode::WithFeedback
            };
            let report = evaluate_split(&stack, &set, mode)?;
            let name = if mode == EvalMode::QueryOnly {
                "query_only"
            } else if args.bypass {
                "feedback_bypass"
            } else {
                "feedback"
            };
            let (csv_path, json_path) = tag(name);
            write_atomic(&csv_path, report_csv(&report).as_bytes())?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Config(format!("report serialize: {e}")))?;
            write_atomic(&json_path, json.as_bytes())?;
            for r in &report.rows {
                if r.group == "query_only" || r.group == "with_feedback" || r.group == "delta" {
                    eprintln!("eval {}: R{}@{} = {:.4}", r.group, r.k, r.tiou, r.value);
                }
            }
            if let Some(preds_path) = &args.dump_preds {
                let mut preds = Vec::new();
                for entry in &set.entries {
                    let ep = &set.world[entry.episode];
                    let q = &ep.queries[entry.query];
                    preds.push((q.id.clone(), stack.predict(ep, q, None)?));
                }
                save_predictions(preds_path, &preds)?;
                eprintln!("eval: dumped {} predictions", preds.len());
            }
        }
        EvalModeArg::MultiTurn => {
            let points = multi_turn_eval(
                &stack,
                &set,
                args.n_max,
                args.samplings,
                mix_seed(cfg.seed, "multi-turn", 0),
            )?;
            let mut text = String::from("n,k,tiou,mean,std\n");
            for p in &points {
                text.push_str(&format!("{},{},{},{},{}\n", p.n, p.k, p.tiou, p.mean, p.std));
            }
            let (csv_path, json_path) = tag("multi_turn");
            write_atomic(&csv_path, text.as_bytes())?;
            let json = serde_json::to_string_pretty(&points)
                .map_err(|e| Error::Config(format!("curve serialize: {e}")))?;
            write_atomic(&json_path, json.as_bytes())?;
        }
        EvalModeArg::Noisy => {
            let bank = FeedbackTemplateBank::default();
            let points = noisy_recovery_eval(
                &stack,
                &set,
                &emb,
                &bank,
                mix_seed(cfg.seed, "noisy", 0),
                true,
            )?;
            let mut text = String::from("turn,correct_feedback,k,tiou,value\n");
            for p in &points {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.turn, p.correct_feedback, p.k, p.tiou, p.value
                ));
            }
            let (csv_path, json_path) = tag("noisy");
            write_atomic(&csv_path, text.as_bytes())?;
            let json = serde_json::to_string_pretty(&points)
                .map_err(|e| Error::Config(format!("curve serialize: {e}")))?;
            write_atomic(&json_path, json.as_bytes())?;
        }
    }
    Ok(())
}

/// Merge whatever eval outputs exist into one table mirroring the usual
/// reporting layout: recall columns for query-only and feedback plus deltas.
pub fn cmd_report(dir: &Path) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let edir = eval_dir(dir);
    let mut lines = vec![format!(
        "# seed {} config {}",
        manifest.seed, manifest.config_hash
    )];
    lines.push("split,metric,query_only,with_feedback,delta".into());
    let mut printed = false;
    for split in Split::ALL {
        let path = edir.join(format!("{}_feedback.json", split.dir_name()));
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let report: SplitReport = serde_json::from_str(&text)
            .map_err(|e| Error::data(path.display().to_string(), 0, e.to_string()))?;
        for k in crate::evalkit::RECALL_KS {
            for t in crate::evalkit::TIOU_THRESHOLDS {
                let qo = report.value("query_only", k, t).unwrap_or(f64::NAN);
                let wf = report.value("with_feedback", k, t).unwrap_or(f64::NAN);
                let d = report.value("delta", k, t).unwrap_or(f64::NAN);
                lines.push(format!(
                    "{},R{}@{},{:.4},{:.4},{:+.4}",
                    split.dir_name(),
                    k,
                    t,
                    qo,
                    wf,
                    d
                ));
                printed = true;
            }
        }
    }
    if !printed {
        return Err(Error::Config(
            "no eval outputs found; run `eval --mode feedback` first".into(),
        ));
    }
    let text = lines.join("\n") + "\n";
    write_atomic(&dir.join("report.csv"), text.as_bytes())?;
    println!("{text}");
    Ok(())
}
