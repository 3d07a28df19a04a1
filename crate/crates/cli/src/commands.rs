//! Subcommand bodies. Each returns the text it prints on stdout so tests can
//! call them without spawning a process.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use npa_core::data::{self, tokenize, Corpus, SyntheticSpec};
use npa_core::experiment::{self, Prepared, RunOutcome};
use npa_core::metrics::{mean_sd, MetricSummary, RankingReport};
use npa_core::model::{AttnConfig, AttnKind, ModelParams, PAD};
use serde::Serialize;
use serde_json::json;

use crate::config::Resolved;
use crate::container::ParamsFile;
use crate::error::{CliError, CliResult};
use crate::formats;

/// Input data directory layout.
#[derive(Debug, Clone)]
pub struct DataDir(pub PathBuf);

impl DataDir {
    pub fn news(&self) -> PathBuf {
        self.0.join("news.tsv")
    }

    pub fn behaviors(&self) -> PathBuf {
        self.0.join("behaviors.tsv")
    }

    pub fn load(&self, cfg: &Resolved) -> CliResult<Corpus> {
        let news = formats::read_news(&self.news())?;
        let behaviors = formats::read_behaviors(&self.behaviors())?;
        Ok(data::preprocess(&news, &behaviors, cfg.preprocess)?)
    }
}

fn summary_json(m: &MetricSummary) -> serde_json::Value {
    json!({"auc": m.auc, "mrr": m.mrr, "ndcg5": m.ndcg5, "ndcg10": m.ndcg10})
}

fn report_json(r: &RankingReport) -> serde_json::Value {
    json!({
        "impressions": r.records.len(),
        "skipped": r.skipped,
        "metrics": summary_json(&r.mean),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub users: usize,
    pub news: usize,
    pub impressions: usize,
    pub samples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub np_ratio: f64,
    pub avg_title_words: f64,
}

impl CorpusStats {
    pub fn of(news: &[data::NewsItem], behaviors: &[data::Behavior]) -> Self {
        let users: BTreeSet<&str> = behaviors.iter().map(|b| b.user_id.as_str()).collect();
        let positives = behaviors.iter().flat_map(|b| &b.impression).filter(|i| i.1).count();
        let samples: usize = behaviors.iter().map(|b| b.impression.len()).sum();
        let words: usize = news.iter().map(|n| tokenize(&n.title).len()).sum();
        Self {
            users: users.len(),
            news: news.len(),
            impressions: behaviors.len(),
            samples,
            positives,
            negatives: samples - positives,
            np_ratio: (samples - positives) as f64 / positives.max(1) as f64,
            avg_title_words: words as f64 / news.len().max(1) as f64,
        }
    }

    pub fn table(&self) -> String {
        format!(
            "# users\t{}\tavg. # words per title\t{:.2}\n\
             # news\t{}\t# positive samples\t{}\n\
             # impressions\t{}\t# negative samples\t{}\n\
             # samples\t{}\tNP ratio\t{:.2}\n",
            self.users,
            self.avg_title_words,
            self.news,
            self.positives,
            self.impressions,
            self.negatives,
            self.samples,
            self.np_ratio
        )
    }
}

pub fn generate(spec: &SyntheticSpec, out: &Path) -> CliResult<String> {
    let syn = data::generate_synthetic(spec)?;
    formats::write_text(&out.join("news.tsv"), &formats::write_news(&syn.news))?;
    formats::write_text(&out.join("behaviors.tsv"), &formats::write_behaviors(&syn.behaviors))?;
    let t = &syn.truth;
    let truth = json!({
        "seed": spec.seed,
        "temperature": spec.temperature,
        "users": t.user_ids.iter().zip(&t.user_top_topic).zip(&t.user_prefs)
            .map(|((u, top), p)| json!({"id": u, "top_topic": top, "prefs": p}))
            .collect::<Vec<_>>(),
        "news": t.news_ids.iter().zip(&t.news_topics)
            .map(|(n, topics)| json!({"id": n, "topics": topics}))
            .collect::<Vec<_>>(),
    });
    formats::write_text(&out.join("truth.json"), &format!("{truth}\n"))?;
    Ok(CorpusStats::of(&syn.news, &syn.behaviors).table())
}

pub fn preprocess(data: &DataDir, cfg: &Resolved, out: &Path) -> CliResult<String> {
    let corpus = data.load(cfg)?;
    let prepared = experiment::prepare(&corpus, &cfg.run, cfg.seed)?;
    formats::write_text(&out.join("vocab.tsv"), &formats::write_vocab(&corpus.vocab))?;
    formats::write_text(&out.join("news_encoded.tsv"), &formats::write_encoded(&corpus))?;
    formats::write_text(&out.join("splits.tsv"), &formats::write_splits(&corpus, &prepared.splits))?;
    let s = &prepared.splits;
    Ok(format!(
        "{}\n",
        json!({
            "vocab_size": corpus.vocab.len(),
            "news": corpus.news.len(),
            "users": corpus.users.len(),
            "impressions": corpus.impressions.len(),
            "dropped_items": corpus.dropped_items,
            "train": s.train.len(),
            "validation": s.validation.len(),
            "test": s.test.len(),
            "short_users": s.short_users,
            "split_checksum": format!("{:016x}", s.checksum()),
        })
    ))
}

/// Initial parameters, with pretrained word vectors when a file is given.
fn initial_params(corpus: &Corpus, cfg: &Resolved, embeddings: Option<&Path>) -> CliResult<(ModelParams, Option<usize>)> {
    let mut params = experiment::init_params(corpus, &cfg.run.hp, cfg.seed)?;
    let Some(path) = embeddings else {
        return Ok((params, None));
    };
    let vectors = formats::parse_embeddings(path, &formats::read_text(path)?)?;
    let table = params.get_mut(npa_core::model::slot::WORD_EMB);
    let covered = data::apply_pretrained(
        table,
        &corpus.vocab,
        vectors.iter().map(|(t, v)| (t.as_str(), v.as_slice())),
    )?;
    Ok((params, Some(covered)))
}

pub struct Trained {
    pub corpus: Corpus,
    pub prepared: Prepared,
    pub outcome: RunOutcome,
    pub coverage: Option<usize>,
}

pub fn train_run(data: &DataDir, cfg: &Resolved, embeddings: Option<&Path>) -> CliResult<Trained> {
    let corpus = data.load(cfg)?;
    let prepared = experiment::prepare(&corpus, &cfg.run, cfg.seed)?;
    let (params, coverage) = initial_params(&corpus, cfg, embeddings)?;
    let outcome = experiment::run_from(params, &corpus, &prepared, &cfg.run, cfg.seed)?;
    Ok(Trained {
        corpus,
        prepared,
        outcome,
        coverage,
    })
}

pub fn train(data: &DataDir, cfg: &Resolved, embeddings: Option<&Path>, out: &Path) -> CliResult<String> {
    let t = train_run(data, cfg, embeddings)?;
    let o = &t.outcome;
    let file = ParamsFile::new(&o.params, cfg, &t.corpus.vocab, &t.corpus.users);
    formats::write_text(&out.join("params.json"), &file.to_json())?;
    let mut trace = String::from("epoch\tbatch\tloss\n");
    for b in &o.train.batches {
        let _ = writeln!(trace, "{}\t{}\t{}", b.epoch, b.batch, b.loss);
    }
    formats::write_text(&out.join("loss.tsv"), &trace)?;
    let summary = json!({
        "seed": cfg.seed,
        "attn": cfg.run.attn.label(),
        "negative_sampling": cfg.run.negative_sampling,
        "samples": o.samples,
        "epoch_losses": o.train.epoch_losses,
        "clamped": o.train.clamped,
        "pretrained_coverage": t.coverage,
        "validation": report_json(&o.validation),
        "test": report_json(&o.test),
    });
    let line = format!("{summary}\n");
    formats::write_text(&out.join("train_report.json"), &line)?;
    Ok(line)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(CliError::usage(format!("unknown split {s:?}; use validation or test"))),
        }
    }
}

/// Evaluate saved parameters on the split they were trained against.
pub fn eval_params(data: &DataDir, params_path: &Path, split: Split, out: Option<&Path>) -> CliResult<String> {
    let file = ParamsFile::load(params_path)?;
    let cfg = file.resolved()?;
    let corpus = data.load(&cfg)?;
    let params = file.params(&corpus.vocab)?;
    if file.users != corpus.users {
        return Err(CliError::data("user list differs from the one used for training"));
    }
    let prepared = experiment::prepare(&corpus, &cfg.run, cfg.seed)?;
    let set = match split {
        Split::Validation => &prepared.validation,
        Split::Test => &prepared.test,
    };
    let report = experiment::evaluate(&params, &corpus, set, cfg.run.attn, cfg.run.mrr_mode)?;
    if let Some(out) = out {
        formats::write_text(&out.join("report.tsv"), &formats::write_report(&report))?;
    }
    Ok(format!("{}\n", report_json(&report)))
}

fn metric_row(label: &str, m: &MetricSummary) -> String {
    format!("{label}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n", m.auc, m.mrr, m.ndcg5, m.ndcg10)
}

fn mean_sd_row(label: &str, rows: &[MetricSummary]) -> String {
    let mut s = String::from(label);
    for k in 0..4 {
        let v: Vec<f64> = rows.iter().map(|r| r.as_array()[k]).collect();
        let (m, sd) = mean_sd(&v);
        let _ = write!(s, "\t{m:.6}±{sd:.6}");
    }
    s.push('\n');
    s
}

/// Train and test `repeat` consecutive seeds; one row each plus mean±sd.
pub fn eval_repeat(data: &DataDir, cfg: &Resolved, repeat: usize) -> CliResult<String> {
    if repeat == 0 {
        return Err(CliError::usage("--repeat must be positive"));
    }
    let mut out = String::from("seed\tauc\tmrr\tndcg5\tndcg10\n");
    let corpus = data.load(cfg)?;
    let mut rows = Vec::with_capacity(repeat);
    for i in 0..repeat as u64 {
        let seed = cfg.seed + i;
        let prepared = experiment::prepare(&corpus, &cfg.run, seed)?;
        let o = experiment::run(&corpus, &prepared, &cfg.run, seed)?;
        out.push_str(&metric_row(&seed.to_string(), &o.test.mean));
        rows.push(o.test.mean);
    }
    out.push_str(&mean_sd_row("mean±sd", &rows));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub negative_sampling: bool,
    pub k: usize,
    pub seed: u64,
    pub split_checksum: u64,
    pub test: MetricSummary,
}

pub const ABLATION_HEADER: &str = "variant\tnegative_sampling\tk\tseed\tsplit_checksum\tauc\tmrr\tndcg5\tndcg10";

/// Every variant × negative-sampling switch × K on each seed. Variants of
/// one seed share the split, the initialization and the evaluation samples.
pub fn ablate_rows(
    corpus: &Corpus,
    cfg: &Resolved,
    variants: &[AttnConfig],
    ns_values: &[bool],
    k_values: &[usize],
    seeds: &[u64],
) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let prepared = experiment::prepare(corpus, &cfg.run, seed)?;
        for &attn in variants {
            for &ns in ns_values {
                for &k in k_values {
                    let mut spec = cfg.run.clone();
                    spec.attn = attn;
                    spec.negative_sampling = ns;
                    spec.hp.negatives = k;
                    let o = experiment::run(corpus, &prepared, &spec, seed)?;
                    rows.push(AblationRow {
                        variant: attn.label(),
                        negative_sampling: ns,
                        k,
                        seed,
                        split_checksum: prepared.splits.checksum(),
                        test: o.test.mean,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    let switch = |b: bool| if b { "on" } else { "off" };
    let mut groups: Vec<(String, bool, usize)> = Vec::new();
    for r in rows {
        let key = (r.variant.clone(), r.negative_sampling, r.k);
        if !groups.contains(&key) {
            groups.push(key);
        }
        let m = &r.test;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:016x}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.variant,
            switch(r.negative_sampling),
            r.k,
            r.seed,
            r.split_checksum,
            m.auc,
            m.mrr,
            m.ndcg5,
            m.ndcg10
        );
    }
    for (v, ns, k) in groups {
        let ms: Vec<[f64; 4]> = rows
            .iter()
            .filter(|r| r.variant == v && r.negative_sampling == ns && r.k == k)
            .map(|r| r.test.as_array())
            .collect();
        let mean: Vec<f64> = (0..4).map(|i| ms.iter().map(|m| m[i]).sum::<f64>() / ms.len() as f64).collect();
        let _ = writeln!(
            s,
            "{v}\t{}\t{k}\tmean\t-\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            switch(ns),
            mean[0],
            mean[1],
            mean[2],
            mean[3]
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewsAttention {
    pub news_id: String,
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionDump {
    pub user_id: String,
    pub attn: String,
    pub candidates: Vec<NewsAttention>,
    pub history: Vec<NewsAttention>,
    /// Weight of each history news in the user representation.
    pub history_weights: Vec<f64>,
}

impl AttentionDump {
    pub fn text(&self) -> String {
        let mut s = format!("user {} ({})\n", self.user_id, self.attn);
        let item = |s: &mut String, n: &NewsAttention| {
            let cells: Vec<String> = n
                .tokens
                .iter()
                .zip(&n.weights)
                .map(|(t, w)| format!("{t}:{w:.4}"))
                .collect();
            let _ = writeln!(s, "  {}\t{}", n.news_id, cells.join(" "));
        };
        s.push_str("candidates\n");
        for n in &self.candidates {
            item(&mut s, n);
        }
        s.push_str("history\n");
        for n in &self.history {
            item(&mut s, n);
        }
        let cells: Vec<String> = self
            .history
            .iter()
            .zip(&self.history_weights)
            .map(|(n, w)| format!("{}:{w:.4}", n.news_id))
            .collect();
        let _ = writeln!(s, "news-level\t{}", cells.join(" "));
        s
    }
}

pub enum Target<'a> {
    News(&'a [String]),
    Impression(&'a str),
}

/// Word-level weights over the real tokens of each title, and news-level
/// weights over the user's history.
pub fn inspect(
    params: &ModelParams,
    corpus: &Corpus,
    cfg: &Resolved,
    user_id: &str,
    target: Target<'_>,
) -> CliResult<AttentionDump> {
    let user = corpus
        .user(user_id)
        .map_err(|_| CliError::data(format!("unknown user {user_id:?}")))?;
    let prepared = experiment::prepare(corpus, &cfg.run, cfg.seed)?;
    let candidates: Vec<usize> = match target {
        Target::News(ids) => ids
            .iter()
            .map(|id| corpus.news_idx(id).map_err(|_| CliError::data(format!("unknown news {id:?}"))))
            .collect::<CliResult<_>>()?,
        Target::Impression(id) => {
            let imp = corpus
                .impressions
                .iter()
                .find(|i| i.id == id)
                .ok_or_else(|| CliError::data(format!("unknown impression {id:?}")))?;
            if imp.user != user {
                return Err(CliError::data(format!("impression {id:?} belongs to another user")));
            }
            imp.items.iter().map(|(n, _)| *n).collect()
        }
    };
    if candidates.is_empty() {
        return Err(CliError::usage("no news to inspect"));
    }
    let pool = data::click_pools(&corpus.impressions, &prepared.splits.train, corpus.users.len());
    let history: Vec<usize> = pool[user]
        .iter()
        .copied()
        .filter(|n| !candidates.contains(n))
        .take(cfg.run.hp.max_history)
        .collect();
    if history.is_empty() {
        return Err(CliError::data(format!("user {user_id:?} has no training clicks")));
    }
    let titles = corpus.titles();
    let h: Vec<&[usize]> = history.iter().map(|&n| titles[n]).collect();
    let c: Vec<&[usize]> = candidates.iter().map(|&n| titles[n]).collect();
    let out = params.forward(user, &h, &c, cfg.run.attn)?;
    let describe = |n: usize, w: &[f64]| -> NewsAttention {
        let rec = &corpus.news[n];
        let raw = tokenize(&rec.raw_title);
        let mut tokens = Vec::new();
        let mut weights = Vec::new();
        let all_pad = rec.token_ids.iter().all(|&t| t == PAD);
        for (i, (&id, &a)) in rec.token_ids.iter().zip(w).enumerate() {
            if id == PAD && !(all_pad && i == 0) {
                continue;
            }
            tokens.push(raw.get(i).cloned().unwrap_or_else(|| "<pad>".into()));
            weights.push(a);
        }
        NewsAttention {
            news_id: rec.news_id.clone(),
            tokens,
            weights,
        }
    };
    Ok(AttentionDump {
        user_id: user_id.into(),
        attn: cfg.run.attn.label(),
        candidates: candidates.iter().zip(&out.candidate_word_attention).map(|(&n, w)| describe(n, w)).collect(),
        history: history.iter().zip(&out.history_word_attention).map(|(&n, w)| describe(n, w)).collect(),
        history_weights: out.news_attention,
    })
}

/// Token with the largest word-level weight under `user`'s personalized
/// query; `None` if the title is empty.
pub fn argmax_token(params: &ModelParams, title: &[usize], user: usize) -> CliResult<Option<usize>> {
    let r = params.encode_news(title, user, AttnKind::Personalized)?;
    let w = r.word_attention.unwrap_or_default();
    Ok((0..w.len())
        .filter(|&i| title[i] != PAD)
        .max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)))
        .map(|i| title[i]))
}
