//! Click-log records, preprocessing and evaluation-sample construction.
//!
//! Everything here is a pure function of its inputs and seed; reading and
//! writing the TSV files happens in the `npa` crate.

mod synthetic;
mod vocab;

pub use synthetic::{generate_synthetic, GroundTruth, SyntheticCorpus, SyntheticSpec};
pub use vocab::{encode_title, tokenize, Vocab};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// One row of the news file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsItem {
    pub id: String,
    pub title: String,
}

/// One row of the behaviors file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Behavior {
    pub impression_id: String,
    pub user_id: String,
    pub seq: u64,
    pub history: Vec<String>,
    pub impression: Vec<(String, bool)>,
}

/// A tokenized news title.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsRecord {
    pub news_id: String,
    pub raw_title: String,
    /// Exactly `max_title_len` ids, right-padded.
    pub token_ids: Vec<usize>,
}

/// A behavior row resolved to corpus indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Impression {
    pub id: String,
    pub user: usize,
    pub seq: u64,
    pub history: Vec<usize>,
    pub items: Vec<(usize, bool)>,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().filter(|(_, l)| *l).map(|(n, _)| *n)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().filter(|(_, l)| !*l).map(|(n, _)| *n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub min_count: u64,
    pub max_title_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_count: 2,
            max_title_len: 30,
        }
    }
}

/// Preprocessed click log: vocabulary, encoded titles, users and impressions.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub news: Vec<NewsRecord>,
    pub news_index: BTreeMap<String, usize>,
    /// Sorted user ids; a user's index is its position here.
    pub users: Vec<String>,
    pub user_index: BTreeMap<String, usize>,
    pub impressions: Vec<Impression>,
    /// Behavior entries referring to news missing from the news file.
    pub dropped_items: usize,
}

impl Corpus {
    pub fn titles(&self) -> Vec<&[usize]> {
        self.news.iter().map(|n| n.token_ids.as_slice()).collect()
    }

    pub fn user(&self, id: &str) -> Result<usize> {
        self.user_index.get(id).copied().ok_or_else(|| Error::Unknown {
            what: "user",
            id: id.into(),
        })
    }

    pub fn news_idx(&self, id: &str) -> Result<usize> {
        self.news_index.get(id).copied().ok_or_else(|| Error::Unknown {
            what: "news",
            id: id.into(),
        })
    }
}

/// Lowercase and tokenize titles, build the frequency-filtered vocabulary,
/// encode titles and resolve behavior rows to indices.
pub fn preprocess(news: &[NewsItem], behaviors: &[Behavior], cfg: PreprocessConfig) -> Result<Corpus> {
    if cfg.min_count == 0 || cfg.max_title_len == 0 {
        return Err(Error::Config("min_count and max_title_len must be positive".into()));
    }
    let tokenized: Vec<Vec<String>> = news.iter().map(|n| tokenize(&n.title)).collect();
    let vocab = Vocab::build(tokenized.iter().map(|t| t.as_slice()), cfg.min_count);

    let mut news_index = BTreeMap::new();
    let mut records = Vec::with_capacity(news.len());
    for (item, tokens) in news.iter().zip(&tokenized) {
        if news_index.contains_key(&item.id) {
            return Err(Error::Config(alloc::format!("duplicate news id {}", item.id)));
        }
        news_index.insert(item.id.clone(), records.len());
        records.push(NewsRecord {
            news_id: item.id.clone(),
            raw_title: item.title.clone(),
            token_ids: encode_title(tokens, &vocab, cfg.max_title_len),
        });
    }

    let users: Vec<String> = behaviors
        .iter()
        .map(|b| b.user_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let user_index: BTreeMap<String, usize> =
        users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();

    let mut dropped = 0;
    let mut impressions = Vec::with_capacity(behaviors.len());
    for b in behaviors {
        let mut resolve = |id: &String| {
            let idx = news_index.get(id).copied();
            if idx.is_none() {
                dropped += 1;
            }
            idx
        };
        let history = b.history.iter().filter_map(&mut resolve).collect();
        let items = b
            .impression
            .iter()
            .filter_map(|(id, label)| resolve(id).map(|n| (n, *label)))
            .collect();
        impressions.push(Impression {
            id: b.impression_id.clone(),
            user: user_index[&b.user_id],
            seq: b.seq,
            history,
            items,
        });
    }

    Ok(Corpus {
        vocab,
        news: records,
        news_index,
        users,
        user_index,
        impressions,
        dropped_items: dropped,
    })
}

/// Indices into `Corpus::impressions` for each split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Users with fewer than three impressions, kept entirely in train.
    pub short_users: usize,
}

impl Splits {
    /// Order-independent fingerprint of the split assignment.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (tag, part) in [(1u64, &self.train), (2, &self.validation), (3, &self.test)] {
            for &i in part {
                for byte in (tag << 56 ^ i as u64).to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Per user, the last `test_fraction` of impressions by sequence go to test;
/// `validation_fraction` of the remaining impressions (seeded) go to
/// validation; the rest train.
pub fn split_train_test<R: Rng + ?Sized>(
    impressions: &[Impression],
    test_fraction: f64,
    validation_fraction: f64,
    rng: &mut R,
) -> Result<Splits> {
    for (name, f) in [("test", test_fraction), ("validation", validation_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(alloc::format!(
                "{name} fraction must be in [0, 1), got {f}"
            )));
        }
    }
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, imp) in impressions.iter().enumerate() {
        by_user.entry(imp.user).or_default().push(i);
    }
    let mut splits = Splits::default();
    let mut rest = Vec::new();
    for (_, mut idx) in by_user {
        idx.sort_by_key(|&i| (impressions[i].seq, i));
        if idx.len() < 3 {
            splits.short_users += 1;
            splits.train.extend(idx);
            continue;
        }
        let n_test = round_count(idx.len(), test_fraction);
        let cut = idx.len() - n_test;
        splits.test.extend_from_slice(&idx[cut..]);
        rest.extend_from_slice(&idx[..cut]);
    }
    rest.sort_unstable();
    let n_val = round_count(rest.len(), validation_fraction);
    rest.shuffle(rng);
    splits.validation.extend_from_slice(&rest[..n_val]);
    splits.train.extend_from_slice(&rest[n_val..]);
    splits.train.sort_unstable();
    splits.validation.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

fn round_count(n: usize, fraction: f64) -> usize {
    let c = libm::round(n as f64 * fraction) as usize;
    c.min(n)
}

/// Every news a user clicked in the given impressions, together with the
/// history columns of those impressions. Sorted, deduplicated.
pub fn click_pools(impressions: &[Impression], subset: &[usize], num_users: usize) -> Vec<Vec<usize>> {
    let mut pools: Vec<BTreeSet<usize>> = alloc::vec![BTreeSet::new(); num_users];
    for &i in subset {
        let imp = &impressions[i];
        pools[imp.user].extend(imp.history.iter().copied());
        pools[imp.user].extend(imp.positives());
    }
    pools.into_iter().map(|p| p.into_iter().collect()).collect()
}

/// Evaluation unit: one impression with its full candidate list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpressionSample {
    pub impression_id: String,
    pub user: usize,
    pub history: Vec<usize>,
    pub candidates: Vec<usize>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalSet {
    pub samples: Vec<ImpressionSample>,
    /// Impressions with only positives or only negatives.
    pub single_class: usize,
    /// Impressions whose user has no usable history.
    pub no_history: usize,
}

/// Randomly keep at most `limit` items.
pub(crate) fn subsample<R: Rng + ?Sized>(items: &[usize], limit: usize, rng: &mut R) -> Vec<usize> {
    if items.len() <= limit {
        return items.to_vec();
    }
    let mut picked: Vec<usize> = items.choose_multiple(rng, limit).copied().collect();
    picked.sort_unstable();
    picked
}

/// Evaluation samples for `subset`; histories come from the user's training
/// clicks minus every news shown in the impression, subsampled to
/// `max_history`.
pub fn build_eval_samples<R: Rng + ?Sized>(
    corpus: &Corpus,
    subset: &[usize],
    train: &[usize],
    max_history: usize,
    rng: &mut R,
) -> EvalSet {
    let pools = click_pools(&corpus.impressions, train, corpus.users.len());
    let mut out = EvalSet::default();
    for &i in subset {
        let imp = &corpus.impressions[i];
        let pos = imp.positives().count();
        if pos == 0 || pos == imp.items.len() {
            out.single_class += 1;
            continue;
        }
        let shown: BTreeSet<usize> = imp.items.iter().map(|(n, _)| *n).collect();
        let eligible: Vec<usize> = pools[imp.user]
            .iter()
            .copied()
            .filter(|n| !shown.contains(n))
            .collect();
        if eligible.is_empty() {
            out.no_history += 1;
            continue;
        }
        out.samples.push(ImpressionSample {
            impression_id: imp.id.clone(),
            user: imp.user,
            history: subsample(&eligible, max_history, rng),
            candidates: imp.items.iter().map(|(n, _)| *n).collect(),
            labels: imp.items.iter().map(|(_, l)| *l).collect(),
        });
    }
    out
}

/// Inject pretrained vectors into an embedding table; returns the number of
/// vocabulary rows overwritten.
pub fn apply_pretrained<'a, I>(table: &mut crate::Tensor, vocab: &Vocab, vectors: I) -> Result<usize>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let dim = table.cols();
    let mut seen = BTreeSet::new();
    for (token, values) in vectors {
        if values.len() != dim {
            return Err(Error::Config(alloc::format!(
                "embedding for {token:?} has {} values, expected {dim}",
                values.len()
            )));
        }
        if let Some(id) = vocab.id(token) {
            table.row_mut(id).copy_from_slice(values);
            seen.insert(id);
        }
    }
    Ok(seen.len())
}
