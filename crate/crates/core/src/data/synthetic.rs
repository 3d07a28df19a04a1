//! Topic-structured synthetic click logs.
//!
//! The vocabulary is split into a generic block and one block per topic. A
//! news title mixes a few words of its primary topic (and, for mixed news, of
//! a secondary topic) into generic filler. Each user prefers topics according
//! to `softmax(z / temperature)` with Gaussian `z`; the probability of
//! clicking a shown news is the user's preference for the news' best topic
//! relative to the user's favourite, so at low temperature users click little
//! besides their favourite topic.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Behavior, NewsItem};
use crate::error::{Error, Result};

/// Minimum number of clicks every generated user receives.
pub const MIN_CLICKS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub num_news: usize,
    /// Sharpness of user topic preferences; lower is sharper.
    pub temperature: f64,
    pub impressions_per_user: usize,
    pub impression_size: usize,
    /// Inclusive title length range, in words.
    pub title_len: (usize, usize),
    /// Inclusive range of primary-topic words per title.
    pub topic_words: (usize, usize),
    /// Share of news carrying words from a second topic.
    pub mixed_fraction: f64,
    /// Share of the vocabulary used as topic-free filler.
    pub generic_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_topics: 8,
            vocab_size: 2000,
            num_news: 1000,
            temperature: 0.1,
            impressions_per_user: 10,
            impression_size: 10,
            title_len: (8, 12),
            topic_words: (1, 2),
            mixed_fraction: 0.6,
            generic_fraction: 0.3,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_users == 0 || self.num_news == 0 || self.impressions_per_user == 0 {
            return bad("users, news and impressions per user must be positive".into());
        }
        if self.num_topics < 2 {
            return bad(format!("need at least 2 topics, got {}", self.num_topics));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.impression_size < 2 || self.impression_size > self.num_news {
            return bad(format!(
                "impression size {} must be in [2, {}]",
                self.impression_size, self.num_news
            ));
        }
        let (lo, hi) = self.title_len;
        let (tlo, thi) = self.topic_words;
        if lo == 0 || lo > hi || tlo == 0 || tlo > thi || thi + 2 > lo {
            return bad(format!(
                "title length {lo}..={hi} cannot hold {tlo}..={thi} topic words plus a secondary topic"
            ));
        }
        if !(0.0..=1.0).contains(&self.mixed_fraction) || !(0.0..1.0).contains(&self.generic_fraction) {
            return bad("mixed and generic fractions must be probabilities".into());
        }
        let generic = self.generic_words();
        if generic == 0 || (self.vocab_size - generic) / self.num_topics == 0 {
            return bad(format!(
                "vocabulary of {} is too small for {} topics",
                self.vocab_size, self.num_topics
            ));
        }
        if self.num_news < 2 * self.num_topics {
            return bad("need at least two news per topic".into());
        }
        Ok(())
    }

    fn generic_words(&self) -> usize {
        libm::floor(self.vocab_size as f64 * self.generic_fraction) as usize
    }

    fn words_per_topic(&self) -> usize {
        (self.vocab_size - self.generic_words()) / self.num_topics
    }
}

/// What the generator knows but does not write to the files.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Per user, preference over topics (sums to 1).
    pub user_prefs: Vec<Vec<f64>>,
    pub user_top_topic: Vec<usize>,
    /// Per news: primary topic, then the secondary topic if mixed.
    pub news_topics: Vec<Vec<usize>>,
    pub user_ids: Vec<String>,
    pub news_ids: Vec<String>,
}

impl GroundTruth {
    /// Topic of a generated word, `None` for filler or unknown words.
    pub fn word_topic(&self, word: &str) -> Option<usize> {
        let rest = word.strip_prefix('t')?;
        let (topic, idx) = rest.split_once('w')?;
        idx.parse::<usize>().ok()?;
        topic.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub news: Vec<NewsItem>,
    pub behaviors: Vec<Behavior>,
    pub truth: GroundTruth,
}

fn topic_word(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

fn generic_word(j: usize) -> String {
    format!("g{j}")
}

/// Zipf(1) index sampler over `n` items.
struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=n)
            .map(|r| {
                acc += 1.0 / r as f64;
                acc
            })
            .collect();
        cdf.iter_mut().for_each(|c| *c /= acc);
        Self { cdf }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topics = spec.num_topics;
    let per_topic = spec.words_per_topic();
    let topic_zipf = Zipf::new(per_topic);
    let generic_zipf = Zipf::new(spec.generic_words());

    // Primary topics are dealt round-robin, then shuffled, so every topic
    // has news in the pool.
    let mut primaries: Vec<usize> = (0..spec.num_news).map(|i| i % topics).collect();
    primaries.shuffle(&mut rng);

    let news_width = digits(spec.num_news);
    let mut news = Vec::with_capacity(spec.num_news);
    let mut news_topics = Vec::with_capacity(spec.num_news);
    let mut by_topic: Vec<Vec<usize>> = alloc::vec![Vec::new(); topics];
    for (n, &primary) in primaries.iter().enumerate() {
        let mut item_topics = alloc::vec![primary];
        if rng.random::<f64>() < spec.mixed_fraction {
            let mut second = rng.random_range(0..topics - 1);
            if second >= primary {
                second += 1;
            }
            item_topics.push(second);
        }
        let len = rng.random_range(spec.title_len.0..=spec.title_len.1);
        let mut words = Vec::with_capacity(len);
        for _ in 0..rng.random_range(spec.topic_words.0..=spec.topic_words.1) {
            words.push(topic_word(primary, topic_zipf.sample(&mut rng)));
        }
        if let Some(&second) = item_topics.get(1) {
            for _ in 0..rng.random_range(1..=2usize) {
                words.push(topic_word(second, topic_zipf.sample(&mut rng)));
            }
        }
        while words.len() < len {
            words.push(generic_word(generic_zipf.sample(&mut rng)));
        }
        words.shuffle(&mut rng);
        for &t in &item_topics {
            by_topic[t].push(n);
        }
        news.push(NewsItem {
            id: format!("N{:0w$}", n + 1, w = news_width),
            title: words.join(" "),
        });
        news_topics.push(item_topics);
    }

    let user_width = digits(spec.num_users);
    let mut behaviors = Vec::new();
    let mut user_prefs = Vec::with_capacity(spec.num_users);
    let mut user_top = Vec::with_capacity(spec.num_users);
    let mut user_ids = Vec::with_capacity(spec.num_users);
    let mut impression_no = 0usize;
    let imp_width = digits(spec.num_users * spec.impressions_per_user * 4);

    for u in 0..spec.num_users {
        let z: Vec<f64> = (0..topics).map(|_| gaussian(&mut rng)).collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Click probability per topic, relative to the favourite topic.
        let affinity: Vec<f64> = z
            .iter()
            .map(|&v| libm::exp((v - zmax) / spec.temperature))
            .collect();
        let total: f64 = affinity.iter().sum();
        let prefs: Vec<f64> = affinity.iter().map(|a| a / total).collect();
        let top = (0..topics).fold(0, |b, t| if z[t] > z[b] { t } else { b });
        let user_id = format!("U{:0w$}", u + 1, w = user_width);

        let mut clicks: Vec<usize> = Vec::new();
        let mut seq = 0u64;
        while (seq as usize) < spec.impressions_per_user || clicks.len() < MIN_CLICKS {
            let (items, labels) = draw_impression(spec, &affinity, &prefs, &news_topics, &by_topic, &mut rng)?;
            impression_no += 1;
            behaviors.push(Behavior {
                impression_id: format!("I{:0w$}", impression_no, w = imp_width),
                user_id: user_id.clone(),
                seq,
                history: clicks.iter().map(|&n| news[n].id.clone()).collect(),
                impression: items
                    .iter()
                    .zip(&labels)
                    .map(|(&n, &l)| (news[n].id.clone(), l))
                    .collect(),
            });
            for (&n, &l) in items.iter().zip(&labels) {
                if l && !clicks.contains(&n) {
                    clicks.push(n);
                }
            }
            seq += 1;
        }
        user_prefs.push(prefs);
        user_top.push(top);
        user_ids.push(user_id);
    }

    let news_ids = news.iter().map(|n| n.id.clone()).collect();
    Ok(SyntheticCorpus {
        news,
        behaviors,
        truth: GroundTruth {
            user_prefs,
            user_top_topic: user_top,
            news_topics,
            user_ids,
            news_ids,
        },
    })
}

/// Draw one impression with at least one click and one non-click. The first
/// slot is taken from a topic drawn by preference, the rest uniformly.
fn draw_impression<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    affinity: &[f64],
    prefs: &[f64],
    news_topics: &[Vec<usize>],
    by_topic: &[Vec<usize>],
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    for _ in 0..1000 {
        let topic = sample_weighted(prefs, rng);
        let first = by_topic[topic][rng.random_range(0..by_topic[topic].len())];
        let mut items = alloc::vec![first];
        while items.len() < spec.impression_size {
            let n = rng.random_range(0..spec.num_news);
            if !items.contains(&n) {
                items.push(n);
            }
        }
        items.shuffle(rng);
        let labels: Vec<bool> = items
            .iter()
            .map(|&n| {
                let p = news_topics[n].iter().map(|&t| affinity[t]).fold(0.0, f64::max);
                rng.random::<f64>() < p
            })
            .collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return Ok((items, labels));
        }
    }
    Err(Error::Config(
        "could not draw an impression with both clicks and non-clicks".into(),
    ))
}

fn digits(n: usize) -> usize {
    let mut d = 1;
    let mut v = n;
    while v >= 10 {
        v /= 10;
        d += 1;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_users: 30,
            num_news: 200,
            vocab_size: 400,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 2, ..small() }).unwrap();
        assert_ne!(a.behaviors, c.behaviors);
    }

    #[test]
    fn every_user_has_ten_clicks() {
        let g = generate_synthetic(&small()).unwrap();
        let mut clicks = alloc::collections::BTreeMap::<&str, usize>::new();
        for b in &g.behaviors {
            *clicks.entry(&b.user_id).or_default() += b.impression.iter().filter(|x| x.1).count();
            assert!(b.impression.iter().any(|x| x.1) && b.impression.iter().any(|x| !x.1));
        }
        assert_eq!(clicks.len(), 30);
        assert!(clicks.values().all(|&c| c >= MIN_CLICKS));
    }

    #[test]
    fn titles_draw_from_their_topics() {
        let g = generate_synthetic(&small()).unwrap();
        for (item, topics) in g.news.iter().zip(&g.truth.news_topics) {
            let words: Vec<&str> = item.title.split(' ').collect();
            assert!((8..=12).contains(&words.len()));
            for w in words {
                if let Some(t) = g.truth.word_topic(w) {
                    assert!(topics.contains(&t), "{w} in {topics:?}");
                } else {
                    assert!(w.starts_with('g'));
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let bad = SyntheticSpec { impression_size: 500, ..small() };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
        let bad = SyntheticSpec { temperature: 0.0, ..small() };
        assert!(generate_synthetic(&bad).is_err());
    }
}
