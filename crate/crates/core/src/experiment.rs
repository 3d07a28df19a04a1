//! End-to-end runs: split a corpus, build samples, train, evaluate.
//!
//! Every random choice draws from a named stream derived from one master
//! seed, so runs that differ only in the mechanism under test see the same
//! split, the same initial weights and the same histories.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Corpus, EvalSet, Splits};
use crate::error::Result;
use crate::metrics::{self, MrrMode, RankingReport};
use crate::model::{AttnConfig, HyperParams, ModelDims, ModelParams};
use crate::training::{self, SampleSet, TrainConfig, TrainReport};

/// Generator for the stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub hp: HyperParams,
    pub attn: AttnConfig,
    pub negative_sampling: bool,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub mrr_mode: MrrMode,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            attn: AttnConfig::PERSONALIZED,
            negative_sampling: true,
            test_fraction: 0.2,
            validation_fraction: 0.1,
            mrr_mode: MrrMode::default(),
        }
    }
}

impl RunSpec {
    /// Negatives per training sample; the balanced variant uses one.
    pub fn negatives(&self) -> usize {
        if self.negative_sampling {
            self.hp.negatives
        } else {
            1
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig::from_hp(&self.hp, self.attn, self.negative_sampling)
    }
}

/// Split and evaluation sets; independent of the model variant.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub validation: EvalSet,
    pub test: EvalSet,
}

pub fn prepare(corpus: &Corpus, spec: &RunSpec, seed: u64) -> Result<Prepared> {
    let splits = data::split_train_test(
        &corpus.impressions,
        spec.test_fraction,
        spec.validation_fraction,
        &mut stream(seed, "data"),
    )?;
    let mut eval_rng = stream(seed, "eval");
    let n = spec.hp.max_history;
    let validation = data::build_eval_samples(corpus, &splits.validation, &splits.train, n, &mut eval_rng);
    let test = data::build_eval_samples(corpus, &splits.test, &splits.train, n, &mut eval_rng);
    Ok(Prepared {
        splits,
        validation,
        test,
    })
}

pub fn init_params(corpus: &Corpus, hp: &HyperParams, seed: u64) -> Result<ModelParams> {
    let dims = ModelDims::new(hp, corpus.vocab.len(), corpus.users.len());
    ModelParams::init(dims, &mut stream(seed, "init"))
}

pub fn train_samples(corpus: &Corpus, prepared: &Prepared, spec: &RunSpec, seed: u64) -> SampleSet {
    training::build_train_samples(
        corpus,
        &prepared.splits.train,
        spec.negatives(),
        spec.hp.max_history,
        &mut stream(seed, "sampling"),
    )
}

/// Eval-mode metrics of `params` on `set`.
pub fn evaluate(
    params: &ModelParams,
    corpus: &Corpus,
    set: &EvalSet,
    attn: AttnConfig,
    mode: MrrMode,
) -> Result<RankingReport> {
    let titles = corpus.titles();
    let mut report = metrics::evaluate(&set.samples, mode, |s| {
        let history: Vec<&[usize]> = s.history.iter().map(|&n| titles[n]).collect();
        let cands: Vec<&[usize]> = s.candidates.iter().map(|&n| titles[n]).collect();
        params.score(s.user, &history, &cands, attn)
    })?;
    report.skipped += set.single_class + set.no_history;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub params: ModelParams,
    pub train: TrainReport,
    pub samples: usize,
    pub validation: RankingReport,
    pub test: RankingReport,
}

/// Train from the seeded initialization and evaluate on both held-out sets.
pub fn run(corpus: &Corpus, prepared: &Prepared, spec: &RunSpec, seed: u64) -> Result<RunOutcome> {
    let params = init_params(corpus, &spec.hp, seed)?;
    run_from(params, corpus, prepared, spec, seed)
}

/// [`run`] starting from given parameters.
pub fn run_from(
    mut params: ModelParams,
    corpus: &Corpus,
    prepared: &Prepared,
    spec: &RunSpec,
    seed: u64,
) -> Result<RunOutcome> {
    spec.hp.validate()?;
    let samples = train_samples(corpus, prepared, spec, seed);
    let titles = corpus.titles();
    let report = training::train(
        &mut params,
        &titles,
        &samples.samples,
        &spec.train_config(),
        &mut stream(seed, "shuffle"),
        &mut stream(seed, "dropout"),
        |_| {},
    )?;
    let validation = evaluate(&params, corpus, &prepared.validation, spec.attn, spec.mrr_mode)?;
    let test = evaluate(&params, corpus, &prepared.test, spec.attn, spec.mrr_mode)?;
    Ok(RunOutcome {
        params,
        train: report,
        samples: samples.samples.len(),
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_named_and_seeded() {
        let a = stream(3, "init").next_u64();
        assert_eq!(a, stream(3, "init").next_u64());
        assert_ne!(a, stream(3, "dropout").next_u64());
        assert_ne!(a, stream(4, "init").next_u64());
    }

    #[test]
    fn balanced_variant_uses_one_negative() {
        let mut spec = RunSpec::default();
        assert_eq!(spec.negatives(), 4);
        spec.negative_sampling = false;
        assert_eq!(spec.negatives(), 1);
    }
}
