//! Negative-sampling sample construction, the click loss, Adam and the epoch
//! loop.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::data::{click_pools, subsample, Corpus};
use crate::error::{Error, Result};
use crate::model::{AttnConfig, Graph, HyperParams, ModelParams};
use crate::params::{Grads, ParamStore};
use crate::tape::{floor_prob, Tape, LOG_FLOOR};
use crate::tensor::{Mode, Tensor};

/// One positive click with its sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSample {
    pub user: usize,
    pub history: Vec<usize>,
    pub candidates: Vec<usize>,
    pub positive_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleSet {
    pub samples: Vec<TrainSample>,
    /// Positives dropped because no negative could be found.
    pub skipped_no_negatives: usize,
    /// Positives dropped because the user has no other click.
    pub skipped_no_history: usize,
    /// Samples whose negatives had to be drawn with replacement.
    pub with_replacement: usize,
}

/// One sample per positive click in `train`.
///
/// Negatives come from the same impression when it has at least
/// `negatives` non-clicked news, otherwise from all the user's non-clicked
/// training news (with replacement if there are still too few). The history
/// is the user's other clicks, never the positive itself, subsampled to
/// `max_history`.
pub fn build_train_samples<R: Rng + ?Sized>(
    corpus: &Corpus,
    train: &[usize],
    negatives: usize,
    max_history: usize,
    rng: &mut R,
) -> SampleSet {
    let num_users = corpus.users.len();
    let pools = click_pools(&corpus.impressions, train, num_users);
    let mut non_clicked: Vec<BTreeSet<usize>> = alloc::vec![BTreeSet::new(); num_users];
    for &i in train {
        let imp = &corpus.impressions[i];
        non_clicked[imp.user].extend(imp.negatives());
    }
    let user_negs: Vec<Vec<usize>> = non_clicked
        .into_iter()
        .zip(&pools)
        .map(|(neg, clicked)| neg.into_iter().filter(|n| clicked.binary_search(n).is_err()).collect())
        .collect();

    let mut out = SampleSet::default();
    for &i in train {
        let imp = &corpus.impressions[i];
        let local: Vec<usize> = imp.negatives().collect();
        for pos in imp.positives() {
            let others: Vec<usize> = pools[imp.user].iter().copied().filter(|&n| n != pos).collect();
            if others.is_empty() {
                out.skipped_no_history += 1;
                continue;
            }
            let pool = if local.len() >= negatives { &local } else { &user_negs[imp.user] };
            let negs: Vec<usize> = if pool.len() >= negatives {
                pool.choose_multiple(rng, negatives).copied().collect()
            } else if !pool.is_empty() {
                out.with_replacement += 1;
                (0..negatives).map(|_| *pool.choose(rng).unwrap()).collect()
            } else {
                out.skipped_no_negatives += 1;
                continue;
            };
            let history = subsample(&others, max_history, rng);
            let positive_index = rng.random_range(0..=negatives);
            let mut candidates = negs;
            candidates.insert(positive_index, pos);
            out.samples.push(TrainSample {
                user: imp.user,
                history,
                candidates,
                positive_index,
            });
        }
    }
    out
}

/// `-ln p[positive]`, with the probability floored at [`LOG_FLOOR`]. The flag
/// reports whether the floor was hit.
pub fn loss(probs: &[f64], positive_index: usize) -> (f64, bool) {
    let p = probs[positive_index];
    (-libm::log(floor_prob(p)), p < LOG_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors()[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.learning_rate * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub attn: AttnConfig,
    /// `true`: (K+1)-way softmax over sampled candidates. `false`: one
    /// sigmoid per candidate with binary cross-entropy on 1:1 samples.
    pub negative_sampling: bool,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl TrainConfig {
    pub fn from_hp(hp: &HyperParams, attn: AttnConfig, negative_sampling: bool) -> Self {
        Self {
            attn,
            negative_sampling,
            dropout: hp.dropout,
            learning_rate: hp.learning_rate,
            batch_size: hp.batch_size,
            epochs: hp.epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean sample loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub batches: Vec<BatchRecord>,
    /// Times the probability floor of the loss was hit.
    pub clamped: usize,
}

/// Loss of one sample recorded on `graph`'s tape; returns the loss node.
pub fn sample_loss<R: Rng + ?Sized>(
    graph: &mut Graph<'_, '_, R>,
    titles: &[&[usize]],
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<(crate::Var, bool)> {
    let history: Vec<&[usize]> = sample.history.iter().map(|&n| titles[n]).collect();
    let cands: Vec<&[usize]> = sample.candidates.iter().map(|&n| titles[n]).collect();
    let out = graph.forward(sample.user, &history, &cands, cfg.attn)?;
    if cfg.negative_sampling {
        let p = graph.tape.select(out.probs, sample.positive_index)?;
        let clamped = graph.tape.value(p).item() < LOG_FLOOR;
        Ok((graph.tape.neg_log(p), clamped))
    } else {
        let mut terms = Vec::with_capacity(cands.len());
        for i in 0..cands.len() {
            let z = graph.tape.select(out.scores, i)?;
            let label = if i == sample.positive_index { 1.0 } else { 0.0 };
            terms.push(graph.tape.bce_with_logits(z, label));
        }
        let total = graph.tape.sum(&terms)?;
        Ok((graph.tape.scale(total, 1.0 / cands.len() as f64), false))
    }
}

/// Mean loss over `batch` and its gradient.
pub fn batch_gradient<R: Rng + ?Sized>(
    params: &ModelParams,
    titles: &[&[usize]],
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    mode: Mode,
    rng: &mut R,
    grads: &mut Grads,
) -> Result<(f64, usize)> {
    grads.zero();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut clamped = 0;
    for sample in batch {
        let mut tape = Tape::new(params.store());
        let mut graph = Graph::new(&mut tape, params, mode, cfg.dropout, rng);
        let (l, hit) = sample_loss(&mut graph, titles, sample, cfg)?;
        clamped += hit as usize;
        let scaled = tape.scale(l, scale);
        total += tape.value(l).item();
        tape.backward(scaled, grads);
    }
    Ok((total * scale, clamped))
}

/// Shuffled mini-batch training with Adam.
///
/// `shuffle_rng` orders the samples each epoch, `dropout_rng` draws dropout
/// masks. `on_batch` sees every batch's mean loss as it happens.
pub fn train<R1, R2>(
    params: &mut ModelParams,
    titles: &[&[usize]],
    samples: &[TrainSample],
    cfg: &TrainConfig,
    shuffle_rng: &mut R1,
    dropout_rng: &mut R2,
    mut on_batch: impl FnMut(&BatchRecord),
) -> Result<TrainReport>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut adam = AdamState::new(params.store(), cfg.learning_rate);
    let mut grads = params.store().zero_grads();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(shuffle_rng);
        let mut epoch_total = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, clamped) =
                batch_gradient(params, titles, &batch, cfg, Mode::Train, dropout_rng, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_no,
                });
            }
            report.clamped += clamped;
            adam.step(params.store_mut(), &grads);
            epoch_total += loss * batch.len() as f64;
            let rec = BatchRecord {
                epoch,
                batch: batch_no,
                loss,
            };
            on_batch(&rec);
            report.batches.push(rec);
        }
        report.epoch_losses.push(epoch_total / samples.len() as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, slot};
    use crate::params::ParamId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_examples() {
        let (l, _) = loss(&[0.2; 5], 2);
        assert!((l - libm::log(5.0)).abs() < 1e-12);
        assert!((l - 1.60944).abs() < 1e-5);
        assert_eq!(loss(&[0.0, 1.0], 1).0, 0.0);
        let (l, _) = loss(&[0.7, 0.1, 0.1, 0.05, 0.05], 0);
        assert!((l - 0.356675).abs() < 1e-6);
        let (l, hit) = loss(&[1.0, 0.0], 1);
        assert!(hit && (l - 27.631021).abs() < 1e-5);
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("theta", Tensor::vector(alloc::vec![v]));
        s
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let mut adam = AdamState::new(&s, 0.1);
        let g = s.zero_grads();
        adam.step(&mut s, &g);
        assert_eq!(s.get(ParamId(0)).item(), 0.7);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut s = scalar_store(1.0);
            let mut adam = AdamState::new(&s, 0.01);
            let mut grads = s.zero_grads();
            grads.get_mut(ParamId(0)).data_mut()[0] = g;
            adam.step(&mut s, &grads);
            let moved = 1.0 - s.get(ParamId(0)).item();
            assert!((moved - 0.01 * g.signum()).abs() < 1e-8, "{moved}");
        }
    }

    #[test]
    fn adam_minimizes_square() {
        // Independent scalar recurrence for f(θ) = θ².
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(th.abs() < 0.5);

        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(&s, 0.1);
        for _ in 0..50 {
            let mut grads = s.zero_grads();
            grads.get_mut(ParamId(0)).data_mut()[0] = 2.0 * s.get(ParamId(0)).item();
            adam.step(&mut s, &grads);
        }
        let got = s.get(ParamId(0)).item();
        assert!(got.abs() < 0.5);
        assert!((got - th).abs() < 1e-12);
        assert_eq!(adam.steps(), 50);
    }

    fn toy() -> (ModelParams, Vec<Vec<usize>>, Vec<TrainSample>) {
        let hp = HyperParams {
            word_dim: 4,
            num_filters: 3,
            user_dim: 2,
            word_query_dim: 2,
            news_query_dim: 2,
            max_title_len: 3,
            dropout: 0.2,
            ..HyperParams::default()
        };
        let params = ModelParams::init(ModelDims::new(&hp, 6, 2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let titles = alloc::vec![alloc::vec![2, 3, 0], alloc::vec![4, 0, 0], alloc::vec![5, 2, 0], alloc::vec![3, 3, 4]];
        let samples = alloc::vec![
            TrainSample { user: 0, history: alloc::vec![0], candidates: alloc::vec![1, 2], positive_index: 0 },
            TrainSample { user: 1, history: alloc::vec![1, 3], candidates: alloc::vec![0, 3], positive_index: 1 },
        ];
        (params, titles, samples)
    }

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            attn: AttnConfig::PERSONALIZED,
            negative_sampling: true,
            dropout: 0.2,
            learning_rate: lr,
            batch_size: 1,
            epochs: 2,
        }
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let (mut params, titles, samples) = toy();
        let before = params.clone();
        let t: Vec<&[usize]> = titles.iter().map(|t| t.as_slice()).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        train(&mut params, &t, &samples, &cfg(0.0), &mut r1, &mut r2, |_| {}).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut params, titles, samples) = toy();
            let t: Vec<&[usize]> = titles.iter().map(|t| t.as_slice()).collect();
            let mut r1 = ChaCha8Rng::seed_from_u64(2);
            let mut r2 = ChaCha8Rng::seed_from_u64(3);
            let rep = train(&mut params, &t, &samples, &cfg(0.01), &mut r1, &mut r2, |_| {}).unwrap();
            (params, rep)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_ne!(a.get(slot::USER_EMB), toy().0.get(slot::USER_EMB));
    }

    #[test]
    fn divergence_is_reported() {
        let (mut params, titles, samples) = toy();
        params.get_mut(slot::CONV_BIAS).data_mut()[0] = f64::NAN;
        let t: Vec<&[usize]> = titles.iter().map(|t| t.as_slice()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let err = train(&mut params, &t, &samples, &cfg(0.01), &mut r, &mut r2, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0, batch: 0 }));
    }
}
