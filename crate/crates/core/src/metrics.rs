//! Impression-level ranking metrics.
//!
//! Rankings sort candidates by descending score; equal scores keep their
//! original order. DCG uses binary gain.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::ImpressionSample;
use crate::error::{Error, Result};

/// How MRR treats impressions with several clicks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MrrMode {
    /// Mean reciprocal rank over all positives.
    #[default]
    MeanOverPositives,
    /// Reciprocal rank of the best-ranked positive only.
    FirstPositive,
}

fn counts(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

/// Fraction of (positive, negative) pairs ordered correctly, ties as ½.
///
/// Computed from midranks in O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = counts(labels);
    if p == 0 || n == 0 || scores.len() != labels.len() {
        return Err(Error::UndefinedMetric("auc"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                pos_rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = pos_rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p * n) as f64)
}

/// Candidate indices from best to worst.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn mrr(scores: &[f64], labels: &[bool], mode: MrrMode) -> Result<f64> {
    let (p, _) = counts(labels);
    if p == 0 || scores.len() != labels.len() {
        return Err(Error::UndefinedMetric("mrr"));
    }
    let ranks = ranking(scores)
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| labels[c])
        .map(|(r, _)| 1.0 / (r + 1) as f64);
    Ok(match mode {
        MrrMode::MeanOverPositives => ranks.sum::<f64>() / p as f64,
        MrrMode::FirstPositive => ranks.fold(0.0, f64::max),
    })
}

pub fn ndcg_at_k(scores: &[f64], labels: &[bool], k: usize) -> Result<f64> {
    let (p, _) = counts(labels);
    if p == 0 || k == 0 || scores.len() != labels.len() {
        return Err(Error::UndefinedMetric("ndcg"));
    }
    let discount = |pos: usize| 1.0 / libm::log2((pos + 2) as f64);
    let dcg: f64 = ranking(scores)
        .into_iter()
        .take(k)
        .enumerate()
        .filter(|&(_, c)| labels[c])
        .map(|(pos, _)| discount(pos))
        .sum();
    let idcg: f64 = (0..p.min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionMetrics {
    pub impression_id: String,
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl ImpressionMetrics {
    pub fn compute(id: &str, scores: &[f64], labels: &[bool], mode: MrrMode) -> Result<Self> {
        Ok(Self {
            impression_id: id.into(),
            auc: auc(scores, labels)?,
            mrr: mrr(scores, labels, mode)?,
            ndcg5: ndcg_at_k(scores, labels, 5)?,
            ndcg10: ndcg_at_k(scores, labels, 10)?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSummary {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl MetricSummary {
    pub fn as_array(&self) -> [f64; 4] {
        [self.auc, self.mrr, self.ndcg5, self.ndcg10]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            auc: a[0],
            mrr: a[1],
            ndcg5: a[2],
            ndcg10: a[3],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankingReport {
    pub records: Vec<ImpressionMetrics>,
    pub mean: MetricSummary,
    /// Impressions skipped because a metric was undefined.
    pub skipped: usize,
}

impl RankingReport {
    pub fn from_records(records: Vec<ImpressionMetrics>, skipped: usize) -> Self {
        let n = records.len().max(1) as f64;
        let mut sum = [0.0; 4];
        for r in &records {
            for (s, v) in sum.iter_mut().zip([r.auc, r.mrr, r.ndcg5, r.ndcg10]) {
                *s += v;
            }
        }
        Self {
            mean: MetricSummary::from_array(sum.map(|s| s / n)),
            records,
            skipped,
        }
    }
}

/// Score every impression's full candidate list and average the metrics.
pub fn evaluate<F>(samples: &[ImpressionSample], mode: MrrMode, mut scorer: F) -> Result<RankingReport>
where
    F: FnMut(&ImpressionSample) -> Result<Vec<f64>>,
{
    let mut records = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        let scores = scorer(s)?;
        if scores.len() != s.candidates.len() {
            return crate::error::dim_err("evaluate", &[scores.len()], &[s.candidates.len()]);
        }
        match ImpressionMetrics::compute(&s.impression_id, &scores, &s.labels, mode) {
            Ok(m) => records.push(m),
            Err(Error::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(RankingReport::from_records(records, skipped))
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, false, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert!(matches!(auc(&[1.0, 2.0], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[0.9, 0.1], &[true, false], MrrMode::default()).unwrap(), 1.0);
        let s = [0.9, 0.8, 0.7, 0.6, 0.5];
        assert_eq!(mrr(&s, &[false, true, false, false, false], MrrMode::default()).unwrap(), 0.5);
        let two = [true, false, false, true, false];
        assert!((mrr(&s, &two, MrrMode::MeanOverPositives).unwrap() - 0.625).abs() < 1e-15);
        assert_eq!(mrr(&s, &two, MrrMode::FirstPositive).unwrap(), 1.0);
        assert!(mrr(&s, &[false; 5], MrrMode::default()).is_err());
    }

    #[test]
    fn ties_keep_original_order() {
        let s = [0.5, 0.5, 0.5];
        assert_eq!(ranking(&s), vec![0, 1, 2]);
        assert_eq!(mrr(&s, &[false, true, false], MrrMode::default()).unwrap(), 0.5);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[0.9, 0.1], &[true, false], 5).unwrap(), 1.0);
        let s = [0.9, 0.8, 0.7, 0.6, 0.5];
        let l = [false, false, true, false, false];
        assert!((ndcg_at_k(&s, &l, 5).unwrap() - 0.5).abs() < 1e-15);
        assert!(ndcg_at_k(&s, &[false; 5], 5).is_err());
    }

    #[test]
    fn averages_and_skips() {
        let samples = vec![
            ImpressionSample {
                impression_id: "a".into(),
                user: 0,
                history: vec![0],
                candidates: vec![1, 2, 3],
                labels: vec![true, false, false],
            },
            ImpressionSample {
                impression_id: "b".into(),
                user: 0,
                history: vec![0],
                candidates: vec![1, 2],
                labels: vec![true, true],
            },
        ];
        let oracle = evaluate(&samples, MrrMode::default(), |s| {
            Ok(s.labels.iter().map(|&l| l as u8 as f64).collect())
        })
        .unwrap();
        assert_eq!(oracle.mean, MetricSummary::from_array([1.0; 4]));
        assert_eq!(oracle.skipped, 1);
        let anti = evaluate(&samples, MrrMode::default(), |s| {
            Ok(s.labels.iter().map(|&l| -(l as u8 as f64)).collect())
        })
        .unwrap();
        assert_eq!(anti.mean.auc, 0.0);
    }

    #[test]
    fn mean_and_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
