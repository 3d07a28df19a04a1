//! Self-describing JSON container for trained parameters.

use std::path::Path;

use npa_core::data::Vocab;
use npa_core::model::{HyperParams, ModelDims, ModelParams};
use npa_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_attn, parse_mrr, Resolved};
use crate::error::{CliError, CliResult};
use crate::formats;

pub const FORMAT: &str = "npa-params";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of the vocabulary in its TSV form.
pub fn vocab_hash(vocab: &Vocab) -> String {
    hex::encode(Sha256::digest(formats::write_vocab(vocab).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperRecord {
    pub word_dim: usize,
    pub num_filters: usize,
    pub window: usize,
    pub user_dim: usize,
    pub word_query_dim: usize,
    pub news_query_dim: usize,
    pub max_title_len: usize,
    pub max_history: usize,
    pub negatives: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl From<&HyperParams> for HyperRecord {
    fn from(h: &HyperParams) -> Self {
        Self {
            word_dim: h.word_dim,
            num_filters: h.num_filters,
            window: h.window,
            user_dim: h.user_dim,
            word_query_dim: h.word_query_dim,
            news_query_dim: h.news_query_dim,
            max_title_len: h.max_title_len,
            max_history: h.max_history,
            negatives: h.negatives,
            dropout: h.dropout,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            epochs: h.epochs,
            seed: h.seed,
        }
    }
}

impl From<&HyperRecord> for HyperParams {
    fn from(h: &HyperRecord) -> Self {
        Self {
            word_dim: h.word_dim,
            num_filters: h.num_filters,
            window: h.window,
            user_dim: h.user_dim,
            word_query_dim: h.word_query_dim,
            news_query_dim: h.news_query_dim,
            max_title_len: h.max_title_len,
            max_history: h.max_history,
            negatives: h.negatives,
            dropout: h.dropout,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            epochs: h.epochs,
            seed: h.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub hyper: HyperRecord,
    pub attn: String,
    pub negative_sampling: bool,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub mrr: String,
    pub min_count: u64,
    pub vocab_size: usize,
    pub vocab_sha256: String,
    pub users: Vec<String>,
    pub tensors: Vec<TensorRecord>,
}

impl ParamsFile {
    pub fn new(params: &ModelParams, cfg: &Resolved, vocab: &Vocab, users: &[String]) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            seed: cfg.seed,
            hyper: (&cfg.run.hp).into(),
            attn: cfg.run.attn.label(),
            negative_sampling: cfg.run.negative_sampling,
            test_fraction: cfg.run.test_fraction,
            validation_fraction: cfg.run.validation_fraction,
            mrr: match cfg.run.mrr_mode {
                npa_core::metrics::MrrMode::MeanOverPositives => "mean".into(),
                npa_core::metrics::MrrMode::FirstPositive => "first".into(),
            },
            min_count: cfg.preprocess.min_count,
            vocab_size: vocab.len(),
            vocab_sha256: vocab_hash(vocab),
            users: users.to_vec(),
            tensors: params
                .store()
                .iter()
                .map(|(name, t)| TensorRecord {
                    name: name.into(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// The run settings recorded at training time.
    pub fn resolved(&self) -> CliResult<Resolved> {
        let hp = HyperParams::from(&self.hyper);
        Ok(Resolved {
            run: npa_core::experiment::RunSpec {
                hp,
                attn: parse_attn(&self.attn)?,
                negative_sampling: self.negative_sampling,
                test_fraction: self.test_fraction,
                validation_fraction: self.validation_fraction,
                mrr_mode: parse_mrr(&self.mrr)?,
            },
            preprocess: npa_core::data::PreprocessConfig {
                min_count: self.min_count,
                max_title_len: self.hyper.max_title_len,
            },
            seed: self.seed,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("params serialize");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let f: Self = serde_json::from_str(&formats::read_text(path)?)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if f.format != FORMAT || f.version != VERSION {
            return Err(CliError::data(format!(
                "{}: not a {FORMAT} v{VERSION} file",
                path.display()
            )));
        }
        Ok(f)
    }

    /// Rebuild the parameters, refusing a vocabulary other than the one used
    /// for training.
    pub fn params(&self, vocab: &Vocab) -> CliResult<ModelParams> {
        let hash = vocab_hash(vocab);
        if hash != self.vocab_sha256 || vocab.len() != self.vocab_size {
            return Err(CliError::data(format!(
                "vocabulary mismatch: params were trained with {} ({} ids), data has {} ({} ids)",
                self.vocab_sha256,
                self.vocab_size,
                hash,
                vocab.len()
            )));
        }
        let mut store = ParamStore::new();
        for t in &self.tensors {
            store.push(&t.name, Tensor::new(t.shape.clone(), t.data.clone())?);
        }
        let dims = ModelDims::new(&HyperParams::from(&self.hyper), self.vocab_size, self.users.len());
        Ok(ModelParams::from_store(store, dims)?)
    }
}
