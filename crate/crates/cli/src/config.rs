//! Option groups shared by the config file and the command line.
//!
//! Each group is a set of optional overrides. Precedence is built-in
//! defaults, then the TOML file, then flags.

use std::path::Path;

use clap::Args;
use npa_core::data::{PreprocessConfig, SyntheticSpec};
use npa_core::experiment::RunSpec;
use npa_core::metrics::MrrMode;
use npa_core::model::{AttnConfig, HyperParams};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

macro_rules! overlay {
    ($src:expr, $dst:expr, $($field:ident),+) => {
        $(if let Some(v) = $src.$field.clone() { $dst.$field = v; })+
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperArgs {
    /// Word embedding dimension
    #[arg(long)]
    pub word_dim: Option<usize>,
    /// Number of CNN filters
    #[arg(long)]
    pub num_filters: Option<usize>,
    /// CNN window size (odd)
    #[arg(long)]
    pub window: Option<usize>,
    /// User embedding dimension
    #[arg(long)]
    pub user_dim: Option<usize>,
    /// Word-level preference query dimension
    #[arg(long)]
    pub word_query_dim: Option<usize>,
    /// News-level preference query dimension
    #[arg(long)]
    pub news_query_dim: Option<usize>,
    /// Maximum title length in tokens
    #[arg(long)]
    pub max_title_len: Option<usize>,
    /// Maximum clicked news per user history
    #[arg(long)]
    pub max_history: Option<usize>,
    /// Negatives per positive (K)
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Dropout rate
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Adam learning rate
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl HyperArgs {
    pub fn apply(&self, hp: &mut HyperParams) {
        overlay!(
            self, hp, word_dim, num_filters, window, user_dim, word_query_dim, news_query_dim,
            max_title_len, max_history, negatives, dropout, learning_rate, batch_size, epochs
        );
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunArgs {
    /// Attention variant: personalized, vanilla, none, or WORD-NEWS
    #[arg(long)]
    pub attn: Option<String>,
    /// Train with (K+1)-way negative sampling (on) or balanced BCE (off)
    #[arg(long, value_parser = parse_switch)]
    pub negative_sampling: Option<bool>,
    /// Share of each user's latest impressions held out for test
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Share of the remaining impressions held out for validation
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// MRR over several clicks: mean or first
    #[arg(long)]
    pub mrr: Option<String>,
    /// Minimum token count kept in the vocabulary
    #[arg(long)]
    pub min_count: Option<u64>,
}

pub fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

pub fn parse_mrr(s: &str) -> CliResult<MrrMode> {
    match s {
        "mean" => Ok(MrrMode::MeanOverPositives),
        "first" => Ok(MrrMode::FirstPositive),
        _ => Err(CliError::usage(format!("unknown MRR mode {s:?}; use mean or first"))),
    }
}

pub fn parse_attn(s: &str) -> CliResult<AttnConfig> {
    AttnConfig::parse(s).ok_or_else(|| CliError::usage(format!("unknown attention variant {s:?}")))
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticArgs {
    #[arg(long = "users")]
    pub num_users: Option<usize>,
    #[arg(long = "topics")]
    pub num_topics: Option<usize>,
    #[arg(long = "vocab")]
    pub vocab_size: Option<usize>,
    #[arg(long = "news")]
    pub num_news: Option<usize>,
    /// Sharpness of user preferences; lower is sharper
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub impressions_per_user: Option<usize>,
    #[arg(long)]
    pub impression_size: Option<usize>,
    #[arg(long)]
    pub min_title_len: Option<usize>,
    #[arg(long)]
    pub max_title_len: Option<usize>,
    #[arg(long)]
    pub mixed_fraction: Option<f64>,
    #[arg(long)]
    pub generic_fraction: Option<f64>,
}

impl SyntheticArgs {
    pub fn apply(&self, spec: &mut SyntheticSpec) {
        overlay!(
            self, spec, num_users, num_topics, vocab_size, num_news, temperature,
            impressions_per_user, impression_size, mixed_fraction, generic_fraction
        );
        if let Some(v) = self.min_title_len {
            spec.title_len.0 = v;
        }
        if let Some(v) = self.max_title_len {
            spec.title_len.1 = v;
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: HyperArgs,
    #[serde(default)]
    pub run: RunArgs,
    #[serde(default)]
    pub synthetic: SyntheticArgs,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = crate::formats::read_text(path)?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// Everything a training run needs, after precedence is resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub run: RunSpec,
    pub preprocess: PreprocessConfig,
    pub seed: u64,
}

pub fn resolve(file: &ConfigFile, hyper: &HyperArgs, run: &RunArgs, seed: Option<u64>) -> CliResult<Resolved> {
    let mut spec = RunSpec::default();
    file.model.apply(&mut spec.hp);
    hyper.apply(&mut spec.hp);
    let mut min_count = PreprocessConfig::default().min_count;
    for r in [&file.run, run] {
        if let Some(a) = &r.attn {
            spec.attn = parse_attn(a)?;
        }
        overlay!(r, spec, negative_sampling, test_fraction, validation_fraction);
        if let Some(m) = &r.mrr {
            spec.mrr_mode = parse_mrr(m)?;
        }
        if let Some(m) = r.min_count {
            min_count = m;
        }
    }
    let seed = seed.or(file.seed).unwrap_or(spec.hp.seed);
    spec.hp.seed = seed;
    spec.hp.validate()?;
    Ok(Resolved {
        preprocess: PreprocessConfig {
            min_count,
            max_title_len: spec.hp.max_title_len,
        },
        run: spec,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: ConfigFile = toml::from_str(
            "seed = 9\n[model]\nepochs = 2\nword_dim = 16\n[run]\nattn = \"vanilla\"\n",
        )
        .unwrap();
        let flags = HyperArgs {
            epochs: Some(3),
            ..HyperArgs::default()
        };
        let r = resolve(&file, &flags, &RunArgs::default(), None).unwrap();
        assert_eq!(r.run.hp.epochs, 3);
        assert_eq!(r.run.hp.word_dim, 16);
        assert_eq!(r.run.hp.num_filters, 400);
        assert_eq!(r.run.attn, AttnConfig::parse("vanilla").unwrap());
        assert_eq!(r.seed, 9);
        assert_eq!(resolve(&file, &flags, &RunArgs::default(), Some(4)).unwrap().seed, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("[model]\nwordz = 1\n").is_err());
    }
}
