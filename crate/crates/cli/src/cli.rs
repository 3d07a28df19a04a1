use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use npa_core::data::SyntheticSpec;

use crate::commands::{self, DataDir, Split, Target};
use crate::config::{self, parse_attn, parse_switch, ConfigFile, HyperArgs, RunArgs, SyntheticArgs};
use crate::container::ParamsFile;
use crate::error::{CliError, CliResult};
use crate::formats;

#[derive(Debug, Parser)]
#[command(name = "npa", version, about = "Personalized-attention news recommendation")]
pub struct Cli {
    /// TOML file with [model], [run] and [synthetic] tables
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding news.tsv and behaviors.tsv
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic click log with topic-structured titles
    Generate {
        #[command(flatten)]
        synthetic: SyntheticArgs,
    },
    /// Build the vocabulary, encode titles and split impressions
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and save parameters, loss trace and held-out metrics
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Word vectors (`token v1 ... vD` per line) for initialization
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        hyper: HyperArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate saved parameters, or train and test several seeds
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Parameters written by `train`
        #[arg(long, conflicts_with = "repeat")]
        params: Option<PathBuf>,
        /// Held-out split: validation or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Train and test this many consecutive seeds instead
        #[arg(long)]
        repeat: Option<usize>,
        #[command(flatten)]
        hyper: HyperArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare attention variants, loss types and K across shared seeds
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Attention variants (personalized, vanilla, none or WORD-NEWS)
        #[arg(long, num_args = 1.., default_values = ["personalized", "vanilla", "none"])]
        variants: Vec<String>,
        /// Negative sampling switches to try
        #[arg(long = "ns", num_args = 1.., value_parser = parse_switch, default_values = ["on"])]
        ns_values: Vec<bool>,
        /// Values of K to sweep (defaults to the configured K)
        #[arg(long, num_args = 1..)]
        k_values: Vec<usize>,
        /// Number of consecutive seeds
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[command(flatten)]
        hyper: HyperArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Dump word- and news-level attention weights for one user
    InspectAttention {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        user: String,
        /// News ids to inspect
        #[arg(long, num_args = 1.., required_unless_present = "impression")]
        news: Vec<String>,
        /// Inspect the candidates of this impression
        #[arg(long, conflicts_with = "news")]
        impression: Option<String>,
        /// Print JSON instead of aligned text
        #[arg(long)]
        json: bool,
    },
}

fn out_dir(cli: &Cli) -> &Path {
    &cli.out
}

/// Execute a parsed command line and return what it prints.
pub fn execute(cli: &Cli) -> CliResult<String> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Generate { synthetic } => {
            let mut spec = SyntheticSpec::default();
            file.synthetic.apply(&mut spec);
            synthetic.apply(&mut spec);
            if let Some(seed) = cli.seed.or(file.seed) {
                spec.seed = seed;
            }
            commands::generate(&spec, out_dir(cli))
        }
        Command::Preprocess { data, hyper, run } => {
            let cfg = config::resolve(&file, hyper, run, cli.seed)?;
            commands::preprocess(&DataDir(data.data.clone()), &cfg, out_dir(cli))
        }
        Command::Train {
            data,
            embeddings,
            hyper,
            run,
        } => {
            let cfg = config::resolve(&file, hyper, run, cli.seed)?;
            commands::train(&DataDir(data.data.clone()), &cfg, embeddings.as_deref(), out_dir(cli))
        }
        Command::Eval {
            data,
            params,
            split,
            repeat,
            hyper,
            run,
        } => {
            let dir = DataDir(data.data.clone());
            match (params, repeat) {
                (Some(p), _) => commands::eval_params(&dir, p, Split::parse(split)?, Some(out_dir(cli))),
                (None, Some(r)) => {
                    let cfg = config::resolve(&file, hyper, run, cli.seed)?;
                    let table = commands::eval_repeat(&dir, &cfg, *r)?;
                    formats::write_text(&out_dir(cli).join("repeat.tsv"), &table)?;
                    Ok(table)
                }
                (None, None) => Err(CliError::usage("eval needs --params or --repeat")),
            }
        }
        Command::Ablate {
            data,
            variants,
            ns_values,
            k_values,
            seeds,
            hyper,
            run,
        } => {
            let cfg = config::resolve(&file, hyper, run, cli.seed)?;
            let variants = variants.iter().map(|v| parse_attn(v)).collect::<CliResult<Vec<_>>>()?;
            let ks = if k_values.is_empty() {
                vec![cfg.run.hp.negatives]
            } else {
                k_values.clone()
            };
            if ks.contains(&0) {
                return Err(CliError::usage("K must be positive"));
            }
            let seeds: Vec<u64> = (0..*seeds as u64).map(|i| cfg.seed + i).collect();
            let corpus = DataDir(data.data.clone()).load(&cfg)?;
            let rows = commands::ablate_rows(&corpus, &cfg, &variants, ns_values, &ks, &seeds)?;
            let table = commands::ablation_table(&rows);
            formats::write_text(&out_dir(cli).join("ablation.tsv"), &table)?;
            Ok(table)
        }
        Command::InspectAttention {
            data,
            params,
            user,
            news,
            impression,
            json,
        } => {
            let pf = ParamsFile::load(params)?;
            let cfg = pf.resolved()?;
            let corpus = DataDir(data.data.clone()).load(&cfg)?;
            let model = pf.params(&corpus.vocab)?;
            let target = match impression {
                Some(id) => Target::Impression(id),
                None => Target::News(news),
            };
            let dump = commands::inspect(&model, &corpus, &cfg, user, target)?;
            let js = format!("{}\n", serde_json::to_string(&dump)?);
            formats::write_text(&out_dir(cli).join("attention.json"), &js)?;
            Ok(if *json { js } else { dump.text() })
        }
    }
}

/// Parse `args`, run, and map the outcome to (stdout, stderr, exit code).
pub fn run<I, T>(args: I) -> (String, String, i32)
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            return if code == 0 {
                (text, String::new(), 0)
            } else {
                (String::new(), text, code)
            };
        }
    };
    match execute(&cli) {
        Ok(out) => (out, String::new(), 0),
        Err(e) => (String::new(), format!("error: {e}\n"), e.code()),
    }
}
