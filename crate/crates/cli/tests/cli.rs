use std::collections::BTreeSet;
use std::path::Path;

use npa::commands::DataDir;
use npa::container::ParamsFile;
use npa_core::experiment;
use serde_json::Value;

const TINY: [&str; 15] = [
    "--word-dim", "8", "--num-filters", "8", "--user-dim", "4", "--word-query-dim", "4",
    "--news-query-dim", "4", "--max-title-len", "10", "--max-history", "5", "--batch-size",
];

fn npa(args: &[&str]) -> (String, String, i32) {
    npa::cli::run(std::iter::once("npa").chain(args.iter().copied()))
}

fn ok(args: &[&str]) -> String {
    let (out, err, code) = npa(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

fn tiny(cmd: &[&str], extra: &[&str]) -> Vec<String> {
    cmd.iter()
        .chain(&TINY)
        .chain(&["16", "--epochs", "1"])
        .chain(extra)
        .map(|s| s.to_string())
        .collect()
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn generate(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec!["generate", "--users", "20", "--news", "120", "--vocab", "300", "--out", d];
    args.extend_from_slice(extra);
    ok(&args);
}

fn json(s: &str) -> Value {
    serde_json::from_str(s.trim()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["train", "--help"], &["--version"]] {
        let (out, err, code) = npa(args);
        assert_eq!(code, 0);
        assert!(!out.is_empty() && err.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(npa(&[]).2, 1);
    assert_eq!(npa(&["train", "--no-such-flag"]).2, 1);
    assert_eq!(npa(&["train", "--data", d, "--attn", "sideways"]).2, 1);
    assert_eq!(npa(&["eval", "--data", d]).2, 1);
    assert_eq!(npa(&["ablate", "--data", d, "--k-values", "0"]).2, 1);
}

#[test]
fn missing_or_malformed_data_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (_, err, code) = npa(&["preprocess", "--data", d, "--out", d]);
    assert_eq!(code, 3, "{err}");
    std::fs::write(dir.path().join("news.tsv"), "news_id\ttitle\nN1\n").unwrap();
    std::fs::write(dir.path().join("behaviors.tsv"), "impression_id\tuser_id\tseq\thistory\timpression\n").unwrap();
    assert_eq!(npa(&["preprocess", "--data", d, "--out", d]).2, 3);
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    let args = tiny(&["train", "--data", d, "--out", d], &["--lr", "1e200"]);
    let (_, err, code) = npa(&strs(&args));
    assert_eq!(code, 2, "{err}");
}

#[test]
fn generate_writes_requested_users_and_true_np_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let table = ok(&["generate", "--users", "100", "--out", d]);
    let behaviors = std::fs::read_to_string(dir.path().join("behaviors.tsv")).unwrap();
    let mut users = BTreeSet::new();
    let (mut pos, mut neg) = (0usize, 0usize);
    for line in behaviors.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        users.insert(cols[1].to_string());
        for item in cols[4].split(' ') {
            if item.ends_with("-1") {
                pos += 1;
            } else {
                assert!(item.ends_with("-0"), "{item}");
                neg += 1;
            }
        }
    }
    assert_eq!(users.len(), 100);
    let ratio = table
        .lines()
        .find_map(|l| l.split("NP ratio\t").nth(1))
        .unwrap()
        .trim()
        .parse::<f64>()
        .unwrap();
    assert!((ratio - neg as f64 / pos as f64).abs() < 0.005, "{ratio} vs {neg}/{pos}");
    assert!(table.contains(&format!("# positive samples\t{pos}")));
    assert!(dir.path().join("truth.json").exists());
}

#[test]
fn preprocess_writes_artifacts_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    let out = dir.path().join("o");
    let summary = json(&ok(&["preprocess", "--data", d, "--out", out.to_str().unwrap()]));
    let n = summary["impressions"].as_u64().unwrap();
    let parts: u64 = ["train", "validation", "test"].iter().map(|k| summary[k].as_u64().unwrap()).sum();
    assert_eq!(parts, n);
    for f in ["vocab.tsv", "news_encoded.tsv", "splits.tsv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let splits = std::fs::read_to_string(out.join("splits.tsv")).unwrap();
    assert_eq!(splits.lines().count() as u64, n + 1);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    ok(&strs(&tiny(&["train", "--data", d, "--out", d], &["--lr", "0"])));
    let file = ParamsFile::load(&dir.path().join("params.json")).unwrap();
    let cfg = file.resolved().unwrap();
    let corpus = DataDir(dir.path().into()).load(&cfg).unwrap();
    let init = experiment::init_params(&corpus, &cfg.run.hp, cfg.seed).unwrap();
    let saved = file.params(&corpus.vocab).unwrap();
    assert_eq!(saved.store(), init.store());
}

#[test]
fn eval_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    let report = json(&ok(&strs(&tiny(&["train", "--data", d, "--out", d], &[]))));
    let params = dir.path().join("params.json");
    let p = params.to_str().unwrap();
    for split in ["validation", "test"] {
        let eval = json(&ok(&["eval", "--data", d, "--params", p, "--split", split, "--out", d]));
        assert_eq!(eval, report[split]);
    }
    let rows = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
    assert_eq!(rows.lines().count() as u64, report["test"]["impressions"].as_u64().unwrap() + 1);
    let loss = std::fs::read_to_string(dir.path().join("loss.tsv")).unwrap();
    assert!(loss.starts_with("epoch\tbatch\tloss\n") && loss.lines().count() > 1);
}

#[test]
fn vocabulary_mismatch_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    ok(&strs(&tiny(&["train", "--data", d, "--out", o], &[])));
    ok(&["generate", "--users", "20", "--news", "120", "--vocab", "320", "--seed", "9", "--out", d]);
    let p = out.join("params.json");
    let (_, err, code) = npa(&["eval", "--data", d, "--params", p.to_str().unwrap(), "--out", o]);
    assert_eq!(code, 3);
    assert!(err.contains("vocabulary mismatch"), "{err}");
}

#[test]
fn repeat_prints_seed_rows_and_mean_sd() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    let table = ok(&strs(&tiny(&["eval", "--data", d, "--out", d, "--seed", "4"], &["--repeat", "3"])));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "seed\tauc\tmrr\tndcg5\tndcg10");
    let aucs: Vec<f64> = lines[1..4]
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            assert_eq!(cols[0], (4 + i).to_string());
            cols[1].parse().unwrap()
        })
        .collect();
    let last: Vec<&str> = lines[4].split('\t').collect();
    assert_eq!(last[0], "mean±sd");
    let (m, _) = last[1].split_once('±').unwrap();
    let mean = aucs.iter().sum::<f64>() / 3.0;
    assert!((m.parse::<f64>().unwrap() - mean).abs() < 1e-6);
    assert!(std::fs::read_to_string(dir.path().join("repeat.tsv")).unwrap() == table);
}

#[test]
fn ablate_reports_each_run_and_means() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    let args = tiny(
        &["ablate", "--data", d, "--out", d, "--seeds", "2", "--variants", "personalized", "none", "--ns", "on", "off"],
        &[],
    );
    let table = ok(&strs(&args));
    let runs = table.lines().filter(|l| l.split('\t').nth(3).is_some_and(|s| s.parse::<u64>().is_ok())).count();
    assert_eq!(runs, 2 * 2 * 2);
    // Runs sharing a seed share their split.
    let mut by_seed = std::collections::BTreeMap::new();
    for l in table.lines().skip(1) {
        let c: Vec<&str> = l.split('\t').collect();
        if c[3].parse::<u64>().is_ok() {
            let prev = by_seed.insert(c[3].to_string(), c[4].to_string());
            assert!(prev.is_none_or(|p| p == c[4]));
        }
    }
}

#[test]
fn inspect_attention_dumps_normalized_weights() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    ok(&strs(&tiny(&["train", "--data", d, "--out", d], &[])));
    let p = dir.path().join("params.json");
    let args = ["inspect-attention", "--data", d, "--params", p.to_str().unwrap(), "--user", "U03", "--news", "N005", "N010", "--json", "--out", d];
    let dump = json(&ok(&args));
    let text = serde_json::to_string(&dump).unwrap();
    let sums: Vec<f64> = collect_weight_sums(&dump);
    assert!(!sums.is_empty(), "{text}");
    for s in sums {
        assert!((s - 1.0).abs() < 1e-9, "{text}");
    }
    let (_, _, code) = npa(&["inspect-attention", "--data", d, "--params", p.to_str().unwrap(), "--user", "nobody", "--news", "N005", "--out", d]);
    assert_eq!(code, 3);
}

/// Sum of every array of numbers named `weights` in the dump.
fn collect_weight_sums(v: &Value) -> Vec<f64> {
    let mut out = Vec::new();
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                match x {
                    Value::Array(a) if k.ends_with("weights") && a.iter().all(Value::is_number) => {
                        out.push(a.iter().map(|n| n.as_f64().unwrap()).sum());
                    }
                    _ => out.extend(collect_weight_sums(x)),
                }
            }
        }
        Value::Array(a) => a.iter().for_each(|x| out.extend(collect_weight_sums(x))),
        _ => {}
    }
    out
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let d = dir.path().to_str().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 7\n[model]\nepochs = 1\nnegatives = 2\n[run]\nattn = \"vanilla\"\n").unwrap();
    let c = cfg.to_str().unwrap();
    let args = tiny(&["train", "--config", c, "--data", d, "--out", d], &["--negatives", "3"]);
    let report = json(&ok(&strs(&args)));
    assert_eq!(report["seed"], 7);
    assert_eq!(report["attn"], "vanilla");
    let file = ParamsFile::load(&dir.path().join("params.json")).unwrap();
    assert_eq!(file.hyper.negatives, 3);
    assert_eq!(file.hyper.epochs, 1);
}
