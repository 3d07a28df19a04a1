//! Tab-separated file formats. Every file starts with a header line naming
//! its columns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use npa_core::data::{Behavior, Corpus, NewsItem, Splits, Vocab};
use npa_core::metrics::RankingReport;

use crate::error::{CliError, CliResult};

pub const NEWS_HEADER: &str = "news_id\ttitle";
pub const BEHAVIORS_HEADER: &str = "impression_id\tuser_id\tseq\thistory\timpression";
pub const VOCAB_HEADER: &str = "token\tid\tcount";
pub const ENCODED_HEADER: &str = "news_id\ttoken_ids";
pub const SPLITS_HEADER: &str = "impression_id\tsplit";
pub const REPORT_HEADER: &str = "impression_id\tauc\tmrr\tndcg5\tndcg10";

/// Data rows of a TSV file, checked against the expected header. Yields
/// `(line_number, fields)`.
fn rows<'a>(path: &Path, text: &'a str, header: &str) -> CliResult<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == header => {}
        other => {
            return Err(CliError::data(format!(
                "{}: expected header {header:?}, found {:?}",
                path.display(),
                other.map(|(_, h)| h).unwrap_or("")
            )))
        }
    }
    let width = header.split('\t').count();
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != width {
            return Err(CliError::data(format!(
                "{}:{}: expected {width} fields, found {}",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        out.push((i + 1, fields));
    }
    Ok(out)
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

pub fn write_news(news: &[NewsItem]) -> String {
    let mut s = format!("{NEWS_HEADER}\n");
    for n in news {
        let _ = writeln!(s, "{}\t{}", n.id, clean(&n.title));
    }
    s
}

pub fn read_news(path: &Path) -> CliResult<Vec<NewsItem>> {
    let text = read_text(path)?;
    Ok(rows(path, &text, NEWS_HEADER)?
        .into_iter()
        .map(|(_, f)| NewsItem {
            id: f[0].to_string(),
            title: f[1].to_string(),
        })
        .collect())
}

pub fn write_behaviors(behaviors: &[Behavior]) -> String {
    let mut s = format!("{BEHAVIORS_HEADER}\n");
    for b in behaviors {
        let imp: Vec<String> = b
            .impression
            .iter()
            .map(|(n, l)| format!("{n}-{}", *l as u8))
            .collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            b.impression_id,
            b.user_id,
            b.seq,
            b.history.join(" "),
            imp.join(" ")
        );
    }
    s
}

pub fn read_behaviors(path: &Path) -> CliResult<Vec<Behavior>> {
    let text = read_text(path)?;
    let bad = |line: usize, what: &str| CliError::data(format!("{}:{line}: {what}", path.display()));
    let mut out = Vec::new();
    for (line, f) in rows(path, &text, BEHAVIORS_HEADER)? {
        let seq = f[2].parse().map_err(|_| bad(line, "seq is not an integer"))?;
        let mut impression = Vec::new();
        for item in f[4].split_whitespace() {
            let (id, label) = item
                .rsplit_once('-')
                .ok_or_else(|| bad(line, "impression item must be news_id-label"))?;
            let label = match label {
                "0" => false,
                "1" => true,
                _ => return Err(bad(line, "impression label must be 0 or 1")),
            };
            impression.push((id.to_string(), label));
        }
        out.push(Behavior {
            impression_id: f[0].to_string(),
            user_id: f[1].to_string(),
            seq,
            history: f[3].split_whitespace().map(str::to_string).collect(),
            impression,
        });
    }
    Ok(out)
}

pub fn write_vocab(vocab: &Vocab) -> String {
    let mut s = format!("{VOCAB_HEADER}\n");
    for (t, id, c) in vocab.entries() {
        let _ = writeln!(s, "{t}\t{id}\t{c}");
    }
    s
}

pub fn read_vocab(path: &Path, min_count: u64) -> CliResult<Vocab> {
    let text = read_text(path)?;
    let mut entries = Vec::new();
    for (line, f) in rows(path, &text, VOCAB_HEADER)? {
        let bad = |w: &str| CliError::data(format!("{}:{line}: {w}", path.display()));
        let id: usize = f[1].parse().map_err(|_| bad("id is not an integer"))?;
        let count: u64 = f[2].parse().map_err(|_| bad("count is not an integer"))?;
        if id != entries.len() {
            return Err(bad("ids must be dense and in order"));
        }
        entries.push((f[0].to_string(), count));
    }
    if entries.len() < 2 {
        return Err(CliError::data(format!("{}: missing reserved ids", path.display())));
    }
    Ok(Vocab::from_entries(entries.into_iter().skip(2), min_count))
}

pub fn write_encoded(corpus: &Corpus) -> String {
    let mut s = format!("{ENCODED_HEADER}\n");
    for n in &corpus.news {
        let ids: Vec<String> = n.token_ids.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}\t{}", n.news_id, ids.join(" "));
    }
    s
}

pub fn write_splits(corpus: &Corpus, splits: &Splits) -> String {
    let mut label = vec![""; corpus.impressions.len()];
    for (name, set) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
        for &i in set {
            label[i] = name;
        }
    }
    let mut s = format!("{SPLITS_HEADER}\n");
    for (imp, l) in corpus.impressions.iter().zip(label) {
        let _ = writeln!(s, "{}\t{l}", imp.id);
    }
    s
}

/// Per-impression metrics, one row each.
pub fn write_report(report: &RankingReport) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in &report.records {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.impression_id, r.auc, r.mrr, r.ndcg5, r.ndcg10);
    }
    s
}

/// Parse word vectors: `token v_1 ... v_D` per line. Errors carry the line
/// number.
pub fn parse_embeddings(path: &Path, text: &str) -> CliResult<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values
            .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if values.is_empty() || *dim.get_or_insert(values.len()) != values.len() {
            return Err(CliError::data(format!(
                "{}:{}: expected {} values after the token, found {}",
                path.display(),
                i + 1,
                dim.unwrap_or(1),
                values.len()
            )));
        }
        out.push((token.to_string(), values));
    }
    Ok(out)
}
