//! Dataset statistics: token lengths, n-gram diversity, category counts and
//! Pearson correlation.
//!
//! Tokens are whitespace-separated runs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Category, TaskInstance};
use crate::par::Parallelism;

pub const TOKENIZER: &str = "whitespace";
pub const DEFAULT_NGRAM: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("n-gram size must be at least 1")]
    ZeroN,
    #[error("no text has at least {0} tokens")]
    NoNgrams(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooShort(usize),
    #[error("a series has zero variance")]
    ZeroVariance,
}

pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

type Counts<'t> = HashMap<&'t [&'t str], u64>;

fn count_ngrams<'t>(toks: &'t [Vec<&'t str>], n: usize) -> Counts<'t> {
    let mut m: Counts<'t> = HashMap::new();
    for t in toks {
        for w in t.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Distinct n-grams over total n-grams, pooled across the corpus.
pub fn diversity_ratio(texts: &[String], n: usize) -> Result<f64, StatsError> {
    diversity_ratio_with(texts, n, Parallelism::sequential())
}

/// [`diversity_ratio`] computed over shards whose n-gram multisets are
/// merged exactly.
pub fn diversity_ratio_with(texts: &[String], n: usize, par: Parallelism) -> Result<f64, StatsError> {
    if n == 0 {
        return Err(StatsError::ZeroN);
    }
    let toks: Vec<Vec<&str>> = texts.iter().map(|t| tokens(t)).collect();
    let shard = toks.len().div_ceil(par.worker_count().max(1)).max(1);
    let shards: Vec<&[Vec<&str>]> = toks.chunks(shard).collect();
    let partial = par.map(&shards, |s| count_ngrams(s, n));
    let mut merged: Counts<'_> = HashMap::new();
    for p in partial {
        for (k, v) in p {
            *merged.entry(k).or_default() += v;
        }
    }
    let total: u64 = merged.values().sum();
    if total == 0 {
        return Err(StatsError::NoNgrams(n));
    }
    Ok(merged.len() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub max: usize,
}

pub fn length_stats(texts: &[String]) -> Result<LengthStats, StatsError> {
    if texts.is_empty() {
        return Err(StatsError::EmptyCorpus);
    }
    let lens: Vec<usize> = texts.iter().map(|t| t.split_whitespace().count()).collect();
    Ok(LengthStats {
        mean: lens.iter().sum::<usize>() as f64 / lens.len() as f64,
        max: lens.iter().copied().max().unwrap_or(0),
    })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooShort(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Rescales values to [0, 1]. A constant series maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

pub fn category_histogram(tasks: &[TaskInstance]) -> BTreeMap<Category, usize> {
    let mut h: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
    for t in tasks {
        *h.entry(t.category).or_default() += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub tokenizer: String,
    pub n_tasks: usize,
    pub ngram: usize,
    pub lengths: BTreeMap<String, LengthStats>,
    /// Raw ratio per text field; absent when the field has no n-grams.
    pub diversity: BTreeMap<String, f64>,
    /// Min-max rescaling of `diversity` across fields.
    pub diversity_normalized: BTreeMap<String, f64>,
    pub categories: BTreeMap<Category, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
}

fn fields(tasks: &[TaskInstance]) -> Vec<(&'static str, Vec<String>)> {
    vec![
        ("user_query", tasks.iter().map(|t| t.user_query.clone()).collect()),
        ("issue_sql", tasks.iter().map(|t| t.issue_sql.join(" ")).collect()),
        ("solution_sql", tasks.iter().map(|t| t.solution_sql.join(" ")).collect()),
    ]
}

/// Report over a task set. `pairs`, when given, adds their correlation.
pub fn build_report(
    tasks: &[TaskInstance],
    n: usize,
    pairs: Option<(&[f64], &[f64])>,
    par: Parallelism,
) -> Result<StatsReport, StatsError> {
    if tasks.is_empty() {
        return Err(StatsError::EmptyCorpus);
    }
    let mut lengths = BTreeMap::new();
    let mut diversity = BTreeMap::new();
    for (name, texts) in fields(tasks) {
        lengths.insert(name.to_string(), length_stats(&texts)?);
        match diversity_ratio_with(&texts, n, par) {
            Ok(r) => {
                diversity.insert(name.to_string(), r);
            }
            Err(StatsError::NoNgrams(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let names: Vec<String> = diversity.keys().cloned().collect();
    let raw: Vec<f64> = diversity.values().copied().collect();
    let diversity_normalized = names.into_iter().zip(min_max_normalize(&raw)).collect();
    let correlation = pairs.map(|(x, y)| pearson(x, y)).transpose()?;
    Ok(StatsReport {
        tokenizer: TOKENIZER.to_string(),
        n_tasks: tasks.len(),
        ngram: n,
        lengths,
        diversity,
        diversity_normalized,
        categories: category_histogram(tasks),
        correlation,
    })
}
