//! Paired statistics over per-seed metric values.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, mismatch, Error, Result};

/// Largest sample size for which the exact Wilcoxon null distribution is
/// computed.
pub const WILCOXON_MAX_N: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRunSet {
    pub label: String,
    /// One value per seed; paired runs share the index.
    pub values: Vec<f64>,
}

impl SeedRunSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

impl fmt::Display for Summary {
    /// `mean ± std`, three decimals unless a precision is given.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(3);
        write!(f, "{:.p$} ± {:.p$}", self.mean, self.std)
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.len() < 2 {
        return Err(invalid(format!("need at least two values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Summary {
        n: values.len(),
        mean,
        std: var.sqrt(),
    })
}

fn differences(a: &SeedRunSet, b: &SeedRunSet) -> Result<Vec<f64>> {
    if a.values.len() != b.values.len() {
        return Err(mismatch(format!(
            "`{}` has {} values, `{}` has {}",
            a.label,
            a.values.len(),
            b.label,
            b.values.len()
        )));
    }
    let d: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value"));
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_two_sided: f64,
}

/// Paired Student's t-test on `a − b`.
pub fn paired_t_test(a: &SeedRunSet, b: &SeedRunSet) -> Result<TTest> {
    let d = differences(a, b)?;
    let s = summarize(&d)?;
    if s.std == 0.0 {
        return Err(Error::UndefinedStatistic(
            "paired differences have zero variance".into(),
        ));
    }
    let t = s.mean / (s.std / (s.n as f64).sqrt());
    let df = s.n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1 is a valid Student-t");
    let p_two_sided = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p_two_sided })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Wilcoxon {
    /// `min(w_plus, w_minus)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences that were ranked.
    pub n: usize,
    pub p_two_sided: f64,
}

/// Ranks of `values` (1-based), averaged over ties, returned doubled so
/// that every rank is an integer.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0u64; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end averaged, doubled: (start + 1 + end)
        for &i in &order[start..end] {
            ranks[i] = (start + 1 + end) as u64;
        }
        start = end;
    }
    ranks
}

/// Exact Wilcoxon signed-rank test on `a − b`.
///
/// Zero differences are dropped. The two-sided p-value is the fraction of
/// the `2^n` equally likely sign assignments whose statistic
/// `min(W+, W−)` is at most the observed one.
pub fn wilcoxon_signed_rank(a: &SeedRunSet, b: &SeedRunSet) -> Result<Wilcoxon> {
    let d: Vec<f64> = differences(a, b)?.into_iter().filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::UndefinedStatistic("all paired differences are zero".into()));
    }
    if d.len() > WILCOXON_MAX_N {
        return Err(invalid(format!(
            "exact Wilcoxon supports at most {WILCOXON_MAX_N} non-zero differences, got {}",
            d.len()
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let plus: u64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let observed = plus.min(total - plus);

    // counts[s] = number of sign assignments with doubled positive-rank sum s
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in &ranks {
        for s in (r as usize..=total as usize).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let extreme: u64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| (s as u64).min(total - s as u64) <= observed)
        .map(|(_, &c)| c)
        .sum();
    let p = extreme as f64 / (1u64 << d.len()) as f64;
    Ok(Wilcoxon {
        w: observed as f64 / 2.0,
        w_plus: plus as f64 / 2.0,
        w_minus: (total - plus) as f64 / 2.0,
        n: d.len(),
        p_two_sided: p.min(1.0),
    })
}

/// Both paired tests of `a` against `baseline`. A statistic that is
/// undefined for this data (e.g. identical runs) is left out and the reason
/// recorded instead of failing the whole comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub label: String,
    pub baseline: String,
    pub mean_difference: f64,
    pub t_test: Option<TTest>,
    pub wilcoxon: Option<Wilcoxon>,
    pub notes: Vec<String>,
}

pub fn compare(a: &SeedRunSet, baseline: &SeedRunSet) -> Result<Comparison> {
    let d = differences(a, baseline)?;
    fn keep<T>(r: Result<T>, notes: &mut Vec<String>) -> Result<Option<T>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedStatistic(why)) => {
                notes.push(why);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
    let mut notes = Vec::new();
    let t_test = keep(paired_t_test(a, baseline), &mut notes)?;
    let wilcoxon = keep(wilcoxon_signed_rank(a, baseline), &mut notes)?;
    Ok(Comparison {
        label: a.label.clone(),
        baseline: baseline.label.clone(),
        mean_difference: d.iter().sum::<f64>() / d.len() as f64,
        t_test,
        wilcoxon,
        notes,
    })
}

/// One row of a per-seed metrics CSV (`label, seed, metric, value`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub label: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn parse_seed_csv(text: &str) -> Result<Vec<SeedRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let expected = ["label", "seed", "metric", "value"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e: csv::Error| Error::Parse {
                line: e.position().map(|p| p.line() as usize).unwrap_or(i + 2),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Values of `metric` for every label, ordered by seed.
pub fn group_by_label(records: &[SeedRecord], metric: &str) -> BTreeMap<String, BTreeMap<u64, f64>> {
    let mut out: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == metric) {
        out.entry(r.label.clone()).or_default().insert(r.seed, r.value);
    }
    out
}

/// Pairs two labels' runs on their common seeds (both must cover the same
/// seed set).
pub fn pair_runs(
    grouped: &BTreeMap<String, BTreeMap<u64, f64>>,
    label: &str,
    baseline: &str,
) -> Result<(SeedRunSet, SeedRunSet)> {
    let get = |l: &str| grouped.get(l).ok_or_else(|| invalid(format!("no runs for label `{l}`")));
    let (a, b) = (get(label)?, get(baseline)?);
    if a.keys().ne(b.keys()) {
        return Err(mismatch(format!("`{label}` and `{baseline}` were run on different seeds")));
    }
    Ok((
        SeedRunSet::new(label, a.values().copied().collect()),
        SeedRunSet::new(baseline, b.values().copied().collect()),
    ))
}
