//! Bootstrap rank distributions and paired Wilcoxon signed-rank tests.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Metric, MetricsReport};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Below this many paired cases every comparison is reported n.s.
pub const MIN_PAIRED_CASES: usize = 6;
/// Largest number of nonzero differences handled by exact enumeration.
const EXACT_MAX_N: usize = 20;
/// Upper bound on n^n resamples in exhaustive mode.
const EXHAUSTIVE_LIMIT: u64 = 10_000_000;

/// Percentile `q` in [0, 100] with linear interpolation between order
/// statistics (inclusive). Sorts `xs` in place. NaN on empty input.
pub fn percentile(xs: &mut [f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
}

/// Upper percentile: the first order statistic at or above the
/// interpolation position q·(n−1). With q = 95 and n ≤ 20 this is the
/// maximum. NaN for an empty slice.
pub fn upper_percentile(xs: &mut [f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let pos = (q * (xs.len() - 1) as f64 / 100.0).ceil() as usize;
    xs[pos.min(xs.len() - 1)]
}

/// Rank 1 is best; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if higher_is_better {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Per-model, per-case scores: the class mean of the metric. Only cases
/// scored for every model are kept. Returns (models, cases, table[model][case]).
pub fn case_scores(report: &MetricsReport, metric: Metric) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let models = report.model_ids();
    let mut cases: Vec<String> = report.rows.iter().map(|r| r.case_id.clone()).collect();
    cases.sort();
    cases.dedup();
    let mut table = vec![Vec::new(); models.len()];
    let mut kept = Vec::new();
    for c in &cases {
        let vals: Vec<Option<f64>> =
            models.iter().map(|m| report.mean(metric, |r| &r.model_id == m && &r.case_id == c)).collect();
        if vals.iter().all(Option::is_some) {
            kept.push(c.clone());
            for (t, v) in table.iter_mut().zip(vals) {
                t.push(v.unwrap());
            }
        }
    }
    Ok((models, kept, table))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    /// `n_boot` seeded resamples.
    Random,
    /// Every one of the n^n resamples, equally weighted.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub model_id: String,
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
}

fn ranks_of(table: &[Vec<f64>], idx: &[usize], higher: bool) -> Vec<f64> {
    let means: Vec<f64> = table.iter().map(|t| idx.iter().map(|&i| t[i]).sum::<f64>() / idx.len() as f64).collect();
    average_ranks(&means, higher)
}

/// Rank distribution per model over case resamples with replacement.
pub fn bootstrap_rank(report: &MetricsReport, metric: Metric, n_boot: usize, seed: u64, mode: Resampling) -> Result<Vec<RankSummary>> {
    let (models, cases, table) = case_scores(report, metric)?;
    if models.len() < 2 {
        return Err(Error::Config(format!("ranking needs at least 2 models, got {}", models.len())));
    }
    let n = cases.len();
    if n < 2 {
        return Err(Error::Config(format!("ranking needs at least 2 common cases, got {n}")));
    }
    let higher = metric.higher_is_better();
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); models.len()];
    let mut push = |idx: &[usize]| {
        for (s, r) in samples.iter_mut().zip(ranks_of(&table, idx, higher)) {
            s.push(r);
        }
    };
    match mode {
        Resampling::Random => {
            if n_boot == 0 {
                return Err(Error::Config("n_boot must be positive".into()));
            }
            let mut rng = rng_from_seed(seed);
            let mut idx = vec![0; n];
            for _ in 0..n_boot {
                idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
                push(&idx);
            }
        }
        Resampling::Exhaustive => {
            let total = (n as u64).checked_pow(n as u32).filter(|&t| t <= EXHAUSTIVE_LIMIT);
            let Some(total) = total else {
                return Err(Error::Config(format!("exhaustive resampling of {n} cases is too large")));
            };
            let mut idx = vec![0; n];
            for mut code in 0..total {
                for i in idx.iter_mut() {
                    *i = (code % n as u64) as usize;
                    code /= n as u64;
                }
                push(&idx);
            }
        }
    }
    Ok(models
        .into_iter()
        .zip(samples)
        .map(|(model_id, mut s)| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            RankSummary { model_id, median: percentile(&mut s, 50.0), lo: percentile(&mut s, 2.5), hi: percentile(&mut s, 97.5), mean }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Nonzero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided signed-rank test on paired differences. Zeros are dropped;
/// ties share average ranks. Exact permutation distribution up to 20
/// nonzero differences, tie-corrected normal approximation above.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Wilcoxon {
    let d: Vec<f64> = diffs.iter().cloned().filter(|x| *x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Wilcoxon { n, w_plus: 0.0, w_minus: 0.0, p_value: 1.0, exact: true };
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = average_ranks(&abs, false);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let w_minus = n as f64 * (n as f64 + 1.0) / 2.0 - w_plus;
    if n <= EXACT_MAX_N {
        // doubled ranks are integers; count subsets by doubled sum
        let dr: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = dr.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &dr {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let t = (2.0 * w_plus).round() as usize;
        let all = 2f64.powi(n as i32);
        let le: f64 = counts[..=t].iter().sum::<f64>() / all;
        let ge: f64 = counts[t..].iter().sum::<f64>() / all;
        let p_value = (2.0 * le.min(ge)).min(1.0);
        return Wilcoxon { n, w_plus, w_minus, p_value, exact: true };
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Wilcoxon { n, w_plus, w_minus, p_value, exact: false }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Better,
    Worse,
    #[serde(rename = "n.s.")]
    NotSignificant,
}

impl Outcome {
    pub fn flip(self) -> Outcome {
        match self {
            Outcome::Better => Outcome::Worse,
            Outcome::Worse => Outcome::Better,
            Outcome::NotSignificant => Outcome::NotSignificant,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Better => "better",
            Outcome::Worse => "worse",
            Outcome::NotSignificant => "n.s.",
        }
    }
}

/// `outcome[i][j]` states whether model i is better than model j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceMatrix {
    pub models: Vec<String>,
    pub outcome: Vec<Vec<Outcome>>,
    pub p_value: Vec<Vec<f64>>,
    pub n_cases: usize,
    /// Set when fewer than the minimum paired cases were available.
    pub insufficient: bool,
}

pub fn pairwise_significance(report: &MetricsReport, metric: Metric, alpha: f64) -> Result<SignificanceMatrix> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let (models, cases, table) = case_scores(report, metric)?;
    let k = models.len();
    let insufficient = cases.len() < MIN_PAIRED_CASES;
    let mut outcome = vec![vec![Outcome::NotSignificant; k]; k];
    let mut p_value = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let diffs: Vec<f64> = table[i].iter().zip(&table[j]).map(|(a, b)| a - b).collect();
            let w = wilcoxon_signed_rank(&diffs);
            p_value[i][j] = w.p_value;
            p_value[j][i] = w.p_value;
            if insufficient || w.p_value >= alpha || w.w_plus == w.w_minus {
                continue;
            }
            let i_higher = w.w_plus > w.w_minus;
            let o = if i_higher == metric.higher_is_better() { Outcome::Better } else { Outcome::Worse };
            outcome[i][j] = o;
            outcome[j][i] = o.flip();
        }
    }
    Ok(SignificanceMatrix { models, outcome, p_value, n_cases: cases.len(), insufficient })
}
