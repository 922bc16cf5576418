//! Sample moments and the goodness-of-fit tests used by the harness.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const KS_MIN_SAMPLES: usize = 30;
pub const CHI_SQUARE_MIN_SAMPLES: usize = 100;
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Standard error of the mean.
    pub std_error: f64,
}

/// Welford's one-pass mean and variance.
pub fn summarize(xs: &[f64]) -> Summary {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    let count = xs.len();
    let variance = if count > 1 { m2 / (count - 1) as f64 } else { f64::NAN };
    let std_error = (variance / count as f64).sqrt();
    Summary { count, mean, variance, std_error }
}

/// Standard error of the unbiased sample variance, from the fourth central
/// moment.
pub fn variance_std_error(xs: &[f64]) -> f64 {
    let s = summarize(xs);
    let n = xs.len() as f64;
    let m4 = xs.iter().map(|x| (x - s.mean).powi(4)).sum::<f64>() / n;
    let v = s.variance;
    ((m4 - v * v * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
}

/// Sample covariance and the standard error of that estimate.
pub fn covariance_with_se(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Precondition(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: x.len() });
    }
    let mx = summarize(x).mean;
    let my = summarize(y).mean;
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let n = x.len() as f64;
    let cov = prods.iter().sum::<f64>() / (n - 1.0);
    let se = summarize(&prods).std_error;
    Ok((cov, se))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided normal p-value for a z-score.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Asymptotic Kolmogorov tail `Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)`,
/// summed until a term drops below `1e-10`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=1000 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-10 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against the standard normal.
/// Returns `(D, p)`.
pub fn ks_normality(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < KS_MIN_SAMPLES {
        return Err(Error::TooFewSamples { needed: KS_MIN_SAMPLES, got: samples.len() });
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::Precondition("samples contain NaN".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = normal_cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    let p = kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d);
    Ok((d, p))
}

fn chi_square_sf(stat: f64, df: usize) -> f64 {
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.sf(stat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: usize,
    /// Merged bins along each axis, as lists of original category labels.
    pub row_bins: Vec<Vec<usize>>,
    pub col_bins: Vec<Vec<usize>>,
}

/// Contingency-table chi-square test of independence for two ordinal
/// categorical samples. Adjacent categories are merged greedily until every
/// expected count is at least 5.
pub fn chi_square_independence(x: &[usize], y: &[usize]) -> Result<ChiSquareResult> {
    if x.len() != y.len() {
        return Err(Error::Precondition(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < CHI_SQUARE_MIN_SAMPLES {
        return Err(Error::TooFewSamples { needed: CHI_SQUARE_MIN_SAMPLES, got: x.len() });
    }
    let n = x.len() as f64;
    let mut rows: Vec<Vec<usize>> = distinct(x).into_iter().map(|v| vec![v]).collect();
    let mut cols: Vec<Vec<usize>> = distinct(y).into_iter().map(|v| vec![v]).collect();

    let (table, rm, cm) = loop {
        let (table, rm, cm) = tabulate(x, y, &rows, &cols);
        let min_r = argmin(&rm);
        let min_c = argmin(&cm);
        let min_expected = rm[min_r] as f64 * cm[min_c] as f64 / n;
        if min_expected >= MIN_EXPECTED {
            break (table, rm, cm);
        }
        let can_rows = rows.len() > 2;
        let can_cols = cols.len() > 2;
        if !can_rows && !can_cols {
            return Err(Error::SparseCells);
        }
        let merge_rows = can_rows && (!can_cols || rm[min_r] <= cm[min_c]);
        if merge_rows {
            merge_adjacent(&mut rows, &rm, min_r);
        } else {
            merge_adjacent(&mut cols, &cm, min_c);
        }
    };
    if rows.len() < 2 || cols.len() < 2 {
        return Err(Error::SparseCells);
    }
    let mut stat = 0.0;
    for (a, row) in table.iter().enumerate() {
        for (b, &obs) in row.iter().enumerate() {
            let e = rm[a] as f64 * cm[b] as f64 / n;
            stat += (obs as f64 - e).powi(2) / e;
        }
    }
    let df = (rows.len() - 1) * (cols.len() - 1);
    Ok(ChiSquareResult { statistic: stat, p_value: chi_square_sf(stat, df), df, row_bins: rows, col_bins: cols })
}

fn distinct(v: &[usize]) -> Vec<usize> {
    let mut d = v.to_vec();
    d.sort_unstable();
    d.dedup();
    d
}

fn argmin(v: &[u64]) -> usize {
    v.iter().enumerate().min_by_key(|(_, &c)| c).map(|(i, _)| i).unwrap_or(0)
}

fn merge_adjacent(bins: &mut Vec<Vec<usize>>, marg: &[u64], idx: usize) {
    let other = if idx == 0 {
        1
    } else if idx + 1 == bins.len() || marg[idx - 1] <= marg[idx + 1] {
        idx - 1
    } else {
        idx + 1
    };
    let (keep, drop) = (idx.min(other), idx.max(other));
    let moved = bins.remove(drop);
    bins[keep].extend(moved);
}

fn tabulate(x: &[usize], y: &[usize], rows: &[Vec<usize>], cols: &[Vec<usize>]) -> (Vec<Vec<u64>>, Vec<u64>, Vec<u64>) {
    let lookup = |bins: &[Vec<usize>]| {
        let mut map = std::collections::HashMap::new();
        for (b, cats) in bins.iter().enumerate() {
            for &c in cats {
                map.insert(c, b);
            }
        }
        map
    };
    let rmap = lookup(rows);
    let cmap = lookup(cols);
    let mut table = vec![vec![0u64; cols.len()]; rows.len()];
    for (a, b) in x.iter().zip(y) {
        table[rmap[a]][cmap[b]] += 1;
    }
    let rm = table.iter().map(|r| r.iter().sum()).collect();
    let cm = (0..cols.len()).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    (table, rm, cm)
}

/// Chi-square goodness of fit of observed counts against cell
/// probabilities. Cells past the end of `observed` count as zero; the
/// probability mass not covered by `probs` is assigned to a final tail cell.
/// Adjacent cells are merged from the tail inward until every expected count
/// is at least 5.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> Result<ChiSquareResult> {
    let total: u64 = observed.iter().sum();
    if (total as usize) < CHI_SQUARE_MIN_SAMPLES {
        return Err(Error::TooFewSamples { needed: CHI_SQUARE_MIN_SAMPLES, got: total as usize });
    }
    let cells = probs.len().max(observed.len());
    let mut p: Vec<f64> = (0..cells).map(|k| probs.get(k).copied().unwrap_or(0.0)).collect();
    let mut o: Vec<u64> = (0..cells).map(|k| observed.get(k).copied().unwrap_or(0)).collect();
    let covered: f64 = p.iter().sum();
    if covered < 1.0 - 1e-12 {
        p.push(1.0 - covered);
        o.push(0);
    }
    let nf = total as f64;
    let mut bins: Vec<Vec<usize>> = (0..p.len()).map(|k| vec![k]).collect();
    let mut bp = p.clone();
    let mut bo = o.clone();
    // merge the tail first, then any interior sparse cell into its neighbour
    loop {
        if bins.len() < 2 {
            return Err(Error::SparseCells);
        }
        let last = bp.len() - 1;
        if bp[last] * nf < MIN_EXPECTED {
            let (pl, ol, bl) = (bp.pop().unwrap(), bo.pop().unwrap(), bins.pop().unwrap());
            bp[last - 1] += pl;
            bo[last - 1] += ol;
            bins[last - 1].extend(bl);
            continue;
        }
        match (0..bp.len()).find(|&k| bp[k] * nf < MIN_EXPECTED) {
            None => break,
            Some(k) => {
                let (pk, ok, bk) = (bp.remove(k), bo.remove(k), bins.remove(k));
                let into = if k == 0 { 0 } else { k - 1 };
                bp[into] += pk;
                bo[into] += ok;
                bins[into].extend(bk);
            }
        }
    }
    if bins.len() < 2 {
        return Err(Error::SparseCells);
    }
    let stat: f64 = bp.iter().zip(&bo).map(|(&pk, &ok)| (ok as f64 - pk * nf).powi(2) / (pk * nf)).sum();
    let df = bins.len() - 1;
    Ok(ChiSquareResult { statistic: stat, p_value: chi_square_sf(stat, df), df, row_bins: bins, col_bins: Vec::new() })
}
