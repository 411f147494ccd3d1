//! Per-variable decay-rate estimation and the Kruskal–Wallis test for
//! heterogeneity of the rates.
//!
//! For each variable, pairs of observations within one episode are binned by
//! their lag and correlated per bin; `Corr(Δt) = exp(-λΔt)` is then fitted
//! through the origin on the log scale.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Bins with at most this correlation are left out of the fit.
pub const MIN_FIT_CORR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutocorrConfig {
    pub bins: usize,
    /// Largest lag considered; `None` means a quarter of the horizon.
    pub max_lag: Option<f64>,
    /// Bins with fewer pairs are excluded.
    pub min_pairs: usize,
}

impl Default for AutocorrConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            max_lag: None,
            min_pairs: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStatus {
    Ok,
    TooFewPairs,
    ZeroVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean lag of the pairs in the bin, used as the bin's abscissa.
    pub lag: f64,
    pub pairs: usize,
    pub correlation: Option<f64>,
    pub status: BinStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutocorrEstimate {
    pub bins: Vec<LagBin>,
}

impl AutocorrEstimate {
    /// Estimate from known `(lag, correlation)` points.
    pub fn from_points(lags: &[f64], corrs: &[f64]) -> Self {
        Self {
            bins: lags
                .iter()
                .zip(corrs)
                .map(|(&lag, &c)| LagBin {
                    lo: lag,
                    hi: lag,
                    lag,
                    pairs: usize::MAX,
                    correlation: Some(c),
                    status: BinStatus::Ok,
                })
                .collect(),
        }
    }

    /// `(lag, correlation)` of the bins used in the fit: the leading run of
    /// bins whose correlation exceeds [`MIN_FIT_CORR`]. Bins that are
    /// excluded for too few pairs or zero variance are passed over; the run
    /// ends at the first bin at or below the threshold, since under a
    /// decaying model everything past it is sampling noise.
    pub fn usable(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for b in &self.bins {
            match b.correlation {
                Some(c) if c > MIN_FIT_CORR && b.lag > 0.0 => out.push((b.lag, c)),
                Some(_) => break,
                None => {}
            }
        }
        out
    }
}

#[derive(Default)]
struct Moments {
    n: usize,
    lag: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

/// Binned lag correlation of one variable, pairing observations only within
/// the same series. Each series is `(time, value)` sorted by time.
pub fn empirical_autocorr(series: &[Vec<(f64, f64)>], max_lag: f64, config: &AutocorrConfig) -> Result<AutocorrEstimate> {
    if config.bins == 0 || !(max_lag > 0.0 && max_lag.is_finite()) {
        return Err(Error::Config(format!(
            "autocorrelation needs bins ≥ 1 and a positive maximum lag (got {} bins, {max_lag})",
            config.bins
        )));
    }
    let width = max_lag / config.bins as f64;
    let mut acc: Vec<Moments> = (0..config.bins).map(|_| Moments::default()).collect();
    let mut total = 0;
    for s in series {
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                let lag = s[j].0 - s[i].0;
                if lag > max_lag {
                    break;
                }
                if lag <= 0.0 {
                    continue;
                }
                let b = ((lag / width) as usize).min(config.bins - 1);
                let (x, y) = (s[i].1, s[j].1);
                let m = &mut acc[b];
                m.n += 1;
                m.lag += lag;
                m.sx += x;
                m.sy += y;
                m.sxx += x * x;
                m.syy += y * y;
                m.sxy += x * y;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("no observation pairs within the lag range".into()));
    }
    let bins = acc
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let n = m.n as f64;
            let mut bin = LagBin {
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                lag: if m.n > 0 { m.lag / n } else { (b as f64 + 0.5) * width },
                pairs: m.n,
                correlation: None,
                status: BinStatus::Ok,
            };
            if m.n < config.min_pairs.max(2) {
                bin.status = BinStatus::TooFewPairs;
                return bin;
            }
            let vx = m.sxx - m.sx * m.sx / n;
            let vy = m.syy - m.sy * m.sy / n;
            let cov = m.sxy - m.sx * m.sy / n;
            let scale = (m.sxx + m.syy).max(f64::MIN_POSITIVE);
            if vx <= 1e-12 * scale || vy <= 1e-12 * scale {
                bin.status = BinStatus::ZeroVariance;
                return bin;
            }
            bin.correlation = Some((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0));
            bin
        })
        .collect();
    Ok(AutocorrEstimate { bins })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub lambda: f64,
    /// Root-mean-square of `ln corr + λ lag` over the fitted bins.
    pub residual: f64,
    pub n_bins: usize,
}

/// `λ = -Σ lag·ln(corr) / Σ lag²` over bins with correlation above
/// [`MIN_FIT_CORR`], clamped at zero.
pub fn fit_lambda(estimate: &AutocorrEstimate) -> Result<DecayFit> {
    let pts = estimate.usable();
    if pts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "decay fit needs at least 2 bins with correlation above {MIN_FIT_CORR}, found {}",
            pts.len()
        )));
    }
    let num: f64 = pts.iter().map(|(l, c)| l * c.ln()).sum();
    let den: f64 = pts.iter().map(|(l, _)| l * l).sum();
    let lambda = (-num / den).max(0.0);
    let sq: f64 = pts.iter().map(|(l, c)| (c.ln() + lambda * l).powi(2)).sum();
    Ok(DecayFit {
        lambda,
        residual: (sq / pts.len() as f64).sqrt(),
        n_bins: pts.len(),
    })
}

/// Local rates `-ln(corr)/lag` of the usable bins.
pub fn local_rates(estimate: &AutocorrEstimate) -> Vec<f64> {
    estimate.usable().iter().map(|(l, c)| -c.ln() / l).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KwResult {
    pub h: f64,
    pub df: usize,
    pub p: f64,
}

/// Mid-ranks (1-based) of `values`, plus `Σ(t³ − t)` over tie groups.
fn mid_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
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
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Chi-squared survival function.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// Kruskal–Wallis H with tie correction and its chi-squared p-value.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KwResult> {
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "Kruskal–Wallis needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::InsufficientData("every Kruskal–Wallis group needs a sample".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("Kruskal–Wallis values must be finite".into()));
    }
    let n = pooled.len() as f64;
    if pooled.len() < 3 {
        return Err(Error::InsufficientData(format!("Kruskal–Wallis needs N ≥ 3, got {n}")));
    }
    let df = groups.len() - 1;
    let (ranks, ties) = mid_ranks(&pooled);
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KwResult { h: 0.0, df, p: 1.0 });
    }
    let mut offset = 0;
    let mut s = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        s += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = ((12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction).max(0.0);
    Ok(KwResult { h, df, p: chi2_sf(h, df) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub variable: String,
    pub fit: Option<DecayFit>,
    /// Why the fit is missing.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    pub kruskal_wallis: Option<KwResult>,
    pub kruskal_wallis_note: Option<String>,
}

pub const DECAY_TABLE_HEADER: &str = "variable,lambda,residual,n_bins";
pub const KW_HEADER: &str = "H,df,p";

impl DecayReport {
    /// Table with one row per variable; failed fits leave `lambda` and
    /// `residual` empty and report zero bins.
    pub fn table_csv(&self) -> String {
        let mut out = format!("{DECAY_TABLE_HEADER}\n");
        for r in &self.rows {
            match &r.fit {
                Some(f) => writeln!(out, "{},{},{},{}", r.variable, f.lambda, f.residual, f.n_bins),
                None => writeln!(out, "{},,,0", r.variable),
            }
            .expect("writing to a string");
        }
        out
    }

    /// `H,df,p` header and one line, or `None` when the test was refused.
    pub fn kw_csv(&self) -> Option<String> {
        self.kruskal_wallis
            .as_ref()
            .map(|k| format!("{KW_HEADER}\n{},{},{}\n", k.h, k.df, k.p))
    }
}

/// Fits every variable of `data` and compares their local rates.
pub fn analyze_dataset(data: &Dataset, config: &AutocorrConfig) -> Result<DecayReport> {
    let max_lag = config.max_lag.unwrap_or(data.t_max / 4.0);
    let mut rows = Vec::with_capacity(data.n_vars());
    let mut groups = Vec::new();
    for (v, name) in data.variables.iter().enumerate() {
        let series: Vec<Vec<(f64, f64)>> = data.episodes.iter().map(|e| e.series(v)).collect();
        let fitted = empirical_autocorr(&series, max_lag, config).and_then(|est| Ok((fit_lambda(&est)?, est)));
        match fitted {
            Ok((fit, est)) => {
                groups.push(local_rates(&est));
                rows.push(DecayRow {
                    variable: name.clone(),
                    fit: Some(fit),
                    note: None,
                });
            }
            Err(Error::InsufficientData(msg)) => {
                log::warn!("variable `{name}`: {msg}");
                rows.push(DecayRow {
                    variable: name.clone(),
                    fit: None,
                    note: Some(msg),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let (kruskal_wallis, kruskal_wallis_note) = match kruskal_wallis(&groups) {
        Ok(k) => (Some(k), None),
        Err(Error::InsufficientData(msg)) => (None, Some(msg)),
        Err(e) => return Err(e),
    };
    Ok(DecayReport {
        rows,
        kruskal_wallis,
        kruskal_wallis_note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_exponentials_are_recovered() {
        for lambda in [0.05f64, 1.0] {
            let lags = [0.5, 1.0, 2.0];
            let corrs: Vec<f64> = lags.iter().map(|l| (-lambda * l).exp()).collect();
            let fit = fit_lambda(&AutocorrEstimate::from_points(&lags, &corrs)).unwrap();
            assert!((fit.lambda - lambda).abs() < 1e-9);
            assert!(fit.residual < 1e-12);
        }
    }

    #[test]
    fn fit_needs_two_bins() {
        let est = AutocorrEstimate::from_points(&[1.0, 2.0], &[0.5, 0.005]);
        assert!(matches!(fit_lambda(&est), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn constant_series_flag_zero_variance() {
        let series = vec![vec![(0.0, 2.0), (1.0, 2.0), (2.0, 2.0)]; 10];
        let est = empirical_autocorr(&series, 4.0, &AutocorrConfig::default()).unwrap();
        assert!(est.bins.iter().any(|b| b.status == BinStatus::ZeroVariance));
        assert!(est.bins.iter().all(|b| b.correlation.is_none()));
    }

    #[test]
    fn persistent_values_correlate_fully() {
        let series: Vec<_> = (0..10)
            .map(|i| vec![(0.0, i as f64), (1.0, i as f64), (2.5, i as f64)])
            .collect();
        let est = empirical_autocorr(&series, 4.0, &AutocorrConfig::default()).unwrap();
        for b in est.bins.iter().filter(|b| b.correlation.is_some()) {
            assert!((b.correlation.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kw_examples() {
        let g = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        assert!((kruskal_wallis(&g).unwrap().h - 7.2).abs() < 1e-12);
        let same = vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]];
        let r = kruskal_wallis(&same).unwrap();
        assert_eq!((r.h, r.p), (0.0, 1.0));
        let flat = vec![vec![4.0, 4.0], vec![4.0]];
        assert_eq!(kruskal_wallis(&flat).unwrap().p, 1.0);
        assert!(matches!(kruskal_wallis(&[vec![1.0, 2.0, 3.0]]), Err(Error::InsufficientData(_))));
    }
}
