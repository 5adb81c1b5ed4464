//! Prediction metrics, decile analysis and monthly portfolio backtests.
//!
//! Everything downstream of the predictions uses ranks only, so a strictly
//! increasing transform of the predictions leaves every output unchanged.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{group_by_timestamp, CrossSection, DataError, PanelDataset, Split};

pub const N_DECILES: usize = 10;
pub const DEFAULT_MAPE_EPS: f64 = 1e-4;
pub const MONTHS_PER_YEAR: f64 = 12.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} actuals")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("cross-section at {timestamp} has {size} stocks; deciles need at least 10")]
    TooSmall { timestamp: i64, size: usize },
    #[error("return {0} at period {1} is ≤ −1")]
    Wipeout(f64, usize),
    #[error("Sharpe ratio needs at least two periods")]
    TooShort,
    #[error("Sharpe ratio undefined for a series with zero standard deviation")]
    ZeroVolatility,
    #[error("every cross-section was degenerate; IC undefined")]
    NoValidSections,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("writing {path}: {message}")]
    Write { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Mean of `|r − ŷ| / max(|r|, ε)`.
pub fn mape(preds: &[f64], actuals: &[f64], eps: f64) -> Result<f64> {
    if preds.len() != actuals.len() {
        return Err(EvalError::LengthMismatch(preds.len(), actuals.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(eps > 0.0) {
        return Err(EvalError::Epsilon(eps));
    }
    let total: f64 = preds.iter().zip(actuals).map(|(p, r)| (r - p).abs() / r.abs().max(eps)).sum();
    Ok(total / preds.len() as f64)
}

/// 1-based average ranks (ties share the mean of their positions).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `None` when either ranking has zero variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Ok(None);
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcResult {
    pub ic: f64,
    /// Per-section values, `None` for skipped sections. Empty when pooled.
    pub per_section: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Mean per-date Spearman IC, or a single Spearman over all instances when
/// `pooled`.
pub fn information_coefficient(sections: &[CrossSection], pooled: bool) -> Result<IcResult> {
    if sections.is_empty() {
        return Err(EvalError::Empty);
    }
    if pooled {
        let p: Vec<f64> = sections.iter().flat_map(|s| s.predicted.iter().copied()).collect();
        let r: Vec<f64> = sections.iter().flat_map(|s| s.realized.iter().copied()).collect();
        let ic = spearman(&p, &r)?.ok_or(EvalError::NoValidSections)?;
        return Ok(IcResult { ic, per_section: Vec::new(), skipped: 0 });
    }
    let per_section = sections
        .iter()
        .map(|s| spearman(&s.predicted, &s.realized))
        .collect::<Result<Vec<_>>>()?;
    let valid: Vec<f64> = per_section.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(EvalError::NoValidSections);
    }
    Ok(IcResult {
        ic: valid.iter().sum::<f64>() / valid.len() as f64,
        skipped: per_section.len() - valid.len(),
        per_section,
    })
}

/// Decile label per stock, in the section's order: ascending sort by
/// prediction (ties by `stock_id`), rank `k` of `n` gets `⌊10k/n⌋`.
pub fn decile_assign(section: &CrossSection) -> Result<Vec<usize>> {
    let n = section.len();
    if n < N_DECILES {
        return Err(EvalError::TooSmall { timestamp: section.timestamp, size: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| match section.predicted[a].total_cmp(&section.predicted[b]) {
        Ordering::Equal => section.stock_ids[a].cmp(&section.stock_ids[b]),
        o => o,
    });
    let mut labels = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        labels[i] = N_DECILES * k / n;
    }
    Ok(labels)
}

/// Mean realized return per decile within one section.
pub fn section_decile_means(section: &CrossSection) -> Result<[f64; N_DECILES]> {
    let labels = decile_assign(section)?;
    let mut sums = [0.0; N_DECILES];
    let mut counts = [0usize; N_DECILES];
    for (label, r) in labels.iter().zip(&section.realized) {
        sums[*label] += r;
        counts[*label] += 1;
    }
    let mut out = [0.0; N_DECILES];
    for d in 0..N_DECILES {
        out[d] = sums[d] / counts[d] as f64;
    }
    Ok(out)
}

/// Per-decile means averaged over sections.
pub fn decile_returns(sections: &[CrossSection]) -> Result<[f64; N_DECILES]> {
    if sections.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut acc = [0.0; N_DECILES];
    for s in sections {
        let m = section_decile_means(s)?;
        for d in 0..N_DECILES {
            acc[d] += m[d];
        }
    }
    Ok(acc.map(|v| v / sections.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioMode {
    LongOnly,
    LongShort,
}

/// Equal-weight monthly returns: decile 9 (long-only) or decile 9 minus
/// decile 0 (long-short).
pub fn portfolio_series(sections: &[CrossSection], mode: PortfolioMode) -> Result<Vec<f64>> {
    sections
        .iter()
        .map(|s| {
            let m = section_decile_means(s)?;
            Ok(match mode {
                PortfolioMode::LongOnly => m[N_DECILES - 1],
                PortfolioMode::LongShort => m[N_DECILES - 1] - m[0],
            })
        })
        .collect()
}

fn check_wipeout(series: &[f64]) -> Result<()> {
    match series.iter().position(|r| *r <= -1.0) {
        Some(i) => Err(EvalError::Wipeout(series[i], i)),
        None => Ok(()),
    }
}

/// `(∏(1+r))^(12/M) − 1`.
pub fn annualized_return(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(EvalError::Empty);
    }
    check_wipeout(series)?;
    let growth: f64 = series.iter().map(|r| 1.0 + r).product();
    Ok(growth.powf(MONTHS_PER_YEAR / series.len() as f64) - 1.0)
}

/// `mean / sample_std · √12`, zero risk-free rate.
pub fn sharpe_ratio(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(EvalError::TooShort);
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(EvalError::ZeroVolatility);
    }
    Ok(mean / var.sqrt() * MONTHS_PER_YEAR.sqrt())
}

/// `c_t = ∏_{m≤t}(1+r_m) − 1`.
pub fn cumulative_curve(series: &[f64]) -> Result<Vec<f64>> {
    check_wipeout(series)?;
    let mut wealth = 1.0;
    Ok(series
        .iter()
        .map(|r| {
            wealth *= 1.0 + r;
            wealth - 1.0
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportOptions {
    pub mape_eps: f64,
    pub pooled_ic: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { mape_eps: DEFAULT_MAPE_EPS, pooled_ic: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioStats {
    pub monthly: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub annualized_return: f64,
    pub sharpe_ratio: f64,
}

impl PortfolioStats {
    fn from_series(monthly: Vec<f64>) -> Result<Self> {
        Ok(Self {
            cumulative: cumulative_curve(&monthly)?,
            annualized_return: annualized_return(&monthly)?,
            sharpe_ratio: sharpe_ratio(&monthly)?,
            monthly,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub timestamps: Vec<i64>,
    pub long_only: PortfolioStats,
    pub long_short: PortfolioStats,
    pub decile_returns: [f64; N_DECILES],
    pub mape: f64,
    pub ic: f64,
    pub ic_pooled: bool,
    pub ic_skipped: usize,
}

/// Backtest of `split` given one prediction per instance in dataset order.
pub fn full_report(predictions: &[f64], ds: &PanelDataset, split: Split, options: ReportOptions) -> Result<BacktestReport> {
    let sections = group_by_timestamp(predictions, ds, split)?;
    report_from_sections(&sections, options)
}

pub fn report_from_sections(sections: &[CrossSection], options: ReportOptions) -> Result<BacktestReport> {
    if sections.is_empty() {
        return Err(EvalError::Empty);
    }
    let preds: Vec<f64> = sections.iter().flat_map(|s| s.predicted.iter().copied()).collect();
    let actuals: Vec<f64> = sections.iter().flat_map(|s| s.realized.iter().copied()).collect();
    let ic = information_coefficient(sections, options.pooled_ic)?;
    Ok(BacktestReport {
        timestamps: sections.iter().map(|s| s.timestamp).collect(),
        long_only: PortfolioStats::from_series(portfolio_series(sections, PortfolioMode::LongOnly)?)?,
        long_short: PortfolioStats::from_series(portfolio_series(sections, PortfolioMode::LongShort)?)?,
        decile_returns: decile_returns(sections)?,
        mape: mape(&preds, &actuals, options.mape_eps)?,
        ic: ic.ic,
        ic_pooled: options.pooled_ic,
        ic_skipped: ic.skipped,
    })
}

/// Writes `report.json`, `monthly.csv` (`timestamp,long_only,long_short`),
/// `deciles.csv` (`decile,mean_return`) and `cumulative.csv`
/// (`timestamp,long_only,long_short`) into `dir`.
pub fn write_report(report: &BacktestReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let err = |path: &Path, e: &dyn std::fmt::Display| EvalError::Write { path: path.display().to_string(), message: e.to_string() };
    fs::create_dir_all(dir).map_err(|e| err(dir, &e))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| err(dir, &e))?;
    let p = dir.join("report.json");
    fs::write(&p, json).map_err(|e| err(&p, &e))?;

    let write_csv = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let p = dir.join(name);
        let mut w = csv::Writer::from_path(&p).map_err(|e| err(&p, &e))?;
        w.write_record(header).map_err(|e| err(&p, &e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| err(&p, &e))?;
        }
        w.flush().map_err(|e| err(&p, &e))
    };
    let series_rows = |a: &[f64], b: &[f64]| {
        report
            .timestamps
            .iter()
            .zip(a.iter().zip(b))
            .map(|(t, (x, y))| vec![t.to_string(), x.to_string(), y.to_string()])
            .collect::<Vec<_>>()
    };
    write_csv(
        "monthly.csv",
        &["timestamp", "long_only", "long_short"],
        series_rows(&report.long_only.monthly, &report.long_short.monthly),
    )?;
    write_csv(
        "cumulative.csv",
        &["timestamp", "long_only", "long_short"],
        series_rows(&report.long_only.cumulative, &report.long_short.cumulative),
    )?;
    write_csv(
        "deciles.csv",
        &["decile", "mean_return"],
        report.decile_returns.iter().enumerate().map(|(d, r)| vec![d.to_string(), r.to_string()]).collect(),
    )
}
