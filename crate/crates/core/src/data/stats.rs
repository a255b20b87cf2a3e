//! Dataset difficulty statistics: coefficient of variation and
//! trend/seasonality strength.

use super::SeriesTensor;
use crate::error::{data_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    /// Mean over variables of 100 * std / mean.
    pub cv_percent: f64,
    /// Variables skipped because their mean is (near) zero.
    pub excluded_variables: usize,
}

/// Coefficient of variation, averaged over variables. Variables with a
/// near-zero mean are excluded and counted in the report.
pub fn compute_cv(s: &SeriesTensor) -> Result<CvReport> {
    let mut total = 0.0f64;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for node in 0..s.node_count {
        for c in 0..s.feature_count {
            let series: Vec<f64> = (0..s.t_total).map(|t| s.at(node, t, c) as f64).collect();
            let mean = series.iter().sum::<f64>() / series.len() as f64;
            if mean.abs() < 1e-9 {
                excluded += 1;
                continue;
            }
            let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / series.len() as f64;
            total += 100.0 * var.sqrt() / mean;
            used += 1;
        }
    }
    if used == 0 {
        return Err(data_err!("all variables have zero mean; CV undefined"));
    }
    Ok(CvReport {
        cv_percent: total / used as f64,
        excluded_variables: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrengthReport {
    pub trend: f64,
    pub seasonality: f64,
}

/// Trend and seasonality strength via a moving-average decomposition,
/// averaged over variables. Both values are clamped to [0, 1]:
/// trend = 1 - Var(R)/Var(T+R), seasonality = 1 - Var(R)/Var(S+R).
pub fn trend_seasonality_strength(s: &SeriesTensor, period: usize) -> Result<StrengthReport> {
    if period < 2 {
        return Err(data_err!("period must be at least 2"));
    }
    if s.t_total < 2 * period {
        return Err(data_err!(
            "series of {} steps is shorter than two periods of {period}",
            s.t_total
        ));
    }
    let mut trend_sum = 0.0f64;
    let mut season_sum = 0.0f64;
    let mut count = 0usize;
    for node in 0..s.node_count {
        for c in 0..s.feature_count {
            let series: Vec<f64> = (0..s.t_total).map(|t| s.at(node, t, c) as f64).collect();
            let (st, ss) = strength_one(&series, period);
            trend_sum += st;
            season_sum += ss;
            count += 1;
        }
    }
    Ok(StrengthReport {
        trend: trend_sum / count as f64,
        seasonality: season_sum / count as f64,
    })
}

fn strength_one(series: &[f64], period: usize) -> (f64, f64) {
    let trend = centered_moving_average(series, period);
    // Valid range where the moving average is defined.
    let half = period / 2;
    let lo = half;
    let hi = series.len() - half - if period % 2 == 0 { 1 } else { 0 };

    // Seasonal component: mean of detrended values per in-period slot,
    // centered to sum to zero.
    let mut slot_sum = vec![0.0f64; period];
    let mut slot_count = vec![0usize; period];
    for t in lo..hi {
        let slot = t % period;
        slot_sum[slot] += series[t] - trend[t];
        slot_count[slot] += 1;
    }
    let mut seasonal: Vec<f64> = slot_sum
        .iter()
        .zip(&slot_count)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let s_mean = seasonal.iter().sum::<f64>() / period as f64;
    for v in seasonal.iter_mut() {
        *v -= s_mean;
    }

    let mut remainder = Vec::with_capacity(hi - lo);
    let mut detrended = Vec::with_capacity(hi - lo);
    let mut deseasoned = Vec::with_capacity(hi - lo);
    for t in lo..hi {
        let sea = seasonal[t % period];
        remainder.push(series[t] - trend[t] - sea);
        detrended.push(series[t] - trend[t]);
        deseasoned.push(series[t] - sea);
    }
    let vr = variance(&remainder);
    let strength_trend = (1.0 - vr / variance(&deseasoned).max(1e-12)).clamp(0.0, 1.0);
    let strength_season = (1.0 - vr / variance(&detrended).max(1e-12)).clamp(0.0, 1.0);
    (strength_trend, strength_season)
}

/// Moving average of window `period`; for even periods the standard 2xMA
/// (an extra width-2 pass) keeps it centered.
fn centered_moving_average(series: &[f64], period: usize) -> Vec<f64> {
    let n = series.len();
    let mut out = vec![0.0f64; n];
    if period % 2 == 1 {
        let half = period / 2;
        for t in half..n - half {
            let mut acc = 0.0;
            for i in t - half..=t + half {
                acc += series[i];
            }
            out[t] = acc / period as f64;
        }
    } else {
        let half = period / 2;
        for t in half..n - half {
            // Half-weight endpoints: classic centered MA for even windows.
            let mut acc = 0.5 * series[t - half] + 0.5 * series[t + half];
            for i in t - half + 1..t + half {
                acc += series[i];
            }
            out[t] = acc / period as f64;
        }
    }
    out
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}
