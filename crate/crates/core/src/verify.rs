//! Forecast and event verification: deterministic errors, Brier score,
//! contingency metrics, the standardized precipitation index, and
//! onset-proxy extraction for droughts and floods.

use chrono::{DateTime, Utc};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::math::normal_quantile;
use crate::timeseries::ScalarSeries;

/// Root-mean-square error over aligned observed pairs.
pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pairs(pred, obs)?;
    let n = pred.len() as f64;
    let ss: f64 = pred
        .iter()
        .zip(obs.iter())
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    Ok((ss / n).sqrt())
}

/// Mean absolute error over aligned observed pairs.
pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pairs(pred, obs)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(obs.iter()).map(|(p, o)| (p - o).abs()).sum::<f64>() / n)
}

fn check_pairs(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(Error::Schema(format!(
            "unaligned pairs: {} vs {}",
            pred.len(),
            obs.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch("no observed pairs".into()));
    }
    Ok(())
}

/// Brier score of exceedance probabilities against the event
/// 1{obs > threshold}.
pub fn brier(prob: &[f64], obs: &[f64], threshold: f64) -> Result<f64> {
    check_pairs(prob, obs)?;
    if prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Numeric("exceedance probability outside [0, 1]".into()));
    }
    let n = prob.len() as f64;
    Ok(prob
        .iter()
        .zip(obs.iter())
        .map(|(p, o)| {
            let e = if *o > threshold { 1.0 } else { 0.0 };
            (p - e) * (p - e)
        })
        .sum::<f64>()
        / n)
}

/// 2×2 contingency counts for event forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContingencyTable {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub correct_negatives: usize,
}

/// Probability of detection and false-alarm ratio.
///
/// POD = hits/(hits+misses), FAR = false_alarms/(hits+false_alarms);
/// each is `None` when its denominator is zero.
pub fn pod_far(
    forecast: &[bool],
    observed: &[bool],
) -> (Option<f64>, Option<f64>, ContingencyTable) {
    assert_eq!(forecast.len(), observed.len(), "unaligned boolean series");
    let mut t = ContingencyTable::default();
    for (f, o) in forecast.iter().zip(observed.iter()) {
        match (f, o) {
            (true, true) => t.hits += 1,
            (false, true) => t.misses += 1,
            (true, false) => t.false_alarms += 1,
            (false, false) => t.correct_negatives += 1,
        }
    }
    let pod = if t.hits + t.misses > 0 {
        Some(t.hits as f64 / (t.hits + t.misses) as f64)
    } else {
        None
    };
    let far = if t.hits + t.false_alarms > 0 {
        Some(t.false_alarms as f64 / (t.hits + t.false_alarms) as f64)
    } else {
        None
    };
    (pod, far, t)
}

/// Gamma fit (Thom approximation) plus dry probability for one calendar month.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonthFit {
    /// Probability of a zero accumulation.
    pub q: f64,
    pub shape: f64,
    pub scale: f64,
}

/// Per-calendar-month SPI calibration (12 parameter sets).
#[derive(Debug, Clone)]
pub struct SpiCalibration {
    pub months: [MonthFit; 12],
}

const SPI_CLAMP: f64 = 1e-6;

impl SpiCalibration {
    /// H(x) = q + (1−q)·G(x) mapped through the standard normal quantile,
    /// with H clamped to [1e-6, 1−1e-6].
    pub fn spi_value(&self, month: u32, accum: f64) -> f64 {
        let fit = &self.months[(month - 1) as usize];
        let g = if accum > 0.0 {
            gamma_lr(fit.shape, accum / fit.scale)
        } else {
            0.0
        };
        let h = (fit.q + (1.0 - fit.q) * g).clamp(SPI_CLAMP, 1.0 - SPI_CLAMP);
        normal_quantile(h)
    }
}

/// Fits the per-month gamma mixture on accumulations inside the
/// calibration period.
///
/// Positive accumulations get a Thom maximum-likelihood-approximation
/// gamma fit; the point mass at zero is the empirical dry fraction.
pub fn spi_calibrate(
    accum: &ScalarSeries,
    calib_start: DateTime<Utc>,
    calib_end: DateTime<Utc>,
) -> Result<SpiCalibration> {
    if calib_end - calib_start < chrono::Duration::days(5 * 365) {
        return Err(Error::Config(format!(
            "SPI calibration period {calib_start}..{calib_end} spans less than 5 years"
        )));
    }
    let mut by_month: Vec<Vec<f64>> = vec![Vec::new(); 12];
    for t in 0..accum.len() {
        let time = accum.times[t];
        if accum.mask[t] && time >= calib_start && time <= calib_end {
            by_month[(accum.month(t) - 1) as usize].push(accum.values[t]);
        }
    }
    let mut months = [MonthFit {
        q: 0.0,
        shape: 1.0,
        scale: 1.0,
    }; 12];
    for (m, vals) in by_month.iter().enumerate() {
        if vals.is_empty() {
            return Err(Error::Calibration(format!(
                "no calibration accumulations for month {}",
                m + 1
            )));
        }
        let positives: Vec<f64> = vals.iter().copied().filter(|v| *v > 0.0).collect();
        if positives.is_empty() {
            return Err(Error::DegenerateChannel(format!(
                "all-dry calibration cell for month {}",
                m + 1
            )));
        }
        let q = (vals.len() - positives.len()) as f64 / vals.len() as f64;
        let mean = crate::math::mean(&positives);
        let mean_ln = positives.iter().map(|v| v.ln()).sum::<f64>() / positives.len() as f64;
        let a = mean.ln() - mean_ln;
        if !(a > 1e-12) || !a.is_finite() {
            return Err(Error::DegenerateChannel(format!(
                "degenerate gamma fit for month {} (log-moment statistic {a})",
                m + 1
            )));
        }
        let shape = (1.0 + (1.0 + 4.0 * a / 3.0).sqrt()) / (4.0 * a);
        let scale = mean / shape;
        months[m] = MonthFit { q, shape, scale };
    }
    Ok(SpiCalibration { months })
}

/// Standardized precipitation index series with its calibration.
#[derive(Debug, Clone)]
pub struct SpiSeries {
    pub times: Vec<DateTime<Utc>>,
    pub values: Vec<f64>,
    /// False during accumulation spin-up or where the accumulation is masked.
    pub defined: Vec<bool>,
    /// Accumulation window length in steps.
    pub window: usize,
    pub calibration: SpiCalibration,
}

/// Computes the SPI of a (already accumulated) series: fits the gamma
/// mixture per calendar month on the calibration period, then transforms
/// every defined accumulation.
pub fn spi(
    accum: &ScalarSeries,
    window: usize,
    calib_start: DateTime<Utc>,
    calib_end: DateTime<Utc>,
) -> Result<SpiSeries> {
    let calibration = spi_calibrate(accum, calib_start, calib_end)?;
    Ok(spi_transform(accum, window, calibration))
}

/// Transforms accumulations through an existing calibration.
pub fn spi_transform(accum: &ScalarSeries, window: usize, calibration: SpiCalibration) -> SpiSeries {
    let mut values = Vec::with_capacity(accum.len());
    let mut defined = Vec::with_capacity(accum.len());
    for t in 0..accum.len() {
        if accum.mask[t] {
            values.push(calibration.spi_value(accum.month(t), accum.values[t]));
            defined.push(true);
        } else {
            values.push(f64::NAN);
            defined.push(false);
        }
    }
    SpiSeries {
        times: accum.times.clone(),
        values,
        defined,
        window,
        calibration,
    }
}

/// Drought-onset proxy: first time of each contiguous dry period where
/// SPI < −1 holds at two consecutive defined update times; the onset is
/// the first of the two. Returns time indices.
pub fn spi_onset(spi: &SpiSeries) -> Vec<usize> {
    onset_scan(&spi.values, &spi.defined, |v| v < -1.0)
}

fn onset_scan(values: &[f64], defined: &[bool], dry: impl Fn(f64) -> bool) -> Vec<usize> {
    let mut onsets = Vec::new();
    let mut run = 0usize;
    let mut run_start = 0usize;
    let mut fired = false;
    for t in 0..values.len() {
        if defined[t] && dry(values[t]) {
            if run == 0 {
                run_start = t;
                fired = false;
            }
            run += 1;
            if run == 2 && !fired {
                onsets.push(run_start);
                fired = true;
            }
        } else {
            run = 0;
        }
    }
    onsets
}

/// Flood-onset rule: first step of each contiguous episode where the
/// trailing `window`-step precipitation sum exceeds `threshold`.
/// Steps with undefined accumulations never exceed.
pub fn flood_onset(precip: &ScalarSeries, window: usize, threshold: f64) -> Result<Vec<usize>> {
    if window < 1 {
        return Err(Error::Config("flood window must be >= 1".into()));
    }
    let n = precip.len();
    let mut exceed = vec![false; n];
    for t in 0..n {
        if t + 1 < window {
            continue;
        }
        let mut sum = 0.0;
        let mut ok = true;
        for k in t + 1 - window..=t {
            if !precip.mask[k] {
                ok = false;
                break;
            }
            sum += precip.values[k];
        }
        exceed[t] = ok && sum > threshold;
    }
    let mut onsets = Vec::new();
    for t in 0..n {
        if exceed[t] && (t == 0 || !exceed[t - 1]) {
            onsets.push(t);
        }
    }
    Ok(onsets)
}

/// RMSE between a forecast-derived SPI path and the observed SPI path
/// over jointly defined steps.
pub fn spi3_rmse(forecast: &SpiSeries, observed: &SpiSeries) -> Result<f64> {
    if forecast.times != observed.times {
        return Err(Error::Schema("SPI paths on different time grids".into()));
    }
    let mut f = Vec::new();
    let mut o = Vec::new();
    for t in 0..forecast.values.len() {
        if forecast.defined[t] && observed.defined[t] {
            f.push(forecast.values[t]);
            o.push(observed.values[t]);
        }
    }
    rmse(&f, &o)
}
