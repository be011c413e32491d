//! Residual-driven Shiryaev-Roberts detection with Monte-Carlo ARL0
//! calibration, plus CUSUM and threshold baselines and detector
//! evaluation.
//!
//! The defect r_t = ‖h_t − g(h_{t+1})‖ is standardized against held-out
//! climatology, converted to a positive excursion z_t = max(0, (r−μ0)/σ0),
//! and mapped to the calibrated pseudo-likelihood ratio
//! Λ_t = exp(η z_t − ψ0(η)) with ψ0 the empirical log-MGF, so the null
//! mean of Λ is one by construction. The SR statistic R_t = (1+R_{t−1})Λ_t
//! alarms at its first passage over a threshold B chosen by simulation so
//! that the mean first-passage time matches the target ARL0.

use chrono::{DateTime, Datelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::linalg::norm2;
use crate::rnn::{HiddenTrajectory, Projector, RmModel};
use crate::timeseries::ScalarSeries;

/// Sequential anomaly scores r_t with their state timestamps.
///
/// Defect t is the reconstruction error of state t from state t+1, so it
/// becomes available one step after its own timestamp.
#[derive(Debug, Clone)]
pub struct DefectSeries {
    pub times: Vec<DateTime<Utc>>,
    pub values: Vec<f64>,
}

impl DefectSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn month(&self, t: usize) -> u32 {
        self.times[t].month()
    }
}

/// Euclidean backward reconstruction errors ‖h_t − g(h_{t+1})‖ for
/// t = 1..T−1.
pub fn defect_values(traj: &HiddenTrajectory, proj: &Projector) -> Vec<f64> {
    let t_len = traj.len();
    assert!(t_len >= 2, "defect series needs T >= 2");
    (0..t_len - 1)
        .map(|i| {
            let g = proj.apply(&traj.states[i + 1]);
            let e: Vec<f64> = traj.states[i]
                .iter()
                .zip(g.iter())
                .map(|(a, b)| a - b)
                .collect();
            norm2(&e)
        })
        .collect()
}

/// Defect series labeled with the timestamps of the reconstructed states.
pub fn defect_series(
    traj: &HiddenTrajectory,
    proj: &Projector,
    times: &[DateTime<Utc>],
) -> DefectSeries {
    assert_eq!(times.len(), traj.len(), "times / trajectory length mismatch");
    DefectSeries {
        times: times[..traj.len() - 1].to_vec(),
        values: defect_values(traj, proj),
    }
}

/// Location/scale/log-MGF of the null defect distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullStats {
    pub mu0: f64,
    pub sigma0: f64,
    pub psi0: f64,
}

/// Residual null statistics, optionally stratified by calendar month.
#[derive(Debug, Clone)]
pub struct NullCalibration {
    pub eta: f64,
    pub global: NullStats,
    pub monthly: Option<Box<[NullStats; 12]>>,
}

impl NullCalibration {
    fn stats_for(&self, month: u32) -> &NullStats {
        match &self.monthly {
            Some(table) => &table[(month - 1) as usize],
            None => &self.global,
        }
    }

    /// Positive standardized excursion z = max(0, (r − μ0)/σ0).
    pub fn z(&self, r: f64, month: u32) -> f64 {
        let s = self.stats_for(month);
        ((r - s.mu0) / s.sigma0).max(0.0)
    }

    /// Calibrated pseudo-likelihood ratio Λ = exp(η z − ψ0) > 0.
    pub fn lambda(&self, r: f64, month: u32) -> f64 {
        let s = self.stats_for(month);
        let z = ((r - s.mu0) / s.sigma0).max(0.0);
        (self.eta * z - s.psi0).exp()
    }
}

/// ψ0(η) = ln(mean of exp(η z)) over a z sample.
pub fn log_mean_exp(zs: &[f64], eta: f64) -> f64 {
    assert!(!zs.is_empty());
    // Stabilized against large excursions.
    let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * eta;
    let sum: f64 = zs.iter().map(|z| (eta * z - m).exp()).sum();
    m + (sum / zs.len() as f64).ln()
}

fn fit_null_stats(values: &[f64], eta: f64) -> Result<NullStats> {
    let mu0 = crate::math::mean(values);
    let sigma0 = crate::math::sample_sd(values);
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(Error::Calibration(
            "degenerate climatology defects (zero spread)".into(),
        ));
    }
    let zs: Vec<f64> = values.iter().map(|r| ((r - mu0) / sigma0).max(0.0)).collect();
    Ok(NullStats {
        mu0,
        sigma0,
        psi0: log_mean_exp(&zs, eta),
    })
}

/// Estimates (μ0, σ0, ψ0) from climatology defects; monthly mode fits one
/// triple per calendar month. Requires ≥ 100 defects globally or ≥ 30 per
/// month.
pub fn estimate_null(defects: &DefectSeries, eta: f64, monthly: bool) -> Result<NullCalibration> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!("eta must be > 0, got {eta}")));
    }
    if defects.len() < 100 {
        return Err(Error::Calibration(format!(
            "need at least 100 climatology defects, got {}",
            defects.len()
        )));
    }
    let global = fit_null_stats(&defects.values, eta)?;
    let monthly_table = if monthly {
        let mut by_month: Vec<Vec<f64>> = vec![Vec::new(); 12];
        for t in 0..defects.len() {
            by_month[(defects.month(t) - 1) as usize].push(defects.values[t]);
        }
        let mut table = Vec::with_capacity(12);
        for (m, vals) in by_month.iter().enumerate() {
            if vals.len() < 30 {
                return Err(Error::Calibration(format!(
                    "monthly null needs >= 30 defects per month; month {} has {}",
                    m + 1,
                    vals.len()
                )));
            }
            table.push(fit_null_stats(vals, eta)?);
        }
        let arr: [NullStats; 12] = table.try_into().unwrap();
        Some(Box::new(arr))
    } else {
        None
    };
    Ok(NullCalibration {
        eta,
        global,
        monthly: monthly_table,
    })
}

/// Detector statistic path with its first-passage alarms.
#[derive(Debug, Clone)]
pub struct AlarmTrace {
    pub detector: String,
    /// statistic[t] is the detector value at step t+1 (R_0 = 0 is implicit).
    pub statistic: Vec<f64>,
    pub threshold: f64,
    /// 0-based step indices where alarms fired.
    pub alarms: Vec<usize>,
}

impl AlarmTrace {
    pub fn first_alarm(&self) -> Option<usize> {
        self.alarms.first().copied()
    }

    pub fn len(&self) -> usize {
        self.statistic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statistic.is_empty()
    }
}

/// Shiryaev-Roberts recursion R_t = (1 + R_{t−1})·Λ_t from R_0 = 0 with
/// alarms at R_t ≥ B.
///
/// `reset`: `None` records only the first passage and lets the statistic
/// run on; `Some(refractory)` resets R to 0 after each alarm and
/// suppresses re-alarms for `refractory` steps.
pub fn sr_run(lambdas: &[f64], b: f64, reset: Option<usize>) -> AlarmTrace {
    assert!(b > 0.0, "SR threshold must be > 0");
    let mut statistic = Vec::with_capacity(lambdas.len());
    let mut alarms = Vec::new();
    let mut r = 0.0f64;
    let mut suppressed_until = 0usize;
    for (t, &l) in lambdas.iter().enumerate() {
        assert!(l > 0.0, "likelihood ratio must be > 0, got {l} at step {t}");
        r = (1.0 + r) * l;
        statistic.push(r);
        let can_alarm = match reset {
            None => alarms.is_empty(),
            Some(_) => t >= suppressed_until,
        };
        if can_alarm && r >= b {
            alarms.push(t);
            if let Some(refractory) = reset {
                r = 0.0;
                suppressed_until = t + 1 + refractory;
            }
        }
    }
    AlarmTrace {
        detector: "sr".into(),
        statistic,
        threshold: b,
        alarms,
    }
}

/// One-sided CUSUM S_t = max(0, S_{t−1} + score_t − k) with alarms at
/// S_t ≥ h. Pass −SPI for the drought direction, +score for floods.
pub fn cusum_run(scores: &[f64], k: f64, h: f64, reset: Option<usize>) -> AlarmTrace {
    assert!(k >= 0.0 && h > 0.0, "need k >= 0 and h > 0");
    let mut statistic = Vec::with_capacity(scores.len());
    let mut alarms = Vec::new();
    let mut s = 0.0f64;
    let mut suppressed_until = 0usize;
    for (t, &x) in scores.iter().enumerate() {
        s = (s + x - k).max(0.0);
        statistic.push(s);
        let can_alarm = match reset {
            None => alarms.is_empty(),
            Some(_) => t >= suppressed_until,
        };
        if can_alarm && s >= h {
            alarms.push(t);
            if let Some(refractory) = reset {
                s = 0.0;
                suppressed_until = t + 1 + refractory;
            }
        }
    }
    AlarmTrace {
        detector: "cusum".into(),
        statistic,
        threshold: h,
        alarms,
    }
}

/// Direction of the raw-accumulation threshold baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Alarm when the trailing accumulation falls below the threshold.
    Deficit,
    /// Alarm when it rises above the threshold.
    Exceedance,
}

/// Raw trailing-accumulation threshold detector. Alarms are edge
/// triggered per contiguous violation episode; `reset` adds a
/// refractory suppression after each alarm.
pub fn threshold_run(
    precip: &ScalarSeries,
    window: usize,
    threshold: f64,
    mode: ThresholdMode,
    reset: Option<usize>,
) -> Result<AlarmTrace> {
    if window < 1 {
        return Err(Error::Config("threshold window must be >= 1".into()));
    }
    let n = precip.len();
    let mut statistic = vec![f64::NAN; n];
    let mut violate = vec![false; n];
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
        if ok {
            statistic[t] = sum;
            violate[t] = match mode {
                ThresholdMode::Deficit => sum < threshold,
                ThresholdMode::Exceedance => sum > threshold,
            };
        }
    }
    let mut alarms = Vec::new();
    let mut suppressed_until = 0usize;
    let mut prev_violate = false;
    for t in 0..n {
        match reset {
            None => {
                if alarms.is_empty() && violate[t] {
                    alarms.push(t);
                }
            }
            Some(refractory) => {
                let edge = violate[t] && !prev_violate;
                if edge && t >= suppressed_until {
                    alarms.push(t);
                    suppressed_until = t + 1 + refractory;
                }
            }
        }
        prev_violate = violate[t];
    }
    Ok(AlarmTrace {
        detector: match mode {
            ThresholdMode::Deficit => "deficit_threshold".into(),
            ThresholdMode::Exceedance => "exceedance_threshold".into(),
        },
        statistic,
        threshold,
        alarms,
    })
}

/// Calibrated threshold with its Monte-Carlo provenance.
#[derive(Debug, Clone)]
pub struct SrThreshold {
    pub b_star: f64,
    pub target_arl0: f64,
    /// Mean first-passage time at b_star on the calibration sample.
    pub achieved_arl0: f64,
    /// 95% percentile-bootstrap interval over segment resamples.
    pub ci95: (f64, f64),
    pub n_boot: usize,
    /// Streams that hit the step cap before passage (lower-bound lengths).
    pub censored: usize,
}

/// Options for first-passage threshold calibration.
#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub target_arl0: f64,
    pub n_boot: usize,
    pub seed: u64,
    /// Relative ARL tolerance at the solution (0.02 = 2%).
    pub rel_tol: f64,
    /// Per-stream step cap; 0 picks max(100000, 200·target).
    pub max_steps: usize,
    pub ci_replicates: usize,
}

impl CalibrationOptions {
    pub fn new(target_arl0: f64, n_boot: usize, seed: u64) -> Self {
        CalibrationOptions {
            target_arl0,
            n_boot,
            seed,
            rel_tol: 0.02,
            max_steps: 0,
            ci_replicates: 1000,
        }
    }

    fn cap(&self) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            (200.0 * self.target_arl0).max(100_000.0) as usize
        }
    }
}

struct StreamState<I> {
    it: I,
    t: usize,
    /// Running-maximum records (t, value), both strictly increasing.
    records: Vec<(usize, f64)>,
    capped: bool,
}

impl<I: Iterator<Item = f64>> StreamState<I> {
    fn current_max(&self) -> f64 {
        self.records.last().map(|r| r.1).unwrap_or(f64::NEG_INFINITY)
    }

    fn extend_to(&mut self, level: f64, cap: usize) {
        while !self.capped && self.current_max() < level {
            if self.t >= cap {
                self.capped = true;
                break;
            }
            match self.it.next() {
                Some(v) => {
                    self.t += 1;
                    if v > self.current_max() {
                        self.records.push((self.t, v));
                    }
                }
                None => {
                    self.capped = true;
                }
            }
        }
    }

    /// First-passage time over `level`; `None` when censored.
    fn passage(&self, level: f64) -> Option<usize> {
        let i = self.records.partition_point(|r| r.1 < level);
        self.records.get(i).map(|r| r.0)
    }
}

fn mean_passage<I: Iterator<Item = f64>>(
    streams: &[StreamState<I>],
    level: f64,
    indices: Option<&[usize]>,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut censored = 0usize;
    let mut count = 0usize;
    let mut add = |s: &StreamState<I>| {
        match s.passage(level) {
            Some(t) => total += t as f64,
            None => {
                total += s.t as f64;
                censored += 1;
            }
        }
        count += 1;
    };
    match indices {
        Some(idx) => idx.iter().for_each(|&i| add(&streams[i])),
        None => streams.iter().for_each(&mut add),
    }
    (total / count as f64, censored)
}

/// Calibrates a first-passage threshold for an "alarm when the statistic
/// rises to B" detector, by bisection over B on `n_boot` simulated null
/// statistic streams.
///
/// B* is the crossing point inf{B : mean first-passage(B) ≥ target}; the
/// achieved ARL must sit within `rel_tol` of the target. Streams are
/// driven by `make_stream(stream_seed)` and extended lazily, so censoring
/// is handled by construction; a stream that hits the step cap counts its
/// length as a lower bound and is reported in `censored`. The 95% CI
/// comes from a percentile bootstrap over segment resamples.
pub fn calibrate_statistic_threshold<F, I>(
    make_stream: F,
    opts: &CalibrationOptions,
) -> Result<SrThreshold>
where
    F: Fn(u64) -> I + Sync,
    I: Iterator<Item = f64> + Send,
{
    if opts.n_boot < 100 {
        return Err(Error::Config(format!(
            "calibration needs n_boot >= 100, got {}",
            opts.n_boot
        )));
    }
    if !(opts.target_arl0 >= 1.0) {
        return Err(Error::Config("target ARL0 must be >= 1".into()));
    }
    let cap = opts.cap();
    let mut streams: Vec<StreamState<I>> = (0..opts.n_boot)
        .map(|i| StreamState {
            it: make_stream(derive_seed(opts.seed, i as u64)),
            t: 0,
            records: Vec::new(),
            capped: false,
        })
        .collect();

    // Seed every stream through its first recordable value (spin-up
    // steps emitting -inf are consumed but never alarm).
    streams.par_iter_mut().for_each(|s| s.extend_to(-f64::MAX, cap));
    if streams.iter().all(|s| s.records.is_empty()) {
        return Err(Error::Calibration("null streams produced no values".into()));
    }
    let lo0 = streams
        .iter()
        .filter_map(|s| s.records.first().map(|r| r.1))
        .fold(f64::INFINITY, f64::min);

    let (arl_lo, _) = mean_passage(&streams, lo0, None);
    if (arl_lo - opts.target_arl0).abs() / opts.target_arl0 <= opts.rel_tol {
        // Degenerate target (e.g. ARL0 = 1): the floor already matches.
        return finish_calibration(streams, lo0, lo0, arl_lo, opts);
    }
    if arl_lo > opts.target_arl0 {
        return Err(Error::Calibration(format!(
            "target ARL0 {} is below the detector's minimum run length {arl_lo} \
             (spin-up dominates)",
            opts.target_arl0
        )));
    }

    // Bracket: expand hi until the mean passage comfortably exceeds the
    // target. The step starts tiny relative to the statistic's scale so
    // bounded statistics (e.g. negated accumulations) are not jumped
    // over; censored streams count their cap as a lower bound, which is
    // conservative for an upper bracket.
    let span = lo0.abs().max(1.0) * 1e-6;
    let mut hi = lo0;
    let mut arl_hi = arl_lo;
    let mut k = 0u32;
    while arl_hi < 1.25 * opts.target_arl0 {
        if k > 140 {
            return Err(Error::Calibration(format!(
                "cannot bracket target ARL0 {} (reached {arl_hi} at level {hi})",
                opts.target_arl0
            )));
        }
        hi = lo0 + span * 2f64.powi(k as i32);
        streams.par_iter_mut().for_each(|s| s.extend_to(hi, cap));
        let (a, _) = mean_passage(&streams, hi, None);
        arl_hi = a;
        k += 1;
    }

    // Bisection to the crossing point of the (monotone, common-random-
    // numbers) ARL step function; B* is whichever side of the crossing
    // lands closer to the target.
    let mut lo = lo0;
    let mut hi_b = hi;
    for _ in 0..200 {
        if (hi_b - lo).abs() <= 1e-9 * hi_b.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi_b);
        let (arl, _) = mean_passage(&streams, mid, None);
        if arl >= opts.target_arl0 {
            hi_b = mid;
        } else {
            lo = mid;
        }
    }
    let (arl_below, _) = mean_passage(&streams, lo, None);
    let (arl_above, _) = mean_passage(&streams, hi_b, None);
    let b_star = if (arl_above - opts.target_arl0).abs() <= (arl_below - opts.target_arl0).abs() {
        hi_b
    } else {
        lo
    };
    let (achieved, censored_at_b) = mean_passage(&streams, b_star, None);
    if censored_at_b > opts.n_boot / 100 {
        return Err(Error::Calibration(format!(
            "{censored_at_b} of {} null streams hit the {cap}-step cap at B*; \
             segments too short for target ARL0 {}",
            opts.n_boot, opts.target_arl0
        )));
    }
    if (achieved - opts.target_arl0).abs() / opts.target_arl0 > opts.rel_tol {
        return Err(Error::Calibration(format!(
            "ARL0 at the crossing point is {achieved}, outside {}% of target {} \
             (null segments too short or too discrete)",
            opts.rel_tol * 100.0,
            opts.target_arl0
        )));
    }
    finish_calibration(streams, lo0, b_star, achieved, opts)
}

fn finish_calibration<I: Iterator<Item = f64>>(
    streams: Vec<StreamState<I>>,
    lo0: f64,
    b_star: f64,
    achieved: f64,
    opts: &CalibrationOptions,
) -> Result<SrThreshold> {
    let (_, censored) = mean_passage(&streams, b_star, None);
    // Percentile bootstrap of B over segment resamples, re-solved on the
    // recorded running maxima (no re-simulation).
    let hi_cap = streams
        .iter()
        .map(|s| s.current_max())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 0xC1_u64));
    let mut b_reps = Vec::with_capacity(opts.ci_replicates);
    for _ in 0..opts.ci_replicates {
        let idx: Vec<usize> = (0..opts.n_boot)
            .map(|_| rng.gen_range(0..opts.n_boot))
            .collect();
        let (arl_hi, _) = mean_passage(&streams, hi_cap, Some(&idx));
        if arl_hi < opts.target_arl0 {
            b_reps.push(hi_cap);
            continue;
        }
        let (arl_lo_rep, _) = mean_passage(&streams, lo0, Some(&idx));
        if arl_lo_rep >= opts.target_arl0 {
            b_reps.push(lo0);
            continue;
        }
        let mut lo = lo0;
        let mut hi = hi_cap;
        for _ in 0..100 {
            if (hi - lo).abs() <= 1e-9 * hi.abs().max(1.0) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (arl, _) = mean_passage(&streams, mid, Some(&idx));
            if arl >= opts.target_arl0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        b_reps.push(hi);
    }
    b_reps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| -> f64 {
        let i = ((b_reps.len() as f64 - 1.0) * p).round() as usize;
        b_reps[i]
    };
    let ci = (pct(0.025).min(b_star), pct(0.975).max(b_star));
    Ok(SrThreshold {
        b_star,
        target_arl0: opts.target_arl0,
        achieved_arl0: achieved,
        ci95: ci,
        n_boot: opts.n_boot,
        censored,
    })
}

/// SR statistic stream over a likelihood-ratio iterator.
pub fn sr_statistic<I: Iterator<Item = f64>>(lambdas: I) -> impl Iterator<Item = f64> {
    lambdas.scan(0.0f64, |r, l| {
        *r = (1.0 + *r) * l;
        Some(*r)
    })
}

/// CUSUM statistic stream over an oriented score iterator.
pub fn cusum_statistic<I: Iterator<Item = f64>>(scores: I, k: f64) -> impl Iterator<Item = f64> {
    scores.scan(0.0f64, move |s, x| {
        *s = (*s + x - k).max(0.0);
        Some(*s)
    })
}

/// Trailing-window accumulation stream; yields NEG_INFINITY during
/// spin-up so that, negated for the deficit direction, no alarm can fire
/// before the first full window.
pub fn rolling_sum_statistic<I: Iterator<Item = f64>>(
    values: I,
    window: usize,
) -> impl Iterator<Item = f64> {
    let mut buf: Vec<f64> = Vec::with_capacity(window);
    let mut sum = 0.0f64;
    let mut pos = 0usize;
    values.map(move |v| {
        if buf.len() < window {
            buf.push(v);
            sum += v;
            if buf.len() < window {
                return f64::NEG_INFINITY;
            }
            return sum;
        }
        sum += v - buf[pos];
        buf[pos] = v;
        pos = (pos + 1) % window;
        sum
    })
}

/// Negated trailing-accumulation stream for deficit-threshold
/// calibration: a deficit alarm "accumulation <= theta" becomes an
/// upward crossing of -theta. Spin-up steps stay at NEG_INFINITY so no
/// alarm can fire before the first full window.
pub fn deficit_statistic<I: Iterator<Item = f64>>(
    values: I,
    window: usize,
) -> impl Iterator<Item = f64> {
    rolling_sum_statistic(values, window)
        .map(|v| if v.is_finite() { -v } else { f64::NEG_INFINITY })
}

/// Infinite circular block-bootstrap stream over a pool of values.
pub fn block_bootstrap_stream<T: Copy + Send + 'static>(
    pool: Arc<Vec<T>>,
    block_len: usize,
    stream_seed: u64,
) -> impl Iterator<Item = T> {
    assert!(!pool.is_empty(), "empty bootstrap pool");
    let block_len = block_len.max(1).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let mut start = 0usize;
    let mut offset = block_len; // force a draw on the first item
    std::iter::from_fn(move || {
        if offset >= block_len {
            start = rng.gen_range(0..pool.len());
            offset = 0;
        }
        let v = pool[(start + offset) % pool.len()];
        offset += 1;
        Some(v)
    })
}

/// Spec-shaped SR calibration: a seedable source of climatology defect
/// segments plus a null calibration. Segments are chained (extension
/// sampling) into unbounded Λ streams and fed to the generic calibrator.
pub fn calibrate_threshold<F>(
    defect_segments: F,
    calib: &NullCalibration,
    target_arl0: f64,
    n_boot: usize,
    seed: u64,
) -> Result<SrThreshold>
where
    F: Fn(u64) -> Vec<f64> + Sync,
{
    let calib = calib.clone();
    let opts = CalibrationOptions::new(target_arl0, n_boot, seed);
    let gen = &defect_segments;
    calibrate_statistic_threshold(
        move |stream_seed| {
            let calib = calib.clone();
            let mut k = 0u64;
            let mut buf: std::vec::IntoIter<f64> = Vec::new().into_iter();
            let defects = std::iter::from_fn(move || loop {
                if let Some(v) = buf.next() {
                    return Some(v);
                }
                let seg = gen(derive_seed(stream_seed, k));
                k += 1;
                if seg.is_empty() {
                    return None;
                }
                buf = seg.into_iter();
            });
            sr_statistic(defects.map(move |r| calib.lambda(r, 1)))
        },
        &opts,
    )
}

/// Summary of a detector against labeled events and null segments.
#[derive(Debug, Clone)]
pub struct DetectorReport {
    /// Mean first-passage time on the null segments (steps, 1-based).
    pub empirical_arl0: f64,
    /// True when any null segment ended without an alarm, making the ARL
    /// a lower bound.
    pub arl0_censored: bool,
    pub detection_rate: f64,
    /// Mean (onset − alarm) over detections; positive = earlier. None
    /// when nothing was detected.
    pub mean_lead: Option<f64>,
    /// False alarms (alarms on null segments) over total alarms; None
    /// when no alarms fired anywhere.
    pub far: Option<f64>,
    pub miss_rate: f64,
    pub n_events: usize,
}

/// Evaluates alarm traces against reference onsets and null segments.
///
/// An onset is detected when some alarm falls within ±`detection_window`
/// steps of it; its lead is onset − earliest such alarm.
pub fn evaluate_detector(
    event_cases: &[(AlarmTrace, Vec<usize>)],
    null_traces: &[AlarmTrace],
    detection_window: usize,
) -> Result<DetectorReport> {
    let n_events: usize = event_cases.iter().map(|(_, o)| o.len()).sum();
    if n_events == 0 {
        return Err(Error::EventFree("no reference onsets supplied".into()));
    }
    let mut detected = 0usize;
    let mut leads = Vec::new();
    let mut event_alarms = 0usize;
    for (trace, onsets) in event_cases {
        event_alarms += trace.alarms.len();
        for &onset in onsets {
            let lo = onset.saturating_sub(detection_window);
            let hi = onset + detection_window;
            if let Some(&alarm) = trace
                .alarms
                .iter()
                .find(|&&a| a >= lo && a <= hi)
            {
                detected += 1;
                leads.push(onset as f64 - alarm as f64);
            }
        }
    }
    let mut null_alarms = 0usize;
    let mut passage_sum = 0.0;
    let mut censored = false;
    for trace in null_traces {
        null_alarms += trace.alarms.len();
        match trace.first_alarm() {
            Some(t) => passage_sum += (t + 1) as f64,
            None => {
                passage_sum += trace.len() as f64;
                censored = true;
            }
        }
    }
    let empirical_arl0 = if null_traces.is_empty() {
        f64::NAN
    } else {
        passage_sum / null_traces.len() as f64
    };
    let detection_rate = detected as f64 / n_events as f64;
    let total_alarms = event_alarms + null_alarms;
    Ok(DetectorReport {
        empirical_arl0,
        arl0_censored: censored,
        detection_rate,
        mean_lead: if leads.is_empty() {
            None
        } else {
            Some(crate::math::mean(&leads))
        },
        far: if total_alarms > 0 {
            Some(null_alarms as f64 / total_alarms as f64)
        } else {
            None
        },
        miss_rate: 1.0 - detection_rate,
        n_events,
    })
}

/// Leave-one-channel-out attribution: re-runs the forward pass with the
/// channel replaced by its climatological mean and reports the
/// fractional reduction of the peak defect inside `window` (defect
/// indices, end exclusive).
pub fn ablate_channel(
    model: &RmModel,
    feats: &FeatureSet,
    channel: &str,
    window: (usize, usize),
) -> Result<f64> {
    let base = model.forward(&feats.x, feats.t_len)?;
    let ablated_feats = feats.ablate_channel(channel)?;
    let abl = model.forward(&ablated_feats.x, feats.t_len)?;
    let base_defects = defect_values(&base.traj, &model.proj);
    let abl_defects = defect_values(&abl.traj, &model.proj);
    let lo = window.0.min(base_defects.len());
    let hi = window.1.min(base_defects.len());
    if lo >= hi {
        return Err(Error::Config(format!(
            "empty ablation window {lo}..{hi} on {} defects",
            base_defects.len()
        )));
    }
    let peak = |xs: &[f64]| xs[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p0 = peak(&base_defects);
    if p0 <= 0.0 {
        return Ok(0.0);
    }
    Ok((p0 - peak(&abl_defects)) / p0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::{CellKind, RmModel};
    use chrono::{Duration, TimeZone};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn times(n: usize) -> Vec<DateTime<Utc>> {
        let t0 = Utc.with_ymd_and_hms(2005, 1, 1, 0, 0, 0).unwrap();
        (0..n).map(|i| t0 + Duration::days(i as i64)).collect()
    }

    fn identity_proj(d: usize) -> Projector {
        Projector {
            w1: crate::linalg::Mat::zeros(d, d),
            b1: vec![0.0; d],
            w2: crate::linalg::Mat::zeros(d, d),
            b2: vec![0.0; d],
        }
    }

    #[test]
    fn defect_series_cases() {
        let traj = HiddenTrajectory {
            states: vec![vec![0.5, -0.5]; 6],
        };
        let r = defect_values(&traj, &identity_proj(2));
        assert_eq!(r, vec![0.0; 5]);
        let traj = HiddenTrajectory {
            states: vec![vec![0.0], vec![3.0]],
        };
        assert_eq!(defect_values(&traj, &identity_proj(1)), vec![3.0]);
        // Random trajectory vs naive norm loop.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let model = RmModel::new(CellKind::Elman, 2, 3, 1, 4).unwrap();
        let mut proj = model.proj.clone();
        proj.w2.data.iter_mut().for_each(|v| *v = rng.gen::<f64>() * 0.3);
        let traj = HiddenTrajectory { states: states.clone() };
        let got = defect_values(&traj, &proj);
        for i in 0..19 {
            let g = proj.apply(&states[i + 1]);
            let mut ss = 0.0;
            for k in 0..3 {
                ss += (states[i][k] - g[k]).powi(2);
            }
            assert!((got[i] - ss.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn estimate_null_guards_and_psi0() {
        let ds = DefectSeries {
            times: times(150),
            values: vec![3.0; 150],
        };
        assert!(matches!(
            estimate_null(&ds, 1.0, false).unwrap_err(),
            Error::Calibration(_)
        ));
        assert_eq!(log_mean_exp(&vec![0.0; 50], 1.0), 0.0);
        // Half-normal defects: psi0 equals the direct log-mean-exp oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..5000)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z.abs()
            })
            .collect();
        let ds = DefectSeries {
            times: times(vals.len()),
            values: vals.clone(),
        };
        let calib = estimate_null(&ds, 1.0, false).unwrap();
        let mu = crate::math::mean(&vals);
        let sd = crate::math::sample_sd(&vals);
        let direct = {
            let mean_exp = vals
                .iter()
                .map(|r| (((r - mu) / sd).max(0.0)).exp())
                .sum::<f64>()
                / vals.len() as f64;
            mean_exp.ln()
        };
        assert!((calib.global.psi0 - direct).abs() < 1e-12);
        // Too few defects.
        let short = DefectSeries {
            times: times(50),
            values: (0..50).map(|i| i as f64).collect(),
        };
        assert!(estimate_null(&short, 1.0, false).is_err());
    }

    #[test]
    fn lambda_mapping_and_normalization() {
        let calib = NullCalibration {
            eta: 1.0,
            global: NullStats {
                mu0: 2.0,
                sigma0: 0.5,
                psi0: 0.25,
            },
            monthly: None,
        };
        // r below the null mean: z = 0, lambda = e^{-psi0}.
        assert!((calib.lambda(1.0, 6) - (-0.25f64).exp()).abs() < 1e-15);
        // psi0 = 0, z = 1: lambda = e.
        let c2 = NullCalibration {
            eta: 1.0,
            global: NullStats {
                mu0: 0.0,
                sigma0: 1.0,
                psi0: 0.0,
            },
            monthly: None,
        };
        assert!((c2.lambda(1.0, 1) - std::f64::consts::E).abs() < 1e-15);
        // Calibration-sample mean of lambda is 1 by construction.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..2000).map(|_| rng.gen::<f64>() * 4.0).collect();
        let ds = DefectSeries {
            times: times(vals.len()),
            values: vals.clone(),
        };
        let calib = estimate_null(&ds, 1.0, false).unwrap();
        let mean_lambda =
            vals.iter().map(|r| calib.lambda(*r, 1)).sum::<f64>() / vals.len() as f64;
        assert!((mean_lambda - 1.0).abs() < 1e-12, "mean lambda {mean_lambda}");
    }

    #[test]
    fn monthly_null_with_identical_stats_matches_global() {
        let stats = NullStats {
            mu0: 1.0,
            sigma0: 0.4,
            psi0: 0.3,
        };
        let global = NullCalibration {
            eta: 1.0,
            global: stats,
            monthly: None,
        };
        let monthly = NullCalibration {
            eta: 1.0,
            global: stats,
            monthly: Some(Box::new([stats; 12])),
        };
        for m in 1..=12 {
            for r in [0.0, 0.9, 1.0, 1.7, 4.2] {
                assert_eq!(global.lambda(r, m), monthly.lambda(r, m));
            }
        }
    }

    #[test]
    fn sr_run_degenerate_and_hand_cases() {
        let tr = sr_run(&vec![1.0; 10], 4.0, None);
        for (i, v) in tr.statistic.iter().enumerate() {
            assert_eq!(*v, (i + 1) as f64);
        }
        assert_eq!(tr.first_alarm(), Some(3)); // R_4 = 4 >= 4 at index 3
        let tr = sr_run(&[2.0, 0.5], 100.0, None);
        assert_eq!(tr.statistic, vec![2.0, 1.5]);
        assert!(tr.alarms.is_empty());
    }

    #[test]
    fn sr_recursion_equals_sum_of_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let n = rng.gen_range(1..=20);
            let lambdas: Vec<f64> = (0..n).map(|_| 0.2 + rng.gen::<f64>() * 2.0).collect();
            let tr = sr_run(&lambdas, 1e18, None);
            for t in 0..n {
                // R_t = sum_{j=1..t} prod_{i=j..t} lambda_i
                let mut expect = 0.0;
                for j in 0..=t {
                    let mut prod = 1.0;
                    for li in lambdas.iter().take(t + 1).skip(j) {
                        prod *= li;
                    }
                    expect += prod;
                }
                assert!(
                    (tr.statistic[t] - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                    "t={t}: {} vs {expect}",
                    tr.statistic[t]
                );
            }
        }
    }

    #[test]
    fn sr_alarm_is_a_stopping_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lambdas: Vec<f64> = (0..300).map(|_| 0.5 + rng.gen::<f64>() * 1.2).collect();
        let full = sr_run(&lambdas, 8.0, None);
        if let Some(alarm) = full.first_alarm() {
            // Any prefix that includes the alarm step reproduces it; any
            // shorter prefix has no alarm.
            for cut in [alarm, alarm + 1, lambdas.len()] {
                let pre = sr_run(&lambdas[..cut.min(lambdas.len())], 8.0, None);
                if cut > alarm {
                    assert_eq!(pre.first_alarm(), Some(alarm));
                } else {
                    assert!(pre.first_alarm().map(|a| a >= cut).unwrap_or(true));
                }
            }
        }
    }

    #[test]
    fn sr_reset_suppresses_realarms() {
        let lambdas = vec![10.0; 30];
        let tr = sr_run(&lambdas, 5.0, Some(5));
        assert_eq!(tr.alarms[0], 0);
        for w in tr.alarms.windows(2) {
            assert!(w[1] - w[0] >= 6);
        }
    }

    #[test]
    fn cusum_cases() {
        let tr = cusum_run(&vec![0.0; 20], 0.5, 3.0, None);
        assert!(tr.alarms.is_empty());
        assert!(tr.statistic.iter().all(|&s| s == 0.0));
        // score = -SPI = 1, k = 0.5: S_t = t/2, alarm at t = 2h.
        let tr = cusum_run(&vec![1.0; 20], 0.5, 3.0, None);
        assert_eq!(tr.first_alarm(), Some(5)); // S_6 = 3.0 at index 5
        // Naive recursion oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scores: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let tr = cusum_run(&scores, 0.3, 4.0, None);
        let mut s = 0.0f64;
        for t in 0..200 {
            s = (s + scores[t] - 0.3).max(0.0);
            assert!((tr.statistic[t] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_run_cases() {
        let zeros = ScalarSeries {
            times: times(30),
            values: vec![0.0; 30],
            mask: vec![true; 30],
        };
        let tr = threshold_run(&zeros, 5, 1.0, ThresholdMode::Deficit, None).unwrap();
        assert_eq!(tr.first_alarm(), Some(4)); // first full window
        let heavy = ScalarSeries {
            times: times(30),
            values: vec![10.0; 30],
            mask: vec![true; 30],
        };
        let tr = threshold_run(&heavy, 3, 25.0, ThresholdMode::Exceedance, None).unwrap();
        assert_eq!(tr.first_alarm(), Some(2));
        // Naive scan oracle on random data.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let vals: Vec<f64> = (0..100).map(|_| rng.gen::<f64>() * 5.0).collect();
        let s = ScalarSeries {
            times: times(100),
            values: vals.clone(),
            mask: vec![true; 100],
        };
        let tr = threshold_run(&s, 4, 8.0, ThresholdMode::Deficit, Some(0)).unwrap();
        let mut expect = Vec::new();
        let mut prev = false;
        for t in 3..100 {
            let sum: f64 = vals[t - 3..=t].iter().sum();
            let v = sum < 8.0;
            if v && !prev {
                expect.push(t);
            }
            prev = v;
        }
        assert_eq!(tr.alarms, expect);
    }

    #[test]
    fn calibrate_degenerate_unit_lambda() {
        // Lambda = 1 everywhere: R_t = t, ARL(B) = ceil(B).
        let opts = CalibrationOptions {
            ci_replicates: 50,
            ..CalibrationOptions::new(100.0, 200, 5)
        };
        let thr =
            calibrate_statistic_threshold(|_| sr_statistic(std::iter::repeat(1.0)), &opts).unwrap();
        assert!(
            thr.b_star > 99.0 && thr.b_star <= 100.0,
            "B* = {} outside (99, 100]",
            thr.b_star
        );
        assert!((thr.achieved_arl0 - 100.0).abs() < 1e-9);
        assert!(thr.ci95.0 <= thr.b_star && thr.b_star <= thr.ci95.1);
        assert_eq!(thr.censored, 0);
    }

    #[test]
    fn calibrate_target_one_alarms_immediately() {
        let opts = CalibrationOptions {
            ci_replicates: 50,
            ..CalibrationOptions::new(1.0, 150, 6)
        };
        let thr = calibrate_statistic_threshold(
            |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                sr_statistic(std::iter::from_fn(move || {
                    Some(0.5 + rng.gen::<f64>())
                }))
            },
            &opts,
        )
        .unwrap();
        // B* is at most the smallest first lambda, so every segment alarms
        // at t = 1.
        let mut min_first = f64::INFINITY;
        for i in 0..150u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(6, i));
            let first = 0.5 + rng.gen::<f64>();
            min_first = min_first.min(first);
        }
        assert!(thr.b_star <= min_first + 1e-12);
        assert!((thr.achieved_arl0 - 1.0).abs() <= 0.02);
    }

    #[test]
    fn arl_is_monotone_in_threshold() {
        let opts = CalibrationOptions {
            ci_replicates: 10,
            ..CalibrationOptions::new(50.0, 120, 9)
        };
        // Build streams once through the public API by calibrating, then
        // spot-check monotonicity with fresh runs at a grid of B values.
        let make = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sr_statistic(std::iter::from_fn(move || {
                let z: f64 = rng.sample(StandardNormal);
                Some((0.8 * z.max(0.0) - 0.35).exp())
            }))
        };
        let thr = calibrate_statistic_threshold(make, &opts).unwrap();
        assert!(thr.b_star > 0.0);
        let arl_at = |b: f64| -> f64 {
            let mut total = 0.0;
            for i in 0..120u64 {
                let mut t = 0usize;
                for (step, v) in make(derive_seed(9, i)).enumerate() {
                    t = step + 1;
                    if v >= b || t > 100_000 {
                        break;
                    }
                }
                total += t as f64;
            }
            total / 120.0
        };
        let grid = [thr.b_star * 0.5, thr.b_star, thr.b_star * 2.0, thr.b_star * 4.0];
        let arls: Vec<f64> = grid.iter().map(|b| arl_at(*b)).collect();
        for w in arls.windows(2) {
            assert!(w[0] <= w[1] + 1e-9, "ARL not monotone: {arls:?}");
        }
    }

    #[test]
    fn spec_shaped_calibrate_threshold_runs() {
        let calib = NullCalibration {
            eta: 1.0,
            global: NullStats {
                mu0: 1.0,
                sigma0: 0.5,
                psi0: 0.9,
            },
            monthly: None,
        };
        let segments = |seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| rng.gen::<f64>() * 2.0).collect()
        };
        let thr = calibrate_threshold(segments, &calib, 50.0, 120, 3).unwrap();
        assert!((thr.achieved_arl0 - 50.0).abs() / 50.0 <= 0.02);
        assert!(thr.ci95.0 <= thr.b_star && thr.b_star <= thr.ci95.1);
    }

    #[test]
    fn evaluate_detector_hand_counts() {
        let trace = |alarms: Vec<usize>, len: usize| AlarmTrace {
            detector: "t".into(),
            statistic: vec![0.0; len],
            threshold: 1.0,
            alarms,
        };
        // Alarms exactly at onsets.
        let cases = vec![(trace(vec![10, 40], 100), vec![10, 40])];
        let nulls = vec![trace(vec![], 100), trace(vec![70], 100)];
        let rep = evaluate_detector(&cases, &nulls, 5).unwrap();
        assert_eq!(rep.detection_rate, 1.0);
        assert_eq!(rep.mean_lead, Some(0.0));
        assert_eq!(rep.miss_rate, 0.0);
        // ARL: censored 100 and alarm at 71 (1-based) -> (100 + 71)/2.
        assert!((rep.empirical_arl0 - 85.5).abs() < 1e-12);
        assert!(rep.arl0_censored);
        // FAR = null alarms / total = 1/3.
        assert!((rep.far.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // No alarms anywhere: detection 0, miss 1, far undefined.
        let rep = evaluate_detector(
            &[(trace(vec![], 50), vec![20])],
            &[trace(vec![], 50)],
            5,
        )
        .unwrap();
        assert_eq!(rep.detection_rate, 0.0);
        assert_eq!(rep.miss_rate, 1.0);
        assert_eq!(rep.far, None);
        assert!(rep.arl0_censored);
        // Hand-constructed mixed case: alarm 3 steps before the onset.
        let rep = evaluate_detector(
            &[(trace(vec![17, 80], 100), vec![20])],
            &[],
            5,
        )
        .unwrap();
        assert_eq!(rep.detection_rate, 1.0);
        assert_eq!(rep.mean_lead, Some(3.0));
        // No events is an error.
        assert!(matches!(
            evaluate_detector(&[(trace(vec![], 10), vec![])], &[], 5,).unwrap_err(),
            Error::EventFree(_)
        ));
    }

    #[test]
    fn ablation_of_unused_channel_is_zero() {
        use crate::features::{build_features, ColumnInfo};
        use crate::timeseries::{build_neighborhood, MeteoSeries, Site};
        let t0 = Utc.with_ymd_and_hms(2002, 1, 1, 0, 0, 0).unwrap();
        let n = 40;
        let times: Vec<_> = (0..n).map(|i| t0 + Duration::days(i as i64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut values = Vec::new();
        for _ in 0..n {
            values.push(rng.gen::<f64>());
            values.push(rng.gen::<f64>());
        }
        let series = MeteoSeries::new(
            vec![Site::new("A", 24.0, 121.0).unwrap()],
            times,
            vec!["P".into(), "T".into()],
            vec!["mm".into(), "degC".into()],
            values,
            vec![true; 2 * n],
        )
        .unwrap();
        let hood = build_neighborhood(&series, "A", 1.0).unwrap();
        let feats = build_features(&series, &series, &hood, "P").unwrap();
        let mut model = RmModel::new(CellKind::Elman, feats.dim, 4, 1, 77).unwrap();
        // Zero the input weights that touch channel T (value and mask).
        let t_cols: Vec<usize> = feats
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c): &(usize, &ColumnInfo)| c.channel == 1)
            .map(|(j, _)| j)
            .collect();
        if let crate::rnn::CellParams::Elman { w_x, .. } = &mut model.cell {
            for i in 0..w_x.rows {
                for &j in &t_cols {
                    *w_x.at_mut(i, j) = 0.0;
                }
            }
        }
        let red = ablate_channel(&model, &feats, "T", (0, n - 1)).unwrap();
        assert_eq!(red, 0.0);
        // A channel that is used gives a nonzero attribution.
        let red_p = ablate_channel(&model, &feats, "P", (0, n - 1)).unwrap();
        assert!(red_p.abs() > 1e-9);
    }
}
