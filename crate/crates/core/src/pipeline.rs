//! End-to-end orchestration shared by the command-line front end and the
//! acceptance experiments: dataset preparation, training, forecast
//! evaluation with baselines, detector calibration, detection, and the
//! replication protocol.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::bootstrap::bootstrap_indices;
use crate::config::RunConfig;
use crate::derive_seed;
use crate::detector::{
    block_bootstrap_stream, calibrate_statistic_threshold, cusum_run, cusum_statistic,
    defect_series, estimate_null, evaluate_detector, sr_run, sr_statistic, threshold_run,
    AlarmTrace, CalibrationOptions, DefectSeries, NullCalibration, SrThreshold, ThresholdMode,
};
use crate::dist::TwoPartDist;
use crate::error::{Error, Result};
use crate::features::{build_features, FeatureSet};
use crate::rnn::{train, EpochLog, LeadTargets, RmModel};
use crate::synth::ChangeKind;
use crate::timeseries::{
    accumulate, build_neighborhood, standardize, ChannelStats, Fold, MeteoSeries, NeighborhoodSet,
    ScalarSeries, SplitSpec, StepUnit,
};
use crate::verify;
use crate::verify::{spi_onset, spi_transform, SpiCalibration};

/// A prepared dataset: raw and standardized series, split, neighborhood,
/// and the model input features over the full record.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub raw: MeteoSeries,
    pub std: MeteoSeries,
    pub stats: ChannelStats,
    pub split: SplitSpec,
    pub hood: NeighborhoodSet,
    pub feats: FeatureSet,
    /// Per time step: false inside excluded event windows.
    pub include: Vec<bool>,
    pub fold: Vec<Option<Fold>>,
    pub target_channel: String,
}

pub fn prepare(cfg: &RunConfig, raw: MeteoSeries) -> Result<Dataset> {
    let split = cfg.split_spec()?;
    split.validate(&raw)?;
    let (std_series, stats) = standardize(&raw, &split)?;
    let hood = build_neighborhood(&raw, cfg.require_target_site()?, cfg.radius_km)?;
    let feats = build_features(&std_series, &raw, &hood, &cfg.target_channel)?;
    let include: Vec<bool> = raw.times.iter().map(|t| !split.is_excluded(*t)).collect();
    let fold: Vec<Option<Fold>> = raw.times.iter().map(|t| split.fold_of(*t)).collect();
    Ok(Dataset {
        raw,
        std: std_series,
        stats,
        split,
        hood,
        feats,
        include,
        fold,
        target_channel: cfg.target_channel.clone(),
    })
}

fn train_prefix_len(ds: &Dataset) -> usize {
    ds.raw
        .times
        .iter()
        .take_while(|t| **t <= ds.split.train_end)
        .count()
}

/// Trains one model. With `bootstrap`, the training prefix is resampled
/// by the purged block bootstrap seeded from `seed`; the model
/// initialization draws from an independent sub-seed.
pub fn train_once(
    cfg: &RunConfig,
    ds: &Dataset,
    seed: u64,
    bootstrap: bool,
) -> Result<(RmModel, Vec<EpochLog>)> {
    let n_train = train_prefix_len(ds);
    if n_train < 2 {
        return Err(Error::Config("training fold has fewer than 2 steps".into()));
    }
    let step = ds
        .raw
        .step_unit()
        .ok_or_else(|| Error::Schema("series step is neither hourly nor daily".into()))?;
    let (x, target_values, target_observed, include) = if bootstrap {
        let excluded: Vec<(usize, usize)> = ds
            .split
            .excluded_index_windows(&ds.raw)
            .into_iter()
            .filter(|(a, _)| *a < n_train)
            .map(|(a, b)| (a, b.min(n_train - 1)))
            .collect();
        let idx = bootstrap_indices(
            n_train,
            &excluded,
            cfg.block_len_for(step).min(n_train.saturating_sub(1)),
            cfg.purge_gap_for(step),
            derive_seed(seed, 2),
        )?;
        let mut x = Vec::with_capacity(idx.len() * ds.feats.dim);
        let mut tv = Vec::with_capacity(idx.len());
        let mut to = Vec::with_capacity(idx.len());
        let mut inc = Vec::with_capacity(idx.len());
        for &src in &idx {
            x.extend_from_slice(ds.feats.row(src));
            tv.push(ds.feats.target_values[src]);
            to.push(ds.feats.target_observed[src]);
            inc.push(ds.include[src]);
        }
        (x, tv, to, inc)
    } else {
        let mut x = Vec::with_capacity(n_train * ds.feats.dim);
        for t in 0..n_train {
            x.extend_from_slice(ds.feats.row(t));
        }
        (
            x,
            ds.feats.target_values[..n_train].to_vec(),
            ds.feats.target_observed[..n_train].to_vec(),
            ds.include[..n_train].to_vec(),
        )
    };
    let targets = LeadTargets::from_series(
        &target_values,
        &target_observed,
        Some(&include),
        &cfg.lead_steps,
    );
    let model = RmModel::new(
        cfg.cell,
        ds.feats.dim,
        cfg.hidden_dim,
        cfg.lead_steps.len(),
        derive_seed(seed, 1),
    )?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let t_len = target_values.len();
    train(model, &x, t_len, &targets, &tc)
}

/// One verification number; `value = None` marks an undefined metric
/// (zero denominator).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub lead: usize,
    pub model: String,
    pub value: Option<f64>,
}

/// Monthly climatology of the target channel fitted on the training fold.
struct MonthlyClimatology {
    point: [f64; 12],
    dist: [TwoPartDist; 12],
}

fn fit_climatology(ds: &Dataset) -> Result<MonthlyClimatology> {
    use chrono::Datelike;
    let mut by_month: Vec<Vec<f64>> = vec![Vec::new(); 12];
    for t in 0..ds.raw.n_times() {
        if ds.fold[t] == Some(Fold::Train) && ds.feats.target_observed[t] {
            by_month[(ds.raw.times[t].month() - 1) as usize].push(ds.feats.target_values[t]);
        }
    }
    let mut point = [0.0; 12];
    let mut dist = [TwoPartDist::dry(); 12];
    for (m, vals) in by_month.iter().enumerate() {
        if vals.is_empty() {
            return Err(Error::EmptyBatch(format!(
                "no training observations for month {} in climatology",
                m + 1
            )));
        }
        point[m] = crate::math::mean(vals);
        let wet: Vec<f64> = vals.iter().copied().filter(|v| *v > 0.0).collect();
        let pi0 = (vals.len() - wet.len()) as f64 / vals.len() as f64;
        dist[m] = if wet.is_empty() {
            TwoPartDist::dry()
        } else {
            let logs: Vec<f64> = wet.iter().map(|v| v.ln()).collect();
            let mu = crate::math::mean(&logs);
            let sigma = if logs.len() > 1 {
                crate::math::sample_sd(&logs).max(1e-3)
            } else {
                1e-3
            };
            TwoPartDist::new(pi0.min(1.0 - 1e-12), mu, sigma)?
        };
    }
    Ok(MonthlyClimatology { point, dist })
}

/// Forecast verification on the test fold, with persistence and
/// climatology baselines.
pub fn evaluate_model(cfg: &RunConfig, ds: &Dataset, model: &RmModel) -> Result<Vec<MetricRow>> {
    use chrono::Datelike;
    let fp = model.forward(&ds.feats.x, ds.feats.t_len)?;
    let clim = fit_climatology(ds)?;
    let mut rows = Vec::new();
    for (j, &lead) in cfg.lead_steps.iter().enumerate() {
        // Test pairs: forecast issued at t for target time t + lead.
        struct Pair {
            issue: usize,
            target: usize,
            obs: f64,
        }
        let mut pairs = Vec::new();
        for t in 0..ds.feats.t_len {
            let tau = t + lead;
            if tau >= ds.feats.t_len {
                break;
            }
            if ds.fold[tau] == Some(Fold::Test) && ds.feats.target_observed[tau] {
                pairs.push(Pair {
                    issue: t,
                    target: tau,
                    obs: ds.feats.target_values[tau],
                });
            }
        }
        if pairs.is_empty() {
            return Err(Error::EmptyBatch(format!(
                "no test pairs at lead {lead}"
            )));
        }
        let obs: Vec<f64> = pairs.iter().map(|p| p.obs).collect();

        // Model forecasts.
        let point: Vec<f64> = pairs.iter().map(|p| fp.point[p.issue][j].max(0.0)).collect();
        let dists: Vec<TwoPartDist> = pairs.iter().map(|p| fp.dist(p.issue, j)).collect();
        // Climatology by calendar month of the target time.
        let months: Vec<usize> = pairs
            .iter()
            .map(|p| (ds.raw.times[p.target].month() - 1) as usize)
            .collect();
        let clim_point: Vec<f64> = months.iter().map(|&m| clim.point[m]).collect();
        // Persistence needs the issue-time observation.
        let persists: Vec<Option<f64>> = pairs
            .iter()
            .map(|p| {
                if ds.feats.target_observed[p.issue] {
                    Some(ds.feats.target_values[p.issue])
                } else {
                    None
                }
            })
            .collect();

        let mut push = |metric: &str, model_name: &str, value: Option<f64>| {
            rows.push(MetricRow {
                metric: metric.to_string(),
                lead,
                model: model_name.to_string(),
                value,
            });
        };

        // Deterministic errors.
        push("rmse", "rmrnn", Some(verify::rmse(&point, &obs)?));
        push("mae", "rmrnn", Some(verify::mae(&point, &obs)?));
        push("rmse", "climatology", Some(verify::rmse(&clim_point, &obs)?));
        push("mae", "climatology", Some(verify::mae(&clim_point, &obs)?));
        let (pp, po): (Vec<f64>, Vec<f64>) = persists
            .iter()
            .zip(obs.iter())
            .filter_map(|(p, o)| p.map(|v| (v, *o)))
            .unzip();
        push("rmse", "persistence", Some(verify::rmse(&pp, &po)?));
        push("mae", "persistence", Some(verify::mae(&pp, &po)?));

        // CRPS: quadrature for distributional forecasts, absolute error
        // for the persistence point mass.
        let crps_model =
            crate::math::mean(&dists.iter().zip(obs.iter()).map(|(d, y)| d.crps(*y)).collect::<Vec<_>>());
        push("crps", "rmrnn", Some(crps_model));
        let crps_clim = crate::math::mean(
            &months
                .iter()
                .zip(obs.iter())
                .map(|(&m, y)| clim.dist[m].crps(*y))
                .collect::<Vec<_>>(),
        );
        push("crps", "climatology", Some(crps_clim));
        let crps_pers = crate::math::mean(
            &persists
                .iter()
                .zip(obs.iter())
                .filter_map(|(p, y)| p.map(|v| (v - y).abs()))
                .collect::<Vec<_>>(),
        );
        push("crps", "persistence", Some(crps_pers));

        // Brier scores at the configured thresholds.
        for &thr in &cfg.brier_thresholds {
            let name = format!("brier_{thr}");
            let p_model: Vec<f64> = dists.iter().map(|d| d.exceedance(thr)).collect();
            push(&name, "rmrnn", Some(verify::brier(&p_model, &obs, thr)?));
            let p_clim: Vec<f64> = months.iter().map(|&m| clim.dist[m].exceedance(thr)).collect();
            push(&name, "climatology", Some(verify::brier(&p_clim, &obs, thr)?));
            let (pprob, pobs): (Vec<f64>, Vec<f64>) = persists
                .iter()
                .zip(obs.iter())
                .filter_map(|(p, o)| p.map(|v| (if v > thr { 1.0 } else { 0.0 }, *o)))
                .unzip();
            push(&name, "persistence", Some(verify::brier(&pprob, &pobs, thr)?));
        }

        // POD / FAR at the event threshold; forecast event when the
        // exceedance probability passes 1/2.
        let thr = cfg.pod_threshold;
        let obs_event: Vec<bool> = obs.iter().map(|o| *o > thr).collect();
        let fc_event: Vec<bool> = dists.iter().map(|d| d.exceedance(thr) > 0.5).collect();
        let (pod, far, _) = verify::pod_far(&fc_event, &obs_event);
        push(&format!("pod_{thr}"), "rmrnn", pod);
        push(&format!("far_{thr}"), "rmrnn", far);
        let clim_event: Vec<bool> = months
            .iter()
            .map(|&m| clim.dist[m].exceedance(thr) > 0.5)
            .collect();
        let (pod, far, _) = verify::pod_far(&clim_event, &obs_event);
        push(&format!("pod_{thr}"), "climatology", pod);
        push(&format!("far_{thr}"), "climatology", far);
        let pers_event: Vec<bool> = persists
            .iter()
            .map(|p| p.map(|v| v > thr).unwrap_or(false))
            .collect();
        let (pod, far, _) = verify::pod_far(&pers_event, &obs_event);
        push(&format!("pod_{thr}"), "persistence", pod);
        push(&format!("far_{thr}"), "persistence", far);

        // SPI-3 RMSE from the forecast distribution (mean-accumulation
        // construction), daily data with enough calibration history only.
        if ds.raw.step_unit() == Some(StepUnit::Day) {
            if let Some(v) = spi3_rmse_for_lead(ds, &fp, j, lead)? {
                push("spi3_rmse", "rmrnn", Some(v));
            }
        }
    }
    Ok(rows)
}

/// Observed accumulation and SPI calibration on the training fold; shared
/// by forecast SPI verification and the drought detectors.
fn observed_spi(ds: &Dataset) -> Result<Option<(ScalarSeries, SpiCalibration)>> {
    let acc = accumulate(&ds.raw, &ds.target_channel, 90)?;
    let acc = acc.scalar(ds.feats.target_site, 0);
    match verify::spi_calibrate(&acc, ds.raw.times[0], ds.split.train_end) {
        Ok(calib) => Ok(Some((acc, calib))),
        Err(Error::Config(_)) => Ok(None), // calibration period too short
        Err(e) => Err(e),
    }
}

fn spi3_rmse_for_lead(
    ds: &Dataset,
    fp: &crate::rnn::ForwardPass,
    j: usize,
    lead: usize,
) -> Result<Option<f64>> {
    let Some((obs_acc, calib)) = observed_spi(ds)? else {
        return Ok(None);
    };
    let obs_spi = spi_transform(&obs_acc, 90, calib.clone());
    // Forecast-mean precipitation series indexed by target time.
    let n = ds.raw.n_times();
    let mut fc_vals = vec![0.0; n];
    let mut fc_mask = vec![false; n];
    for t in 0..n {
        let tau = t + lead;
        if tau < n {
            fc_vals[tau] = fp.dist(t, j).mean();
            fc_mask[tau] = true;
        }
    }
    let fc_series = ScalarSeries {
        times: ds.raw.times.clone(),
        values: fc_vals,
        mask: fc_mask,
    };
    let fc_acc = rolling_sum(&fc_series, 90);
    let fc_spi = spi_transform(&fc_acc, 90, calib);
    // Restrict both paths to the test fold.
    let mut f = obs_spi.clone();
    let mut g = fc_spi.clone();
    for t in 0..n {
        let in_test = ds.fold[t] == Some(Fold::Test);
        f.defined[t] &= in_test;
        g.defined[t] &= in_test;
    }
    match verify::spi3_rmse(&g, &f) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyBatch(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn rolling_sum(s: &ScalarSeries, window: usize) -> ScalarSeries {
    let n = s.len();
    let mut values = vec![0.0; n];
    let mut mask = vec![false; n];
    for t in 0..n {
        if t + 1 < window {
            continue;
        }
        let mut sum = 0.0;
        let mut ok = true;
        for k in t + 1 - window..=t {
            if !s.mask[k] {
                ok = false;
                break;
            }
            sum += s.values[k];
        }
        if ok {
            values[t] = sum;
            mask[t] = true;
        }
    }
    ScalarSeries {
        times: s.times.clone(),
        values,
        mask,
    }
}

/// Aggregated replication report row.
#[derive(Debug, Clone, PartialEq)]
pub struct AggRow {
    pub metric: String,
    pub lead: usize,
    pub model: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Runs `cfg.replications` independent (bootstrap resample, model seed)
/// replications and aggregates mean ± SD per metric.
///
/// Replication i uses seed base_seed + i. Results are reduced in
/// replication order, so the report is invariant to the worker count.
pub fn replicate(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<AggRow>> {
    let reps: Vec<Result<Vec<MetricRow>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.base_seed.wrapping_add(i as u64);
            let (model, _) = train_once(cfg, ds, seed, true)?;
            evaluate_model(cfg, ds, &model)
        })
        .collect();
    let mut acc: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
    for rep in reps {
        for row in rep? {
            let entry = acc
                .entry((row.metric.clone(), row.lead, row.model.clone()))
                .or_default();
            if let Some(v) = row.value {
                entry.push(v);
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((metric, lead, model), vals)| {
            let n = vals.len();
            let (mean, sd) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else if n == 1 {
                (vals[0], 0.0)
            } else {
                (crate::math::mean(&vals), crate::math::sample_sd(&vals))
            };
            AggRow {
                metric,
                lead,
                model,
                mean,
                sd,
                n,
            }
        })
        .collect())
}

/// SR calibration products for a trained model on a dataset.
pub struct SrCalibration {
    pub threshold: SrThreshold,
    pub null: NullCalibration,
    pub clim_defects: DefectSeries,
}

/// Climatology defects: the defect series restricted to unexcluded
/// training-fold times.
pub fn climatology_defects(ds: &Dataset, model: &RmModel) -> Result<DefectSeries> {
    let fp = model.forward(&ds.feats.x, ds.feats.t_len)?;
    let all = defect_series(&fp.traj, &model.proj, &ds.raw.times);
    let mut times = Vec::new();
    let mut values = Vec::new();
    for i in 0..all.len() {
        if ds.fold[i] == Some(Fold::Train) && ds.include[i] {
            times.push(all.times[i]);
            values.push(all.values[i]);
        }
    }
    Ok(DefectSeries { times, values })
}

/// Algorithm: estimate the residual null on held-out climatology, then
/// choose B* by simulation on bootstrapped climatology segments so the
/// mean first passage matches the target ARL0.
pub fn calibrate_sr(cfg: &RunConfig, ds: &Dataset, model: &RmModel, seed: u64) -> Result<SrCalibration> {
    let clim = climatology_defects(ds, model)?;
    let null = estimate_null(&clim, cfg.eta, cfg.monthly_null)?;
    let step = ds
        .raw
        .step_unit()
        .ok_or_else(|| Error::Schema("series step is neither hourly nor daily".into()))?;
    let block = cfg.block_len_for(step);
    let pool: Arc<Vec<(f64, u32)>> = Arc::new(
        clim.values
            .iter()
            .zip(clim.times.iter())
            .map(|(v, t)| {
                use chrono::Datelike;
                (*v, t.month())
            })
            .collect(),
    );
    let opts = CalibrationOptions::new(cfg.target_arl0, cfg.n_boot, derive_seed(seed, 3));
    let null_for_stream = null.clone();
    let threshold = calibrate_statistic_threshold(
        move |stream_seed| {
            let null = null_for_stream.clone();
            let lambdas = block_bootstrap_stream(pool.clone(), block, stream_seed)
                .map(move |(r, m)| null.lambda(r, m));
            sr_statistic(lambdas)
        },
        &opts,
    )?;
    Ok(SrCalibration {
        threshold,
        null,
        clim_defects: clim,
    })
}

/// Full-series defect, likelihood-ratio, and SR alarm trace.
pub fn detect_trace(
    cfg: &RunConfig,
    ds: &Dataset,
    model: &RmModel,
    null: &NullCalibration,
    b: f64,
) -> Result<(DefectSeries, Vec<f64>, AlarmTrace)> {
    use chrono::Datelike;
    let fp = model.forward(&ds.feats.x, ds.feats.t_len)?;
    let defects = defect_series(&fp.traj, &model.proj, &ds.raw.times);
    let lambdas: Vec<f64> = defects
        .values
        .iter()
        .zip(defects.times.iter())
        .map(|(r, t)| null.lambda(*r, t.month()))
        .collect();
    let trace = sr_run(&lambdas, b, Some(cfg.detection_window_steps()));
    Ok((defects, lambdas, trace))
}

/// One detector row of the event-evaluation table.
pub struct DetectorRow {
    pub detector: String,
    pub target_arl0: f64,
    pub report: crate::detector::DetectorReport,
}

/// Evaluates the SR detector and the mode's baselines against proxy
/// onsets in the test fold, with bootstrapped null segments for the
/// empirical ARL0.
pub fn detector_reports(
    cfg: &RunConfig,
    ds: &Dataset,
    model: &RmModel,
    cal: &SrCalibration,
    seed: u64,
) -> Result<Vec<DetectorRow>> {
    use chrono::Datelike;
    let window = cfg.detection_window_steps();
    let step = ds
        .raw
        .step_unit()
        .ok_or_else(|| Error::Schema("series step is neither hourly nor daily".into()))?;
    let block = cfg.block_len_for(step);
    let n_null = 200usize;
    let null_len = (4.0 * cfg.target_arl0) as usize;

    let (defects, lambdas, sr_trace) = detect_trace(cfg, ds, model, &cal.null, cal.threshold.b_star)?;
    let _ = defects;
    let _ = lambdas;

    // Null SR traces from bootstrapped climatology defects.
    let pool: Arc<Vec<(f64, u32)>> = Arc::new(
        cal.clim_defects
            .values
            .iter()
            .zip(cal.clim_defects.times.iter())
            .map(|(v, t)| (*v, t.month()))
            .collect(),
    );
    let sr_nulls: Vec<AlarmTrace> = (0..n_null)
        .map(|i| {
            let null = cal.null.clone();
            let lam: Vec<f64> = block_bootstrap_stream(pool.clone(), block, derive_seed(seed, 100 + i as u64))
                .take(null_len)
                .map(|(r, m)| null.lambda(r, m))
                .collect();
            sr_run(&lam, cal.threshold.b_star, None)
        })
        .collect();

    let mut rows = Vec::new();
    match cfg.detect_mode {
        ChangeKind::Drought => {
            let Some((obs_acc, spi_calib)) = observed_spi(ds)? else {
                return Err(Error::Config(
                    "drought detector evaluation needs >= 5 years of training data for SPI".into(),
                ));
            };
            let obs_spi = spi_transform(&obs_acc, 90, spi_calib);
            let onsets: Vec<usize> = spi_onset(&obs_spi)
                .into_iter()
                .filter(|&t| ds.fold[t] == Some(Fold::Test))
                .collect();
            if onsets.is_empty() {
                return Err(Error::EventFree(
                    "no SPI-3 onset proxies in the test fold".into(),
                ));
            }
            rows.push(DetectorRow {
                detector: "sr_rmrnn".into(),
                target_arl0: cfg.target_arl0,
                report: evaluate_detector(
                    &[(sr_trace, onsets.clone())],
                    &sr_nulls,
                    window,
                )?,
            });

            // CUSUM on -SPI at matched ARL0.
            let spi_pool: Arc<Vec<f64>> = Arc::new(
                (0..obs_spi.values.len())
                    .filter(|&t| {
                        obs_spi.defined[t] && ds.fold[t] == Some(Fold::Train) && ds.include[t]
                    })
                    .map(|t| -obs_spi.values[t])
                    .collect(),
            );
            if spi_pool.len() >= 100 {
                let k = cfg.cusum_k;
                let opts = CalibrationOptions::new(cfg.target_arl0, cfg.n_boot.min(500), derive_seed(seed, 7));
                let pool2 = spi_pool.clone();
                let h = calibrate_statistic_threshold(
                    move |s| cusum_statistic(block_bootstrap_stream(pool2.clone(), block, s), k),
                    &opts,
                )?;
                let scores: Vec<f64> = (0..obs_spi.values.len())
                    .map(|t| if obs_spi.defined[t] { -obs_spi.values[t] } else { 0.0 })
                    .collect();
                let trace = cusum_run(&scores, k, h.b_star, Some(window));
                let nulls: Vec<AlarmTrace> = (0..n_null)
                    .map(|i| {
                        let sc: Vec<f64> =
                            block_bootstrap_stream(spi_pool.clone(), block, derive_seed(seed, 300 + i as u64))
                                .take(null_len)
                                .collect();
                        cusum_run(&sc, k, h.b_star, None)
                    })
                    .collect();
                rows.push(DetectorRow {
                    detector: "cusum_spi3".into(),
                    target_arl0: cfg.target_arl0,
                    report: evaluate_detector(&[(trace, onsets.clone())], &nulls, window)?,
                });
            }

            // Raw deficit threshold: trailing accumulation below the
            // climatological quantile.
            let train_acc: Vec<f64> = (0..obs_acc.len())
                .filter(|&t| obs_acc.mask[t] && ds.fold[t] == Some(Fold::Train) && ds.include[t])
                .map(|t| obs_acc.values[t])
                .collect();
            if !train_acc.is_empty() {
                let mut sorted = train_acc.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let qi = ((sorted.len() as f64 - 1.0) * cfg.deficit_quantile).round() as usize;
                let dthr = sorted[qi];
                let precip = ds.raw.scalar(
                    ds.feats.target_site,
                    ds.raw.channel_index(&cfg.target_channel)?,
                );
                let trace = threshold_run(
                    &precip,
                    cfg.deficit_window,
                    dthr,
                    ThresholdMode::Deficit,
                    Some(window),
                )?;
                let rain_pool: Arc<Vec<f64>> = Arc::new(
                    (0..precip.len())
                        .filter(|&t| precip.mask[t] && ds.fold[t] == Some(Fold::Train) && ds.include[t])
                        .map(|t| precip.values[t])
                        .collect(),
                );
                let nulls: Vec<AlarmTrace> = (0..n_null)
                    .map(|i| {
                        let vals: Vec<f64> =
                            block_bootstrap_stream(rain_pool.clone(), block, derive_seed(seed, 500 + i as u64))
                                .take(null_len)
                                .collect();
                        let s = ScalarSeries {
                            times: ds.raw.times[..vals.len().min(ds.raw.n_times())].to_vec(),
                            values: vals.clone(),
                            mask: vec![true; vals.len()],
                        };
                        // Times are only carried for bookkeeping here.
                        let s = ScalarSeries {
                            times: (0..vals.len())
                                .map(|k| ds.raw.times[0] + ds.raw.step() * k as i32)
                                .collect(),
                            ..s
                        };
                        threshold_run(&s, cfg.deficit_window, dthr, ThresholdMode::Deficit, None)
                            .unwrap()
                    })
                    .collect();
                rows.push(DetectorRow {
                    detector: "deficit_threshold".into(),
                    target_arl0: cfg.target_arl0,
                    report: evaluate_detector(&[(trace, onsets)], &nulls, window)?,
                });
            }
        }
        ChangeKind::Flood => {
            let precip = ds.raw.scalar(
                ds.feats.target_site,
                ds.raw.channel_index(&cfg.target_channel)?,
            );
            let onsets: Vec<usize> =
                verify::flood_onset(&precip, cfg.flood_window, cfg.flood_threshold)?
                    .into_iter()
                    .filter(|&t| ds.fold[t] == Some(Fold::Test))
                    .collect();
            if onsets.is_empty() {
                return Err(Error::EventFree(
                    "no flood-rule onsets in the test fold".into(),
                ));
            }
            rows.push(DetectorRow {
                detector: "sr_rmrnn".into(),
                target_arl0: cfg.target_arl0,
                report: evaluate_detector(&[(sr_trace, onsets.clone())], &sr_nulls, window)?,
            });
            // Pointwise exceedance threshold on the rolling accumulation.
            let trace = threshold_run(
                &precip,
                cfg.flood_window,
                cfg.flood_threshold,
                ThresholdMode::Exceedance,
                Some(window),
            )?;
            let rain_pool: Arc<Vec<f64>> = Arc::new(
                (0..precip.len())
                    .filter(|&t| precip.mask[t] && ds.fold[t] == Some(Fold::Train) && ds.include[t])
                    .map(|t| precip.values[t])
                    .collect(),
            );
            let nulls: Vec<AlarmTrace> = (0..n_null)
                .map(|i| {
                    let vals: Vec<f64> =
                        block_bootstrap_stream(rain_pool.clone(), block, derive_seed(seed, 700 + i as u64))
                            .take(null_len)
                            .collect();
                    let s = ScalarSeries {
                        times: (0..vals.len())
                            .map(|k| ds.raw.times[0] + ds.raw.step() * k as i32)
                            .collect(),
                        values: vals,
                        mask: vec![true; null_len],
                    };
                    threshold_run(&s, cfg.flood_window, cfg.flood_threshold, ThresholdMode::Exceedance, None)
                        .unwrap()
                })
                .collect();
            rows.push(DetectorRow {
                detector: "exceedance_threshold".into(),
                target_arl0: cfg.target_arl0,
                report: evaluate_detector(&[(trace, onsets)], &nulls, window)?,
            });
        }
    }
    Ok(rows)
}
