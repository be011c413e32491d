//! Command-line orchestration: synth, train, calibrate, detect,
//! evaluate, replicate.
//!
//! Every command is idempotent given identical config and seed: outputs
//! are byte-identical. Exit codes: 0 success, 2 config error, 3 data
//! error, 4 numeric/training error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};

use hydrowarn_core::checkpoint::{load_model, save_model};
use hydrowarn_core::detector::{NullCalibration, NullStats};
use hydrowarn_core::error::{Error, Result};
use hydrowarn_core::pipeline::{
    calibrate_sr, detect_trace, detector_reports, evaluate_model, prepare, replicate, train_once,
    AggRow, Dataset, MetricRow,
};
use hydrowarn_core::synth::{gen_climatology, inject};
use hydrowarn_core::timeseries::load_series;
use hydrowarn_core::RunConfig;

#[derive(Parser)]
#[command(name = "hydrowarn", version, about = "Precipitation forecasting and early warning")]
struct Cli {
    /// Run configuration (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the command's primary seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replication and calibration (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset (plus manifest when a change is injected).
    Synth,
    /// Train a model on the training fold; writes checkpoint and loss log.
    Train,
    /// Calibrate the SR threshold on held-out climatology.
    Calibrate,
    /// Run the SR detector over the series; writes alarm log and trace.
    Detect,
    /// Verify forecasts (and detectors, when calibrated) on the test fold.
    Evaluate,
    /// Train/evaluate over n replications; writes the aggregated report.
    Replicate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: cannot build worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::from_file(&cli.config)?;
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Synth => {
            if let Some(s) = cli.seed {
                cfg.synth.seed = s;
            }
            cmd_synth(&cfg, &cli.out)
        }
        Command::Train => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cmd_train(&cfg, &cli.out)
        }
        Command::Calibrate => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cmd_calibrate(&cfg, &cli.out)
        }
        Command::Detect => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cmd_detect(&cfg, &cli.out)
        }
        Command::Evaluate => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cmd_evaluate(&cfg, &cli.out)
        }
        Command::Replicate => {
            if let Some(s) = cli.seed {
                cfg.base_seed = s;
            }
            cmd_replicate(&cfg, &cli.out)
        }
    }
}

fn fmt_time(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "NA".to_string(),
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (series, manifest) = match &cfg.inject {
        None => (gen_climatology(&cfg.synth)?, None),
        Some(spec) => {
            let (series, onset) = inject(&cfg.synth, spec)?;
            (series, Some((spec.clone(), onset)))
        }
    };
    let mut csv = Vec::new();
    series.write_csv(&mut csv)?;
    std::fs::write(out.join("data.csv"), &csv)?;
    let mut m = String::new();
    writeln!(m, "# synthetic dataset manifest").unwrap();
    writeln!(m, "seed = {}", cfg.synth.seed).unwrap();
    writeln!(m, "sites = {}", cfg.synth.n_sites).unwrap();
    writeln!(m, "steps = {}", cfg.synth.steps).unwrap();
    match &manifest {
        None => writeln!(m, "inject = none").unwrap(),
        Some((spec, onset)) => {
            writeln!(m, "inject = {}", spec.kind.name()).unwrap();
            writeln!(m, "onset_step = {onset}").unwrap();
            writeln!(m, "onset_time = {}", fmt_time(series.times[*onset])).unwrap();
            writeln!(m, "p_wet_mult = {}", spec.p_wet_mult).unwrap();
            writeln!(m, "amount_mult = {}", spec.amount_mult).unwrap();
            writeln!(m, "burst_len = {}", spec.burst_len).unwrap();
            writeln!(m, "burst_intensity = {}", spec.burst_intensity).unwrap();
            writeln!(m, "precursor_lead = {}", spec.precursor_lead).unwrap();
            writeln!(m, "precursor_scale = {}", spec.precursor_scale).unwrap();
        }
    }
    write_file(&out.join("manifest.txt"), &m)?;
    println!("synth: wrote {} steps x {} sites", series.n_times(), series.sites.len());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let series = load_series(cfg.require_data()?, &cfg.channels)?;
    prepare(cfg, series)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (model, log) = train_once(cfg, &ds, cfg.train.seed, false)?;
    save_model(&model, &out.join("model.ckpt"))?;
    let mut csv = String::from("epoch,task_loss,rm_loss,lambda\n");
    for e in &log {
        writeln!(csv, "{},{},{},{}", e.epoch, e.task_loss, e.rm_loss, e.lambda).unwrap();
    }
    write_file(&out.join("train_log.csv"), &csv)?;
    println!(
        "train: {} epochs, final task loss {}",
        log.len(),
        log.last().map(|e| e.task_loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn require_checkpoint(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("checkpoint path is required for this command".into()))
}

fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model = load_model(require_checkpoint(cfg)?)?;
    let cal = calibrate_sr(cfg, &ds, &model, cfg.train.seed)?;
    let t = &cal.threshold;
    let mut csv = String::from("target_arl0,B_star,ci_lo,ci_hi,n_boot,seed\n");
    writeln!(
        csv,
        "{},{},{},{},{},{}",
        t.target_arl0, t.b_star, t.ci95.0, t.ci95.1, t.n_boot, cfg.train.seed
    )
    .unwrap();
    write_file(&out.join("calibration.csv"), &csv)?;
    let mut ns = String::from("scope,month,mu0,sigma0,psi0,eta\n");
    writeln!(
        ns,
        "global,0,{},{},{},{}",
        cal.null.global.mu0, cal.null.global.sigma0, cal.null.global.psi0, cal.null.eta
    )
    .unwrap();
    if let Some(table) = &cal.null.monthly {
        for (m, s) in table.iter().enumerate() {
            writeln!(ns, "monthly,{},{},{},{},{}", m + 1, s.mu0, s.sigma0, s.psi0, cal.null.eta)
                .unwrap();
        }
    }
    write_file(&out.join("null_stats.csv"), &ns)?;
    println!(
        "calibrate: B* = {} (95% CI {}..{}), achieved ARL0 {}",
        t.b_star, t.ci95.0, t.ci95.1, t.achieved_arl0
    );
    Ok(())
}

fn load_calibration(cfg: &RunConfig) -> Result<(f64, NullCalibration)> {
    let path = cfg
        .calibration
        .as_deref()
        .ok_or_else(|| Error::Config("calibration path is required for this command".into()))?;
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "target_arl0,B_star,ci_lo,ci_hi,n_boot,seed" {
        return Err(Error::Schema(format!("bad calibration header {header:?}")));
    }
    let row = lines
        .next()
        .ok_or_else(|| Error::Schema("calibration file has no data row".into()))?;
    let cols: Vec<&str> = row.split(',').collect();
    if cols.len() != 6 {
        return Err(Error::Schema("calibration row must have 6 columns".into()));
    }
    let b: f64 = cols[1]
        .parse()
        .map_err(|e| Error::Schema(format!("bad B_star: {e}")))?;

    // Null stats live next to the calibration report.
    let ns_path = path
        .parent()
        .map(|d| d.join("null_stats.csv"))
        .filter(|p| p.exists())
        .ok_or_else(|| Error::Config("null_stats.csv not found next to calibration.csv".into()))?;
    let text = std::fs::read_to_string(ns_path)?;
    let mut global: Option<NullStats> = None;
    let mut monthly: Vec<(usize, NullStats)> = Vec::new();
    let mut eta = 1.0;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Schema(format!("bad null_stats row {line:?}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Schema(format!("bad null_stats value {s:?}: {e}")))
        };
        let stats = NullStats {
            mu0: parse(cols[2])?,
            sigma0: parse(cols[3])?,
            psi0: parse(cols[4])?,
        };
        eta = parse(cols[5])?;
        match cols[0] {
            "global" => global = Some(stats),
            "monthly" => monthly.push((
                cols[1]
                    .parse::<usize>()
                    .map_err(|e| Error::Schema(format!("bad month: {e}")))?,
                stats,
            )),
            other => return Err(Error::Schema(format!("bad scope {other:?}"))),
        }
    }
    let global = global.ok_or_else(|| Error::Schema("null_stats.csv lacks a global row".into()))?;
    let monthly_table = if monthly.is_empty() {
        None
    } else {
        if monthly.len() != 12 {
            return Err(Error::Schema("monthly null table must have 12 rows".into()));
        }
        let mut table = [global; 12];
        for (m, s) in monthly {
            if !(1..=12).contains(&m) {
                return Err(Error::Schema(format!("month {m} out of range")));
            }
            table[m - 1] = s;
        }
        Some(Box::new(table))
    };
    Ok((
        b,
        NullCalibration {
            eta,
            global,
            monthly: monthly_table,
        },
    ))
}

fn cmd_detect(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model = load_model(require_checkpoint(cfg)?)?;
    let (b, null) = load_calibration(cfg)?;
    let (defects, _lambdas, trace) = detect_trace(cfg, &ds, &model, &null, b)?;
    let mut tr = String::from("time,r_t,R_t,B\n");
    for i in 0..defects.len() {
        writeln!(
            tr,
            "{},{},{},{}",
            fmt_time(defects.times[i]),
            defects.values[i],
            trace.statistic[i],
            b
        )
        .unwrap();
    }
    write_file(&out.join("trace.csv"), &tr)?;
    let mut al = String::from("detector,time,statistic,threshold,event_kind\n");
    for &a in &trace.alarms {
        writeln!(
            al,
            "sr_rmrnn,{},{},{},{}",
            fmt_time(defects.times[a]),
            trace.statistic[a],
            b,
            cfg.detect_mode.name()
        )
        .unwrap();
    }
    write_file(&out.join("alarms.csv"), &al)?;
    println!("detect: {} alarms over {} steps", trace.alarms.len(), defects.len());
    Ok(())
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut csv = String::from("metric,lead,model,mean,sd,n_replications\n");
    for r in rows {
        writeln!(csv, "{},{},{},{},0,1", r.metric, r.lead, r.model, fmt_opt(r.value)).unwrap();
    }
    csv
}

fn agg_csv(rows: &[AggRow]) -> String {
    let mut csv = String::from("metric,lead,model,mean,sd,n_replications\n");
    for r in rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.metric,
            r.lead,
            r.model,
            fmt_opt(Some(r.mean)),
            fmt_opt(Some(r.sd)),
            r.n
        )
        .unwrap();
    }
    csv
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model = load_model(require_checkpoint(cfg)?)?;
    let rows = evaluate_model(cfg, &ds, &model)?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    // Detector table when a calibration is available.
    if cfg.calibration.is_some() {
        let (b, null) = load_calibration(cfg)?;
        let cal = hydrowarn_core::pipeline::SrCalibration {
            threshold: hydrowarn_core::detector::SrThreshold {
                b_star: b,
                target_arl0: cfg.target_arl0,
                achieved_arl0: f64::NAN,
                ci95: (b, b),
                n_boot: cfg.n_boot,
                censored: 0,
            },
            null,
            clim_defects: hydrowarn_core::pipeline::climatology_defects(&ds, &model)?,
        };
        match detector_reports(cfg, &ds, &model, &cal, cfg.train.seed) {
            Ok(drows) => {
                let mut csv = String::from(
                    "detector,target_arl0,empirical_arl0,detection_rate,mean_lead,far,miss_rate,n_events\n",
                );
                for d in &drows {
                    writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{}",
                        d.detector,
                        d.target_arl0,
                        fmt_opt(Some(d.report.empirical_arl0)),
                        d.report.detection_rate,
                        fmt_opt(d.report.mean_lead),
                        fmt_opt(d.report.far),
                        d.report.miss_rate,
                        d.report.n_events
                    )
                    .unwrap();
                }
                write_file(&out.join("detector_metrics.csv"), &csv)?;
            }
            Err(Error::EventFree(msg)) | Err(Error::Config(msg)) => {
                eprintln!("note: detector table skipped: {msg}");
            }
            Err(e) => return Err(e),
        }
    }
    println!("evaluate: {} metric rows", rows.len());
    Ok(())
}

fn cmd_replicate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let rows = replicate(cfg, &ds)?;
    write_file(&out.join("metrics.csv"), &agg_csv(&rows))?;
    println!(
        "replicate: {} replications aggregated into {} rows",
        cfg.replications,
        rows.len()
    );
    Ok(())
}
