//! Run configuration: `key = value` lines with `#` comments.

use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};

use crate::error::{Error, Result};
use crate::rnn::{CellKind, TrainConfig};
use crate::synth::{ChangeKind, ChangeSpec, SynthConfig};
use crate::timeseries::{SplitSpec, StepUnit};

/// Everything a command run needs; parsed and validated up front.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // Data
    pub data: Option<PathBuf>,
    pub channels: Vec<String>,
    pub target_site: Option<String>,
    pub target_channel: String,
    pub radius_km: f64,
    pub train_end: Option<DateTime<Utc>>,
    pub val_end: Option<DateTime<Utc>>,
    pub excluded: Vec<(DateTime<Utc>, DateTime<Utc>)>,
    // Model
    pub cell: CellKind,
    pub hidden_dim: usize,
    pub lead_steps: Vec<usize>,
    // Training
    pub train: TrainConfig,
    // Bootstrap (None = step-unit default: 90 daily / 168 hourly)
    pub block_len: Option<usize>,
    pub purge_gap: Option<usize>,
    // Detector
    pub eta: f64,
    pub target_arl0: f64,
    pub n_boot: usize,
    pub monthly_null: bool,
    pub detection_window: Option<usize>,
    pub detect_mode: ChangeKind,
    pub cusum_k: f64,
    pub flood_window: usize,
    pub flood_threshold: f64,
    pub deficit_window: usize,
    pub deficit_quantile: f64,
    // Verification
    pub brier_thresholds: Vec<f64>,
    pub pod_threshold: f64,
    // Replication
    pub replications: usize,
    pub base_seed: u64,
    // Artifacts from earlier commands
    pub checkpoint: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    // Synthetic generator
    pub synth: SynthConfig,
    pub inject: Option<ChangeSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            channels: vec!["P".into(), "T".into(), "q".into(), "omega".into()],
            target_site: None,
            target_channel: "P".into(),
            radius_km: 10.0,
            train_end: None,
            val_end: None,
            excluded: Vec::new(),
            cell: CellKind::Gru,
            hidden_dim: 32,
            lead_steps: vec![1],
            train: TrainConfig::default(),
            block_len: None,
            purge_gap: None,
            eta: 1.0,
            target_arl0: 500.0,
            n_boot: 1000,
            monthly_null: false,
            detection_window: None,
            detect_mode: ChangeKind::Drought,
            cusum_k: 0.5,
            flood_window: 3,
            flood_threshold: 50.0,
            deficit_window: 90,
            deficit_quantile: 0.1,
            brier_thresholds: vec![5.0, 20.0, 50.0],
            pod_threshold: 20.0,
            replications: 1000,
            base_seed: 1000,
            checkpoint: None,
            calibration: None,
            manifest: None,
            synth: SynthConfig::default(),
            inject: None,
        }
    }
}

fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::Config(format!("bad timestamp {s:?}: {e}")))
}

fn parse_num<T: std::str::FromStr>(key: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {s:?}: {e}")))
}

fn parse_bool(key: &str, s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected bool, got {other:?}"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        // Injection assembled from individual keys.
        let mut inject_kind: Option<ChangeKind> = None;
        let mut inject_onset = 0usize;
        let mut inject_p_wet_mult = 0.3;
        let mut inject_amount_mult = 1.0;
        let mut inject_covariate_drift = 0.0;
        let mut inject_drift_ramp = 30usize;
        let mut inject_anomaly_volatility = 1.0;
        let mut inject_burst_len = 3usize;
        let mut inject_burst_intensity = 30.0;
        let mut inject_precursor_lead = 4usize;
        let mut inject_precursor_scale = 3.0;

        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw_line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            match key {
                "data" => cfg.data = Some(PathBuf::from(value)),
                "channels" => {
                    cfg.channels = value.split(',').map(|s| s.trim().to_string()).collect()
                }
                "target_site" => cfg.target_site = Some(value.to_string()),
                "target_channel" => cfg.target_channel = value.to_string(),
                "radius_km" => cfg.radius_km = parse_num(key, value)?,
                "train_end" => cfg.train_end = Some(parse_time(value)?),
                "val_end" => cfg.val_end = Some(parse_time(value)?),
                "exclude" => {
                    let Some((a, b)) = value.split_once("..") else {
                        return Err(Error::Config(format!(
                            "exclude: expected start..end, got {value:?}"
                        )));
                    };
                    cfg.excluded.push((parse_time(a.trim())?, parse_time(b.trim())?));
                }
                "cell" => cfg.cell = CellKind::parse(value)?,
                "hidden_dim" => cfg.hidden_dim = parse_num(key, value)?,
                "leads" => {
                    cfg.lead_steps = value
                        .split(',')
                        .map(|s| parse_num("leads", s.trim()))
                        .collect::<Result<_>>()?
                }
                "epochs" => cfg.train.epochs = parse_num(key, value)?,
                "warmup_epochs" => cfg.train.warmup_epochs = parse_num(key, value)?,
                "lambda0" => cfg.train.lambda0 = parse_num(key, value)?,
                "gamma" => cfg.train.gamma = parse_num(key, value)?,
                "lr" => cfg.train.lr = parse_num(key, value)?,
                "clip" => cfg.train.clip_norm = parse_num(key, value)?,
                "rm_window" => cfg.train.rm_window = parse_num(key, value)?,
                "seed" => cfg.train.seed = parse_num(key, value)?,
                "block_len" => cfg.block_len = Some(parse_num(key, value)?),
                "purge_gap" => cfg.purge_gap = Some(parse_num(key, value)?),
                "eta" => cfg.eta = parse_num(key, value)?,
                "target_arl0" => cfg.target_arl0 = parse_num(key, value)?,
                "n_boot" => cfg.n_boot = parse_num(key, value)?,
                "monthly_null" => cfg.monthly_null = parse_bool(key, value)?,
                "detection_window" => cfg.detection_window = Some(parse_num(key, value)?),
                "detect_mode" => cfg.detect_mode = ChangeKind::parse(value)?,
                "cusum_k" => cfg.cusum_k = parse_num(key, value)?,
                "flood_window" => cfg.flood_window = parse_num(key, value)?,
                "flood_threshold" => cfg.flood_threshold = parse_num(key, value)?,
                "deficit_window" => cfg.deficit_window = parse_num(key, value)?,
                "deficit_quantile" => cfg.deficit_quantile = parse_num(key, value)?,
                "brier_thresholds" => {
                    cfg.brier_thresholds = value
                        .split(',')
                        .map(|s| parse_num("brier_thresholds", s.trim()))
                        .collect::<Result<_>>()?
                }
                "pod_threshold" => cfg.pod_threshold = parse_num(key, value)?,
                "replications" => cfg.replications = parse_num(key, value)?,
                "base_seed" => cfg.base_seed = parse_num(key, value)?,
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
                "calibration" => cfg.calibration = Some(PathBuf::from(value)),
                "manifest" => cfg.manifest = Some(PathBuf::from(value)),
                "synth_sites" => cfg.synth.n_sites = parse_num(key, value)?,
                "synth_steps" => cfg.synth.steps = parse_num(key, value)?,
                "synth_step" => cfg.synth.step = StepUnit::parse(value)?,
                "synth_start" => cfg.synth.start = parse_time(value)?,
                "synth_seasonal_amp" => cfg.synth.seasonal_amp = parse_num(key, value)?,
                "synth_p_wet" => cfg.synth.p_wet = parse_num(key, value)?,
                "synth_wet_mu" => cfg.synth.wet_mu = parse_num(key, value)?,
                "synth_wet_sigma" => cfg.synth.wet_sigma = parse_num(key, value)?,
                "synth_decorrelation_km" => cfg.synth.decorrelation_km = parse_num(key, value)?,
                "synth_persistence" => cfg.synth.persistence = parse_num(key, value)?,
                "synth_seed" => cfg.synth.seed = parse_num(key, value)?,
                "inject" => {
                    inject_kind = match value {
                        "none" => None,
                        other => Some(ChangeKind::parse(other)?),
                    }
                }
                "inject_onset" => inject_onset = parse_num(key, value)?,
                "inject_p_wet_mult" => inject_p_wet_mult = parse_num(key, value)?,
                "inject_amount_mult" => inject_amount_mult = parse_num(key, value)?,
                "inject_covariate_drift" => inject_covariate_drift = parse_num(key, value)?,
                "inject_drift_ramp" => inject_drift_ramp = parse_num(key, value)?,
                "inject_anomaly_volatility" => inject_anomaly_volatility = parse_num(key, value)?,
                "inject_burst_len" => inject_burst_len = parse_num(key, value)?,
                "inject_burst_intensity" => inject_burst_intensity = parse_num(key, value)?,
                "inject_precursor_lead" => inject_precursor_lead = parse_num(key, value)?,
                "inject_precursor_scale" => inject_precursor_scale = parse_num(key, value)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if let Some(kind) = inject_kind {
            cfg.inject = Some(ChangeSpec {
                kind,
                onset: inject_onset,
                p_wet_mult: inject_p_wet_mult,
                amount_mult: inject_amount_mult,
                covariate_drift: inject_covariate_drift,
                drift_ramp: inject_drift_ramp,
                anomaly_volatility: inject_anomaly_volatility,
                burst_len: inject_burst_len,
                burst_intensity: inject_burst_intensity,
                precursor_lead: inject_precursor_lead,
                precursor_scale: inject_precursor_scale,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.lead_steps.is_empty() || self.lead_steps.iter().any(|&l| l == 0) {
            return Err(Error::Config("leads must be nonempty positive steps".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be > 0".into()));
        }
        if !(self.target_arl0 >= 1.0) {
            return Err(Error::Config("target_arl0 must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.deficit_quantile) {
            return Err(Error::Config("deficit_quantile must be in (0, 1)".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        for (a, b) in &self.excluded {
            if a > b {
                return Err(Error::Config(format!("inverted exclude window {a}..{b}")));
            }
        }
        for path in [&self.data, &self.checkpoint, &self.calibration, &self.manifest]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "referenced file does not exist: {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// The chronological split; requires train_end and val_end.
    pub fn split_spec(&self) -> Result<SplitSpec> {
        let (train_end, val_end) = match (self.train_end, self.val_end) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Config(
                    "train_end and val_end are required for this command".into(),
                ))
            }
        };
        Ok(SplitSpec {
            train_end,
            val_end,
            excluded_windows: self.excluded.clone(),
        })
    }

    /// Bootstrap block length: configured or the step-unit default
    /// (90 daily steps, 168 hourly steps).
    pub fn block_len_for(&self, step: StepUnit) -> usize {
        self.block_len.unwrap_or(match step {
            StepUnit::Day => 90,
            StepUnit::Hour => 168,
        })
    }

    pub fn purge_gap_for(&self, step: StepUnit) -> usize {
        self.purge_gap.unwrap_or(self.block_len_for(step))
    }

    /// Detection window: configured or the mode default (90 daily steps
    /// for drought, 24 steps for flood).
    pub fn detection_window_steps(&self) -> usize {
        self.detection_window.unwrap_or(match self.detect_mode {
            ChangeKind::Drought => 90,
            ChangeKind::Flood => 24,
        })
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("data path is required for this command".into()))
    }

    pub fn require_target_site(&self) -> Result<&str> {
        self.target_site
            .as_deref()
            .ok_or_else(|| Error::Config("target_site is required for this command".into()))
    }
}

/// Convenience used by tests and docs only.
pub fn epoch_time(y: i32, m: u32, d: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, 0, 0, 0).unwrap()
}
