//! Synthetic hydromet generator with known climatology and injectable
//! drought/flood change points.
//!
//! Occurrence is a two-state Markov chain with seasonal modulation; wet
//! amounts are log-normal; covariates (temperature, humidity, vorticity)
//! mix a seasonal sinusoid, a rain-state shift, and AR(1) noise. Sites
//! share a regional latent factor whose weight decays with distance, so
//! persistence and climatology baselines stay non-trivial.
//!
//! The generator draws a fixed number of variates per (site, step)
//! regardless of parameters, so an injected run consumes the random
//! stream identically to the climatology run: pre-onset output is
//! bitwise identical for the same seed.

use chrono::{DateTime, Datelike, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::normal_cdf;
use crate::timeseries::{great_circle_km, MeteoSeries, Site, StepUnit};

/// Covariate coupling to season and rain state.
#[derive(Debug, Clone, Copy)]
pub struct Coupling {
    pub temp_season: f64,
    pub temp_rain: f64,
    pub hum_season: f64,
    pub hum_rain: f64,
    pub vort_season: f64,
    pub vort_rain: f64,
}

impl Default for Coupling {
    fn default() -> Self {
        Coupling {
            temp_season: 8.0,
            temp_rain: -2.0,
            hum_season: 2.0,
            hum_rain: 2.5,
            vort_season: 0.5,
            vort_rain: 2.0,
        }
    }
}

/// Generator configuration.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_sites: usize,
    pub steps: usize,
    pub step: StepUnit,
    pub start: DateTime<Utc>,
    /// Relative seasonal modulation of the wet probability, in [0, 1).
    pub seasonal_amp: f64,
    pub p_wet: f64,
    /// Log-scale location/spread of wet amounts (mm).
    pub wet_mu: f64,
    pub wet_sigma: f64,
    pub coupling: Coupling,
    /// Spatial decorrelation length of the regional factor, km.
    pub decorrelation_km: f64,
    /// Wet/dry persistence of the occurrence chain.
    pub persistence: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sites: 4,
            steps: 2000,
            step: StepUnit::Day,
            start: Utc.with_ymd_and_hms(1980, 1, 1, 0, 0, 0).unwrap(),
            seasonal_amp: 0.3,
            p_wet: 0.35,
            wet_mu: 1.2,
            wet_sigma: 0.9,
            coupling: Coupling::default(),
            decorrelation_km: 30.0,
            persistence: 0.7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 1 || self.steps < 2 {
            return Err(Error::Config("need n_sites >= 1 and steps >= 2".into()));
        }
        if !(self.p_wet >= 0.0 && self.p_wet < 1.0) {
            return Err(Error::Config(format!("p_wet {} outside [0, 1)", self.p_wet)));
        }
        if !(self.wet_sigma > 0.0) {
            return Err(Error::Config("wet_sigma must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return Err(Error::Config("persistence must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.seasonal_amp) {
            return Err(Error::Config("seasonal_amp must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Kind of injected regime change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    Drought,
    Flood,
}

impl ChangeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drought" => Ok(ChangeKind::Drought),
            "flood" => Ok(ChangeKind::Flood),
            other => Err(Error::Config(format!("unknown change kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChangeKind::Drought => "drought",
            ChangeKind::Flood => "flood",
        }
    }
}

/// Injected change-point specification.
#[derive(Debug, Clone)]
pub struct ChangeSpec {
    pub kind: ChangeKind,
    /// Step index of the true onset.
    pub onset: usize,
    /// Drought: multiplier on the wet probability.
    pub p_wet_mult: f64,
    /// Drought: multiplier on the typical wet amount (applied as
    /// wet_mu + ln(mult), so 1.0 is the identity).
    pub amount_mult: f64,
    /// Drought: amplitude of the post-onset covariate anomaly
    /// (suppressed vorticity, elevated temperature, reduced moisture)
    /// that accompanies a persistent dry regime; ramps in over
    /// `drift_ramp` steps. 0 disables it.
    pub covariate_drift: f64,
    /// Drought: ramp-in length of the covariate anomaly, steps.
    pub drift_ramp: usize,
    /// Drought: multiplier on the covariate innovation scale post-onset
    /// (anomalous dry-regime variability); 1.0 disables it.
    pub anomaly_volatility: f64,
    /// Flood: burst length in steps from the onset.
    pub burst_len: usize,
    /// Flood: rainfall added per burst step, mm.
    pub burst_intensity: f64,
    /// Flood: precursor ramp length on vorticity/humidity before onset.
    pub precursor_lead: usize,
    /// Flood: peak amplitude of the precursor ramp.
    pub precursor_scale: f64,
}

impl ChangeSpec {
    pub fn drought(onset: usize, p_wet_mult: f64, amount_mult: f64) -> Self {
        ChangeSpec {
            kind: ChangeKind::Drought,
            onset,
            p_wet_mult,
            amount_mult,
            covariate_drift: 0.0,
            drift_ramp: 30,
            anomaly_volatility: 1.0,
            burst_len: 0,
            burst_intensity: 0.0,
            precursor_lead: 0,
            precursor_scale: 0.0,
        }
    }

    pub fn with_covariate_drift(mut self, drift: f64) -> Self {
        self.covariate_drift = drift;
        self
    }

    pub fn with_anomaly_volatility(mut self, vol: f64) -> Self {
        self.anomaly_volatility = vol;
        self
    }

    pub fn flood(onset: usize, burst_len: usize, burst_intensity: f64) -> Self {
        ChangeSpec {
            kind: ChangeKind::Flood,
            onset,
            p_wet_mult: 1.0,
            amount_mult: 1.0,
            covariate_drift: 0.0,
            drift_ramp: 30,
            anomaly_volatility: 1.0,
            burst_len,
            burst_intensity,
            precursor_lead: 4,
            precursor_scale: 3.0,
        }
    }

    fn validate(&self, cfg: &SynthConfig) -> Result<()> {
        if self.onset >= cfg.steps {
            return Err(Error::Config(format!(
                "onset {} outside series of {} steps",
                self.onset, cfg.steps
            )));
        }
        if self.p_wet_mult <= 0.0 || self.amount_mult <= 0.0 || self.anomaly_volatility <= 0.0 {
            return Err(Error::Config("change multipliers must be > 0".into()));
        }
        Ok(())
    }
}

pub const CHANNELS: [&str; 4] = ["P", "T", "q", "omega"];

fn site_ring(n: usize) -> Vec<Site> {
    // Sites on a ~5 km grid around (24N, 121E); 0.045 degrees of latitude
    // is about 5 km.
    (0..n)
        .map(|i| {
            let row = (i / 4) as f64;
            let col = (i % 4) as f64;
            Site::new(format!("S{i:02}"), 24.0 + 0.045 * row, 121.0 + 0.049 * col).unwrap()
        })
        .collect()
}

/// Generates climatology without any injected change.
pub fn gen_climatology(cfg: &SynthConfig) -> Result<MeteoSeries> {
    generate(cfg, None).map(|(s, _)| s)
}

/// Generates a series with the given change injected; returns the series
/// and the true onset step.
pub fn inject(cfg: &SynthConfig, spec: &ChangeSpec) -> Result<(MeteoSeries, usize)> {
    spec.validate(cfg)?;
    generate(cfg, Some(spec))
}

fn generate(cfg: &SynthConfig, change: Option<&ChangeSpec>) -> Result<(MeteoSeries, usize)> {
    cfg.validate()?;
    let n = cfg.n_sites;
    let t_len = cfg.steps;
    let sites = site_ring(n);
    let step = cfg.step.duration();
    let times: Vec<DateTime<Utc>> = (0..t_len).map(|i| cfg.start + step * i as i32).collect();

    // Regional-factor weight per site, decaying with distance to site 0.
    let rho: Vec<f64> = sites
        .iter()
        .map(|s| (-great_circle_km(s, &sites[0]) / cfg.decorrelation_km.max(1e-9)).exp())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_chan = CHANNELS.len();
    let mut values = vec![0.0; n * t_len * n_chan];
    let mut wet_prev = vec![false; n];
    let mut ar_state = vec![[0.0f64; 3]; n]; // T, q, omega AR(1) noise
    const AR: f64 = 0.8;
    const AR_INNOV: f64 = 0.6;

    let drought = change.filter(|c| c.kind == ChangeKind::Drought);
    let flood = change.filter(|c| c.kind == ChangeKind::Flood);

    for t in 0..t_len {
        let doy = times[t].ordinal() as f64 + if cfg.step == StepUnit::Hour {
            times[t].hour_day_fraction()
        } else {
            0.0
        };
        let season = (2.0 * std::f64::consts::PI * doy / 365.25).sin();
        // Shared regional factors for occurrence and amounts.
        let g_occ: f64 = rng.sample(StandardNormal);
        let g_amt: f64 = rng.sample(StandardNormal);
        for s in 0..n {
            // Fixed draw count per (site, step): occurrence, amount and
            // three covariate innovations.
            let e_occ: f64 = rng.sample(StandardNormal);
            let e_amt: f64 = rng.sample(StandardNormal);
            let e_t: f64 = rng.sample(StandardNormal);
            let e_q: f64 = rng.sample(StandardNormal);
            let e_w: f64 = rng.sample(StandardNormal);

            let mut p_t = cfg.p_wet * (1.0 + cfg.seasonal_amp * season);
            if let Some(d) = drought {
                if t >= d.onset {
                    p_t *= d.p_wet_mult;
                }
            }
            let p_t = p_t.clamp(0.0, 0.999);
            let c = cfg.persistence;
            let p_trans = if wet_prev[s] { c + (1.0 - c) * p_t } else { (1.0 - c) * p_t };
            let mix = rho[s];
            let latent = mix * g_occ + (1.0 - mix * mix).sqrt() * e_occ;
            let u = normal_cdf(latent);
            let wet = u < p_trans && cfg.p_wet > 0.0;
            wet_prev[s] = wet;

            let mut wet_mu = cfg.wet_mu;
            if let Some(d) = drought {
                if t >= d.onset {
                    wet_mu += d.amount_mult.ln();
                }
            }
            let a = mix * g_amt + (1.0 - mix * mix).sqrt() * e_amt;
            let mut p = if wet { (wet_mu + cfg.wet_sigma * a).exp() } else { 0.0 };

            // Flood burst and precursor.
            let mut precursor = 0.0;
            if let Some(f) = flood {
                if t >= f.onset && t < f.onset + f.burst_len {
                    p += f.burst_intensity;
                }
                if f.precursor_lead > 0 && t < f.onset && t + f.precursor_lead >= f.onset {
                    let frac = 1.0 - (f.onset - t) as f64 / f.precursor_lead as f64;
                    precursor = f.precursor_scale * (frac + 1.0 / f.precursor_lead as f64);
                }
            }
            // Drought covariate anomaly: suppressed vorticity, elevated
            // temperature, declining moisture, plus anomalously volatile
            // dry-regime dynamics, all ramping in after onset.
            let mut drought_drift = 0.0;
            let mut vol_mult = 1.0;
            if let Some(d) = drought {
                if t >= d.onset {
                    let ramp = if d.drift_ramp == 0 {
                        1.0
                    } else {
                        (((t - d.onset + 1) as f64) / d.drift_ramp as f64).min(1.0)
                    };
                    drought_drift = d.covariate_drift * ramp;
                    vol_mult = 1.0 + (d.anomaly_volatility - 1.0) * ramp;
                }
            }

            for (k, st) in ar_state[s].iter_mut().enumerate() {
                let innov = [e_t, e_q, e_w][k];
                *st = AR * *st + AR_INNOV * vol_mult * innov;
            }
            let wet_ind = if wet { 1.0 } else { 0.0 };
            let cp = cfg.coupling;
            let temp = 20.0 + cp.temp_season * season + cp.temp_rain * wet_ind + ar_state[s][0]
                + 0.5 * drought_drift;
            let hum = 8.0 + cp.hum_season * season + cp.hum_rain * wet_ind + ar_state[s][1]
                + 0.5 * precursor
                - 0.5 * drought_drift;
            let vort = cp.vort_season * season + cp.vort_rain * wet_ind + ar_state[s][2]
                + precursor
                - drought_drift;

            let base = (s * t_len + t) * n_chan;
            values[base] = p;
            values[base + 1] = temp;
            values[base + 2] = hum;
            values[base + 3] = vort;
        }
    }

    let series = MeteoSeries::new(
        sites,
        times,
        CHANNELS.iter().map(|c| c.to_string()).collect(),
        vec!["mm".into(), "degC".into(), "g/kg".into(), "1e-5/s".into()],
        values,
        vec![true; n * t_len * n_chan],
    )?;
    series.validate_physical()?;
    Ok((series, change.map(|c| c.onset).unwrap_or(0)))
}

trait HourFraction {
    fn hour_day_fraction(&self) -> f64;
}

impl HourFraction for DateTime<Utc> {
    fn hour_day_fraction(&self) -> f64 {
        use chrono::Timelike;
        self.hour() as f64 / 24.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::ScalarSeries;
    use crate::verify::flood_onset;

    fn base_cfg() -> SynthConfig {
        SynthConfig {
            n_sites: 3,
            steps: 800,
            seed: 42,
            ..SynthConfig::default()
        }
    }

    fn precip(series: &MeteoSeries, site: usize) -> Vec<f64> {
        (0..series.n_times()).map(|t| series.value(site, t, 0)).collect()
    }

    #[test]
    fn p_wet_zero_is_all_dry() {
        let cfg = SynthConfig {
            p_wet: 0.0,
            ..base_cfg()
        };
        let s = gen_climatology(&cfg).unwrap();
        for site in 0..cfg.n_sites {
            assert!(precip(&s, site).iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn stationary_wet_fraction_within_binomial_ci() {
        let cfg = SynthConfig {
            n_sites: 1,
            steps: 10_000,
            seasonal_amp: 0.0,
            p_wet: 0.35,
            seed: 7,
            ..base_cfg()
        };
        let s = gen_climatology(&cfg).unwrap();
        let p = precip(&s, 0);
        let wet_frac = p.iter().filter(|&&v| v > 0.0).count() as f64 / p.len() as f64;
        // The Markov chain has stationary wet probability p_wet; its
        // autocorrelation inflates the naive binomial se by
        // sqrt((1+c)/(1-c)).
        let se = (0.35f64 * 0.65 / 10_000.0).sqrt() * ((1.0 + 0.7f64) / (1.0 - 0.7)).sqrt();
        assert!(
            (wet_frac - 0.35).abs() < 3.0 * se,
            "wet fraction {wet_frac} vs 0.35 +- {}",
            3.0 * se
        );
    }

    #[test]
    fn same_seed_identical_series() {
        let cfg = base_cfg();
        let a = gen_climatology(&cfg).unwrap();
        let b = gen_climatology(&cfg).unwrap();
        for site in 0..cfg.n_sites {
            assert_eq!(precip(&a, site), precip(&b, site));
        }
        let c = gen_climatology(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(precip(&a, 0), precip(&c, 0));
    }

    #[test]
    fn physical_invariants_hold() {
        let cfg = base_cfg();
        let s = gen_climatology(&cfg).unwrap();
        for site in 0..cfg.n_sites {
            for t in 0..s.n_times() {
                for c in 0..4 {
                    assert!(s.value(site, t, c).is_finite());
                }
                assert!(s.value(site, t, 0) >= 0.0);
            }
        }
    }

    #[test]
    fn identity_drought_injection_is_noop() {
        let cfg = base_cfg();
        let base = gen_climatology(&cfg).unwrap();
        let (inj, onset) = inject(&cfg, &ChangeSpec::drought(300, 1.0, 1.0)).unwrap();
        assert_eq!(onset, 300);
        for site in 0..cfg.n_sites {
            assert_eq!(precip(&base, site), precip(&inj, site));
        }
    }

    #[test]
    fn pre_onset_bitwise_identical() {
        let cfg = base_cfg();
        let base = gen_climatology(&cfg).unwrap();
        let (dr, _) = inject(&cfg, &ChangeSpec::drought(400, 0.3, 0.5)).unwrap();
        let (fl, _) = inject(&cfg, &ChangeSpec::flood(400, 3, 30.0)).unwrap();
        for site in 0..cfg.n_sites {
            for t in 0..395 {
                for c in 0..4 {
                    assert_eq!(base.value(site, t, c), dr.value(site, t, c));
                    if t + 4 < 400 {
                        // flood precursor starts precursor_lead steps early
                        assert_eq!(base.value(site, t, c), fl.value(site, t, c));
                    }
                }
            }
        }
    }

    #[test]
    fn flood_burst_recovers_onset_via_flood_onset_rule() {
        // Calm climatology so the burst is the first exceedance.
        let cfg = SynthConfig {
            p_wet: 0.15,
            wet_mu: 0.3,
            wet_sigma: 0.5,
            n_sites: 1,
            steps: 600,
            seed: 11,
            ..base_cfg()
        };
        let (s, onset) = inject(&cfg, &ChangeSpec::flood(350, 3, 20.0)).unwrap();
        let p = ScalarSeries {
            times: s.times.clone(),
            values: precip(&s, 0),
            mask: vec![true; s.n_times()],
        };
        // Burst adds 20 mm on 3 steps: any 3-window from onset+2 sums > 50.
        let onsets = flood_onset(&p, 3, 50.0).unwrap();
        assert!(
            onsets.contains(&(onset + 2)) || onsets.contains(&onset) || onsets.contains(&(onset + 1)),
            "onsets {onsets:?} missed burst at {onset}"
        );
        assert!(onsets.iter().all(|&o| o >= onset));
    }

    #[test]
    fn drought_reduces_post_onset_accumulation() {
        // Paired one-sided comparison over independent seeds.
        let mut worse = 0;
        let n_seeds = 100;
        for seed in 0..n_seeds {
            let cfg = SynthConfig {
                n_sites: 1,
                steps: 500,
                seed,
                ..base_cfg()
            };
            let base = gen_climatology(&cfg).unwrap();
            let (dr, onset) = inject(&cfg, &ChangeSpec::drought(250, 0.2, 1.0)).unwrap();
            let mean_after = |s: &MeteoSeries| -> f64 {
                let p = precip(s, 0);
                crate::math::mean(&p[onset..])
            };
            if mean_after(&dr) < mean_after(&base) {
                worse += 1;
            }
        }
        // Overwhelming majority of seeds must show the reduction.
        assert!(worse >= 95, "only {worse}/{n_seeds} seeds reduced accumulation");
    }

    #[test]
    fn drought_drives_spi_below_threshold_for_strong_multipliers() {
        use crate::timeseries::accumulate;
        use crate::verify::{spi, spi_onset};
        let cfg = SynthConfig {
            n_sites: 1,
            steps: 10 * 365,
            seed: 3,
            ..base_cfg()
        };
        let (s, onset) = inject(&cfg, &ChangeSpec::drought(8 * 365, 0.15, 0.5)).unwrap();
        let acc = accumulate(&s, "P", 90).unwrap().scalar(0, 0);
        let calib_end = s.times[7 * 365];
        let spi_series = spi(&acc, 90, s.times[0], calib_end).unwrap();
        let onsets = spi_onset(&spi_series);
        assert!(
            onsets.iter().any(|&o| o >= onset && o <= onset + 200),
            "no SPI onset after injected drought at {onset}: {onsets:?}"
        );
    }

    #[test]
    fn onset_out_of_range_is_an_error() {
        let cfg = base_cfg();
        assert!(inject(&cfg, &ChangeSpec::drought(5000, 0.5, 1.0)).is_err());
    }
}
