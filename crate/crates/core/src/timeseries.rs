//! Data model for multi-site, multi-channel meteorological series:
//! ingestion from the CSV contract, great-circle neighborhoods,
//! chronological splits, standardization, and rolling accumulation.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, Utc};

use crate::error::{Error, Result};

/// IUGG mean Earth radius, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// An observation site (station or grid cell).
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

impl Site {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Result<Self> {
        let id = id.into();
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Schema(format!("site {id}: lat {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Schema(format!("site {id}: lon {lon} outside [-180, 180]")));
        }
        Ok(Site { id, lat, lon })
    }
}

/// Great-circle (haversine) distance in km on the IUGG mean sphere.
pub fn great_circle_km(a: &Site, b: &Site) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

/// Fixed time step of a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepUnit {
    Hour,
    Day,
}

impl StepUnit {
    pub fn duration(self) -> Duration {
        match self {
            StepUnit::Hour => Duration::hours(1),
            StepUnit::Day => Duration::days(1),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hour" | "hourly" | "h" => Ok(StepUnit::Hour),
            "day" | "daily" | "d" => Ok(StepUnit::Day),
            other => Err(Error::Config(format!("unknown step unit {other:?}"))),
        }
    }
}

/// Time-indexed site × time × channel observations with a missing-value mask.
///
/// Storage is row-major over (site, time, channel). `mask` is true where a
/// value was observed; masked entries hold 0.0 and must never be read as data.
#[derive(Debug, Clone)]
pub struct MeteoSeries {
    pub sites: Vec<Site>,
    pub times: Vec<DateTime<Utc>>,
    pub channels: Vec<String>,
    pub units: Vec<String>,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl MeteoSeries {
    pub fn new(
        sites: Vec<Site>,
        times: Vec<DateTime<Utc>>,
        channels: Vec<String>,
        units: Vec<String>,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = sites.len() * times.len() * channels.len();
        if values.len() != n || mask.len() != n {
            return Err(Error::Schema(format!(
                "array shape mismatch: {} sites x {} times x {} channels needs {n} values, got {} / {} mask",
                sites.len(),
                times.len(),
                channels.len(),
                values.len(),
                mask.len()
            )));
        }
        if units.len() != channels.len() {
            return Err(Error::Schema("units and channels length differ".into()));
        }
        let mut ids: Vec<&str> = sites.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != sites.len() {
            return Err(Error::Schema("duplicate site ids".into()));
        }
        if times.len() < 2 {
            return Err(Error::Schema("series needs at least two timestamps".into()));
        }
        let step = times[1] - times[0];
        if step <= Duration::zero() {
            return Err(Error::Schema("times must be strictly increasing".into()));
        }
        for w in times.windows(2) {
            if w[1] - w[0] != step {
                return Err(Error::Schema(format!(
                    "non-uniform or non-monotone time step between {} and {}",
                    w[0], w[1]
                )));
            }
        }
        let series = MeteoSeries {
            sites,
            times,
            channels,
            units,
            values,
            mask,
        };
        Ok(series)
    }

    /// Checks physical invariants of raw (pre-standardization) data:
    /// precipitation channel "P" must be nonnegative wherever observed.
    pub fn validate_physical(&self) -> Result<()> {
        if let Some(p) = self.channels.iter().position(|c| c == "P") {
            for s in 0..self.sites.len() {
                for t in 0..self.times.len() {
                    if self.is_observed(s, t, p) && self.value(s, t, p) < 0.0 {
                        return Err(Error::Schema(format!(
                            "negative precipitation at site {} time {}",
                            self.sites[s].id, self.times[t]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn idx(&self, site: usize, t: usize, chan: usize) -> usize {
        (site * self.times.len() + t) * self.channels.len() + chan
    }

    #[inline]
    pub fn value(&self, site: usize, t: usize, chan: usize) -> f64 {
        self.values[self.idx(site, t, chan)]
    }

    #[inline]
    pub fn is_observed(&self, site: usize, t: usize, chan: usize) -> bool {
        self.mask[self.idx(site, t, chan)]
    }

    pub fn set(&mut self, site: usize, t: usize, chan: usize, value: f64, observed: bool) {
        let i = self.idx(site, t, chan);
        self.values[i] = value;
        self.mask[i] = observed;
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn step(&self) -> Duration {
        self.times[1] - self.times[0]
    }

    pub fn step_unit(&self) -> Option<StepUnit> {
        let s = self.step();
        if s == Duration::hours(1) {
            Some(StepUnit::Hour)
        } else if s == Duration::days(1) {
            Some(StepUnit::Day)
        } else {
            None
        }
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Lookup(format!("unknown channel {name:?}")))
    }

    pub fn site_index(&self, id: &str) -> Result<usize> {
        self.sites
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Lookup(format!("unknown site {id:?}")))
    }

    /// Extracts one (site, channel) as a scalar series.
    pub fn scalar(&self, site: usize, chan: usize) -> ScalarSeries {
        let mut values = Vec::with_capacity(self.n_times());
        let mut mask = Vec::with_capacity(self.n_times());
        for t in 0..self.n_times() {
            values.push(self.value(site, t, chan));
            mask.push(self.is_observed(site, t, chan));
        }
        ScalarSeries {
            times: self.times.clone(),
            values,
            mask,
        }
    }

    /// Copies a contiguous time range [start, end) into a new series.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<MeteoSeries> {
        if start >= end || end > self.n_times() {
            return Err(Error::Schema(format!(
                "invalid time slice {start}..{end} of {}",
                self.n_times()
            )));
        }
        if end - start < 2 {
            return Err(Error::Schema("time slice must keep at least two steps".into()));
        }
        let mut values = Vec::with_capacity(self.sites.len() * (end - start) * self.channels.len());
        let mut mask = Vec::with_capacity(values.capacity());
        for s in 0..self.sites.len() {
            for t in start..end {
                for c in 0..self.channels.len() {
                    values.push(self.value(s, t, c));
                    mask.push(self.is_observed(s, t, c));
                }
            }
        }
        MeteoSeries::new(
            self.sites.clone(),
            self.times[start..end].to_vec(),
            self.channels.clone(),
            self.units.clone(),
            values,
            mask,
        )
    }

    /// Writes the series in the CSV contract:
    /// `time,site_id,lat,lon,<channel>...`, one row per (time, site),
    /// empty cell = missing.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("time,site_id,lat,lon");
        for c in &self.channels {
            header.push(',');
            header.push_str(c);
        }
        writeln!(w, "{header}")?;
        for t in 0..self.n_times() {
            for (s, site) in self.sites.iter().enumerate() {
                let mut row = format!(
                    "{},{},{},{}",
                    self.times[t].format("%Y-%m-%dT%H:%M:%SZ"),
                    site.id,
                    site.lat,
                    site.lon
                );
                for c in 0..self.channels.len() {
                    row.push(',');
                    if self.is_observed(s, t, c) {
                        row.push_str(&format!("{}", self.value(s, t, c)));
                    }
                }
                writeln!(w, "{row}")?;
            }
        }
        Ok(())
    }
}

/// Single-site, single-channel view used by accumulation, SPI, and onsets.
#[derive(Debug, Clone)]
pub struct ScalarSeries {
    pub times: Vec<DateTime<Utc>>,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScalarSeries {
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

/// Loads a series from the CSV contract.
///
/// Header must be `time,site_id,lat,lon` followed by the given channel
/// schema. Times are ISO-8601 UTC, grouped arbitrarily by site but
/// strictly increasing in order of first appearance. An empty channel
/// cell marks the value missing.
pub fn load_series(path: &Path, schema: &[String]) -> Result<MeteoSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;

    {
        let headers = reader
            .headers()
            .map_err(|e| Error::Schema(format!("missing header: {e}")))?;
        let mut expect = vec!["time", "site_id", "lat", "lon"];
        expect.extend(schema.iter().map(|s| s.as_str()));
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(Error::Schema(format!(
                "header mismatch: expected {expect:?}, got {got:?}"
            )));
        }
    }

    struct RawRow {
        time: DateTime<Utc>,
        site: String,
        lat: f64,
        lon: f64,
        cells: Vec<Option<f64>>,
        line: u64,
    }

    let mut rows: Vec<RawRow> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Schema(format!("csv read: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |msg: String| Error::Parse { line, msg };
        let time_str = record.get(0).unwrap_or("");
        let time = DateTime::parse_from_rfc3339(time_str)
            .map_err(|e| parse_err(format!("bad time {time_str:?}: {e}")))?
            .with_timezone(&Utc);
        let site = record.get(1).unwrap_or("").to_string();
        if site.is_empty() {
            return Err(parse_err("empty site_id".into()));
        }
        let lat: f64 = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|e| parse_err(format!("bad lat: {e}")))?;
        let lon: f64 = record
            .get(3)
            .unwrap_or("")
            .parse()
            .map_err(|e| parse_err(format!("bad lon: {e}")))?;
        let mut cells = Vec::with_capacity(schema.len());
        for (k, _) in schema.iter().enumerate() {
            let cell = record.get(4 + k).unwrap_or("");
            if cell.is_empty() {
                cells.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|e| parse_err(format!("bad value {cell:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite value {cell:?}")));
                }
                cells.push(Some(v));
            }
        }
        rows.push(RawRow {
            time,
            site,
            lat,
            lon,
            cells,
            line,
        });
    }
    if rows.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    // Times in order of first appearance; must be strictly increasing.
    let mut times: Vec<DateTime<Utc>> = Vec::new();
    let mut time_index: HashMap<DateTime<Utc>, usize> = HashMap::new();
    let mut sites: Vec<Site> = Vec::new();
    let mut site_index: HashMap<String, usize> = HashMap::new();
    for row in &rows {
        if !time_index.contains_key(&row.time) {
            if let Some(last) = times.last() {
                if row.time <= *last {
                    return Err(Error::Schema(format!(
                        "non-monotone or duplicated timestamp {} after {} (line {})",
                        row.time, last, row.line
                    )));
                }
            }
            time_index.insert(row.time, times.len());
            times.push(row.time);
        }
        match site_index.get(&row.site) {
            None => {
                site_index.insert(row.site.clone(), sites.len());
                sites.push(Site::new(row.site.clone(), row.lat, row.lon)?);
            }
            Some(&i) => {
                if (sites[i].lat - row.lat).abs() > 1e-9 || (sites[i].lon - row.lon).abs() > 1e-9 {
                    return Err(Error::Schema(format!(
                        "site {} has inconsistent coordinates (line {})",
                        row.site, row.line
                    )));
                }
            }
        }
    }

    let n_chan = schema.len();
    let mut values = vec![0.0; sites.len() * times.len() * n_chan];
    let mut mask = vec![false; sites.len() * times.len() * n_chan];
    let mut seen = vec![false; sites.len() * times.len()];
    for row in &rows {
        let t = time_index[&row.time];
        let s = site_index[&row.site];
        if seen[s * times.len() + t] {
            return Err(Error::Schema(format!(
                "duplicated (time, site) row {} / {} (line {})",
                row.time, row.site, row.line
            )));
        }
        seen[s * times.len() + t] = true;
        for (c, cell) in row.cells.iter().enumerate() {
            let i = (s * times.len() + t) * n_chan + c;
            if let Some(v) = cell {
                values[i] = *v;
                mask[i] = true;
            }
        }
    }

    let units = schema
        .iter()
        .map(|c| default_unit(c).to_string())
        .collect();
    let series = MeteoSeries::new(sites, times, schema.to_vec(), units, values, mask)?;
    series.validate_physical()?;
    Ok(series)
}

fn default_unit(channel: &str) -> &'static str {
    match channel {
        "P" => "mm",
        "T" | "T2m" => "degC",
        "q" => "g/kg",
        _ => "1",
    }
}

/// A target site and every site within `radius_km` of it (inclusive).
#[derive(Debug, Clone)]
pub struct NeighborhoodSet {
    pub target: Site,
    pub members: Vec<Site>,
    pub radius_km: f64,
}

/// Builds the spatial neighborhood of `target_id`: all sites whose
/// great-circle distance to the target is ≤ `radius_km`. The boundary
/// counts as inside; the target itself is always a member.
pub fn build_neighborhood(
    series: &MeteoSeries,
    target_id: &str,
    radius_km: f64,
) -> Result<NeighborhoodSet> {
    let ti = series.site_index(target_id)?;
    let target = series.sites[ti].clone();
    let members = series
        .sites
        .iter()
        .filter(|s| great_circle_km(s, &target) <= radius_km)
        .cloned()
        .collect();
    Ok(NeighborhoodSet {
        target,
        members,
        radius_km,
    })
}

/// Chronological split with purged event windows.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train_end: DateTime<Utc>,
    pub val_end: DateTime<Utc>,
    pub excluded_windows: Vec<(DateTime<Utc>, DateTime<Utc>)>,
}

/// Which fold a timestamp belongs to; excluded windows belong to none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn validate(&self, series: &MeteoSeries) -> Result<()> {
        let last = *series.times.last().unwrap();
        if !(self.train_end < self.val_end && self.val_end < last) {
            return Err(Error::Config(format!(
                "split must satisfy train_end < val_end < last time ({} / {} / {last})",
                self.train_end, self.val_end
            )));
        }
        for (a, b) in &self.excluded_windows {
            if a > b {
                return Err(Error::Config(format!("excluded window {a}..{b} is inverted")));
            }
        }
        Ok(())
    }

    pub fn is_excluded(&self, t: DateTime<Utc>) -> bool {
        self.excluded_windows.iter().any(|(a, b)| t >= *a && t <= *b)
    }

    pub fn fold_of(&self, t: DateTime<Utc>) -> Option<Fold> {
        if self.is_excluded(t) {
            None
        } else if t <= self.train_end {
            Some(Fold::Train)
        } else if t <= self.val_end {
            Some(Fold::Val)
        } else {
            Some(Fold::Test)
        }
    }

    /// Excluded windows as inclusive index ranges on the series grid.
    pub fn excluded_index_windows(&self, series: &MeteoSeries) -> Vec<(usize, usize)> {
        self.excluded_windows
            .iter()
            .filter_map(|(a, b)| {
                let mut lo = None;
                let mut hi = None;
                for (i, t) in series.times.iter().enumerate() {
                    if t >= a && t <= b {
                        if lo.is_none() {
                            lo = Some(i);
                        }
                        hi = Some(i);
                    }
                }
                lo.zip(hi)
            })
            .collect()
    }
}

/// Per-channel training-fold mean and sd, kept for inversion.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ChannelStats {
    pub fn apply(&self, chan: usize, x: f64) -> f64 {
        (x - self.mean[chan]) / self.sd[chan]
    }

    pub fn invert(&self, chan: usize, z: f64) -> f64 {
        z * self.sd[chan] + self.mean[chan]
    }
}

/// Standardizes every channel with statistics computed on the training
/// fold only (excluded windows removed), then transforms the whole
/// series. Masked entries are left untouched.
pub fn standardize(series: &MeteoSeries, split: &SplitSpec) -> Result<(MeteoSeries, ChannelStats)> {
    split.validate(series)?;
    let n_chan = series.channels.len();
    let mut mean = vec![0.0; n_chan];
    let mut sd = vec![0.0; n_chan];
    for c in 0..n_chan {
        let mut vals = Vec::new();
        for s in 0..series.sites.len() {
            for t in 0..series.n_times() {
                if series.is_observed(s, t, c) && split.fold_of(series.times[t]) == Some(Fold::Train)
                {
                    vals.push(series.value(s, t, c));
                }
            }
        }
        if vals.len() < 2 {
            return Err(Error::Schema(format!(
                "channel {} has {} observed training values; needs at least 2",
                series.channels[c],
                vals.len()
            )));
        }
        let m = crate::math::mean(&vals);
        let s = crate::math::sample_sd(&vals);
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::DegenerateChannel(format!(
                "channel {} has zero spread in the training fold",
                series.channels[c]
            )));
        }
        mean[c] = m;
        sd[c] = s;
    }
    let stats = ChannelStats {
        channels: series.channels.clone(),
        mean,
        sd,
    };
    let mut out = series.clone();
    for s in 0..series.sites.len() {
        for t in 0..series.n_times() {
            for c in 0..n_chan {
                if series.is_observed(s, t, c) {
                    out.set(s, t, c, stats.apply(c, series.value(s, t, c)), true);
                }
            }
        }
    }
    out.units = series.channels.iter().map(|_| "std".to_string()).collect();
    Ok((out, stats))
}

/// Transforms a series with existing training statistics (the deployment
/// path: incoming data is standardized with the stats the model was
/// trained under).
pub fn standardize_with(series: &MeteoSeries, stats: &ChannelStats) -> Result<MeteoSeries> {
    if stats.channels != series.channels {
        return Err(Error::Schema(format!(
            "channel stats {:?} do not match series channels {:?}",
            stats.channels, series.channels
        )));
    }
    let mut out = series.clone();
    for s in 0..series.sites.len() {
        for t in 0..series.n_times() {
            for c in 0..series.channels.len() {
                if series.is_observed(s, t, c) {
                    out.set(s, t, c, stats.apply(c, series.value(s, t, c)), true);
                }
            }
        }
    }
    out.units = series.channels.iter().map(|_| "std".to_string()).collect();
    Ok(out)
}

/// Trailing rolling sum of one channel over `window` steps.
///
/// Entry t is the sum over [t − window + 1, t]; it is masked while the
/// window is incomplete or when any contributor is missing.
pub fn accumulate(series: &MeteoSeries, channel: &str, window: usize) -> Result<MeteoSeries> {
    if window < 1 {
        return Err(Error::Config("accumulation window must be >= 1".into()));
    }
    let c = series.channel_index(channel)?;
    let t_len = series.n_times();
    let n_sites = series.sites.len();
    let mut values = vec![0.0; n_sites * t_len];
    let mut mask = vec![false; n_sites * t_len];
    for s in 0..n_sites {
        for t in 0..t_len {
            if t + 1 < window {
                continue;
            }
            let mut sum = 0.0;
            let mut ok = true;
            for k in t + 1 - window..=t {
                if !series.is_observed(s, k, c) {
                    ok = false;
                    break;
                }
                sum += series.value(s, k, c);
            }
            if ok {
                values[s * t_len + t] = sum;
                mask[s * t_len + t] = true;
            }
        }
    }
    MeteoSeries::new(
        series.sites.clone(),
        series.times.clone(),
        vec![channel.to_string()],
        vec![series.units[c].clone()],
        values,
        mask,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn t0() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2000-01-01T00:00:00Z")
            .unwrap()
            .with_timezone(&Utc)
    }

    pub(crate) fn daily_times(n: usize) -> Vec<DateTime<Utc>> {
        (0..n).map(|i| t0() + Duration::days(i as i64)).collect()
    }

    fn single_site_series(p: &[Option<f64>]) -> MeteoSeries {
        let times = daily_times(p.len());
        let values: Vec<f64> = p.iter().map(|v| v.unwrap_or(0.0)).collect();
        let mask: Vec<bool> = p.iter().map(|v| v.is_some()).collect();
        MeteoSeries::new(
            vec![Site::new("S0", 24.0, 121.0).unwrap()],
            times,
            vec!["P".into()],
            vec!["mm".into()],
            values,
            mask,
        )
        .unwrap()
    }

    fn write_csv_fixture(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{body}").unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_series_echoes_three_rows() {
        let f = write_csv_fixture(
            "time,site_id,lat,lon,P\n\
             2000-01-01T00:00:00Z,S0,24.0,121.0,0\n\
             2000-01-02T00:00:00Z,S0,24.0,121.0,1.2\n\
             2000-01-03T00:00:00Z,S0,24.0,121.0,0\n",
        );
        let s = load_series(f.path(), &["P".to_string()]).unwrap();
        assert_eq!(s.n_times(), 3);
        assert_eq!(s.value(0, 1, 0), 1.2);
        assert!((0..3).all(|t| s.is_observed(0, t, 0)));
    }

    #[test]
    fn load_series_masks_gap_rows() {
        let f = write_csv_fixture(
            "time,site_id,lat,lon,P\n\
             2000-01-01T00:00:00Z,S0,24.0,121.0,0.5\n\
             2000-01-02T00:00:00Z,S0,24.0,121.0,\n\
             2000-01-03T00:00:00Z,S0,24.0,121.0,2\n",
        );
        let s = load_series(f.path(), &["P".to_string()]).unwrap();
        assert!(s.is_observed(0, 0, 0));
        assert!(!s.is_observed(0, 1, 0));
        assert!(s.is_observed(0, 2, 0));
    }

    #[test]
    fn load_series_rejects_duplicate_timestamp() {
        let f = write_csv_fixture(
            "time,site_id,lat,lon,P\n\
             2000-01-01T00:00:00Z,S0,24.0,121.0,0.5\n\
             2000-01-01T00:00:00Z,S0,24.0,121.0,1.0\n",
        );
        let err = load_series(f.path(), &["P".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn load_series_reports_line_of_malformed_row() {
        let f = write_csv_fixture(
            "time,site_id,lat,lon,P\n\
             2000-01-01T00:00:00Z,S0,24.0,121.0,0.5\n\
             2000-01-02T00:00:00Z,S0,24.0,121.0,oops\n",
        );
        match load_series(f.path(), &["P".to_string()]).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn great_circle_identity_and_antipode() {
        let a = Site::new("a", 10.0, 20.0).unwrap();
        assert_eq!(great_circle_km(&a, &a), 0.0);
        let p = Site::new("p", 0.0, 0.0).unwrap();
        let q = Site::new("q", 0.0, 180.0).unwrap();
        let half = std::f64::consts::PI * EARTH_RADIUS_KM;
        assert!((great_circle_km(&p, &q) - half).abs() < 1e-6);
    }

    #[test]
    fn great_circle_matches_independent_haversine() {
        // Independent straight-line evaluation of the haversine formula.
        let a = Site::new("a", 25.0, 121.5).unwrap();
        let b = Site::new("b", 25.0, 121.6).unwrap();
        let to_rad = std::f64::consts::PI / 180.0;
        let (la1, lo1, la2, lo2) = (25.0 * to_rad, 121.5 * to_rad, 25.0 * to_rad, 121.6 * to_rad);
        let h = ((la2 - la1) / 2.0).sin().powi(2)
            + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
        let oracle = 2.0 * 6371.0088 * h.sqrt().asin();
        let got = great_circle_km(&a, &b);
        assert!(((got - oracle) / oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn neighborhood_radius_zero_and_huge() {
        let mut series = single_site_series(&[Some(0.0), Some(1.0)]);
        series.sites = vec![
            Site::new("S0", 24.0, 121.0).unwrap(),
            Site::new("S1", 24.5, 121.0).unwrap(),
        ];
        // Rebuild with two sites for the lookup; values unused here.
        let times = daily_times(2);
        let series = MeteoSeries::new(
            series.sites.clone(),
            times,
            vec!["P".into()],
            vec!["mm".into()],
            vec![0.0; 4],
            vec![true; 4],
        )
        .unwrap();
        let hood = build_neighborhood(&series, "S0", 0.0).unwrap();
        assert_eq!(hood.members.len(), 1);
        assert_eq!(hood.members[0].id, "S0");
        let hood = build_neighborhood(&series, "S0", 1e9).unwrap();
        assert_eq!(hood.members.len(), 2);
        assert!(build_neighborhood(&series, "nope", 1.0).is_err());
    }

    #[test]
    fn neighborhood_matches_bruteforce_at_10km() {
        let coords = [
            (24.00, 121.00),
            (24.05, 121.00),
            (24.20, 121.00),
            (24.00, 121.08),
            (25.00, 122.00),
        ];
        let sites: Vec<Site> = coords
            .iter()
            .enumerate()
            .map(|(i, (la, lo))| Site::new(format!("S{i}"), *la, *lo).unwrap())
            .collect();
        let times = daily_times(2);
        let n = sites.len();
        let series = MeteoSeries::new(
            sites.clone(),
            times,
            vec!["P".into()],
            vec!["mm".into()],
            vec![0.0; 2 * n],
            vec![true; 2 * n],
        )
        .unwrap();
        let hood = build_neighborhood(&series, "S0", 10.0).unwrap();
        let expect: Vec<String> = sites
            .iter()
            .filter(|s| great_circle_km(s, &sites[0]) <= 10.0)
            .map(|s| s.id.clone())
            .collect();
        let got: Vec<String> = hood.members.iter().map(|s| s.id.clone()).collect();
        assert_eq!(got, expect);
        assert!(got.contains(&"S0".to_string()));
        assert!(!got.contains(&"S4".to_string()));
    }

    fn split_for(series: &MeteoSeries, train_frac: f64) -> SplitSpec {
        let n = series.n_times();
        let tr = ((n as f64 * train_frac) as usize).max(1).min(n - 3);
        SplitSpec {
            train_end: series.times[tr],
            val_end: series.times[tr + 1],
            excluded_windows: vec![],
        }
    }

    #[test]
    fn standardize_two_point_channel_by_hand() {
        // Training fold = first 3 days; channel values 2, 4, then masked.
        let series = single_site_series(&[Some(2.0), Some(4.0), None, Some(6.0), Some(8.0)]);
        let split = SplitSpec {
            train_end: series.times[2],
            val_end: series.times[3],
            excluded_windows: vec![],
        };
        let (out, stats) = standardize(&series, &split).unwrap();
        assert!((stats.mean[0] - 3.0).abs() < 1e-12);
        let sd = ((2.0f64 - 3.0).powi(2) + (4.0f64 - 3.0).powi(2)).sqrt(); // n-1 = 1
        assert!((stats.sd[0] - sd).abs() < 1e-12);
        let x = out.value(0, 0, 0);
        let y = out.value(0, 1, 0);
        assert!((x + y).abs() < 1e-12, "symmetric around zero");
        assert!(x < 0.0 && y > 0.0);
    }

    #[test]
    fn standardize_training_moments_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<Option<f64>> = (0..400).map(|_| Some(rng.gen::<f64>() * 10.0 - 3.0)).collect();
        let series = single_site_series(&vals);
        let split = split_for(&series, 0.8);
        let (out, stats) = standardize(&series, &split).unwrap();
        let mut train: Vec<f64> = Vec::new();
        for t in 0..series.n_times() {
            if split.fold_of(series.times[t]) == Some(Fold::Train) {
                train.push(out.value(0, t, 0));
            }
        }
        assert!(crate::math::mean(&train).abs() < 1e-10);
        assert!((crate::math::sample_sd(&train) - 1.0).abs() < 1e-10);
        for t in 0..series.n_times() {
            let back = stats.invert(0, out.value(0, t, 0));
            let orig = series.value(0, t, 0);
            assert!((back - orig).abs() <= 1e-10 * orig.abs().max(1.0));
        }
    }

    #[test]
    fn standardize_rejects_constant_channel() {
        let series = single_site_series(&[Some(5.0); 10]);
        let split = split_for(&series, 0.6);
        assert!(matches!(
            standardize(&series, &split).unwrap_err(),
            Error::DegenerateChannel(_)
        ));
    }

    #[test]
    fn accumulate_window_one_is_identity_and_hand_case() {
        let series = single_site_series(&[Some(1.0), Some(2.0), Some(3.0)]);
        let acc = accumulate(&series, "P", 1).unwrap();
        for t in 0..3 {
            assert!(acc.is_observed(0, t, 0));
            assert_eq!(acc.value(0, t, 0), series.value(0, t, 0));
        }
        let acc2 = accumulate(&series, "P", 2).unwrap();
        assert!(!acc2.is_observed(0, 0, 0));
        assert_eq!(acc2.value(0, 1, 0), 3.0);
        assert_eq!(acc2.value(0, 2, 0), 5.0);
        assert!(accumulate(&series, "nope", 1).is_err());
    }

    #[test]
    fn accumulate_matches_naive_trailing_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<Option<f64>> = (0..500)
            .map(|_| {
                if rng.gen::<f64>() < 0.05 {
                    None
                } else {
                    Some(rng.gen::<f64>() * 12.0)
                }
            })
            .collect();
        let series = single_site_series(&vals);
        let w = 90;
        let acc = accumulate(&series, "P", w).unwrap();
        for t in 0..series.n_times() {
            // Naive O(T*W) oracle.
            if t + 1 < w {
                assert!(!acc.is_observed(0, t, 0));
                continue;
            }
            let mut sum = 0.0;
            let mut ok = true;
            for k in t + 1 - w..=t {
                match vals[k] {
                    Some(v) => sum += v,
                    None => ok = false,
                }
            }
            assert_eq!(acc.is_observed(0, t, 0), ok);
            if ok {
                assert!((acc.value(0, t, 0) - sum).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn csv_round_trip_preserves_values_and_mask() {
        let series = single_site_series(&[Some(0.25), None, Some(7.5), Some(0.0)]);
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&buf).unwrap();
        f.flush().unwrap();
        let back = load_series(f.path(), &["P".to_string()]).unwrap();
        for t in 0..4 {
            assert_eq!(back.is_observed(0, t, 0), series.is_observed(0, t, 0));
            if back.is_observed(0, t, 0) {
                assert_eq!(back.value(0, t, 0), series.value(0, t, 0));
            }
        }
    }

    proptest! {
        #[test]
        fn great_circle_symmetric_and_triangle(
            lat1 in -89.0f64..89.0, lon1 in -179.0f64..179.0,
            lat2 in -89.0f64..89.0, lon2 in -179.0f64..179.0,
            lat3 in -89.0f64..89.0, lon3 in -179.0f64..179.0,
        ) {
            let a = Site::new("a", lat1, lon1).unwrap();
            let b = Site::new("b", lat2, lon2).unwrap();
            let c = Site::new("c", lat3, lon3).unwrap();
            let ab = great_circle_km(&a, &b);
            let ba = great_circle_km(&b, &a);
            prop_assert!((ab - ba).abs() <= 1e-9);
            prop_assert!(ab >= 0.0);
            let ac = great_circle_km(&a, &c);
            let cb = great_circle_km(&c, &b);
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn neighborhood_monotone_in_radius(r1 in 0.0f64..4000.0, r2 in 0.0f64..4000.0) {
            let coords = [(24.0, 121.0), (24.3, 121.2), (25.5, 120.0), (30.0, 115.0)];
            let sites: Vec<Site> = coords.iter().enumerate()
                .map(|(i, (la, lo))| Site::new(format!("S{i}"), *la, *lo).unwrap())
                .collect();
            let n = sites.len();
            let series = MeteoSeries::new(
                sites, daily_times(2),
                vec!["P".into()], vec!["mm".into()],
                vec![0.0; 2 * n], vec![true; 2 * n],
            ).unwrap();
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let small = build_neighborhood(&series, "S0", lo).unwrap();
            let large = build_neighborhood(&series, "S0", hi).unwrap();
            for m in &small.members {
                prop_assert!(large.members.iter().any(|s| s.id == m.id));
            }
        }
    }
}
