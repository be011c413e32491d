//! Assembly of model inputs from a standardized series and a neighborhood.
//!
//! The forecaster ingests, per step, the standardized value of every
//! (member site, channel) pair plus an explicit observed/missing mask
//! channel for each pair; masked values enter as 0 (the training mean).

use crate::error::Result;
use crate::timeseries::{MeteoSeries, NeighborhoodSet};

/// One input column: which (site, channel) it carries and whether it is
/// the value or the mask slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnInfo {
    pub site: usize,
    pub channel: usize,
    pub is_mask: bool,
}

/// Row-major T × dim model input matrix with provenance, plus the raw
/// target series used for loss and verification.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub t_len: usize,
    pub dim: usize,
    pub x: Vec<f64>,
    pub columns: Vec<ColumnInfo>,
    /// Index of the target site in the parent series.
    pub target_site: usize,
    /// Raw (unstandardized) target-channel values at the target site.
    pub target_values: Vec<f64>,
    pub target_observed: Vec<bool>,
    /// Channel names of the parent series, for ablation by name.
    pub channel_names: Vec<String>,
}

impl FeatureSet {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.x[t * self.dim..(t + 1) * self.dim]
    }

    /// Copy of the input matrix with every value column of `channel`
    /// replaced by the climatological mean (0 in standardized units);
    /// mask columns are left observed.
    pub fn ablate_channel(&self, channel: &str) -> Result<FeatureSet> {
        let c = self
            .channel_names
            .iter()
            .position(|n| n == channel)
            .ok_or_else(|| crate::error::Error::Lookup(format!("unknown channel {channel:?}")))?;
        let mut out = self.clone();
        for (j, col) in self.columns.iter().enumerate() {
            if col.channel == c && !col.is_mask {
                for t in 0..self.t_len {
                    out.x[t * self.dim + j] = 0.0;
                }
            }
        }
        Ok(out)
    }
}

/// Builds the input matrix over the neighborhood members from the
/// standardized series, and the raw targets from the unstandardized one.
pub fn build_features(
    std_series: &MeteoSeries,
    raw_series: &MeteoSeries,
    hood: &NeighborhoodSet,
    target_channel: &str,
) -> Result<FeatureSet> {
    let t_len = std_series.n_times();
    let n_chan = std_series.channels.len();
    let member_idx: Vec<usize> = hood
        .members
        .iter()
        .map(|m| std_series.site_index(&m.id))
        .collect::<Result<_>>()?;
    let dim = member_idx.len() * n_chan * 2;
    let mut columns = Vec::with_capacity(dim);
    for &s in &member_idx {
        for c in 0..n_chan {
            columns.push(ColumnInfo {
                site: s,
                channel: c,
                is_mask: false,
            });
        }
    }
    for &s in &member_idx {
        for c in 0..n_chan {
            columns.push(ColumnInfo {
                site: s,
                channel: c,
                is_mask: true,
            });
        }
    }
    let mut x = Vec::with_capacity(t_len * dim);
    for t in 0..t_len {
        for col in &columns[..member_idx.len() * n_chan] {
            x.push(if std_series.is_observed(col.site, t, col.channel) {
                std_series.value(col.site, t, col.channel)
            } else {
                0.0
            });
        }
        for col in &columns[member_idx.len() * n_chan..] {
            x.push(if std_series.is_observed(col.site, t, col.channel) {
                1.0
            } else {
                0.0
            });
        }
    }
    let target_site = raw_series.site_index(&hood.target.id)?;
    let tc = raw_series.channel_index(target_channel)?;
    let mut target_values = Vec::with_capacity(t_len);
    let mut target_observed = Vec::with_capacity(t_len);
    for t in 0..t_len {
        target_values.push(raw_series.value(target_site, t, tc));
        target_observed.push(raw_series.is_observed(target_site, t, tc));
    }
    Ok(FeatureSet {
        t_len,
        dim,
        x,
        columns,
        target_site,
        target_values,
        target_observed,
        channel_names: std_series.channels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{build_neighborhood, MeteoSeries, Site};
    use chrono::{Duration, TimeZone, Utc};

    fn two_site_series() -> MeteoSeries {
        let t0 = Utc.with_ymd_and_hms(2001, 1, 1, 0, 0, 0).unwrap();
        let times: Vec<_> = (0..3).map(|i| t0 + Duration::days(i)).collect();
        let sites = vec![
            Site::new("A", 24.0, 121.0).unwrap(),
            Site::new("B", 24.01, 121.0).unwrap(),
        ];
        // channels P, T; site A has a gap in T at t=1.
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for s in 0..2 {
            for t in 0..3 {
                for c in 0..2 {
                    values.push((s * 100 + t * 10 + c) as f64);
                    mask.push(!(s == 0 && t == 1 && c == 1));
                }
            }
        }
        MeteoSeries::new(
            sites,
            times,
            vec!["P".into(), "T".into()],
            vec!["mm".into(), "degC".into()],
            values,
            mask,
        )
        .unwrap()
    }

    #[test]
    fn feature_layout_and_mask_channel() {
        let series = two_site_series();
        let hood = build_neighborhood(&series, "A", 50.0).unwrap();
        let f = build_features(&series, &series, &hood, "P").unwrap();
        assert_eq!(f.dim, 2 * 2 * 2);
        assert_eq!(f.t_len, 3);
        // Value slot of (A, T) at the gap is 0, mask slot is 0.
        let val_col = f
            .columns
            .iter()
            .position(|c| c.site == 0 && c.channel == 1 && !c.is_mask)
            .unwrap();
        let mask_col = f
            .columns
            .iter()
            .position(|c| c.site == 0 && c.channel == 1 && c.is_mask)
            .unwrap();
        assert_eq!(f.row(1)[val_col], 0.0);
        assert_eq!(f.row(1)[mask_col], 0.0);
        assert_eq!(f.row(0)[mask_col], 1.0);
        // Raw targets echo channel P at site A.
        assert_eq!(f.target_values, vec![0.0, 10.0, 20.0]);
    }

    #[test]
    fn ablation_zeroes_only_value_columns_of_channel() {
        let series = two_site_series();
        let hood = build_neighborhood(&series, "A", 50.0).unwrap();
        let f = build_features(&series, &series, &hood, "P").unwrap();
        let abl = f.ablate_channel("T").unwrap();
        for (j, col) in f.columns.iter().enumerate() {
            for t in 0..f.t_len {
                let orig = f.row(t)[j];
                let new = abl.row(t)[j];
                if col.channel == 1 && !col.is_mask {
                    assert_eq!(new, 0.0);
                } else {
                    assert_eq!(new, orig);
                }
            }
        }
        assert!(f.ablate_channel("nope").is_err());
    }
}
