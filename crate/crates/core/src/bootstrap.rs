//! Purged circular block bootstrap for training-series resampling.
//!
//! Blocks are drawn with replacement from the circular index space of the
//! input series. A block is admissible only if none of its indices fall
//! inside a purged region: an excluded event window widened by `purge_gap`
//! steps on both sides. Resamples therefore never contain event data or
//! its leakage margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::timeseries::MeteoSeries;

/// A resampled series plus the source index of every output step.
#[derive(Debug, Clone)]
pub struct BootstrapSample {
    pub series: MeteoSeries,
    /// `source_indices[t]` is the input time index that produced output step t.
    pub source_indices: Vec<usize>,
}

/// Draws the block-bootstrap source indices without materializing a series.
pub fn bootstrap_indices(
    len: usize,
    excluded_windows: &[(usize, usize)],
    block_len: usize,
    purge_gap: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if block_len < 1 || block_len > len {
        return Err(Error::Config(format!(
            "block_len {block_len} must be in 1..={len}"
        )));
    }
    // A single block may fill the whole circular series, but once event
    // windows are purged the series must be long enough to leave room
    // for a block plus its leakage margin.
    if !excluded_windows.is_empty() && len <= block_len + purge_gap {
        return Err(Error::Config(format!(
            "series length {len} must exceed block_len {block_len} + purge_gap {purge_gap} \
             when event windows are excluded"
        )));
    }
    let mut purged = vec![false; len];
    for &(a, b) in excluded_windows {
        if a > b || b >= len {
            return Err(Error::Config(format!(
                "excluded index window ({a}, {b}) out of range for length {len}"
            )));
        }
        let lo = a.saturating_sub(purge_gap);
        let hi = (b + purge_gap).min(len - 1);
        for flag in purged.iter_mut().take(hi + 1).skip(lo) {
            *flag = true;
        }
    }
    let valid_starts: Vec<usize> = (0..len)
        .filter(|&s| (0..block_len).all(|j| !purged[(s + j) % len]))
        .collect();
    if valid_starts.is_empty() {
        return Err(Error::Config(
            "no admissible block start: blocks cannot avoid the purged regions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(len);
    while indices.len() < len {
        let start = valid_starts[rng.gen_range(0..valid_starts.len())];
        for j in 0..block_len {
            if indices.len() == len {
                break;
            }
            indices.push((start + j) % len);
        }
    }
    Ok(indices)
}

/// Resamples `series` with a purged circular block bootstrap.
///
/// The output has the original length and time grid; values and masks at
/// output step t are copied from input step `source_indices[t]`.
/// Deterministic per seed.
pub fn purged_block_bootstrap(
    series: &MeteoSeries,
    excluded_windows: &[(usize, usize)],
    block_len: usize,
    purge_gap: usize,
    seed: u64,
) -> Result<BootstrapSample> {
    let indices = bootstrap_indices(series.n_times(), excluded_windows, block_len, purge_gap, seed)?;
    let mut out = series.clone();
    for (t, &src) in indices.iter().enumerate() {
        for s in 0..series.sites.len() {
            for c in 0..series.channels.len() {
                out.set(s, t, c, series.value(s, src, c), series.is_observed(s, src, c));
            }
        }
    }
    Ok(BootstrapSample {
        series: out,
        source_indices: indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::Site;
    use chrono::{Duration, TimeZone, Utc};

    fn series(n: usize) -> MeteoSeries {
        let t0 = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
        let times = (0..n).map(|i| t0 + Duration::days(i as i64)).collect();
        let values: Vec<f64> = (0..n).map(|i| i as f64).collect();
        MeteoSeries::new(
            vec![Site::new("S0", 24.0, 121.0).unwrap()],
            times,
            vec!["P".into()],
            vec!["mm".into()],
            values,
            vec![true; n],
        )
        .unwrap()
    }

    #[test]
    fn whole_series_block_is_circular_copy() {
        let s = series(50);
        let out = purged_block_bootstrap(&s, &[], 50, 0, 3).unwrap();
        // A single block fills the output: a circular copy starting at a
        // sampled offset.
        let idx = &out.source_indices;
        for w in idx.windows(2) {
            assert_eq!((w[0] + 1) % 50, w[1]);
        }
    }

    #[test]
    fn block_longer_than_series_rejected() {
        let s = series(30);
        assert!(purged_block_bootstrap(&s, &[], 31, 0, 1).is_err());
        // With an excluded window the length margin is enforced.
        assert!(purged_block_bootstrap(&s, &[(0, 2)], 25, 10, 1).is_err());
    }

    #[test]
    fn same_seed_is_deterministic() {
        let s = series(200);
        let a = purged_block_bootstrap(&s, &[(40, 50)], 10, 5, 99).unwrap();
        let b = purged_block_bootstrap(&s, &[(40, 50)], 10, 5, 99).unwrap();
        assert_eq!(a.source_indices, b.source_indices);
        let c = purged_block_bootstrap(&s, &[(40, 50)], 10, 5, 100).unwrap();
        assert_ne!(a.source_indices, c.source_indices);
    }

    #[test]
    fn excluded_window_with_purge_margin_never_sampled() {
        let s = series(100);
        // Window [40, 50], purge 5: nothing in [35, 55] may appear.
        let out = purged_block_bootstrap(&s, &[(40, 50)], 10, 5, 7).unwrap();
        assert_eq!(out.source_indices.len(), 100);
        for &i in &out.source_indices {
            assert!(!(35..=55).contains(&i), "sampled purged index {i}");
        }
        // Values got copied coherently.
        for (t, &src) in out.source_indices.iter().enumerate() {
            assert_eq!(out.series.value(0, t, 0), src as f64);
        }
    }

    #[test]
    fn impossible_configuration_errors() {
        let s = series(30);
        // Purging everything leaves no admissible start.
        assert!(matches!(
            purged_block_bootstrap(&s, &[(0, 29)], 5, 0, 1).unwrap_err(),
            Error::Config(_)
        ));
        // With exclusions the series must exceed block + gap.
        assert!(purged_block_bootstrap(&s, &[(5, 6)], 20, 10, 1).is_err());
    }
}
