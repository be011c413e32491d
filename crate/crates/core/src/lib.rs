//! Coupled precipitation forecasting and sequential early warning.
//!
//! The crate couples a small recurrent forecaster, trained with a
//! reverse-martingale hidden-state regularizer, to a calibrated
//! Shiryaev-Roberts change detector driven by the backward-coherence
//! residual of the hidden trajectory. It ships the full desk-scale
//! workflow: data model and ingestion, the forecaster and its two-part
//! predictive distribution, forecast and event verification, detector
//! calibration by Monte-Carlo run-length matching, baseline detectors,
//! and a synthetic hydromet generator with injectable drought and flood
//! change points.

pub mod bootstrap;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod dist;
pub mod error;
pub mod features;
pub mod linalg;
pub mod math;
pub mod pipeline;
pub mod rnn;
pub mod synth;
pub mod timeseries;
pub mod verify;

pub use config::RunConfig;
pub use detector::{AlarmTrace, DefectSeries, DetectorReport, NullCalibration, SrThreshold};
pub use dist::TwoPartDist;
pub use error::{Error, Result};
pub use rnn::{CellKind, HiddenTrajectory, RmModel, TrainConfig};
pub use synth::{ChangeKind, ChangeSpec, SynthConfig};
pub use timeseries::{
    ChannelStats, MeteoSeries, NeighborhoodSet, ScalarSeries, Site, SplitSpec, StepUnit,
};
pub use verify::{ContingencyTable, SpiSeries};

/// Derives an independent RNG seed for a named sub-stream of `base`.
///
/// SplitMix64 finalizer over `base ^ stream`; used wherever one logical
/// seed has to drive several non-overlapping random streams (model init
/// vs. bootstrap draw, calibration segment index, ...).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
