//! Trajectory ingestion: partitioning into bounded instances, grid-based
//! geospatial context lookup, normalization, and dataset splitting.

mod archive;
mod geo;
mod grid;
mod io;
mod normalize;
mod partition;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrajError};

pub use archive::{read_archive, write_archive, ARCHIVE_FORMAT, ARCHIVE_VERSION};
pub use geo::{local_displacement_m, meters_per_deg_lat, meters_per_deg_lon, EARTH_RADIUS_M};
pub use grid::{assign_context, build_grid, AssignReport, Cell, FeatureTable, Grid, Located, Mbr};
pub use io::{read_feature_table, read_raw_csv, write_feature_table, write_raw_csv};
pub use normalize::{traj_channels, FeatureConfig, NormStats, Sample};
pub use partition::{downsample_even, partition, Downsample, PartitionConfig, PartitionReport, Rejection};
pub use split::{half_budget, make_fewshot, make_imbalanced, split, DatasetSplits};

/// Number of geospatial context features per point.
pub const CONTEXT_DIM: usize = 24;

/// Context feature names in table column order.
pub const FEATURE_NAMES: [&str; CONTEXT_DIM] = [
    "signals",
    "crossing",
    "junction",
    "parking",
    "fuel",
    "bus",
    "railway",
    "airport",
    "forest",
    "park",
    "retail",
    "residential",
    "commercial",
    "industrial",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "footway",
    "link",
    "cycleway",
    "motorway",
    "service",
    "steps",
];

pub type ContextRow = [f64; CONTEXT_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub lon: f64,
    pub lat: f64,
    /// Seconds since the epoch.
    pub t: i64,
}

impl TrajPoint {
    pub fn new(lon: f64, lat: f64, t: i64) -> Self {
        Self { lon, lat, t }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-180.0..=180.0).contains(&self.lon) || !(-90.0..=90.0).contains(&self.lat) {
            return Err(TrajError::data(format!(
                "coordinate ({}, {}) out of WGS84 range",
                self.lon, self.lat
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTrajectory {
    pub id: String,
    pub points: Vec<TrajPoint>,
    pub label: usize,
}

impl RawTrajectory {
    /// Time span in seconds between the first and last point.
    pub fn duration_s(&self) -> i64 {
        span_s(&self.points)
    }

    pub fn is_time_ordered(&self) -> bool {
        strictly_increasing(&self.points)
    }
}

/// One partitioned trajectory with its per-point context rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajInstance {
    pub id: String,
    pub label: usize,
    pub points: Vec<TrajPoint>,
    /// Raw non-negative counts, one row per point; empty until context is assigned.
    pub context: Vec<ContextRow>,
}

impl TrajInstance {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_context(&self) -> bool {
        !self.context.is_empty()
    }

    pub fn validate(&self, cfg: &PartitionConfig) -> Result<()> {
        let n = self.points.len();
        if n < cfg.n_min || n > cfg.n_max {
            return Err(TrajError::data(format!(
                "instance {} has {n} points, expected [{}, {}]",
                self.id, cfg.n_min, cfg.n_max
            )));
        }
        if !strictly_increasing(&self.points) {
            return Err(TrajError::data(format!(
                "instance {} timestamps are not strictly increasing",
                self.id
            )));
        }
        if self.has_context() && self.context.len() != n {
            return Err(TrajError::data(format!(
                "instance {} has {} context rows for {n} points",
                self.id,
                self.context.len()
            )));
        }
        if self.context.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TrajError::data(format!(
                "instance {} has a negative or non-finite context entry",
                self.id
            )));
        }
        Ok(())
    }
}

pub(crate) fn span_s(points: &[TrajPoint]) -> i64 {
    match (points.first(), points.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0,
    }
}

pub(crate) fn strictly_increasing(points: &[TrajPoint]) -> bool {
    points.windows(2).all(|w| w[1].t > w[0].t)
}

/// Per-class instance counts; labels at or above `n_classes` are ignored.
pub fn class_counts(instances: &[TrajInstance], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for inst in instances {
        if inst.label < n_classes {
            counts[inst.label] += 1;
        }
    }
    counts
}
