//! Splitting raw trajectories into bounded-length, bounded-duration instances.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{span_s, RawTrajectory, TrajInstance, TrajPoint};
use crate::error::{Result, TrajError};
use crate::seed;

/// How oversized segments are reduced to `n_max` points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Downsample {
    /// Evenly spaced indices; first and last point always kept.
    #[default]
    Even,
    /// Endpoints plus a seeded uniform draw of interior points.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Minutes.
    pub m_min: f64,
    /// Minutes.
    pub m_max: f64,
    #[serde(default)]
    pub downsample: Downsample,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self::geolife()
    }
}

impl PartitionConfig {
    pub fn geolife() -> Self {
        Self {
            n_min: 20,
            n_max: 50,
            m_min: 2.0,
            m_max: 10.0,
            downsample: Downsample::Even,
        }
    }

    pub fn grab() -> Self {
        Self {
            m_max: 30.0,
            ..Self::geolife()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(TrajError::config(format!(
                "need 0 < n_min <= n_max, got {} and {}",
                self.n_min, self.n_max
            )));
        }
        if !(self.m_min > 0.0 && self.m_min <= self.m_max && self.m_max.is_finite()) {
            return Err(TrajError::config(format!(
                "need 0 < m_min <= m_max, got {} and {}",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub traj_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartitionReport {
    pub trajectories: usize,
    pub kept: usize,
    pub downsampled: usize,
    /// Whole trajectories not longer than `m_min`.
    pub dropped_short: usize,
    /// Segments or trajectories with fewer than `n_min` points.
    pub dropped_sparse: usize,
    pub rejected: Vec<Rejection>,
}

/// Evenly spaced indices `round(i (n-1) / (m-1))`, endpoints included.
pub fn downsample_even(n: usize, m: usize) -> Vec<usize> {
    match m {
        0 => Vec::new(),
        1 => vec![0],
        _ if m >= n => (0..n).collect(),
        _ => (0..m).map(|i| (i * (n - 1) + (m - 1) / 2) / (m - 1)).collect(),
    }
}

fn downsample_random(n: usize, m: usize, seed: u64, key: &[u64]) -> Vec<usize> {
    if m >= n || m < 2 {
        return downsample_even(n, m);
    }
    let mut rng = seed::rng(seed, key);
    let mut inner: Vec<usize> = sample(&mut rng, n - 2, m - 2)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    inner.sort_unstable();
    let mut idx = Vec::with_capacity(m);
    idx.push(0);
    idx.extend(inner);
    idx.push(n - 1);
    idx
}

/// Splits `points` into consecutive windows of `window_s` seconds anchored at the first point.
fn windows(points: &[TrajPoint], window_s: i64) -> Vec<&[TrajPoint]> {
    let mut out = Vec::new();
    let Some(first) = points.first() else {
        return out;
    };
    let mut start = 0;
    let mut bucket = 0;
    for (i, p) in points.iter().enumerate() {
        let b = (p.t - first.t) / window_s;
        if b != bucket {
            out.push(&points[start..i]);
            start = i;
            bucket = b;
        }
    }
    out.push(&points[start..]);
    out
}

/// Partitions raw trajectories into instances without context.
///
/// Trajectories longer than `m_max` are cut into `m_max`-minute windows,
/// remainders included. Trajectories with duration in `(m_min, m_max]` are
/// taken whole. Either way a piece with fewer than `n_min` points is dropped
/// and one with more than `n_max` points is downsampled to exactly `n_max`.
/// Windows get ids `{traj_id}#{window}`; whole trajectories keep their id.
pub fn partition(
    raws: &[RawTrajectory],
    cfg: &PartitionConfig,
) -> Result<(Vec<TrajInstance>, PartitionReport)> {
    cfg.validate()?;
    let m_max_s = cfg.m_max * 60.0;
    let m_min_s = cfg.m_min * 60.0;
    let window_s = m_max_s.round() as i64;
    if window_s < 1 {
        return Err(TrajError::config("m_max must span at least one second"));
    }
    let mut out = Vec::new();
    let mut report = PartitionReport {
        trajectories: raws.len(),
        ..Default::default()
    };
    for (ti, raw) in raws.iter().enumerate() {
        if raw.points.is_empty() {
            report.rejected.push(Rejection {
                traj_id: raw.id.clone(),
                reason: "no points".into(),
            });
            continue;
        }
        if let Some(k) = raw.points.windows(2).position(|w| w[1].t <= w[0].t) {
            report.rejected.push(Rejection {
                traj_id: raw.id.clone(),
                reason: format!(
                    "timestamps not strictly increasing at point {} (t = {} after {})",
                    k + 1,
                    raw.points[k + 1].t,
                    raw.points[k].t
                ),
            });
            continue;
        }
        let duration = raw.duration_s() as f64;
        let windowed = duration > m_max_s;
        let pieces: Vec<&[TrajPoint]> = if windowed {
            windows(&raw.points, window_s)
        } else if duration > m_min_s {
            vec![&raw.points[..]]
        } else {
            report.dropped_short += 1;
            continue;
        };
        for (si, piece) in pieces.into_iter().enumerate() {
            let n = piece.len();
            if n < cfg.n_min {
                report.dropped_sparse += 1;
                continue;
            }
            let points = if n > cfg.n_max {
                report.downsampled += 1;
                let idx = match cfg.downsample {
                    Downsample::Even => downsample_even(n, cfg.n_max),
                    Downsample::Random { seed } => downsample_random(
                        n,
                        cfg.n_max,
                        seed,
                        &[seed::stream::DOWNSAMPLE, ti as u64, si as u64],
                    ),
                };
                idx.into_iter().map(|i| piece[i]).collect()
            } else {
                piece.to_vec()
            };
            debug_assert!(span_s(&points) <= span_s(&raw.points));
            out.push(TrajInstance {
                id: if windowed {
                    format!("{}#{si}", raw.id)
                } else {
                    raw.id.clone()
                },
                label: raw.label,
                points,
                context: Vec::new(),
            });
            report.kept += 1;
        }
    }
    Ok((out, report))
}
