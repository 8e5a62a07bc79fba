//! Per-point model inputs and their train-split z-scoring.
//!
//! Trajectory channels are `[lon, lat, Δt]` (Δt of the first point is 0),
//! optionally followed by `[speed, turn]` derived from consecutive points.
//! Context counts go through `log1p` before z-scoring.

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use super::geo::local_displacement_m;
use super::{TrajInstance, CONTEXT_DIM, FEATURE_NAMES};
use crate::error::{Result, TrajError};

/// Minimum displacement (meters) for a step to define a heading.
const HEADING_EPS_M: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Append speed (m/s) and turn angle (radians) channels.
    #[serde(default)]
    pub kinematics: bool,
}

pub fn traj_channels(cfg: &FeatureConfig) -> Vec<&'static str> {
    let mut ch = vec!["lon", "lat", "dt"];
    if cfg.kinematics {
        ch.extend(["speed", "turn"]);
    }
    ch
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + tau
    } else {
        w
    }
}

/// Un-normalized trajectory channels, one row per point.
pub(crate) fn raw_traj_rows(inst: &TrajInstance, cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let pts = &inst.points;
    let n = pts.len();
    let mut speed = vec![0.0; n];
    let mut turn = vec![0.0; n];
    if cfg.kinematics && n >= 2 {
        let mut prev_heading: Option<f64> = None;
        for i in 1..n {
            let (dx, dy) = local_displacement_m(pts[i - 1].lon, pts[i - 1].lat, pts[i].lon, pts[i].lat);
            let dist = dx.hypot(dy);
            let dt = (pts[i].t - pts[i - 1].t) as f64;
            speed[i] = dist / dt;
            let heading = if dist > HEADING_EPS_M {
                Some(dy.atan2(dx))
            } else {
                prev_heading
            };
            if let (Some(h), Some(p)) = (heading, prev_heading) {
                turn[i] = wrap_angle(h - p);
            }
            prev_heading = heading;
        }
        speed[0] = speed[1];
    }
    (0..n)
        .map(|i| {
            let dt = if i == 0 { 0 } else { pts[i].t - pts[i - 1].t };
            let mut row = vec![pts[i].lon, pts[i].lat, dt as f64];
            if cfg.kinematics {
                row.extend([speed[i], turn[i]]);
            }
            row
        })
        .collect()
}

/// A normalized instance ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// `n × f_traj`
    pub traj: Tensor<f64>,
    /// `n × 24`
    pub env: Tensor<f64>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.traj.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training-split statistics; stored alongside checkpoints so inputs can be
/// reproduced and inverted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub features: FeatureConfig,
    pub traj_mean: Vec<f64>,
    pub traj_std: Vec<f64>,
    pub ctx_mean: Vec<f64>,
    pub ctx_std: Vec<f64>,
    /// Names of channels whose training variance was zero (divisor forced to 1).
    pub zero_variance: Vec<String>,
}

fn moments(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let rows: Vec<Vec<f64>> = rows.collect();
    let n = rows.len();
    let mut mean = vec![0.0; width];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for r in &rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    (mean, std, n)
}

impl NormStats {
    /// Fits statistics on training instances, which must carry context.
    pub fn fit(train: &[TrajInstance], features: FeatureConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(TrajError::data("cannot fit normalization on an empty split"));
        }
        if let Some(bad) = train.iter().find(|i| i.context.len() != i.points.len()) {
            return Err(TrajError::data(format!(
                "instance {} has no assigned context",
                bad.id
            )));
        }
        let channels = traj_channels(&features);
        let (traj_mean, mut traj_std, _) = moments(
            train.iter().flat_map(|i| raw_traj_rows(i, &features)),
            channels.len(),
        );
        let (ctx_mean, mut ctx_std, _) = moments(
            train
                .iter()
                .flat_map(|i| i.context.iter().map(|r| r.iter().map(|v| v.ln_1p()).collect())),
            CONTEXT_DIM,
        );
        let mut zero_variance = Vec::new();
        for (s, name) in traj_std.iter_mut().zip(&channels) {
            if *s == 0.0 {
                *s = 1.0;
                zero_variance.push(name.to_string());
            }
        }
        for (s, name) in ctx_std.iter_mut().zip(FEATURE_NAMES) {
            if *s == 0.0 {
                *s = 1.0;
                zero_variance.push(name.to_string());
            }
        }
        if !zero_variance.is_empty() {
            log::warn!(
                "zero-variance features use divisor 1: {}",
                zero_variance.join(", ")
            );
        }
        Ok(Self {
            features,
            traj_mean,
            traj_std,
            ctx_mean,
            ctx_std,
            zero_variance,
        })
    }

    pub fn traj_dim(&self) -> usize {
        self.traj_mean.len()
    }

    /// Normalizes one instance from its raw points and counts.
    pub fn apply(&self, inst: &TrajInstance) -> Result<Sample> {
        let n = inst.points.len();
        if n == 0 {
            return Err(TrajError::data(format!("instance {} is empty", inst.id)));
        }
        if inst.context.len() != n {
            return Err(TrajError::data(format!(
                "instance {} has {} context rows for {n} points",
                inst.id,
                inst.context.len()
            )));
        }
        let f = self.traj_dim();
        let mut traj = Vec::with_capacity(n * f);
        for row in raw_traj_rows(inst, &self.features) {
            for ((v, m), s) in row.iter().zip(&self.traj_mean).zip(&self.traj_std) {
                traj.push((v - m) / s);
            }
        }
        let mut env = Vec::with_capacity(n * CONTEXT_DIM);
        for row in &inst.context {
            for ((v, m), s) in row.iter().zip(&self.ctx_mean).zip(&self.ctx_std) {
                env.push((v.ln_1p() - m) / s);
            }
        }
        Ok(Sample {
            id: inst.id.clone(),
            label: inst.label,
            traj: Tensor::matrix(n, f, traj)?,
            env: Tensor::matrix(n, CONTEXT_DIM, env)?,
        })
    }

    pub fn apply_all(&self, instances: &[TrajInstance]) -> Result<Vec<Sample>> {
        instances.iter().map(|i| self.apply(i)).collect()
    }

    /// Recovers raw trajectory channel values from one normalized row.
    pub fn invert_traj(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.traj_mean)
            .zip(&self.traj_std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    /// Recovers raw context counts from one normalized row.
    pub fn invert_context(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.ctx_mean)
            .zip(&self.ctx_std)
            .map(|((z, m), s)| (z * s + m).exp_m1())
            .collect()
    }
}
