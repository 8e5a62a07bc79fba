//! Synthetic confounded mobility worlds with a known generative model.
//!
//! A world is a square region tiled by Voronoi blobs, each blob belonging to
//! one of `k` zone types. A zone scales travel speed, sets a stop
//! probability and carries a fixed 24-dim count embedding that becomes the
//! context row of every cell inside it. Each zone also has a preferred mode:
//! in the train-correlated regime a trajectory's mode is drawn from its
//! start zone's preference with probability `spurious_rate`, otherwise
//! uniformly. The shifted regime always draws uniformly.
//!
//! Trajectories are random walks sampled every `interval_s` seconds. At each
//! step the walker either stops (half-normal speed) or moves at a truncated
//! normal speed scaled by the current zone, and its heading turns by a
//! normal angle whose spread depends on the mode. [`bayes_oracle`]
//! evaluates this likelihood exactly from the observed points.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Result, TrajError};
use crate::seed::{self, stream};
use crate::trajdata::{
    build_grid, local_displacement_m, meters_per_deg_lat, meters_per_deg_lon, Cell, ContextRow, FeatureTable,
    Grid, Mbr, TrajInstance, TrajPoint, CONTEXT_DIM,
};

/// Displacements shorter than this keep the previous heading, as in the feature pipeline.
const HEADING_EPS_M: f64 = 1e-6;
/// Wrapped-normal terms summed on each side of zero.
const WRAP_TERMS: i32 = 4;
/// Start time of every synthetic trajectory (2019-04-01 UTC).
const T0: i64 = 1_554_076_800;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeKinematics {
    pub name: String,
    pub speed_mps: f64,
    pub jitter_mps: f64,
    /// Standard deviation of the per-step heading change.
    pub turn_std_rad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneEffect {
    pub name: String,
    pub speed_factor: f64,
    pub stop_prob: f64,
    pub preferred_mode: usize,
}

/// Everything needed to rebuild a world bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub spurious_rate: f64,
    pub modes: Vec<ModeKinematics>,
    pub zones: Vec<ZoneEffect>,
    /// Voronoi sites per zone type.
    pub blobs_per_zone: usize,
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub extent_m: f64,
    pub cell_size_m: f64,
    /// Side of the centered square that start points are drawn from.
    pub start_extent_m: f64,
    pub interval_s: i64,
    pub min_points: usize,
    pub max_points: usize,
    pub stop_speed_sd: f64,
    /// Embedding entries are drawn from `0..=embedding_max`.
    pub embedding_max: u32,
}

impl WorldConfig {
    /// Two-mode world with `k_zones` zone types ranging from open road to congested.
    ///
    /// Faster zones prefer the faster mode, so zone-induced slowdowns look
    /// like evidence for the slower mode.
    pub fn default_for(seed: u64, k_zones: usize, spurious_rate: f64) -> Self {
        let modes = vec![
            ModeKinematics {
                name: "car".into(),
                speed_mps: 8.5,
                jitter_mps: 3.0,
                turn_std_rad: 0.20,
            },
            ModeKinematics {
                name: "motorcycle".into(),
                speed_mps: 7.5,
                jitter_mps: 3.0,
                turn_std_rad: 0.22,
            },
        ];
        let zones = (0..k_zones)
            .map(|i| {
                let f = if k_zones > 1 {
                    i as f64 / (k_zones - 1) as f64
                } else {
                    0.0
                };
                let name = match (i, k_zones) {
                    (0, _) => "open road".to_string(),
                    (i, k) if i + 1 == k => "congested".to_string(),
                    (1, 3) => "park".to_string(),
                    (i, _) => format!("zone {i}"),
                };
                ZoneEffect {
                    name,
                    speed_factor: 1.0 - 0.45 * f,
                    stop_prob: 0.02 + 0.2 * f,
                    preferred_mode: usize::from(2 * i >= k_zones),
                }
            })
            .collect();
        Self {
            seed,
            spurious_rate,
            modes,
            zones,
            blobs_per_zone: 6,
            origin_lon: 106.70,
            origin_lat: -6.30,
            extent_m: 24_000.0,
            cell_size_m: 200.0,
            start_extent_m: 8_000.0,
            interval_s: 10,
            min_points: 20,
            max_points: 30,
            stop_speed_sd: 0.3,
            embedding_max: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrajError::Config(m));
        if self.zones.len() < 2 {
            return bad(format!(
                "a world needs at least 2 zones, got {}",
                self.zones.len()
            ));
        }
        if self.modes.is_empty() {
            return bad("a world needs at least one travel mode".into());
        }
        if !(0.0..=1.0).contains(&self.spurious_rate) {
            return bad(format!("spurious_rate {} outside [0, 1]", self.spurious_rate));
        }
        for m in &self.modes {
            if !(m.speed_mps > 0.0 && m.jitter_mps > 0.0 && m.turn_std_rad > 0.0) {
                return bad(format!(
                    "mode {:?} needs positive speed, jitter and turn spread",
                    m.name
                ));
            }
        }
        for z in &self.zones {
            if !(z.speed_factor > 0.0 && z.speed_factor.is_finite()) {
                return bad(format!("zone {:?} speed factor must be positive", z.name));
            }
            if !(0.0..1.0).contains(&z.stop_prob) {
                return bad(format!("zone {:?} stop probability must lie in [0, 1)", z.name));
            }
            if z.preferred_mode >= self.modes.len() {
                return bad(format!(
                    "zone {:?} prefers unknown mode {}",
                    z.name, z.preferred_mode
                ));
            }
        }
        if self.blobs_per_zone == 0 {
            return bad("blobs_per_zone must be at least 1".into());
        }
        if !(self.cell_size_m > 0.0 && self.extent_m >= self.cell_size_m) {
            return bad("extent must cover at least one positive-size cell".into());
        }
        if !(self.start_extent_m > 0.0 && self.start_extent_m <= self.extent_m) {
            return bad("start extent must be positive and inside the world".into());
        }
        if self.interval_s <= 0 {
            return bad("sampling interval must be positive".into());
        }
        if self.min_points < 3 || self.max_points < self.min_points {
            return bad(format!(
                "point range {}..={} is invalid",
                self.min_points, self.max_points
            ));
        }
        if !self.stop_speed_sd.is_finite() || self.stop_speed_sd <= 0.0 {
            return bad("stop speed spread must be positive".into());
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.modes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub grid: Grid,
    /// Row-major zone id per cell.
    pub zone_of_cell: Vec<usize>,
    /// Context row of each zone type.
    pub embedding: Vec<ContextRow>,
    pub table: FeatureTable,
}

pub fn gen_world(seed: u64, k_zones: usize, spurious_rate: f64) -> Result<SynthWorld> {
    SynthWorld::build(WorldConfig::default_for(seed, k_zones, spurious_rate))
}

impl SynthWorld {
    pub fn build(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let k = config.zones.len();
        let mut rng = seed::rng(config.seed, &[stream::WORLD]);
        let mbr = Mbr::new(
            config.origin_lon,
            config.origin_lat,
            config.origin_lon + config.extent_m / meters_per_deg_lon(config.origin_lat),
            config.origin_lat + config.extent_m / meters_per_deg_lat(),
        );
        let grid = build_grid(mbr, config.cell_size_m)?;

        let n_sites = k * config.blobs_per_zone;
        let width = grid.cols as f64 * grid.cell_size_m;
        let height = grid.rows as f64 * grid.cell_size_m;
        let sites: Vec<(f64, f64, usize)> = (0..n_sites)
            .map(|i| (rng.gen::<f64>() * width, rng.gen::<f64>() * height, i % k))
            .collect();
        let mut zone_of_cell = Vec::with_capacity(grid.n_cells());
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let cx = (col as f64 + 0.5) * grid.cell_size_m;
                let cy = (row as f64 + 0.5) * grid.cell_size_m;
                let nearest = sites
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 - cx).powi(2) + (a.1 - cy).powi(2);
                        let db = (b.0 - cx).powi(2) + (b.1 - cy).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least two sites");
                zone_of_cell.push(nearest.2);
            }
        }
        // Voronoi cells can be thinner than a grid cell; pin each zone's first
        // site cell so every zone id occurs.
        for &(x, y, z) in sites.iter().take(k) {
            let row = ((y / grid.cell_size_m) as usize).min(grid.rows - 1);
            let col = ((x / grid.cell_size_m) as usize).min(grid.cols - 1);
            zone_of_cell[row * grid.cols + col] = z;
        }

        let mut embedding: Vec<ContextRow> = Vec::with_capacity(k);
        while embedding.len() < k {
            let mut row = [0.0; CONTEXT_DIM];
            for v in row.iter_mut() {
                *v = rng.gen_range(0..=config.embedding_max) as f64;
            }
            if !embedding.contains(&row) {
                embedding.push(row);
            }
        }
        let mut table = FeatureTable::new();
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                table.insert(Cell { row, col }, embedding[zone_of_cell[row * grid.cols + col]])?;
            }
        }
        Ok(Self {
            config,
            grid,
            zone_of_cell,
            embedding,
            table,
        })
    }

    pub fn k_zones(&self) -> usize {
        self.config.zones.len()
    }

    pub fn zone_at(&self, lon: f64, lat: f64) -> usize {
        let c = self.grid.cell(lon, lat);
        self.zone_of_cell[c.row * self.grid.cols + c.col]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.config)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::build(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    TrainCorrelated,
    TestShifted,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::TrainCorrelated => "train-correlated",
            Regime::TestShifted => "test-shifted",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Regime::TrainCorrelated => 1,
            Regime::TestShifted => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub instances: Vec<TrajInstance>,
    pub regime: Regime,
    /// Zone of each instance's first point.
    pub start_zones: Vec<usize>,
}

/// Generates `n` instances; instance `i` depends only on `(seed, regime, i)`.
pub fn gen_dataset(world: &SynthWorld, n: usize, regime: Regime, seed: u64) -> Result<SynthDataset> {
    if n == 0 {
        return Err(TrajError::config("a dataset needs at least one instance"));
    }
    let mut instances = Vec::with_capacity(n);
    let mut start_zones = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seed::rng(seed, &[stream::DATASET, regime.tag(), i as u64]);
        let (inst, z0) = gen_instance(world, regime, &mut rng, format!("{}-{seed}-{i}", regime.name()));
        instances.push(inst);
        start_zones.push(z0);
    }
    Ok(SynthDataset {
        instances,
        regime,
        start_zones,
    })
}

fn sample_mode(world: &SynthWorld, regime: Regime, z0: usize, rng: &mut ChaCha8Rng) -> usize {
    let cfg = &world.config;
    if regime == Regime::TrainCorrelated && rng.gen::<f64>() < cfg.spurious_rate {
        cfg.zones[z0].preferred_mode
    } else {
        rng.gen_range(0..cfg.modes.len())
    }
}

fn gen_instance(
    world: &SynthWorld,
    regime: Regime,
    rng: &mut ChaCha8Rng,
    id: String,
) -> (TrajInstance, usize) {
    let cfg = &world.config;
    let mbr = world.grid.mbr;
    let margin = (cfg.extent_m - cfg.start_extent_m) / 2.0;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    // A walk that leaves the world is redrawn from scratch.
    loop {
        let x = margin + rng.gen::<f64>() * cfg.start_extent_m;
        let y = margin + rng.gen::<f64>() * cfg.start_extent_m;
        let mut lat = mbr.lat_min + y / meters_per_deg_lat();
        let mut lon = mbr.lon_min + x / meters_per_deg_lon(cfg.origin_lat);
        let z0 = world.zone_at(lon, lat);
        let label = sample_mode(world, regime, z0, rng);
        let mode = &cfg.modes[label];
        let n = rng.gen_range(cfg.min_points..=cfg.max_points);
        let mut heading = rng.gen::<f64>() * TAU;
        let mut points = vec![TrajPoint::new(lon, lat, T0)];
        let mut inside = true;
        for step in 1..n {
            let zone = &cfg.zones[world.zone_at(lon, lat)];
            let speed = if rng.gen::<f64>() < zone.stop_prob {
                (cfg.stop_speed_sd * std_normal.sample(rng)).abs()
            } else {
                let mu = mode.speed_mps * zone.speed_factor;
                let sd = mode.jitter_mps * zone.speed_factor;
                loop {
                    let v = mu + sd * std_normal.sample(rng);
                    if v > 0.0 {
                        break v;
                    }
                }
            };
            heading += mode.turn_std_rad * std_normal.sample(rng);
            let dist = speed * cfg.interval_s as f64;
            let new_lat = lat + dist * heading.sin() / meters_per_deg_lat();
            let mid = 0.5 * (lat + new_lat);
            lon += dist * heading.cos() / meters_per_deg_lon(mid);
            lat = new_lat;
            if !mbr.contains(lon, lat) {
                inside = false;
                break;
            }
            points.push(TrajPoint::new(lon, lat, T0 + step as i64 * cfg.interval_s));
        }
        if !inside {
            continue;
        }
        let context = points
            .iter()
            .map(|p| world.table.get(world.grid.cell(p.lon, p.lat)))
            .collect();
        return (
            TrajInstance {
                id,
                label,
                points,
                context,
            },
            z0,
        );
    }
}

fn log_normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (TAU).ln()
}

/// Log density of one step's observed speed under a mode in a zone.
fn log_speed_density(v: f64, mode: &ModeKinematics, zone: &ZoneEffect, stop_sd: f64) -> f64 {
    let stop = zone.stop_prob.ln() + std::f64::consts::LN_2 + log_normal_pdf(v, 0.0, stop_sd);
    let mu = mode.speed_mps * zone.speed_factor;
    let sd = mode.jitter_mps * zone.speed_factor;
    // P(N(mu, sd) > 0) = erfc(-mu / (sd √2)) / 2
    let mass = 0.5 * erfc(-mu / (sd * std::f64::consts::SQRT_2));
    let moving = (1.0 - zone.stop_prob).ln() + log_normal_pdf(v, mu, sd) - mass.ln();
    log_add(stop, moving)
}

fn log_wrapped_normal(theta: f64, sd: f64) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    for k in -WRAP_TERMS..=WRAP_TERMS {
        acc = log_add(acc, log_normal_pdf(theta + TAU * k as f64, 0.0, sd));
    }
    acc
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Per-mode log likelihood of an instance's kinematics.
pub fn log_likelihoods(world: &SynthWorld, inst: &TrajInstance) -> Vec<f64> {
    let cfg = &world.config;
    let mut ll = vec![0.0; cfg.modes.len()];
    let mut prev_heading: Option<f64> = None;
    for w in inst.points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let zone = &cfg.zones[world.zone_at(a.lon, a.lat)];
        let (dx, dy) = local_displacement_m(a.lon, a.lat, b.lon, b.lat);
        let dist = dx.hypot(dy);
        let v = dist / (b.t - a.t) as f64;
        let heading = if dist > HEADING_EPS_M {
            dy.atan2(dx)
        } else {
            prev_heading.unwrap_or(0.0)
        };
        for (m, l) in cfg.modes.iter().zip(ll.iter_mut()) {
            *l += log_speed_density(v, m, zone, cfg.stop_speed_sd);
            if let Some(h) = prev_heading {
                *l += log_wrapped_normal(wrap_angle(heading - h), m.turn_std_rad);
            }
        }
        prev_heading = Some(heading);
    }
    ll
}

/// Posterior over modes under a uniform prior, using the exact step likelihood
/// at each point's zone.
pub fn bayes_oracle(world: &SynthWorld, inst: &TrajInstance) -> Vec<f64> {
    let ll = log_likelihoods(world, inst);
    let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = ll.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Fraction of instances whose oracle argmax equals the label.
pub fn oracle_accuracy(world: &SynthWorld, instances: &[TrajInstance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let hits = instances
        .iter()
        .filter(|inst| {
            let p = bayes_oracle(world, inst);
            argmax(&p) == inst.label
        })
        .count();
    hits as f64 / instances.len() as f64
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

/// Plug-in mutual information (nats) between two discrete label sequences.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0.0; ka * kb];
    let mut pa = vec![0.0; ka];
    let mut pb = vec![0.0; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1.0 / n;
        pa[x] += 1.0 / n;
        pb[y] += 1.0 / n;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let p = joint[x * kb + y];
            if p > 0.0 {
                mi += p * (p / (pa[x] * pb[y])).ln();
            }
        }
    }
    mi
}
