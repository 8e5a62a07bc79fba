//! Square-cell grid over a dataset's bounding rectangle and the per-cell
//! geospatial feature table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::geo::{meters_per_deg_lat, meters_per_deg_lon};
use super::{ContextRow, TrajInstance, TrajPoint, CONTEXT_DIM};
use crate::error::{Result, TrajError};

/// Slack absorbing floating-point error in extents that are exact multiples of the cell size.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mbr {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl Mbr {
    pub fn new(lon_min: f64, lat_min: f64, lon_max: f64, lat_max: f64) -> Self {
        Self {
            lon_min,
            lat_min,
            lon_max,
            lat_max,
        }
    }

    /// Smallest rectangle containing every point.
    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a TrajPoint>) -> Option<Self> {
        let mut it = points.into_iter();
        let p = it.next()?;
        let mut m = Self::new(p.lon, p.lat, p.lon, p.lat);
        for p in it {
            m.lon_min = m.lon_min.min(p.lon);
            m.lat_min = m.lat_min.min(p.lat);
            m.lon_max = m.lon_max.max(p.lon);
            m.lat_max = m.lat_max.max(p.lat);
        }
        Some(m)
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.lon_min..=self.lon_max).contains(&lon) && (self.lat_min..=self.lat_max).contains(&lat)
    }

    pub fn center_lat(&self) -> f64 {
        0.5 * (self.lat_min + self.lat_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Located {
    pub cell: Cell,
    /// The point lay outside the MBR and was moved to the nearest boundary cell.
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub mbr: Mbr,
    pub cell_size_m: f64,
    pub rows: usize,
    pub cols: usize,
    pub meters_per_deg_lon: f64,
    pub meters_per_deg_lat: f64,
}

/// Builds a grid whose scale factors are fixed at the MBR's center latitude.
pub fn build_grid(mbr: Mbr, cell_size_m: f64) -> Result<Grid> {
    let finite = [mbr.lon_min, mbr.lat_min, mbr.lon_max, mbr.lat_max]
        .iter()
        .all(|v| v.is_finite());
    if !finite || mbr.lon_max <= mbr.lon_min || mbr.lat_max <= mbr.lat_min {
        return Err(TrajError::config(format!(
            "degenerate bounding rectangle {mbr:?}"
        )));
    }
    if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
        return Err(TrajError::config(format!(
            "cell size must be positive, got {cell_size_m}"
        )));
    }
    let mx = meters_per_deg_lon(mbr.center_lat());
    let my = meters_per_deg_lat();
    let cells = |extent_m: f64| ((extent_m / cell_size_m - CEIL_SLACK).ceil() as usize).max(1);
    Ok(Grid {
        mbr,
        cell_size_m,
        rows: cells((mbr.lat_max - mbr.lat_min) * my),
        cols: cells((mbr.lon_max - mbr.lon_min) * mx),
        meters_per_deg_lon: mx,
        meters_per_deg_lat: my,
    })
}

impl Grid {
    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn locate(&self, lon: f64, lat: f64) -> Located {
        let dy = (lat - self.mbr.lat_min) * self.meters_per_deg_lat;
        let dx = (lon - self.mbr.lon_min) * self.meters_per_deg_lon;
        let index = |d: f64, n: usize| {
            let i = (d / self.cell_size_m).floor();
            if i < 0.0 {
                0
            } else {
                (i as usize).min(n - 1)
            }
        };
        Located {
            cell: Cell {
                row: index(dy, self.rows),
                col: index(dx, self.cols),
            },
            clamped: !self.mbr.contains(lon, lat),
        }
    }

    pub fn cell(&self, lon: f64, lat: f64) -> Cell {
        self.locate(lon, lat).cell
    }

    /// Geographic center of a cell.
    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        (
            self.mbr.lon_min + (cell.col as f64 + 0.5) * self.cell_size_m / self.meters_per_deg_lon,
            self.mbr.lat_min + (cell.row as f64 + 0.5) * self.cell_size_m / self.meters_per_deg_lat,
        )
    }
}

/// Cell → 24 non-negative counts; absent cells read as zeros.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    cells: BTreeMap<Cell, ContextRow>,
}

impl FeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cell: Cell, row: ContextRow) -> Result<()> {
        if let Some(v) = row.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(TrajError::data(format!(
                "feature count {v} at cell ({}, {}) is not a finite non-negative number",
                cell.row, cell.col
            )));
        }
        self.cells.insert(cell, row);
        Ok(())
    }

    pub fn get(&self, cell: Cell) -> ContextRow {
        self.cells.get(&cell).copied().unwrap_or([0.0; CONTEXT_DIM])
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Cell, &ContextRow)> {
        self.cells.iter()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssignReport {
    pub points: usize,
    pub clamped: usize,
}

/// Looks up each point's cell row; points outside the MBR are counted and clamped.
pub fn assign_context(
    mut inst: TrajInstance,
    grid: &Grid,
    table: &FeatureTable,
) -> (TrajInstance, AssignReport) {
    let mut report = AssignReport::default();
    inst.context = inst
        .points
        .iter()
        .map(|p| {
            let loc = grid.locate(p.lon, p.lat);
            report.points += 1;
            report.clamped += loc.clamped as usize;
            table.get(loc.cell)
        })
        .collect();
    if report.clamped > 0 {
        log::warn!(
            "instance {}: {} of {} points outside the grid were clamped",
            inst.id,
            report.clamped,
            report.points
        );
    }
    (inst, report)
}
