//! GeoJSON export of per-point prototype assignments and causal mask values.

use anyhow::{bail, Result};
use serde::Serialize;
use trajcl::trainer::Trained;
use trajcl::trajdata::TrajInstance;

#[derive(Debug, Serialize)]
pub struct FeatureCollection {
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub features: Vec<Feature>,
}

#[derive(Debug, Serialize)]
pub struct Feature {
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub geometry: Point,
    pub properties: Properties,
}

#[derive(Debug, Serialize)]
pub struct Point {
    #[serde(rename = "type")]
    pub kind: &'static str,
    /// `[lon, lat]`.
    pub coordinates: [f64; 2],
}

#[derive(Debug, Serialize)]
pub struct Properties {
    pub traj_id: String,
    pub point_index: usize,
    pub label: usize,
    pub prototype_id: usize,
    pub m_alpha: f64,
}

/// One Point feature per trajectory point, scored by the eval-mode model.
pub fn feature_collection(model: &Trained, instances: &[TrajInstance]) -> Result<FeatureCollection> {
    let mut features = Vec::new();
    for inst in instances {
        let sample = model.norm.apply(inst)?;
        let prepared = model.model.prepare(&sample)?;
        let Some((ids, m_alpha)) = model.model.point_masks(&prepared)? else {
            bail!(
                "checkpoint (mode {}, variant {}) has no prototype masks to export",
                model.model.cfg.mode.name(),
                model.model.cfg.variant.name()
            );
        };
        for (i, p) in inst.points.iter().enumerate() {
            features.push(Feature {
                kind: "Feature",
                geometry: Point {
                    kind: "Point",
                    coordinates: [p.lon, p.lat],
                },
                properties: Properties {
                    traj_id: inst.id.clone(),
                    point_index: i,
                    label: inst.label,
                    prototype_id: ids[i],
                    m_alpha: m_alpha[i],
                },
            });
        }
    }
    Ok(FeatureCollection {
        kind: "FeatureCollection",
        features,
    })
}
