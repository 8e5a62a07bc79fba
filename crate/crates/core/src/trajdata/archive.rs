//! Instance archive: JSON Lines.
//!
//! The first line is a header `{"format":"trajcl-instances","version":1}`.
//! Every following line is one instance:
//! `{"id":..,"label":..,"points":[[lon,lat,t],..],"context":[[24 counts],..]}`.
//! Floats are written in shortest round-trip form, so reading and rewriting
//! an archive reproduces it byte for byte.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ContextRow, TrajInstance, TrajPoint};
use crate::error::{Result, TrajError};

pub const ARCHIVE_FORMAT: &str = "trajcl-instances";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: usize,
    points: Vec<(f64, f64, i64)>,
    context: Vec<ContextRow>,
}

pub fn write_archive<W: Write>(mut w: W, instances: &[TrajInstance]) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &Header {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
        },
    )?;
    w.write_all(b"\n")?;
    for inst in instances {
        let rec = Record {
            id: inst.id.clone(),
            label: inst.label,
            points: inst.points.iter().map(|p| (p.lon, p.lat, p.t)).collect(),
            context: inst.context.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive<R: BufRead>(r: R) -> Result<Vec<TrajInstance>> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| TrajError::Parse {
        line: 1,
        msg: "empty archive".into(),
    })??;
    let header: Header = serde_json::from_str(&first).map_err(|e| TrajError::Parse {
        line: 1,
        msg: format!("bad archive header: {e}"),
    })?;
    if header.format != ARCHIVE_FORMAT || header.version != ARCHIVE_VERSION {
        return Err(TrajError::Parse {
            line: 1,
            msg: format!(
                "unsupported archive {} v{}, expected {ARCHIVE_FORMAT} v{ARCHIVE_VERSION}",
                header.format, header.version
            ),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i as u64 + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| TrajError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !rec.context.is_empty() && rec.context.len() != rec.points.len() {
            return Err(TrajError::Parse {
                line: line_no,
                msg: format!(
                    "{} context rows for {} points",
                    rec.context.len(),
                    rec.points.len()
                ),
            });
        }
        out.push(TrajInstance {
            id: rec.id,
            label: rec.label,
            points: rec
                .points
                .into_iter()
                .map(|(lon, lat, t)| TrajPoint { lon, lat, t })
                .collect(),
            context: rec.context,
        });
    }
    Ok(out)
}
