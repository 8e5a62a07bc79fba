//! CSV readers and writers for raw trajectories and feature tables.

use std::collections::HashMap;
use std::io::{Read, Write};

use super::grid::{Cell, FeatureTable};
use super::{ContextRow, RawTrajectory, TrajPoint, CONTEXT_DIM, FEATURE_NAMES};
use crate::error::{Result, TrajError};

const RAW_HEADER: [&str; 5] = ["traj_id", "lon", "lat", "t", "label"];

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let field = rec.get(i).ok_or_else(|| TrajError::Parse {
        line,
        msg: format!("missing field {what}"),
    })?;
    field.trim().parse().map_err(|e| TrajError::Parse {
        line,
        msg: format!("bad {what} {field:?}: {e}"),
    })
}

fn check_header(rec: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = rec.iter().map(str::trim).collect();
    if got != expected {
        return Err(TrajError::Parse {
            line: 1,
            msg: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

/// Reads `traj_id,lon,lat,t,label` rows; trajectories keep first-appearance order
/// and points keep file order.
pub fn read_raw_csv<R: Read>(reader: R) -> Result<Vec<RawTrajectory>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    check_header(rdr.headers()?, &RAW_HEADER)?;
    let mut out: Vec<RawTrajectory> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != RAW_HEADER.len() {
            return Err(TrajError::Parse {
                line,
                msg: format!("expected {} fields, found {}", RAW_HEADER.len(), rec.len()),
            });
        }
        let id = rec[0].trim().to_string();
        let p = TrajPoint::new(
            parse(&rec, 1, line, "lon")?,
            parse(&rec, 2, line, "lat")?,
            parse(&rec, 3, line, "t")?,
        );
        p.validate().map_err(|e| TrajError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let label: usize = parse(&rec, 4, line, "label")?;
        match index.get(&id) {
            Some(&k) => {
                let traj = &mut out[k];
                if traj.label != label {
                    return Err(TrajError::Parse {
                        line,
                        msg: format!("trajectory {id} changes label from {} to {label}", traj.label),
                    });
                }
                traj.points.push(p);
            }
            None => {
                index.insert(id.clone(), out.len());
                out.push(RawTrajectory {
                    id,
                    points: vec![p],
                    label,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_raw_csv<W: Write>(writer: W, trajs: &[RawTrajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RAW_HEADER)?;
    for traj in trajs {
        for p in &traj.points {
            w.write_record([
                traj.id.clone(),
                p.lon.to_string(),
                p.lat.to_string(),
                p.t.to_string(),
                traj.label.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn table_header() -> Vec<&'static str> {
    let mut h = vec!["row", "col"];
    h.extend(FEATURE_NAMES);
    h
}

/// Reads `row,col,<24 feature names>` rows.
pub fn read_feature_table<R: Read>(reader: R) -> Result<FeatureTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = table_header();
    check_header(rdr.headers()?, &header)?;
    let mut table = FeatureTable::new();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(TrajError::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let cell = Cell {
            row: parse(&rec, 0, line, "row")?,
            col: parse(&rec, 1, line, "col")?,
        };
        let mut row: ContextRow = [0.0; CONTEXT_DIM];
        for (k, v) in row.iter_mut().enumerate() {
            *v = parse(&rec, k + 2, line, FEATURE_NAMES[k])?;
        }
        table.insert(cell, row).map_err(|e| TrajError::Parse {
            line,
            msg: e.to_string(),
        })?;
    }
    Ok(table)
}

pub fn write_feature_table<W: Write>(writer: W, table: &FeatureTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(table_header())?;
    for (cell, row) in table.iter() {
        let mut rec = vec![cell.row.to_string(), cell.col.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
