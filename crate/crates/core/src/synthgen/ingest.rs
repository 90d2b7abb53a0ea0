//! GPS fixes to grid trajectories: bbox binning, last-fix resampling, gap and adjacency splitting.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::{Dataset, Status, Trajectory, DEPART_BINS, SPEED_BINS};
use crate::error::{Error, Result};
use crate::netgrid::{ActionId, GridSpec, Network, Position};

/// Zero-based column indices of the four consumed fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub vehicle: usize,
    pub timestamp: usize,
    pub lon: usize,
    pub lat: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            vehicle: 0,
            timestamp: 1,
            lon: 2,
            lat: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    /// `[min_lon, min_lat, max_lon, max_lat]`.
    pub bbox: [f64; 4],
    #[serde(default = "default_resample")]
    pub resample_minutes: f64,
    #[serde(default = "default_gap")]
    pub gap_intervals: i64,
    #[serde(default)]
    pub columns: ColumnMap,
    #[serde(default = "default_header")]
    pub header: bool,
}

fn default_resample() -> f64 {
    10.0
}

fn default_gap() -> i64 {
    2
}

fn default_header() -> bool {
    true
}

impl IngestConfig {
    pub fn new(bbox: [f64; 4]) -> Self {
        Self {
            bbox,
            resample_minutes: default_resample(),
            gap_intervals: default_gap(),
            columns: ColumnMap::default(),
            header: default_header(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) || self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "ingest.bbox {:?} is empty or not finite",
                self.bbox
            )));
        }
        if !(self.resample_minutes > 0.0) {
            return Err(Error::Config(
                "ingest.resample_minutes must be positive".into(),
            ));
        }
        if self.gap_intervals < 1 {
            return Err(Error::Config(
                "ingest.gap_intervals must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub unparsable: usize,
    pub outside_bbox: usize,
    pub dropped_short: usize,
    pub trajectories: usize,
}

#[derive(Debug, Clone, Copy)]
struct Fix {
    t: i64,
    lon: f64,
    lat: f64,
}

/// Epoch seconds (integer or fractional) or ISO-8601; naive times are read as UTC.
fn parse_time(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.floor() as i64);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_local().and_utc().timestamp());
    }
    [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
    .map(|dt| dt.and_utc().timestamp())
}

fn haversine_km(a: Fix, b: Fix) -> f64 {
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * 6371.0088 * h.sqrt().asin()
}

fn cell_of(grid: &GridSpec, bbox: &[f64; 4], lon: f64, lat: f64) -> Option<Position> {
    let [x0, y0, x1, y1] = *bbox;
    if !(x0..=x1).contains(&lon) || !(y0..=y1).contains(&lat) {
        return None;
    }
    let col = (((lon - x0) / (x1 - x0)) * grid.width as f64).floor() as usize;
    let row = (((lat - y0) / (y1 - y0)) * grid.height as f64).floor() as usize;
    Some(grid.cell(row.min(grid.height - 1), col.min(grid.width - 1)))
}

struct Segment {
    positions: Vec<Position>,
    fixes: Vec<Fix>,
}

pub fn ingest_str(
    text: &str,
    grid: GridSpec,
    cfg: &IngestConfig,
) -> Result<(Dataset, IngestReport)> {
    grid.validate()?;
    cfg.validate()?;
    let mut report = IngestReport::default();
    let mut by_vehicle: BTreeMap<String, Vec<Fix>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(cfg.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let c = cfg.columns;
    let need = c.vehicle.max(c.timestamp).max(c.lon).max(c.lat) + 1;
    for rec in rdr.records() {
        report.rows += 1;
        let parsed = rec.ok().filter(|r| r.len() >= need).and_then(|r| {
            let fix = Fix {
                t: parse_time(&r[c.timestamp])?,
                lon: r[c.lon].parse().ok().filter(|v: &f64| v.is_finite())?,
                lat: r[c.lat].parse().ok().filter(|v: &f64| v.is_finite())?,
            };
            Some((r[c.vehicle].to_string(), fix))
        });
        match parsed {
            Some((v, fix)) if v.is_empty() => {
                let _ = fix;
                report.unparsable += 1;
            }
            Some((v, fix)) => by_vehicle.entry(v).or_default().push(fix),
            None => report.unparsable += 1,
        }
    }
    if report.unparsable > 0 {
        log::warn!(
            "skipped {} unparsable rows of {}",
            report.unparsable,
            report.rows
        );
    }
    if report.unparsable * 2 > report.rows {
        return Err(Error::Ingest {
            unparsable: report.unparsable,
            total: report.rows,
        });
    }

    let interval = (cfg.resample_minutes * 60.0).round().max(1.0) as i64;
    let mut per_vehicle: Vec<Vec<Segment>> = Vec::new();
    for fixes in by_vehicle.values_mut() {
        fixes.sort_by_key(|f| f.t);
        // Last fix in each interval.
        let mut binned: BTreeMap<i64, (Position, Fix)> = BTreeMap::new();
        for &f in fixes.iter() {
            match cell_of(&grid, &cfg.bbox, f.lon, f.lat) {
                Some(cell) => {
                    binned.insert(f.t.div_euclid(interval), (cell, f));
                }
                None => report.outside_bbox += 1,
            }
        }
        let mut segments = Vec::new();
        let mut cur: Option<(i64, Segment)> = None;
        for (k, (cell, fix)) in binned {
            cur = Some(match cur {
                Some((k0, mut seg)) => {
                    let prev = *seg.positions.last().unwrap();
                    let gap = k - k0;
                    if gap > cfg.gap_intervals || grid.action_between(prev, cell).is_none() {
                        segments.push(seg);
                        (
                            k,
                            Segment {
                                positions: vec![cell],
                                fixes: vec![fix],
                            },
                        )
                    } else {
                        seg.positions
                            .extend(std::iter::repeat(prev).take((gap - 1) as usize));
                        seg.positions.push(cell);
                        seg.fixes.push(fix);
                        (k, seg)
                    }
                }
                None => (
                    k,
                    Segment {
                        positions: vec![cell],
                        fixes: vec![fix],
                    },
                ),
            });
        }
        segments.extend(cur.map(|(_, s)| s));
        per_vehicle.push(segments);
    }

    let mut trajectories = Vec::new();
    let mut users = 0;
    for segments in per_vehicle {
        let kept: Vec<Segment> = segments
            .into_iter()
            .filter(|s| {
                let ok = s.positions.len() >= 2;
                report.dropped_short += (!ok) as usize;
                ok
            })
            .collect();
        if kept.is_empty() {
            continue;
        }
        for seg in kept {
            let first = seg.fixes[0];
            let speed = seg.fixes.get(1).map_or(0.0, |&second| {
                let hours = (second.t - first.t) as f64 / 3600.0;
                if hours > 0.0 {
                    haversine_km(first, second) / hours
                } else {
                    0.0
                }
            });
            let depart_bin =
                DateTime::from_timestamp(first.t, 0).map_or(0, |d| d.hour() as usize) % DEPART_BINS;
            let actions = seg
                .positions
                .windows(2)
                .map(|w| grid.action_between(w[0], w[1]).unwrap())
                .collect::<Vec<ActionId>>();
            trajectories.push(Trajectory {
                traj_id: trajectories.len() as u64,
                user_id: users,
                depart_bin,
                speed_bin: (speed.floor().max(0.0) as usize).min(SPEED_BINS - 1),
                destination: *seg.positions.last().unwrap(),
                positions: seg.positions,
                actions,
                status: Status::Complete,
            });
        }
        users += 1;
    }
    report.trajectories = trajectories.len();
    let ds = Dataset::new(Network::Grid(grid), users.max(1), trajectories)?;
    Ok((ds, report))
}

pub fn ingest_csv(
    path: &Path,
    grid: GridSpec,
    cfg: &IngestConfig,
) -> Result<(Dataset, IngestReport)> {
    ingest_str(&std::fs::read_to_string(path)?, grid, cfg)
}
