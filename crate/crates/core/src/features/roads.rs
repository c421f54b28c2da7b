//! Road network and traffic rasterization.

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, GridSpec};

/// Spacing of the points sampled along a polyline when testing which cells
/// it crosses.
pub const SAMPLE_STEP_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoadCategory {
    Roads,
    MajorRoads,
}

impl FromStr for RoadCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Roads" => Ok(Self::Roads),
            "MajorRoads" => Ok(Self::MajorRoads),
            other => Err(Error::InvalidParameter(format!("unknown road category {other:?}"))),
        }
    }
}

impl fmt::Display for RoadCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Roads => "Roads",
            Self::MajorRoads => "MajorRoads",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSegment {
    pub id: String,
    pub category: RoadCategory,
    pub points: Vec<GeoPoint>,
}

/// Parses `LINESTRING (lon lat, lon lat, ...)`.
pub fn parse_wkt_linestring(s: &str) -> Result<Vec<GeoPoint>> {
    let bad = || Error::InvalidParameter(format!("not a WKT LINESTRING: {s:?}"));
    let t = s.trim();
    let rest = t
        .get(..10)
        .filter(|head| head.eq_ignore_ascii_case("LINESTRING"))
        .map(|_| t[10..].trim())
        .ok_or_else(bad)?;
    let body = rest
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(bad)?;
    body.split(',')
        .map(|pair| {
            let mut it = pair.split_whitespace();
            let lon: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let lat: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if it.next().is_some() {
                return Err(bad());
            }
            GeoPoint::new(lat, lon)
        })
        .collect()
}

pub fn to_wkt_linestring(points: &[GeoPoint]) -> String {
    let coords: Vec<String> = points.iter().map(|p| format!("{:.7} {:.7}", p.lon, p.lat)).collect();
    format!("LINESTRING ({})", coords.join(", "))
}

/// Row-major indices of the cells a polyline passes through, sorted and
/// deduplicated, or `None` for a zero-length polyline.
pub fn segment_cells(points: &[GeoPoint], grid: &GridSpec) -> Option<Vec<usize>> {
    let local: Vec<(f64, f64)> = points.iter().map(|p| grid.frame.to_local(*p)).collect();
    let length: f64 = local
        .windows(2)
        .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
        .sum();
    if local.len() < 2 || length <= 0.0 {
        return None;
    }
    let mut cells = Vec::new();
    let mut visit = |x: f64, y: f64| {
        if let Some((r, c)) = grid.cell_of_local(x, y) {
            cells.push(r * grid.width + c);
        }
    };
    for w in local.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = ((b.0 - a.0).hypot(b.1 - a.1) / SAMPLE_STEP_M).ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            visit(a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        }
    }
    cells.sort_unstable();
    cells.dedup();
    Some(cells)
}

/// Cells crossed by each road segment on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentIncidence {
    pub width: usize,
    pub height: usize,
    /// Per segment, in input order; empty for skipped or distant segments.
    pub cells: Vec<Vec<usize>>,
}

impl SegmentIncidence {
    pub fn new(segments: &[RoadSegment], grid: &GridSpec) -> Self {
        let cells = segments
            .iter()
            .map(|s| {
                segment_cells(&s.points, grid).unwrap_or_else(|| {
                    warn!("skipping zero-length road segment {}", s.id);
                    Vec::new()
                })
            })
            .collect();
        Self {
            width: grid.width,
            height: grid.height,
            cells,
        }
    }

    /// Indices of segments touching the grid at all.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().enumerate().filter(|(_, c)| !c.is_empty()).map(|(i, _)| i)
    }

    /// Per-cell unweighted mean of per-segment feature triples; `None` marks a
    /// segment without a reading. Output is `(H, W, 3)` row-major.
    pub fn traffic(&self, readings: &[Option<[f64; 3]>]) -> Vec<f64> {
        let n = self.width * self.height;
        let mut sum = vec![0.0; n * 3];
        let mut count = vec![0u32; n];
        for (cells, r) in self.cells.iter().zip(readings) {
            let Some(r) = r else { continue };
            for &c in cells {
                count[c] += 1;
                for k in 0..3 {
                    sum[c * 3 + k] += r[k];
                }
            }
        }
        for (c, &k) in count.iter().enumerate() {
            if k > 0 {
                for v in &mut sum[c * 3..c * 3 + 3] {
                    *v /= k as f64;
                }
            }
        }
        sum
    }

    /// Per-cell counts of `Roads` and `MajorRoads` segments, `(H, W, 2)`.
    pub fn roads(&self, categories: &[RoadCategory]) -> Vec<f64> {
        let mut out = vec![0.0; self.width * self.height * 2];
        for (cells, cat) in self.cells.iter().zip(categories) {
            let k = match cat {
                RoadCategory::Roads => 0,
                RoadCategory::MajorRoads => 1,
            };
            for &c in cells {
                out[c * 2 + k] += 1.0;
            }
        }
        out
    }
}

/// Averages `(jam_factor, speed, historical_speed)` of the segments crossing
/// each cell; `(0, 0, 0)` where none does. Output is `(H, W, 3)` row-major.
pub fn grid_traffic(segments: &[(Vec<GeoPoint>, [f64; 3])], grid: &GridSpec) -> Vec<f64> {
    let roads: Vec<RoadSegment> = segments
        .iter()
        .enumerate()
        .map(|(i, (pts, _))| RoadSegment {
            id: i.to_string(),
            category: RoadCategory::Roads,
            points: pts.clone(),
        })
        .collect();
    let readings: Vec<Option<[f64; 3]>> = segments.iter().map(|(_, r)| Some(*r)).collect();
    SegmentIncidence::new(&roads, grid).traffic(&readings)
}

/// Counts road segments per category crossing each cell, `(H, W, 2)`.
pub fn grid_roads(segments: &[RoadSegment], grid: &GridSpec) -> Vec<f64> {
    let cats: Vec<RoadCategory> = segments.iter().map(|s| s.category).collect();
    SegmentIncidence::new(segments, grid).roads(&cats)
}
