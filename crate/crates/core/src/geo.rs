//! Local euclidean frames, regular grids and point/grid resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meters per degree of latitude in the equirectangular frame.
pub const METERS_PER_DEG_LAT: f64 = 111_320.0;

/// Weights below ε make a cell empty.
pub const WEIGHT_EPSILON: f64 = 1e-12;

/// Kernel contributions are skipped beyond this many σ; `exp(-38²/2)`
/// underflows `f64`, so the cutoff never changes a result.
pub const KERNEL_CUTOFF_SIGMAS: f64 = 38.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidParameter(format!(
                "coordinates out of range: lat {lat}, lon {lon}"
            )));
        }
        Ok(Self { lat, lon })
    }
}

/// Equirectangular tangent frame: x east, y north, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoPoint,
    pub meters_per_deg_lat: f64,
    pub meters_per_deg_lon: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self {
            origin,
            meters_per_deg_lat: METERS_PER_DEG_LAT,
            meters_per_deg_lon: METERS_PER_DEG_LAT * origin.lat.to_radians().cos(),
        }
    }

    pub fn to_local(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * self.meters_per_deg_lon,
            (p.lat - self.origin.lat) * self.meters_per_deg_lat,
        )
    }

    pub fn to_geo(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + y / self.meters_per_deg_lat,
            lon: self.origin.lon + x / self.meters_per_deg_lon,
        }
    }
}

/// Source grid that bilinear resampling can read from.
pub trait SourceGrid {
    /// (rows, cols) of the value array, row-major.
    fn dims(&self) -> (usize, usize);

    /// Fractional (row, col) index of a location; integer values land on
    /// sample positions (cell centers).
    fn fractional_index(&self, p: GeoPoint) -> (f64, f64);
}

/// Regular north-up grid in a local frame. Row 0 is the northern edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub frame: LocalFrame,
    pub resolution_m: f64,
    pub width: usize,
    pub height: usize,
    pub center: GeoPoint,
}

impl GridSpec {
    /// Grid centered on `center`, in the frame whose origin is `center`.
    pub fn centered(center: GeoPoint, resolution_m: f64, width: usize, height: usize) -> Result<Self> {
        Self::in_frame(LocalFrame::new(center), center, resolution_m, width, height)
    }

    pub fn in_frame(
        frame: LocalFrame,
        center: GeoPoint,
        resolution_m: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid extent must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(resolution_m > 0.0 && resolution_m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid resolution must be positive, got {resolution_m}"
            )));
        }
        Ok(Self {
            frame,
            resolution_m,
            width,
            height,
            center,
        })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn extent_m(&self) -> (f64, f64) {
        (self.width as f64 * self.resolution_m, self.height as f64 * self.resolution_m)
    }

    fn center_local(&self) -> (f64, f64) {
        self.frame.to_local(self.center)
    }

    /// (west, south, east, north) edges in local meters.
    pub fn bounds_local(&self) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center_local();
        let (w, h) = self.extent_m();
        (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn cell_center_local(&self, row: usize, col: usize) -> (f64, f64) {
        let (cx, cy) = self.center_local();
        (
            cx + (col as f64 + 0.5 - self.width as f64 / 2.0) * self.resolution_m,
            cy + (self.height as f64 / 2.0 - row as f64 - 0.5) * self.resolution_m,
        )
    }

    pub fn cell_center_geo(&self, row: usize, col: usize) -> GeoPoint {
        let (x, y) = self.cell_center_local(row, col);
        self.frame.to_geo(x, y)
    }

    /// Cell whose half-open footprint contains the local point.
    pub fn cell_of_local(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (west, _, _, north) = self.bounds_local();
        let col = ((x - west) / self.resolution_m).floor();
        let row = ((north - y) / self.resolution_m).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let (x, y) = self.frame.to_local(p);
        self.cell_of_local(x, y)
    }
}

impl SourceGrid for GridSpec {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn fractional_index(&self, p: GeoPoint) -> (f64, f64) {
        let (x, y) = self.frame.to_local(p);
        let (cx, cy) = self.center_local();
        (
            self.height as f64 / 2.0 - 0.5 - (y - cy) / self.resolution_m,
            (x - cx) / self.resolution_m + self.width as f64 / 2.0 - 0.5,
        )
    }
}

/// Regular latitude/longitude grid as delivered by weather and chemistry
/// models. Row 0 is the southernmost latitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatLonGrid {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub nlat: usize,
    pub nlon: usize,
}

impl LatLonGrid {
    pub fn point(&self, row: usize, col: usize) -> GeoPoint {
        GeoPoint {
            lat: self.lat0 + row as f64 * self.dlat,
            lon: self.lon0 + col as f64 * self.dlon,
        }
    }

    /// Infers a complete regular grid from the distinct coordinates present.
    pub fn from_coordinates(lats: &[f64], lons: &[f64]) -> Result<Self> {
        fn axis(vals: &[f64], what: &str) -> Result<(f64, f64, usize)> {
            let mut v: Vec<f64> = vals.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            if v.is_empty() {
                return Err(Error::InvalidParameter(format!("no {what} coordinates")));
            }
            if v.len() == 1 {
                return Ok((v[0], 1.0, 1));
            }
            let step = (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64;
            for (i, &x) in v.iter().enumerate() {
                if (x - (v[0] + i as f64 * step)).abs() > 1e-6 * step.max(1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "{what} coordinates are not regularly spaced near {x}"
                    )));
                }
            }
            Ok((v[0], step, v.len()))
        }
        let (lat0, dlat, nlat) = axis(lats, "latitude")?;
        let (lon0, dlon, nlon) = axis(lons, "longitude")?;
        Ok(Self {
            lat0,
            lon0,
            dlat,
            dlon,
            nlat,
            nlon,
        })
    }

    /// Index of an exact grid coordinate.
    pub fn index_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        let r = ((p.lat - self.lat0) / self.dlat).round();
        let c = ((p.lon - self.lon0) / self.dlon).round();
        if r < 0.0 || c < 0.0 || r >= self.nlat as f64 || c >= self.nlon as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

impl SourceGrid for LatLonGrid {
    fn dims(&self) -> (usize, usize) {
        (self.nlat, self.nlon)
    }

    fn fractional_index(&self, p: GeoPoint) -> (f64, f64) {
        ((p.lat - self.lat0) / self.dlat, (p.lon - self.lon0) / self.dlon)
    }
}

/// Kernel-weighted average of point values on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub weight_sum: Vec<f64>,
}

impl WeightedGrid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            weight_sum: vec![0.0; width * height],
        }
    }
}

/// `exp(-d² / 2σ²)`.
pub fn gaussian_weight(d: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok((-d * d / (2.0 * sigma * sigma)).exp())
}

/// Precomputed gaussian weights between a fixed set of locations and the
/// cells of a grid. Reused across hours and pollutants of one patch.
#[derive(Debug, Clone)]
pub struct KernelProjector {
    width: usize,
    height: usize,
    /// Per point: (cell index, weight), cells in row-major order.
    weights: Vec<Vec<(u32, f64)>>,
}

impl KernelProjector {
    pub fn new(grid: &GridSpec, sigma: f64, points: &[GeoPoint]) -> Result<Self> {
        gaussian_weight(0.0, sigma)?;
        let cutoff = KERNEL_CUTOFF_SIGMAS * sigma;
        let res = grid.resolution_m;
        let (west, _, _, north) = grid.bounds_local();
        let mut weights = Vec::with_capacity(points.len());
        for p in points {
            let (px, py) = grid.frame.to_local(*p);
            let col_lo = (((px - cutoff - west) / res) - 0.5).floor().max(0.0) as usize;
            let col_hi = ((((px + cutoff - west) / res) - 0.5).ceil().max(-1.0) + 1.0).min(grid.width as f64) as usize;
            let row_lo = (((north - py - cutoff) / res) - 0.5).floor().max(0.0) as usize;
            let row_hi = ((((north - py + cutoff) / res) - 0.5).ceil().max(-1.0) + 1.0).min(grid.height as f64) as usize;
            let mut list = Vec::new();
            for row in row_lo..row_hi {
                for col in col_lo..col_hi {
                    let (cx, cy) = grid.cell_center_local(row, col);
                    let d = ((cx - px).powi(2) + (cy - py).powi(2)).sqrt();
                    if d > cutoff {
                        continue;
                    }
                    list.push(((row * grid.width + col) as u32, (-d * d / (2.0 * sigma * sigma)).exp()));
                }
            }
            weights.push(list);
        }
        Ok(Self {
            width: grid.width,
            height: grid.height,
            weights,
        })
    }

    pub fn points(&self) -> usize {
        self.weights.len()
    }

    /// Projects one value per point; `None` marks a point without data.
    pub fn project(&self, values: &[Option<f64>]) -> WeightedGrid {
        let mut out = WeightedGrid::zeros(self.width, self.height);
        let mut weighted = vec![0.0; self.width * self.height];
        for (list, v) in self.weights.iter().zip(values) {
            let Some(v) = *v else { continue };
            for &(cell, w) in list {
                out.weight_sum[cell as usize] += w;
                weighted[cell as usize] += w * v;
            }
        }
        for ((value, &ws), &wv) in out.values.iter_mut().zip(&out.weight_sum).zip(&weighted) {
            *value = if ws > WEIGHT_EPSILON { wv / ws } else { 0.0 };
        }
        out
    }
}

/// Gaussian-kernel weighted average of point values at every cell center.
pub fn project_points(points: &[(GeoPoint, f64)], grid: &GridSpec, sigma: f64) -> Result<WeightedGrid> {
    gaussian_weight(0.0, sigma)?;
    let bad: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::RejectedPoints(bad));
    }
    let locations: Vec<GeoPoint> = points.iter().map(|(p, _)| *p).collect();
    let values: Vec<Option<f64>> = points.iter().map(|(_, v)| Some(*v)).collect();
    Ok(KernelProjector::new(grid, sigma, &locations)?.project(&values))
}

/// Bilinear interpolation of a source field at every cell center of `dst`.
pub fn bilinear_resample<G: SourceGrid>(src: &[f64], src_grid: &G, dst: &GridSpec) -> Result<Vec<f64>> {
    let (rows, cols) = src_grid.dims();
    if src.len() != rows * cols {
        return Err(Error::InvalidShape(format!(
            "source holds {} values for a {rows}x{cols} grid",
            src.len()
        )));
    }
    const TOL: f64 = 1e-9;
    let inside = |r: f64, c: f64| r >= -TOL && c >= -TOL && r <= (rows - 1) as f64 + TOL && c <= (cols - 1) as f64 + TOL;
    let corners = [
        ("north-west", 0, 0),
        ("north-east", 0, dst.width - 1),
        ("south-west", dst.height - 1, 0),
        ("south-east", dst.height - 1, dst.width - 1),
    ];
    for (name, r, c) in corners {
        let p = dst.cell_center_geo(r, c);
        let (fr, fc) = src_grid.fractional_index(p);
        if !inside(fr, fc) {
            return Err(Error::OutOfCoverage {
                corner: name.to_string(),
                lat: p.lat,
                lon: p.lon,
            });
        }
    }
    let lerp_axis = |f: f64, n: usize| -> (usize, f64) {
        if n == 1 {
            return (0, 0.0);
        }
        let f = f.clamp(0.0, (n - 1) as f64);
        let i0 = (f.floor() as usize).min(n - 2);
        (i0, f - i0 as f64)
    };
    let mut out = Vec::with_capacity(dst.cells());
    for r in 0..dst.height {
        for c in 0..dst.width {
            let p = dst.cell_center_geo(r, c);
            let (fr, fc) = src_grid.fractional_index(p);
            if !inside(fr, fc) {
                return Err(Error::OutOfCoverage {
                    corner: format!("cell ({r},{c})"),
                    lat: p.lat,
                    lon: p.lon,
                });
            }
            let (r0, tr) = lerp_axis(fr, rows);
            let (c0, tc) = lerp_axis(fc, cols);
            let r1 = (r0 + 1).min(rows - 1);
            let c1 = (c0 + 1).min(cols - 1);
            let v00 = src[r0 * cols + c0];
            let v01 = src[r0 * cols + c1];
            let v10 = src[r1 * cols + c0];
            let v11 = src[r1 * cols + c1];
            let top = v00 + (v01 - v00) * tc;
            let bottom = v10 + (v11 - v10) * tc;
            out.push(top + (bottom - top) * tr);
        }
    }
    Ok(out)
}

/// Channel-first raster `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidShape(format!(
                "{} values for a ({channels},{height},{width}) raster",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Replicates each cell into a `factor x factor` block.
pub fn nearest_upsample(r: &Raster, factor: usize) -> Result<Raster> {
    if factor == 0 {
        return Err(Error::InvalidParameter("upsampling factor must be >= 1".into()));
    }
    let (h, w) = (r.height * factor, r.width * factor);
    let mut data = Vec::with_capacity(r.channels * h * w);
    for c in 0..r.channels {
        for y in 0..h {
            for x in 0..w {
                data.push(r.at(c, y / factor, x / factor));
            }
        }
    }
    Raster::new(r.channels, h, w, data)
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn avg_downsample(r: &Raster, factor: usize) -> Result<Raster> {
    if factor == 0 {
        return Err(Error::InvalidParameter("downsampling factor must be >= 1".into()));
    }
    if r.height % factor != 0 || r.width % factor != 0 {
        return Err(Error::InvalidShape(format!(
            "{}x{} raster is not divisible by {factor}",
            r.height, r.width
        )));
    }
    let (h, w) = (r.height / factor, r.width / factor);
    let norm = (factor * factor) as f64;
    let mut data = Vec::with_capacity(r.channels * h * w);
    for c in 0..r.channels {
        for y in 0..h {
            for x in 0..w {
                // offsets from the first cell keep uniform blocks exact
                let base = r.at(c, y * factor, x * factor);
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += r.at(c, y * factor + dy, x * factor + dx) - base;
                    }
                }
                data.push(base + acc / norm);
            }
        }
    }
    Raster::new(r.channels, h, w, data)
}
