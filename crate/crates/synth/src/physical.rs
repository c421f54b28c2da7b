//! Coarse lat/lon feeds: block means of the truth, the blurred surrogate of a
//! chemistry-transport model, and issuance grids.

use plume_core::geo::{GeoPoint, GridSpec, LocalFrame};

use crate::transport::Field;

/// Mean over non-overlapping `stride x stride` blocks.
pub fn block_means(f: &Field, stride: usize) -> Field {
    let (nx, ny) = (f.nx / stride, f.ny / stride);
    let mut data = vec![0.0; nx * ny];
    for r in 0..ny * stride {
        for c in 0..nx * stride {
            data[(r / stride) * nx + c / stride] += f.at(r, c);
        }
    }
    let norm = (stride * stride) as f64;
    data.iter_mut().for_each(|v| *v /= norm);
    Field { nx, ny, data }
}

/// Separable gaussian blur with weights renormalised at the borders.
pub fn gaussian_blur(f: &Field, sigma_cells: f64) -> Field {
    if sigma_cells < 1e-3 {
        return f.clone();
    }
    let radius = (3.0 * sigma_cells).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma_cells * sigma_cells)).exp())
        .collect();
    let pass = |src: &Field, horizontal: bool| {
        let mut out = vec![0.0; src.data.len()];
        for r in 0..src.ny {
            for c in 0..src.nx {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, w) in kernel.iter().enumerate() {
                    let o = j as isize - radius;
                    let (rr, cc) = if horizontal { (r as isize, c as isize + o) } else { (r as isize + o, c as isize) };
                    if rr < 0 || cc < 0 || rr >= src.ny as isize || cc >= src.nx as isize {
                        continue;
                    }
                    acc += w * src.at(rr as usize, cc as usize);
                    norm += w;
                }
                out[r * src.nx + c] = acc / norm;
            }
        }
        Field {
            nx: src.nx,
            ny: src.ny,
            data: out,
        }
    };
    pass(&pass(f, true), false)
}

/// Regular lat/lon grid covering a square around a center.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedGrid {
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    pub step_deg: f64,
}

impl FeedGrid {
    /// Multiples of `step_deg` spanning `half_extent_m` around `center`, plus one step.
    pub fn covering(frame: &LocalFrame, half_extent_m: f64, step_deg: f64) -> Self {
        let ne = frame.to_geo(half_extent_m, half_extent_m);
        let sw = frame.to_geo(-half_extent_m, -half_extent_m);
        let axis = |lo: f64, hi: f64| {
            let first = (lo / step_deg).floor() as i64 - 1;
            let last = (hi / step_deg).ceil() as i64 + 1;
            (first..=last).map(|k| k as f64 * step_deg).collect::<Vec<f64>>()
        };
        Self {
            lats: axis(sw.lat, ne.lat),
            lons: axis(sw.lon, ne.lon),
            step_deg,
        }
    }

    pub fn len(&self) -> usize {
        self.lats.len() * self.lons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points in file order: latitude-major, south to north, west to east.
    pub fn points(&self) -> impl Iterator<Item = GeoPoint> + '_ {
        self.lats
            .iter()
            .flat_map(move |&lat| self.lons.iter().map(move |&lon| GeoPoint { lat, lon }))
    }
}

/// For each feed point, the block-grid cells whose centers fall inside its
/// lat/lon cell; the nearest cell when the point lies outside the domain.
#[derive(Debug, Clone)]
pub struct CellMeans {
    members: Vec<Vec<usize>>,
}

impl CellMeans {
    pub fn new(feed: &FeedGrid, blocks: &GridSpec) -> Self {
        let mut members = vec![Vec::new(); feed.len()];
        let lat_index = |lat: f64| ((lat - feed.lats[0]) / feed.step_deg + 0.5).floor();
        let lon_index = |lon: f64| ((lon - feed.lons[0]) / feed.step_deg + 0.5).floor();
        for i in 0..blocks.cells() {
            let p = blocks.cell_center_geo(i / blocks.width, i % blocks.width);
            let (a, b) = (lat_index(p.lat), lon_index(p.lon));
            if a >= 0.0 && b >= 0.0 && (a as usize) < feed.lats.len() && (b as usize) < feed.lons.len() {
                members[a as usize * feed.lons.len() + b as usize].push(i);
            }
        }
        for (k, p) in feed.points().enumerate() {
            if members[k].is_empty() {
                let (x, y) = blocks.frame.to_local(p);
                let (west, south, east, north) = blocks.bounds_local();
                let h = blocks.resolution_m / 2.0;
                let (cx, cy) = (x.clamp(west + h, east - h), y.clamp(south + h, north - h));
                let cell = blocks.cell_of_local(cx, cy).expect("clamped inside");
                members[k].push(cell.0 * blocks.width + cell.1);
            }
        }
        Self { members }
    }

    pub fn apply(&self, f: &Field) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| m.iter().map(|&i| f.data[i]).sum::<f64>() / m.len() as f64)
            .collect()
    }
}

/// Pearson correlation of two equally long series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants_and_smooths_spikes() {
        let c = Field::filled(9, 7, 3.5);
        assert!(gaussian_blur(&c, 2.0).data.iter().all(|v| (v - 3.5).abs() < 1e-12));
        let mut spike = Field::filled(15, 15, 0.0);
        spike.data[112] = 81.0;
        let b = gaussian_blur(&spike, 1.0);
        assert!(b.data[112] < 81.0 && b.data[113] > 0.0);
        assert!((b.total() - 81.0).abs() < 1e-9);
    }

    #[test]
    fn block_means_average_blocks() {
        let f = Field {
            nx: 4,
            ny: 2,
            data: vec![1.0, 2.0, 5.0, 5.0, 3.0, 4.0, 5.0, 5.0],
        };
        assert_eq!(block_means(&f, 2).data, vec![2.5, 5.0]);
    }

    #[test]
    fn feed_grid_covers_extent() {
        let frame = LocalFrame::new(GeoPoint { lat: 48.0, lon: 11.0 });
        let g = FeedGrid::covering(&frame, 100_000.0, 0.25);
        assert!(g.lats[0] < 47.1 && *g.lats.last().unwrap() > 48.9);
        assert!(g.lons[0] < 9.66 && *g.lons.last().unwrap() > 12.34);
        assert_eq!(g.points().count(), g.len());
    }
}
