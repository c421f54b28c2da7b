//! Hourly simulation of NO2, PM2.5 and PM10 on the outer grid and the nested
//! core, with O3 from a titration proxy.

use std::f64::consts::PI;

use plume_core::features::RoadCategory;
use plume_core::geo::GridSpec;
use plume_core::time::Hour;

use crate::config::SynthConfig;
use crate::error::Result;
use crate::transport::{step, substeps, Boundary, Field, Ring, Transport, Workspace};
use crate::world::{Road, World};

/// Simulated species, in the order of `decay_per_hour`.
const SPECIES: usize = 3;
const NO2: usize = 0;
const PM25: usize = 1;
const PM10: usize = 2;

/// Hourly fields in pollutant order NO2, O3, PM25, PM10.
pub struct Snapshot<'a> {
    /// Hours since `start`.
    pub index: usize,
    pub hour: Hour,
    pub outer: &'a [Field; 4],
    pub core: Option<&'a [Field; 4]>,
}

/// Road length (m) per cell, per road.
type Incidence = Vec<Vec<(usize, f64)>>;

fn road_lengths(roads: &[Road], grid: &GridSpec) -> Incidence {
    let res = grid.resolution_m;
    let step_m = (res / 5.0).min(10.0);
    roads
        .iter()
        .map(|r| {
            let mut cells: Vec<(usize, f64)> = Vec::new();
            for w in r.points.windows(2) {
                let len = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
                let n = (len / step_m).ceil().max(1.0) as usize;
                for k in 0..n {
                    let t = (k as f64 + 0.5) / n as f64;
                    let (x, y) = (w[0].0 + t * (w[1].0 - w[0].0), w[0].1 + t * (w[1].1 - w[0].1));
                    if let Some((row, col)) = grid.cell_of_local(x, y) {
                        let cell = row * grid.width + col;
                        match cells.iter_mut().find(|c| c.0 == cell) {
                            Some(c) => c.1 += len / n as f64,
                            None => cells.push((cell, len / n as f64)),
                        }
                    }
                }
            }
            cells.sort_by_key(|c| c.0);
            cells
        })
        .collect()
}

/// Cell means of the summed gaussian area sources (5x5 sub-samples per cell).
fn area_density(world: &World, grid: &GridSpec) -> Vec<f64> {
    let res = grid.resolution_m;
    let mut out = vec![0.0; grid.cells()];
    for (i, v) in out.iter_mut().enumerate() {
        let (cx, cy) = grid.cell_center_local(i / grid.width, i % grid.width);
        let mut acc = 0.0;
        for a in 0..5 {
            for b in 0..5 {
                let x = cx + res * ((a as f64 + 0.5) / 5.0 - 0.5);
                let y = cy + res * ((b as f64 + 0.5) / 5.0 - 0.5);
                for s in &world.sources {
                    let d2 = (x - s.x).powi(2) + (y - s.y).powi(2);
                    acc += s.strength * (-d2 / (2.0 * s.radius * s.radius)).exp();
                }
            }
        }
        *v = acc / 25.0;
    }
    out
}

/// Bilinear sample of `f` (laid out on `grid`) at a local position, clamped to the hull.
fn sample(f: &Field, grid: &GridSpec, x: f64, y: f64) -> f64 {
    let (west, _, _, north) = grid.bounds_local();
    let res = grid.resolution_m;
    let fc = ((x - west) / res - 0.5).clamp(0.0, (f.nx - 1) as f64);
    let fr = ((north - y) / res - 0.5).clamp(0.0, (f.ny - 1) as f64);
    let (c0, r0) = (fc.floor() as usize, fr.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(f.nx - 1), (r0 + 1).min(f.ny - 1));
    let (tc, tr) = (fc - c0 as f64, fr - r0 as f64);
    let top = f.at(r0, c0) * (1.0 - tc) + f.at(r0, c1) * tc;
    let bottom = f.at(r1, c0) * (1.0 - tc) + f.at(r1, c1) * tc;
    top * (1.0 - tr) + bottom * tr
}

/// Outer-field values at the core's ghost cells.
fn core_ring(outer: &Field, outer_grid: &GridSpec, core: &GridSpec) -> Ring {
    let (west, south, east, north) = core.bounds_local();
    let h = core.resolution_m / 2.0;
    let n = core.width;
    let xs: Vec<f64> = (0..n).map(|c| core.cell_center_local(0, c).0).collect();
    let ys: Vec<f64> = (0..core.height).map(|r| core.cell_center_local(r, 0).1).collect();
    Ring {
        north: xs.iter().map(|&x| sample(outer, outer_grid, x, north + h)).collect(),
        south: xs.iter().map(|&x| sample(outer, outer_grid, x, south - h)).collect(),
        west: ys.iter().map(|&y| sample(outer, outer_grid, west - h, y)).collect(),
        east: ys.iter().map(|&y| sample(outer, outer_grid, east + h, y)).collect(),
    }
}

struct Level {
    grid: GridSpec,
    fields: [Field; SPECIES],
    roads: Incidence,
    area: Vec<f64>,
    dt: Option<f64>,
    ws: Workspace,
}

impl Level {
    fn new(grid: GridSpec, world: &World, init: [f64; SPECIES], dt: Option<f64>) -> Self {
        let (nx, ny) = (grid.width, grid.height);
        Self {
            roads: road_lengths(&world.roads, &grid),
            area: area_density(world, &grid),
            fields: init.map(|v| Field::filled(nx, ny, v)),
            grid,
            dt,
            ws: Workspace::default(),
        }
    }

    /// Emission rates (µg/m³/s) during hour `i`.
    fn sources(&self, drivers: &HourDrivers, road_rates: &[f64]) -> [Vec<f64>; SPECIES] {
        let volume_m3 = self.grid.resolution_m * self.grid.resolution_m * drivers.mixing_height;
        let mut no2 = vec![0.0; self.grid.cells()];
        for (cells, &q) in self.roads.iter().zip(road_rates) {
            for &(cell, len) in cells {
                no2[cell] += q * len / volume_m3;
            }
        }
        let pm25: Vec<f64> = self
            .area
            .iter()
            .map(|a| drivers.pm_area * a + drivers.background_rate[0])
            .collect();
        let pm10: Vec<f64> = self
            .area
            .iter()
            .zip(&no2)
            .map(|(a, n)| drivers.pm_area * drivers.coarse * a + drivers.road_dust * n + drivers.background_rate[1])
            .collect();
        [no2, pm25, pm10]
    }
}

/// Quantities shared by both grids during one hour.
struct HourDrivers {
    u: f64,
    v: f64,
    mixing_height: f64,
    /// PM2.5 area emission per unit source density (µg/m³/s).
    pm_area: f64,
    coarse: f64,
    road_dust: f64,
    /// Uniform production keeping PM at the regional background.
    background_rate: [f64; 2],
    background: [f64; SPECIES],
    decay: [f64; SPECIES],
}

fn bump(hod: f64, center: f64, width: f64) -> f64 {
    (-((hod - center) / width).powi(2)).exp()
}

/// Runs the simulation hour by hour, handing every post-spin-up hour to `sink`.
pub struct Simulation<'a> {
    pub cfg: &'a SynthConfig,
    pub world: &'a World,
    /// Multiplier on each road's emissions.
    pub road_scale: Vec<f64>,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &'a SynthConfig, world: &'a World) -> Self {
        Self {
            cfg,
            world,
            road_scale: vec![1.0; world.roads.len()],
        }
    }

    pub fn outer_grid(&self) -> Result<GridSpec> {
        let c = self.cfg;
        Ok(GridSpec::in_frame(
            self.world.frame,
            self.world.frame.origin,
            c.outer_resolution_m,
            c.domain_cells,
            c.domain_cells,
        )?)
    }

    pub fn core_grid(&self) -> Result<Option<GridSpec>> {
        let c = self.cfg;
        if c.core_cells == 0 {
            return Ok(None);
        }
        let t = &self.world.towns[0];
        Ok(Some(GridSpec::in_frame(
            self.world.frame,
            self.world.geo(t.x, t.y),
            c.core_resolution_m,
            c.core_cells,
            c.core_cells,
        )?))
    }

    fn drivers(&self, i: usize) -> HourDrivers {
        let c = self.cfg;
        let w = &self.world.weather[i];
        let h = self.world.hour(i);
        let hod = h.hour_of_day() as f64;
        let day = i as f64 / 24.0;
        let heating = (1.0 + 0.5 * bump(hod, 7.5, 2.0) + 0.7 * bump(hod, 19.0, 3.0)) * (1.0 + 0.04 * (283.0 - w.temperature).max(0.0));
        let swing = 1.0 + 0.4 * (2.0 * PI * day / 5.1 + 0.7).sin();
        let bg = [0.0, c.pm_background[0] * swing, c.pm_background[1] * swing];
        let wet = 0.15 * w.precipitation;
        let decay = [
            c.decay_per_hour[NO2] / 3_600.0,
            (c.decay_per_hour[PM25] + wet) / 3_600.0,
            (c.decay_per_hour[PM10] + 1.5 * wet) / 3_600.0,
        ];
        HourDrivers {
            u: w.u,
            v: w.v,
            mixing_height: w.pbl_height,
            pm_area: c.pm_source * heating / w.pbl_height,
            coarse: c.pm10_coarse_factor,
            road_dust: c.road_dust,
            background_rate: [decay[PM25] * bg[PM25], decay[PM10] * bg[PM10]],
            background: bg,
            decay,
        }
    }

    /// Per-road NO2 emission (µg/s/m) during hour `i`.
    fn road_rates(&self, i: usize) -> Vec<f64> {
        let c = self.cfg;
        self.world
            .roads
            .iter()
            .zip(&self.world.traffic[i])
            .zip(&self.road_scale)
            .map(|((r, t), s)| {
                let cat = if r.category == RoadCategory::MajorRoads { c.major_road_factor } else { 1.0 };
                c.road_emission * cat * t.volume * (1.0 + 0.1 * t.jam_factor) * s
            })
            .collect()
    }

    fn o3(&self, i: usize, no2: &Field) -> Field {
        let c = self.cfg;
        let w = &self.world.weather[i];
        let hod = self.world.hour(i).hour_of_day() as f64;
        let sun = (PI * (hod - 8.0) / 10.0).sin().max(0.0);
        let base = c.o3_background * (1.0 + 0.01 * (w.temperature - 276.0)).max(0.0) + c.o3_daytime_boost * sun;
        Field {
            nx: no2.nx,
            ny: no2.ny,
            data: no2.data.iter().map(|n| (base - c.titration * n).max(0.0)).collect(),
        }
    }

    pub fn run(&self, mut sink: impl FnMut(&Snapshot<'_>) -> Result<()>) -> Result<()> {
        self.cfg.validate()?;
        let c = self.cfg;
        let init = {
            let d = self.drivers(0);
            d.background
        };
        let mut outer = Level::new(self.outer_grid()?, self.world, init, c.dt_outer_s);
        let mut core = self.core_grid()?.map(|g| Level::new(g, self.world, init, c.dt_core_s));
        let total = c.spinup_hours + c.hours();
        for i in 0..total {
            let d = self.drivers(i);
            let rates = self.road_rates(i);
            let rings_before: Option<Vec<Ring>> = core
                .as_ref()
                .map(|k| outer.fields.iter().map(|f| core_ring(f, &outer.grid, &k.grid)).collect());
            self.advance(&mut outer, &d, &rates, None)?;
            if let (Some(k), Some(before)) = (core.as_mut(), rings_before) {
                let after: Vec<Ring> = outer.fields.iter().map(|f| core_ring(f, &outer.grid, &k.grid)).collect();
                self.advance(k, &d, &rates, Some((&before, &after)))?;
            }
            if i < c.spinup_hours {
                continue;
            }
            let pack = |l: &Level| -> [Field; 4] {
                let [no2, pm25, pm10] = l.fields.clone();
                let o3 = self.o3(i, &no2);
                [no2, o3, pm25, pm10]
            };
            let outer_out = pack(&outer);
            let core_out = core.as_ref().map(pack);
            sink(&Snapshot {
                index: i - c.spinup_hours,
                hour: self.world.hour(i),
                outer: &outer_out,
                core: core_out.as_ref(),
            })?;
        }
        Ok(())
    }

    /// Integrates one hour on a level. The outer level has zero-flux
    /// diffusion and background inflow; the core reads its ring from the
    /// outer field, interpolated in time across the hour.
    fn advance(&self, level: &mut Level, d: &HourDrivers, rates: &[f64], rings: Option<(&[Ring], &[Ring])>) -> Result<()> {
        let sources = level.sources(d, rates);
        let (nx, ny) = (level.grid.width, level.grid.height);
        for s in 0..SPECIES {
            let t = Transport {
                dx: level.grid.resolution_m,
                u: d.u,
                v: d.v,
                diffusion: self.cfg.diffusion_m2s,
                decay: d.decay[s],
            };
            let (n, dt) = substeps(&t, 3_600.0, level.dt)?;
            let inflow = Ring::uniform(nx, ny, d.background[s]);
            for k in 0..n {
                let ring;
                let bc = match rings {
                    None => Boundary {
                        advection: Some(&inflow),
                        diffusion: None,
                    },
                    Some((a, b)) => {
                        ring = Ring::lerp(&a[s], &b[s], (k as f64 + 0.5) / n as f64);
                        Boundary {
                            advection: Some(&ring),
                            diffusion: Some(&ring),
                        }
                    }
                };
                step(&mut level.fields[s], &t, Some(&sources[s]), dt, bc, &mut level.ws);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use plume_core::geo::{GeoPoint, LocalFrame};

    #[test]
    fn core_ring_reproduces_linear_fields() {
        let frame = LocalFrame::new(GeoPoint { lat: 48.0, lon: 11.0 });
        let outer = GridSpec::in_frame(frame, frame.origin, 1_000.0, 20, 20).unwrap();
        let core = GridSpec::in_frame(frame, frame.to_geo(1_300.0, -700.0), 50.0, 40, 40).unwrap();
        let plane = |x: f64, y: f64| 3.0 + 0.002 * x - 0.001 * y;
        let mut f = Field::filled(20, 20, 0.0);
        for r in 0..20 {
            for c in 0..20 {
                let (x, y) = outer.cell_center_local(r, c);
                f.data[r * 20 + c] = plane(x, y);
            }
        }
        let ring = core_ring(&f, &outer, &core);
        let (west, south, east, north) = core.bounds_local();
        for c in 0..40 {
            let x = core.cell_center_local(0, c).0;
            assert!((ring.north[c] - plane(x, north + 25.0)).abs() < 1e-9);
            assert!((ring.south[c] - plane(x, south - 25.0)).abs() < 1e-9);
        }
        for r in 0..40 {
            let y = core.cell_center_local(r, 0).1;
            assert!((ring.west[r] - plane(west - 25.0, y)).abs() < 1e-9);
            assert!((ring.east[r] - plane(east + 25.0, y)).abs() < 1e-9);
        }
    }
}
