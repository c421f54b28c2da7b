//! Streams a simulation into the dataset layout read by the feature pipeline.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use plume_core::config::{POLLUTANT_NAMES, WEATHER_CHANNELS};
use plume_core::features::roads::to_wkt_linestring;
use plume_core::geo::GridSpec;
use plume_core::time::Hour;

use crate::config::SynthConfig;
use crate::error::{Result, SynthError};
use crate::physical::{block_means, gaussian_blur, CellMeans, FeedGrid};
use crate::sim::{Simulation, Snapshot};
use crate::world::{streams, stream, StationSite, World};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SynthError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| SynthError::io(path, e))?))
}

struct Out {
    path: PathBuf,
    w: BufWriter<File>,
}

impl Out {
    fn new(path: PathBuf) -> Result<Self> {
        Ok(Self { w: create(&path)?, path })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        self.w
            .write_all(s.as_bytes())
            .and_then(|_| self.w.write_all(b"\n"))
            .map_err(|e| SynthError::io(&self.path, e))
    }

    fn raw(&mut self, data: &[f32]) -> Result<()> {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.w.write_all(&bytes).map_err(|e| SynthError::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| SynthError::io(&self.path, e))
    }
}

/// Where each station reads the truth: the core cell when inside it,
/// otherwise the outer cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StationCell {
    Core(usize),
    Outer(usize),
}

pub fn station_cells(stations: &[StationSite], outer: &GridSpec, core: Option<&GridSpec>) -> Vec<StationCell> {
    stations
        .iter()
        .map(|s| {
            if let Some((r, c)) = core.and_then(|g| g.cell_of_local(s.x, s.y)) {
                return StationCell::Core(r * core.expect("core").width + c);
            }
            let (r, c) = outer
                .cell_of_local(s.x, s.y)
                .expect("stations lie inside the outer domain");
            StationCell::Outer(r * outer.width + c)
        })
        .collect()
}

/// Noisy, gappy hourly readings. `None` marks a dropped reading.
pub struct StationSampler {
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    drop: f64,
}

impl StationSampler {
    pub fn new(seed: u64, noise_std: f64, drop_fraction: f64) -> Self {
        Self {
            rng: stream(seed, streams::READINGS),
            noise: (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std")),
            drop: drop_fraction,
        }
    }

    pub fn read(&mut self, truth: f64) -> Option<f64> {
        let e = self.noise.map_or(0.0, |n| n.sample(&mut self.rng));
        let dropped = self.rng.random::<f64>() < self.drop;
        (!dropped).then_some((truth + e).max(0.0))
    }
}

fn truth_at(s: &Snapshot<'_>, cell: StationCell, p: usize) -> f64 {
    match cell {
        StationCell::Core(i) => s.core.expect("core present")[p].data[i],
        StationCell::Outer(i) => s.outer[p].data[i],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridManifest {
    pub center_lat: f64,
    pub center_lon: f64,
    pub resolution_m: f64,
    pub width: usize,
    pub height: usize,
    /// One file per pollutant, `(hours, height, width)` little-endian f32, row 0 north.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroundTruthManifest {
    pub format: String,
    pub start: Hour,
    pub hours: usize,
    pub pollutants: Vec<String>,
    pub outer: GridManifest,
    pub core: Option<GridManifest>,
    pub stations: Vec<(String, StationCell)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub stations: usize,
    pub towns: usize,
    pub hours: usize,
    pub road_segments: usize,
    pub measurement_rows: usize,
    pub weather_issuances: usize,
    pub physical_issuances: usize,
}

fn grid_manifest(g: &GridSpec, prefix: &str) -> GridManifest {
    GridManifest {
        center_lat: g.center.lat,
        center_lon: g.center.lon,
        resolution_m: g.resolution_m,
        width: g.width,
        height: g.height,
        files: POLLUTANT_NAMES.iter().map(|p| format!("{prefix}_{p}.f32")).collect(),
    }
}

/// Hours at which forecasts are issued: every `issuance_every_h` from the
/// start, as long as the whole horizon stays inside the simulated period.
pub fn issuance_hours(cfg: &SynthConfig) -> Vec<usize> {
    (0..cfg.hours())
        .step_by(cfg.issuance_every_h)
        .filter(|&h| h + cfg.forecast_hours < cfg.hours())
        .collect()
}

/// Simulates `cfg` and writes the full dataset into `dir`.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<Summary> {
    cfg.validate()?;
    let world = World::generate(cfg);
    let sim = Simulation::new(cfg, &world);
    write_dataset(&sim, dir)
}

pub fn write_dataset(sim: &Simulation<'_>, dir: &Path) -> Result<Summary> {
    let (cfg, world) = (sim.cfg, sim.world);
    fs::create_dir_all(dir).map_err(|e| SynthError::io(dir, e))?;
    let outer = sim.outer_grid()?;
    let core = sim.core_grid()?;
    let stride = cfg.ground_truth_stride;
    let blocks = GridSpec::in_frame(
        world.frame,
        world.frame.origin,
        outer.resolution_m * stride as f64,
        outer.width / stride,
        outer.height / stride,
    )?;
    let cells = station_cells(&world.stations, &outer, core.as_ref());

    write_static(world, dir)?;

    let mut measurements = Out::new(dir.join("measurements.csv"))?;
    measurements.line("station_id,lat,lon,time_utc,pollutant,value_ugm3")?;
    let mut traffic = Out::new(dir.join("traffic.csv"))?;
    traffic.line("segment_id,time_utc,jam_factor,speed_kmh,historical_speed_kmh")?;
    let gt = dir.join("ground_truth");
    let mut gt_outer: Vec<Out> = POLLUTANT_NAMES
        .iter()
        .map(|p| Out::new(gt.join(format!("outer_{p}.f32"))))
        .collect::<Result<_>>()?;
    let mut gt_core: Vec<Out> = match &core {
        Some(_) => POLLUTANT_NAMES
            .iter()
            .map(|p| Out::new(gt.join(format!("core_{p}.f32"))))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let feed = FeedGrid::covering(&world.frame, cfg.feed_half_extent_km * 1_000.0, cfg.physical_step_deg);
    let means = CellMeans::new(&feed, &blocks);
    let sigma_blocks = cfg.blur_km * 1_000.0 / blocks.resolution_m;
    // coarse[hour][pollutant][point]
    let mut coarse: Vec<[Vec<f64>; 4]> = Vec::with_capacity(cfg.hours());

    let mut sampler = StationSampler::new(cfg.seed, cfg.noise_std, cfg.drop_fraction);
    let mut rows = 0usize;
    let station_geo: Vec<_> = world.stations.iter().map(|s| world.geo(s.x, s.y)).collect();
    sim.run(|snap| {
        let t = snap.hour;
        for ((s, cell), g) in world.stations.iter().zip(&cells).zip(&station_geo) {
            for (p, name) in POLLUTANT_NAMES.iter().enumerate() {
                if let Some(v) = sampler.read(truth_at(snap, *cell, p)) {
                    measurements.line(&format!("{},{:.6},{:.6},{t},{name},{v:.3}", s.id, g.lat, g.lon))?;
                    rows += 1;
                }
            }
        }
        let i = snap.index + cfg.spinup_hours;
        for (r, st) in world.roads.iter().zip(&world.traffic[i]) {
            traffic.line(&format!(
                "{},{t},{:.3},{:.2},{:.2}",
                r.id, st.jam_factor, st.speed, st.historical_speed
            ))?;
        }
        let mut hour_coarse: [Vec<f64>; 4] = Default::default();
        for p in 0..4 {
            let b = block_means(&snap.outer[p], stride);
            gt_outer[p].raw(&b.data.iter().map(|&v| v as f32).collect::<Vec<_>>())?;
            hour_coarse[p] = means.apply(&gaussian_blur(&b, sigma_blocks));
            if let Some(c) = snap.core {
                gt_core[p].raw(&c[p].data.iter().map(|&v| v as f32).collect::<Vec<_>>())?;
            }
        }
        coarse.push(hour_coarse);
        Ok(())
    })?;
    measurements.finish()?;
    traffic.finish()?;
    for o in gt_outer.into_iter().chain(gt_core) {
        o.finish()?;
    }

    let manifest = GroundTruthManifest {
        format: "plume-ground-truth/1".into(),
        start: cfg.start,
        hours: cfg.hours(),
        pollutants: POLLUTANT_NAMES.iter().map(|s| s.to_string()).collect(),
        outer: grid_manifest(&blocks, "outer"),
        core: core.as_ref().map(|g| grid_manifest(g, "core")),
        stations: world.stations.iter().map(|s| s.id.clone()).zip(cells).collect(),
    };
    let path = gt.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| SynthError::io(&path, e))?;

    let issues = issuance_hours(cfg);
    write_physical(cfg, dir, &feed, &coarse, &issues)?;
    write_weather(cfg, world, dir, &issues)?;

    let summary = Summary {
        stations: world.stations.len(),
        towns: world.towns.len(),
        hours: cfg.hours(),
        road_segments: world.roads.len(),
        measurement_rows: rows,
        weather_issuances: issues.len(),
        physical_issuances: issues.len(),
    };
    let path = dir.join("dataset.json");
    let doc = serde_json::json!({ "config": cfg, "summary": summary });
    fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| SynthError::io(&path, e))?;
    Ok(summary)
}

fn write_static(world: &World, dir: &Path) -> Result<()> {
    let mut st = Out::new(dir.join("stations.csv"))?;
    st.line("station_id,city,lat,lon")?;
    for s in &world.stations {
        let g = world.geo(s.x, s.y);
        st.line(&format!("{},{},{:.6},{:.6}", s.id, world.towns[s.town].name, g.lat, g.lon))?;
    }
    st.finish()?;
    let mut roads = Out::new(dir.join("roads.csv"))?;
    roads.line("segment_id,category,wkt_linestring")?;
    for r in &world.roads {
        let pts: Vec<_> = r.points.iter().map(|&(x, y)| world.geo(x, y)).collect();
        roads.line(&format!("{},{},\"{}\"", r.id, r.category, to_wkt_linestring(&pts)))?;
    }
    roads.finish()?;
    Ok(())
}

fn issuance_name(h: Hour) -> String {
    h.to_datetime().format("%Y%m%dT%H%MZ.csv").to_string()
}

fn write_physical(cfg: &SynthConfig, dir: &Path, feed: &FeedGrid, coarse: &[[Vec<f64>; 4]], issues: &[usize]) -> Result<()> {
    let mut rng = stream(cfg.seed, streams::PHYSICAL);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let header = format!("lat,lon,time_utc,{}", POLLUTANT_NAMES.join(","));
    for &h0 in issues {
        let issued = cfg.start.offset(h0 as i64);
        let mut out = Out::new(dir.join("physical").join(issuance_name(issued)))?;
        out.line(&header)?;
        for step in 1..=cfg.forecast_hours {
            let t = issued.offset(step as i64);
            let lead = 0.5 + step as f64 / cfg.forecast_hours as f64;
            for (k, p) in feed.points().enumerate() {
                let mut line = format!("{:.4},{:.4},{t}", p.lat, p.lon);
                for (q, bias) in cfg.physical_bias.iter().enumerate() {
                    let e = cfg.physical_noise_std * lead * unit.sample(&mut rng);
                    let v = (coarse[h0 + step][q][k] + bias + e).max(0.0);
                    line.push_str(&format!(",{v:.3}"));
                }
                out.line(&line)?;
            }
        }
        out.finish()?;
    }
    Ok(())
}

fn write_weather(cfg: &SynthConfig, world: &World, dir: &Path, issues: &[usize]) -> Result<()> {
    let mut rng = stream(cfg.seed, streams::WEATHER_FORECAST);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let feed = FeedGrid::covering(&world.frame, cfg.feed_half_extent_km * 1_000.0, cfg.weather_step_deg);
    let header = format!("lat,lon,time_utc,{}", WEATHER_CHANNELS.join(","));
    for &h0 in issues {
        let issued = cfg.start.offset(h0 as i64);
        let mut out = Out::new(dir.join("weather").join(issuance_name(issued)))?;
        out.line(&header)?;
        for step in 1..=cfg.forecast_hours {
            let t = issued.offset(step as i64);
            let w = world.weather[cfg.spinup_hours + h0 + step];
            let lead = step as f64 / cfg.forecast_hours as f64;
            let mut err = || lead * unit.sample(&mut rng);
            let (du, dv, dt, dp) = (0.4 * err(), 0.4 * err(), 0.8 * err(), 60.0 * err());
            for p in feed.points() {
                let temperature = w.temperature + dt - 0.6 * (p.lat - cfg.center_lat);
                let rh = (w.relative_humidity - 2.0 * dt).clamp(0.0, 100.0);
                let pbl = (w.pbl_height + dp).max(50.0);
                out.line(&format!(
                    "{:.4},{:.4},{t},{temperature:.2},{rh:.2},{:.3},{:.3},{pbl:.1},{:.3}",
                    p.lat,
                    p.lon,
                    w.u + du,
                    w.v + dv,
                    w.precipitation
                ))?;
            }
        }
        out.finish()?;
    }
    Ok(())
}
