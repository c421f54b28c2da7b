//! Static layout (towns, roads, sources, stations) and hourly driver series
//! (weather, traffic) of a synthetic region.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use plume_core::features::RoadCategory;
use plume_core::geo::{GeoPoint, LocalFrame};
use plume_core::time::Hour;

use crate::config::SynthConfig;

/// Independent random streams, one per component.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub(crate) mod streams {
    pub const TOWNS: u64 = 1;
    pub const ROADS: u64 = 2;
    pub const SOURCES: u64 = 3;
    pub const STATIONS: u64 = 4;
    pub const WEATHER: u64 = 5;
    pub const TRAFFIC: u64 = 6;
    pub const READINGS: u64 = 7;
    pub const PHYSICAL: u64 = 8;
    pub const WEATHER_FORECAST: u64 = 9;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Town {
    pub name: String,
    /// Local coordinates (m) relative to the domain center.
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub id: String,
    pub town: usize,
    pub category: RoadCategory,
    /// Polyline vertices in local metres.
    pub points: Vec<(f64, f64)>,
    /// Free-flow speed, km/h.
    pub free_speed: f64,
}

impl Road {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).sum()
    }
}

/// Gaussian PM area source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaSource {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    /// Relative strength.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationSite {
    pub id: String,
    pub town: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherState {
    pub u: f64,
    pub v: f64,
    pub temperature: f64,
    pub relative_humidity: f64,
    pub pbl_height: f64,
    pub precipitation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficState {
    pub jam_factor: f64,
    pub speed: f64,
    pub historical_speed: f64,
    /// Relative vehicle volume driving emissions.
    pub volume: f64,
}

/// Static layout plus hourly drivers from `start - spinup` to the end.
#[derive(Debug, Clone)]
pub struct World {
    pub frame: LocalFrame,
    pub towns: Vec<Town>,
    pub roads: Vec<Road>,
    pub sources: Vec<AreaSource>,
    pub stations: Vec<StationSite>,
    /// Index 0 is `start - spinup_hours`.
    pub weather: Vec<WeatherState>,
    /// `traffic[hour][road]`, same time axis as `weather`.
    pub traffic: Vec<Vec<TrafficState>>,
    pub first_hour: Hour,
}

impl World {
    pub fn generate(cfg: &SynthConfig) -> Self {
        let frame = LocalFrame::new(GeoPoint {
            lat: cfg.center_lat,
            lon: cfg.center_lon,
        });
        let towns = place_towns(cfg);
        let roads = build_roads(cfg, &towns);
        let sources = place_sources(cfg, &towns);
        let stations = place_stations(cfg, &towns, &roads);
        let total = cfg.spinup_hours + cfg.hours();
        let first_hour = cfg.start.offset(-(cfg.spinup_hours as i64));
        let weather = weather_series(cfg, first_hour, total);
        let traffic = traffic_series(cfg, &roads, first_hour, total);
        Self {
            frame,
            towns,
            roads,
            sources,
            stations,
            weather,
            traffic,
            first_hour,
        }
    }

    pub fn hour(&self, index: usize) -> Hour {
        self.first_hour.offset(index as i64)
    }

    pub fn geo(&self, x: f64, y: f64) -> GeoPoint {
        self.frame.to_geo(x, y)
    }
}

fn place_towns(cfg: &SynthConfig) -> Vec<Town> {
    let mut rng = stream(cfg.seed, streams::TOWNS);
    let spread = cfg.town_spread_km * 1_000.0;
    let min_sep = (4.0 * cfg.town_radius_km * 1_000.0).min(spread);
    let mut towns = vec![Town {
        name: "town_00".into(),
        x: 0.0,
        y: 0.0,
    }];
    let mut attempts = 0;
    while towns.len() < cfg.n_towns {
        let r = spread * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..2.0 * PI);
        let (x, y) = (r * a.cos(), r * a.sin());
        attempts += 1;
        // relax the separation rule if the region is crowded
        let sep = if attempts > 2_000 { 0.0 } else { min_sep };
        if towns.iter().all(|t| (t.x - x).hypot(t.y - y) >= sep) {
            towns.push(Town {
                name: format!("town_{:02}", towns.len()),
                x,
                y,
            });
        }
    }
    towns
}

fn polyline(rng: &mut ChaCha8Rng, start: (f64, f64), heading: f64, length: f64, vertices: usize) -> Vec<(f64, f64)> {
    let mut pts = vec![start];
    let leg = length / (vertices - 1) as f64;
    let mut h = heading;
    for _ in 1..vertices {
        let last = *pts.last().expect("non-empty");
        pts.push((last.0 + leg * h.cos(), last.1 + leg * h.sin()));
        h += rng.random_range(-0.25..0.25);
    }
    pts
}

fn build_roads(cfg: &SynthConfig, towns: &[Town]) -> Vec<Road> {
    let mut rng = stream(cfg.seed, streams::ROADS);
    let radius = cfg.town_radius_km * 1_000.0;
    let mut roads = Vec::with_capacity(cfg.n_road_segments);
    for (t, town) in towns.iter().enumerate() {
        let quota = cfg.n_road_segments / towns.len() + usize::from(t < cfg.n_road_segments % towns.len());
        let mut segs: Vec<(RoadCategory, Vec<(f64, f64)>, f64)> = Vec::new();
        // two arterials through the center, cut into ~800 m pieces
        let arterial_pieces = (quota / 4).clamp(1, 8);
        for a in 0..2 {
            if segs.len() >= quota {
                break;
            }
            let heading = rng.random_range(0.0..PI) + a as f64 * PI / 2.0;
            let n = arterial_pieces.min(quota - segs.len());
            let piece = 2.0 * radius / n as f64;
            for k in 0..n {
                let s = -radius + k as f64 * piece;
                let start = (town.x + s * heading.cos(), town.y + s * heading.sin());
                let end = (start.0 + piece * heading.cos(), start.1 + piece * heading.sin());
                segs.push((RoadCategory::MajorRoads, vec![start, end], 70.0));
            }
        }
        let normal = Normal::new(0.0, radius / 2.5).expect("positive std");
        while segs.len() < quota {
            let start = (town.x + normal.sample(&mut rng), town.y + normal.sample(&mut rng));
            let heading = rng.random_range(0.0..2.0 * PI);
            let length = rng.random_range(200.0..900.0);
            let vertices = rng.random_range(2..=3);
            segs.push((RoadCategory::Roads, polyline(&mut rng, start, heading, length, vertices), 40.0));
        }
        for (k, (category, points, free_speed)) in segs.into_iter().enumerate() {
            roads.push(Road {
                id: format!("seg_{t:02}_{k:03}"),
                town: t,
                category,
                points,
                free_speed,
            });
        }
    }
    roads
}

fn place_sources(cfg: &SynthConfig, towns: &[Town]) -> Vec<AreaSource> {
    let mut rng = stream(cfg.seed, streams::SOURCES);
    let radius = cfg.town_radius_km * 1_000.0;
    let mut out = Vec::new();
    for town in towns {
        // one diffuse residential source and an offset industrial one
        out.push(AreaSource {
            x: town.x,
            y: town.y,
            radius: radius * rng.random_range(0.6..1.0),
            strength: rng.random_range(0.6..1.4),
        });
        let a = rng.random_range(0.0..2.0 * PI);
        let d = radius * rng.random_range(0.5..1.5);
        out.push(AreaSource {
            x: town.x + d * a.cos(),
            y: town.y + d * a.sin(),
            radius: rng.random_range(300.0..900.0),
            strength: rng.random_range(0.5..2.0),
        });
    }
    out
}

/// Stations per town, roadside ones a few tens of metres from a random road.
fn place_stations(cfg: &SynthConfig, towns: &[Town], roads: &[Road]) -> Vec<StationSite> {
    let mut rng = stream(cfg.seed, streams::STATIONS);
    let radius = cfg.town_radius_km * 1_000.0;
    let spread = Normal::new(0.0, radius / 2.0).expect("positive std");
    let offset = Normal::new(0.0, 40.0).expect("positive std");
    let mut out = Vec::with_capacity(cfg.n_stations);
    for k in 0..cfg.n_stations {
        let t = k % towns.len();
        let town_roads: Vec<&Road> = roads.iter().filter(|r| r.town == t).collect();
        let roadside = !town_roads.is_empty() && rng.random::<f64>() < cfg.roadside_fraction;
        let (x, y) = if roadside {
            let total: f64 = town_roads.iter().map(|r| r.length()).sum();
            let mut pick = rng.random_range(0.0..total);
            let road = town_roads
                .iter()
                .find(|r| {
                    pick -= r.length();
                    pick <= 0.0
                })
                .unwrap_or(&town_roads[town_roads.len() - 1]);
            let w = &road.points[rng.random_range(0..road.points.len() - 1)..][..2];
            let f: f64 = rng.random();
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let len = dx.hypot(dy).max(1e-9);
            let o = offset.sample(&mut rng);
            (w[0].0 + f * dx - o * dy / len, w[0].1 + f * dy + o * dx / len)
        } else {
            (towns[t].x + spread.sample(&mut rng), towns[t].y + spread.sample(&mut rng))
        };
        out.push(StationSite {
            id: format!("ST{k:03}"),
            town: t,
            x,
            y,
        });
    }
    out
}

fn diurnal(hour: u32, peak: f64) -> f64 {
    (2.0 * PI * (hour as f64 - peak) / 24.0).cos()
}

fn weather_series(cfg: &SynthConfig, first: Hour, n: usize) -> Vec<WeatherState> {
    let mut rng = stream(cfg.seed, streams::WEATHER);
    let turn = Normal::new(0.0, 0.12).expect("positive std");
    let gust = Normal::new(0.0, 0.35).expect("positive std");
    let rain = Exp::new(0.8f64).expect("positive rate");
    let mut heading = rng.random_range(0.0..2.0 * PI);
    let mut speed = cfg.mean_wind_ms;
    let mut raining = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let h = first.offset(i as i64);
        let hod = h.hour_of_day();
        let day = i as f64 / 24.0;
        heading += turn.sample(&mut rng);
        speed += 0.15 * (cfg.mean_wind_ms - speed) + gust.sample(&mut rng);
        speed = speed.clamp(0.3, cfg.max_wind_ms);
        if raining > 0.0 {
            if rng.random::<f64>() < 0.15 {
                raining = 0.0;
            }
        } else if rng.random::<f64>() < 0.02 {
            raining = rain.sample(&mut rng).min(8.0);
        }
        let synoptic = (2.0 * PI * day / 6.3).sin();
        let temperature = 276.0 + 5.0 * diurnal(hod, 14.0) + 3.0 * synoptic;
        let pbl = (250.0 + 1_100.0 * (PI * (hod as f64 - 7.0) / 12.0).sin().max(0.0)) * (1.0 + 0.2 * synoptic)
            + 150.0 * speed / cfg.max_wind_ms;
        let rh = (78.0 - 2.5 * (temperature - 276.0) + if raining > 0.0 { 15.0 } else { 0.0 }).clamp(5.0, 100.0);
        out.push(WeatherState {
            u: speed * heading.cos(),
            v: speed * heading.sin(),
            temperature,
            relative_humidity: rh,
            pbl_height: pbl,
            precipitation: raining,
        });
    }
    out
}

/// Relative traffic volume: weekday rush hours, quieter weekends and nights.
pub fn typical_volume(h: Hour) -> f64 {
    let hod = h.hour_of_day() as f64;
    let bump = |center: f64, width: f64| (-((hod - center) / width).powi(2)).exp();
    let base = 0.15 + 0.55 * (PI * (hod - 5.0) / 18.0).sin().max(0.0);
    if h.weekday() >= 5 {
        0.7 * base + 0.2 * bump(13.0, 3.0)
    } else {
        base + 0.8 * bump(8.0, 1.5) + 0.7 * bump(17.5, 1.8)
    }
}

fn jam_of(volume: f64, major: bool) -> f64 {
    let capacity = if major { 1.2 } else { 0.9 };
    (10.0 * (volume / capacity).powi(2) / (1.0 + (volume / capacity).powi(2))).clamp(0.0, 10.0)
}

fn traffic_series(cfg: &SynthConfig, roads: &[Road], first: Hour, n: usize) -> Vec<Vec<TrafficState>> {
    let mut rng = stream(cfg.seed, streams::TRAFFIC);
    let noise = Normal::new(0.0, 0.15).expect("positive std");
    let busy: Vec<f64> = roads.iter().map(|_| rng.random_range(0.6..1.4)).collect();
    (0..n)
        .map(|i| {
            let h = first.offset(i as i64);
            let typical = typical_volume(h);
            roads
                .iter()
                .zip(&busy)
                .map(|(r, b)| {
                    let major = r.category == RoadCategory::MajorRoads;
                    let volume = (typical * b * (1.0 + noise.sample(&mut rng))).max(0.02);
                    let jam = jam_of(volume, major);
                    TrafficState {
                        jam_factor: jam,
                        speed: r.free_speed * (1.0 - 0.07 * jam),
                        historical_speed: r.free_speed * (1.0 - 0.07 * jam_of(typical * b, major)),
                        volume,
                    }
                })
                .collect()
        })
        .collect()
}
