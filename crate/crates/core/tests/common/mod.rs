//! Hand-written CSV dataset around one city for pipeline tests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use plume_core::config::{POLLUTANT_NAMES, WEATHER_CHANNELS};
use plume_core::time::Hour;

pub const HOURS: i64 = 14;
pub const START: &str = "2021-03-01T00:00Z";

/// (id, city, lat, lon). B and C sit symmetrically around A.
pub const STATIONS: [(&str, &str, f64, f64); 5] = [
    ("A", "alpha", 48.100, 11.500),
    ("B", "alpha", 48.100, 11.504),
    ("C", "alpha", 48.100, 11.496),
    ("D", "alpha", 48.115, 11.500),
    ("E", "beta", 48.250, 11.700),
];

pub fn start() -> Hour {
    START.parse().unwrap()
}

pub fn value(station: usize, hour: i64, pollutant: usize) -> f64 {
    5.0 + 10.0 * station as f64 + 0.5 * hour as f64 + 3.0 * pollutant as f64 + ((station * 7 + pollutant) % 5) as f64
}

pub struct Fixture {
    /// Multiplier applied to station A's readings.
    pub a_scale: f64,
    /// Hours (offsets from the start) at which weather issuances exist.
    pub weather_issues: Vec<i64>,
    pub extra_measurement_lines: Vec<String>,
}

impl Default for Fixture {
    fn default() -> Self {
        Self {
            a_scale: 1.0,
            weather_issues: (2..=10).collect(),
            extra_measurement_lines: Vec::new(),
        }
    }
}

fn grid_file(issued: Hour, n_out: i64, lats: &[f64], lons: &[f64], channels: &[&str], f: impl Fn(usize, f64, f64, i64) -> f64) -> String {
    let mut s = format!("lat,lon,time_utc,{}\n", channels.join(","));
    for step in 1..=n_out {
        let t = issued.offset(step);
        for &lat in lats {
            for &lon in lons {
                write!(s, "{lat:.2},{lon:.2},{t}").unwrap();
                for k in 0..channels.len() {
                    write!(s, ",{}", f(k, lat, lon, step)).unwrap();
                }
                s.push('\n');
            }
        }
    }
    s
}

impl Fixture {
    pub fn write(&self, dir: &Path, n_out: i64) {
        let t0 = start();
        let mut m = String::from("station_id,lat,lon,time_utc,pollutant,value_ugm3\n");
        for (i, (id, _, lat, lon)) in STATIONS.iter().enumerate() {
            for h in 0..HOURS {
                for (p, name) in POLLUTANT_NAMES.iter().enumerate() {
                    let scale = if i == 0 { self.a_scale } else { 1.0 };
                    writeln!(m, "{id},{lat},{lon},{},{name},{}", t0.offset(h), value(i, h, p) * scale).unwrap();
                }
            }
        }
        for l in &self.extra_measurement_lines {
            m.push_str(l);
            m.push('\n');
        }
        fs::write(dir.join("measurements.csv"), m).unwrap();

        let mut st = String::from("station_id,city,lat,lon\n");
        for (id, city, lat, lon) in STATIONS {
            writeln!(st, "{id},{city},{lat},{lon}").unwrap();
        }
        fs::write(dir.join("stations.csv"), st).unwrap();

        fs::write(
            dir.join("roads.csv"),
            "segment_id,category,wkt_linestring\n\
             r1,MajorRoads,\"LINESTRING (11.490 48.100, 11.510 48.100)\"\n\
             r2,Roads,\"LINESTRING (11.500 48.090, 11.500 48.110)\"\n",
        )
        .unwrap();
        let mut tr = String::from("segment_id,time_utc,jam_factor,speed_kmh,historical_speed_kmh\n");
        for h in 0..HOURS {
            writeln!(tr, "r1,{},{},{},50", t0.offset(h), (h % 10) as f64, 30 + h).unwrap();
            writeln!(tr, "r2,{},2.5,40,45", t0.offset(h)).unwrap();
        }
        fs::write(dir.join("traffic.csv"), tr).unwrap();

        fs::create_dir_all(dir.join("weather")).unwrap();
        fs::create_dir_all(dir.join("physical")).unwrap();
        let wl: Vec<f64> = (0..6).map(|i| 47.50 + 0.25 * i as f64).collect();
        let wo: Vec<f64> = (0..9).map(|i| 10.50 + 0.25 * i as f64).collect();
        let pl: Vec<f64> = (0..5).map(|i| 47.20 + 0.4 * i as f64).collect();
        let po: Vec<f64> = (0..7).map(|i| 10.20 + 0.4 * i as f64).collect();
        for &h in &self.weather_issues {
            let issued = t0.offset(h);
            let w = grid_file(issued, n_out, &wl, &wo, &WEATHER_CHANNELS, |k, lat, lon, step| match k {
                0 => 280.0 + lat - lon + step as f64,
                1 => 60.0 + 10.0 * (lat - 48.0),
                2 => 2.0 + (lon - 11.0),
                3 => -1.0,
                4 => 800.0 + 10.0 * step as f64,
                _ => 0.1,
            });
            fs::write(dir.join(format!("weather/w_{h:03}.csv")), w).unwrap();
        }
        for h in 2..=10 {
            let issued = t0.offset(h);
            let p = grid_file(issued, n_out, &pl, &po, &POLLUTANT_NAMES, |k, lat, lon, step| {
                20.0 + 5.0 * k as f64 + lat - 47.0 + (lon - 10.0) + step as f64
            });
            fs::write(dir.join(format!("physical/p_{h:03}.csv")), p).unwrap();
        }
    }
}
