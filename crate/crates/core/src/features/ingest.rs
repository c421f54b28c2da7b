//! Reading the five data sources from their CSV layouts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::roads::{parse_wkt_linestring, RoadCategory, RoadSegment};
use super::validate::{validate_measurements, RejectionReport, ValidationRules};
use crate::config::{POLLUTANT_NAMES, WEATHER_CHANNELS};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, LatLonGrid};
use crate::time::{Hour, Pollutant};

#[derive(Debug, Clone, PartialEq)]
pub struct StationMeasurement {
    pub station_id: String,
    pub location: GeoPoint,
    pub time: Hour,
    pub pollutant: Pollutant,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Station {
    pub id: String,
    pub city: String,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficReading {
    pub jam_factor: f32,
    pub speed: f32,
    pub historical_speed: f32,
}

/// One forecast issuance on its native lat/lon grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridIssuance {
    pub issued: Hour,
    pub grid: LatLonGrid,
    /// Forecast hours, consecutive, starting at `issued + 1`.
    pub times: Vec<Hour>,
    pub channels: Vec<String>,
    /// `[step][channel][row][col]`.
    pub values: Vec<f32>,
}

impl GridIssuance {
    pub fn field(&self, step: usize, channel: usize) -> &[f32] {
        let n = self.grid.nlat * self.grid.nlon;
        let start = (step * self.channels.len() + channel) * n;
        &self.values[start..start + n]
    }

    pub fn step_of(&self, t: Hour) -> Option<usize> {
        let k = t.hours_since(self.times[0]);
        (k >= 0 && (k as usize) < self.times.len()).then_some(k as usize)
    }
}

/// Hourly series on a dense clock shared by all stations or segments.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlySeries<T> {
    pub start: Hour,
    pub hours: usize,
    /// `[entity][hour]`.
    pub data: Vec<Vec<T>>,
}

impl<T: Copy> HourlySeries<T> {
    pub fn end(&self) -> Hour {
        self.start.offset(self.hours as i64)
    }

    pub fn covers(&self, from: Hour, to_inclusive: Hour) -> bool {
        from >= self.start && to_inclusive < self.end()
    }

    pub fn get(&self, entity: usize, t: Hour) -> Option<T> {
        let k = t.hours_since(self.start);
        if k < 0 || k as usize >= self.hours {
            return None;
        }
        Some(self.data[entity][k as usize])
    }
}

/// All ingested sources of one region.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Sorted by id.
    pub stations: Vec<Station>,
    /// Per station and hour, one value per pollutant; NaN where missing.
    pub measurements: HourlySeries<[f32; 4]>,
    pub roads: Vec<RoadSegment>,
    /// Per road segment (same order as `roads`); NaN jam factor where missing.
    pub traffic: HourlySeries<TrafficReading>,
    pub weather: BTreeMap<Hour, GridIssuance>,
    pub physical: BTreeMap<Hour, GridIssuance>,
    pub report: IngestReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub measurements_read: usize,
    pub rejected: RejectionReport,
    pub traffic_unknown_segment: usize,
}

impl Dataset {
    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.binary_search_by(|s| s.id.as_str().cmp(id)).ok()
    }

    pub fn measurement(&self, station: usize, t: Hour, p: Pollutant) -> Option<f64> {
        let v = self.measurements.get(station, t)?[p.index()];
        v.is_finite().then_some(v as f64)
    }

    /// Stations grouped by city, both levels sorted.
    pub fn cities(&self) -> BTreeMap<String, Vec<String>> {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in &self.stations {
            map.entry(s.city.clone()).or_default().push(s.id.clone());
        }
        map
    }

    /// Reads `measurements.csv`, `stations.csv` (optional), `roads.csv`,
    /// `traffic.csv`, `weather/*.csv` and `physical/*.csv` from `dir`.
    pub fn load(dir: &Path, rules: &ValidationRules) -> Result<Self> {
        let raw = read_measurements(&dir.join("measurements.csv"))?;
        let read = raw.len();
        let (clean, rejected) = validate_measurements(raw, rules);
        let station_file = dir.join("stations.csv");
        let listed = if station_file.exists() {
            read_stations(&station_file)?
        } else {
            Vec::new()
        };
        let stations = assemble_stations(&clean, listed);
        let measurements = measurement_series(&stations, &clean);
        let roads = read_roads(&dir.join("roads.csv"))?;
        let (traffic, unknown) = read_traffic(&dir.join("traffic.csv"), &roads)?;
        let weather = read_issuances(&dir.join("weather"), &WEATHER_CHANNELS)?;
        let physical = read_issuances(&dir.join("physical"), &POLLUTANT_NAMES)?;
        Ok(Self {
            stations,
            measurements,
            roads,
            traffic,
            weather,
            physical,
            report: IngestReport {
                measurements_read: read,
                rejected,
                traffic_unknown_segment: unknown,
            },
        })
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn reject(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::RejectedRecord {
        file: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn expect_header(path: &Path, rdr: &mut csv::Reader<fs::File>, want: &[&str]) -> Result<()> {
    let h = rdr.headers()?;
    let got: Vec<&str> = h.iter().collect();
    if got.len() < want.len() || got[..want.len()] != *want {
        return Err(reject(path, 1, format!("expected header {}, got {}", want.join(","), got.join(","))));
    }
    Ok(())
}

fn field<T: FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let s = rec.get(i).ok_or_else(|| reject(path, line, format!("missing {what}")))?;
    s.parse()
        .map_err(|_| reject(path, line, format!("unparseable {what} {s:?}")))
}

/// Empty or `NaN` fields read as NaN; validation drops them later.
fn value_field(path: &Path, rec: &csv::StringRecord, i: usize, what: &str) -> Result<f64> {
    match rec.get(i) {
        Some("") | None => Ok(f64::NAN),
        _ => field(path, rec, i, what),
    }
}

fn geo(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<GeoPoint> {
    let lat: f64 = field(path, rec, i, "lat")?;
    let lon: f64 = field(path, rec, i + 1, "lon")?;
    let line = rec.position().map_or(0, |p| p.line());
    GeoPoint::new(lat, lon).map_err(|e| reject(path, line, e.to_string()))
}

pub fn read_measurements(path: &Path) -> Result<Vec<StationMeasurement>> {
    let mut rdr = reader(path)?;
    expect_header(path, &mut rdr, &["station_id", "lat", "lon", "time_utc", "pollutant", "value_ugm3"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(StationMeasurement {
            station_id: field(path, &rec, 0, "station_id")?,
            location: geo(path, &rec, 1)?,
            time: field(path, &rec, 3, "time_utc")?,
            pollutant: field(path, &rec, 4, "pollutant")?,
            value: value_field(path, &rec, 5, "value_ugm3")?,
        });
    }
    Ok(out)
}

pub fn read_stations(path: &Path) -> Result<Vec<Station>> {
    let mut rdr = reader(path)?;
    expect_header(path, &mut rdr, &["station_id", "city", "lat", "lon"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(Station {
            id: field(path, &rec, 0, "station_id")?,
            city: field(path, &rec, 1, "city")?,
            location: geo(path, &rec, 2)?,
        });
    }
    Ok(out)
}

/// City key for stations missing from the station list: the 0.5° cell.
pub fn fallback_city(p: GeoPoint) -> String {
    format!("cell_{:+.1}_{:+.1}", (p.lat * 2.0).floor() / 2.0, (p.lon * 2.0).floor() / 2.0)
}

fn assemble_stations(clean: &[StationMeasurement], listed: Vec<Station>) -> Vec<Station> {
    let mut map: BTreeMap<String, Station> = listed.into_iter().map(|s| (s.id.clone(), s)).collect();
    for m in clean {
        map.entry(m.station_id.clone()).or_insert_with(|| Station {
            id: m.station_id.clone(),
            city: fallback_city(m.location),
            location: m.location,
        });
    }
    map.into_values().collect()
}

fn measurement_series(stations: &[Station], clean: &[StationMeasurement]) -> HourlySeries<[f32; 4]> {
    let (start, end) = clean
        .iter()
        .fold(None, |acc: Option<(Hour, Hour)>, m| match acc {
            None => Some((m.time, m.time)),
            Some((a, b)) => Some((a.min(m.time), b.max(m.time))),
        })
        .unwrap_or((Hour(0), Hour(-1)));
    let hours = (end.hours_since(start) + 1).max(0) as usize;
    let index: HashMap<&str, usize> = stations.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut data = vec![vec![[f32::NAN; 4]; hours]; stations.len()];
    for m in clean {
        let s = index[m.station_id.as_str()];
        data[s][m.time.hours_since(start) as usize][m.pollutant.index()] = m.value as f32;
    }
    HourlySeries { start, hours, data }
}

pub fn read_roads(path: &Path) -> Result<Vec<RoadSegment>> {
    let mut rdr = reader(path)?;
    expect_header(path, &mut rdr, &["segment_id", "category", "wkt_linestring"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: String = field(path, &rec, 0, "segment_id")?;
        let category: RoadCategory = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|e: Error| reject(path, line, e.to_string()))?;
        let points = parse_wkt_linestring(rec.get(2).unwrap_or("")).map_err(|e| reject(path, line, e.to_string()))?;
        out.push(RoadSegment { id, category, points });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = out.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(reject(path, 0, format!("duplicate segment_id {}", w[0].id)));
    }
    Ok(out)
}

/// Traffic rows for segments absent from the road network are counted and skipped.
pub fn read_traffic(path: &Path, roads: &[RoadSegment]) -> Result<(HourlySeries<TrafficReading>, usize)> {
    let mut rdr = reader(path)?;
    expect_header(
        path,
        &mut rdr,
        &["segment_id", "time_utc", "jam_factor", "speed_kmh", "historical_speed_kmh"],
    )?;
    let index: HashMap<&str, usize> = roads.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut rows = Vec::new();
    let mut unknown = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let seg: String = field(path, &rec, 0, "segment_id")?;
        let Some(&s) = index.get(seg.as_str()) else {
            unknown += 1;
            continue;
        };
        let t: Hour = field(path, &rec, 1, "time_utc")?;
        let r = TrafficReading {
            jam_factor: field(path, &rec, 2, "jam_factor")?,
            speed: field(path, &rec, 3, "speed_kmh")?,
            historical_speed: field(path, &rec, 4, "historical_speed_kmh")?,
        };
        if !(0.0..=10.0).contains(&r.jam_factor) || !(r.speed >= 0.0) || !(r.historical_speed >= 0.0) {
            return Err(reject(path, line, format!("traffic values out of range: {r:?}")));
        }
        rows.push((s, t, r));
    }
    let start = rows.iter().map(|r| r.1).min().unwrap_or(Hour(0));
    let end = rows.iter().map(|r| r.1).max().unwrap_or(Hour(-1));
    let hours = (end.hours_since(start) + 1).max(0) as usize;
    let missing = TrafficReading {
        jam_factor: f32::NAN,
        speed: f32::NAN,
        historical_speed: f32::NAN,
    };
    let mut data = vec![vec![missing; hours]; roads.len()];
    for (s, t, r) in rows {
        data[s][t.hours_since(start) as usize] = r;
    }
    Ok((HourlySeries { start, hours, data }, unknown))
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every `*.csv` issuance in `dir`, keyed by issuance hour (one hour
/// before the first forecast step).
pub fn read_issuances(dir: &Path, channels: &[&str]) -> Result<BTreeMap<Hour, GridIssuance>> {
    let mut out = BTreeMap::new();
    for path in csv_files(dir)? {
        let iss = read_issuance(&path, channels)?;
        if out.insert(iss.issued, iss).is_some() {
            return Err(reject(&path, 0, "second file for the same issuance"));
        }
    }
    Ok(out)
}

pub fn read_issuance(path: &Path, channels: &[&str]) -> Result<GridIssuance> {
    let mut rdr = reader(path)?;
    expect_header(path, &mut rdr, &["lat", "lon", "time_utc"])?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut col_of = Vec::with_capacity(channels.len());
    for ch in channels {
        let pos = header[3..]
            .iter()
            .position(|h| h == ch)
            .ok_or_else(|| reject(path, 1, format!("missing channel column {ch}")))?;
        col_of.push(pos + 3);
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let p = geo(path, &rec, 0)?;
        let t: Hour = field(path, &rec, 2, "time_utc")?;
        let mut vals = Vec::with_capacity(channels.len());
        for (k, &c) in col_of.iter().enumerate() {
            let v: f64 = field(path, &rec, c, channels[k])?;
            if !v.is_finite() {
                return Err(reject(path, line, format!("non-finite {}", channels[k])));
            }
            vals.push(v);
        }
        check_channel_ranges(path, line, channels, &vals)?;
        rows.push((line, p, t, vals));
    }
    if rows.is_empty() {
        return Err(reject(path, 1, "no rows"));
    }
    let lats: Vec<f64> = rows.iter().map(|r| r.1.lat).collect();
    let lons: Vec<f64> = rows.iter().map(|r| r.1.lon).collect();
    let grid = LatLonGrid::from_coordinates(&lats, &lons).map_err(|e| reject(path, 0, e.to_string()))?;
    let first = rows.iter().map(|r| r.2).min().expect("non-empty");
    let last = rows.iter().map(|r| r.2).max().expect("non-empty");
    let steps = (last.hours_since(first) + 1) as usize;
    let cells = grid.nlat * grid.nlon;
    if rows.len() != steps * cells {
        return Err(reject(
            path,
            0,
            format!("expected {steps} steps x {cells} grid points, found {} rows", rows.len()),
        ));
    }
    let nc = channels.len();
    let mut values = vec![f32::NAN; steps * nc * cells];
    let mut filled = vec![false; steps * cells];
    for (line, p, t, vals) in rows {
        let (r, c) = grid
            .index_of(p)
            .ok_or_else(|| reject(path, line, "point off the regular grid"))?;
        let s = t.hours_since(first) as usize;
        let slot = s * cells + r * grid.nlon + c;
        if std::mem::replace(&mut filled[slot], true) {
            return Err(reject(path, line, "duplicate grid point"));
        }
        for (k, v) in vals.into_iter().enumerate() {
            values[(s * nc + k) * cells + r * grid.nlon + c] = v as f32;
        }
    }
    Ok(GridIssuance {
        issued: first.offset(-1),
        grid,
        times: (0..steps).map(|k| first.offset(k as i64)).collect(),
        channels: channels.iter().map(|c| c.to_string()).collect(),
        values,
    })
}

fn check_channel_ranges(path: &Path, line: u64, channels: &[&str], vals: &[f64]) -> Result<()> {
    for (ch, &v) in channels.iter().zip(vals) {
        let ok = match *ch {
            "relative_humidity" => (0.0..=100.0).contains(&v),
            "pbl_height" | "precipitation_rate" => v >= 0.0,
            c if POLLUTANT_NAMES.contains(&c) => v >= 0.0,
            _ => true,
        };
        if !ok {
            return Err(reject(path, line, format!("{ch} out of range: {v}")));
        }
    }
    Ok(())
}
