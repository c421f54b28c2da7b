//! Assembly of training and inference samples centered on a station.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use plume_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::ingest::{Dataset, GridIssuance};
use super::roads::SegmentIncidence;
use super::targets::TargetProjector;
use crate::config::{fingerprint_of, ModelConfig, TargetConfig, N_POLLUTANTS};
use crate::error::{Error, Result};
use crate::geo::{bilinear_resample, GeoPoint, GridSpec, KernelProjector};
use crate::time::{Hour, Pollutant};

/// Everything about the data layout a patch depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub n_in: usize,
    pub n_out: usize,
    pub hi_size: usize,
    pub hi_resolution_m: f64,
    pub lo_size: usize,
    pub lo_resolution_m: f64,
    pub sigma_hi_m: f64,
    pub sigma_lo_m: f64,
    pub station_weight_channels: bool,
    pub output_grids: Vec<(f64, usize)>,
    pub targets: TargetConfig,
}

impl PatchLayout {
    pub fn new(model: &ModelConfig, targets: &TargetConfig) -> Self {
        Self {
            n_in: model.n_in,
            n_out: model.n_out,
            hi_size: model.hi_size,
            hi_resolution_m: model.hi_resolution_m,
            lo_size: model.lo_size,
            lo_resolution_m: model.lo_resolution_m,
            sigma_hi_m: model.sigma_hi_m,
            sigma_lo_m: model.sigma_lo_m,
            station_weight_channels: model.station_weight_channels,
            output_grids: model.output_grids(),
            targets: targets.clone(),
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }

    pub fn station_channels(&self) -> usize {
        if self.station_weight_channels {
            2 * N_POLLUTANTS
        } else {
            N_POLLUTANTS
        }
    }
}

/// One sample. Arrays are single-precision, time-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center_station_id: String,
    pub center: GeoPoint,
    pub t0: Hour,
    /// `(N_in, hi, hi, C_hh)`: station values, weight sums, traffic.
    pub hi_hist: Tensor<f32>,
    /// `(hi, hi, 2)`: road counts.
    pub hi_const: Tensor<f32>,
    /// `(N_in, lo, lo, C_lh)`: station values and weight sums.
    pub lo_hist: Tensor<f32>,
    /// `(N_out, lo, lo, 10)`: weather then physical model.
    pub lo_fcst: Tensor<f32>,
    /// `(N_out, H_R, W_R, 4)` per output grid, NaN where masked.
    pub targets: Vec<Tensor<f32>>,
    /// `(N_out, 4)`: the center station's own readings, for evaluation only.
    pub station_truth: Tensor<f32>,
    /// `(4)`: closest other station's reading at `t0`, NaN when undefined.
    pub benchmark: Tensor<f32>,
}

/// Geometry cached per center station.
struct StationContext {
    others: Vec<usize>,
    hi_grid: GridSpec,
    lo_grid: GridSpec,
    proj_hi: KernelProjector,
    proj_lo: KernelProjector,
    targets: Vec<TargetProjector>,
    incidence: SegmentIncidence,
    segments: Vec<usize>,
    roads: Vec<f64>,
}

/// Builds patches from an ingested dataset, caching per-station geometry.
pub struct PatchBuilder<'a> {
    data: &'a Dataset,
    layout: PatchLayout,
    cache: Mutex<HashMap<usize, Arc<StationContext>>>,
}

impl<'a> PatchBuilder<'a> {
    pub fn new(data: &'a Dataset, model: &ModelConfig, targets: &TargetConfig) -> Self {
        Self {
            data,
            layout: PatchLayout::new(model, targets),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn layout(&self) -> &PatchLayout {
        &self.layout
    }

    fn context(&self, station: usize) -> Result<Arc<StationContext>> {
        if let Some(c) = self.cache.lock().expect("cache lock").get(&station) {
            return Ok(c.clone());
        }
        let ctx = Arc::new(self.geometry(Some(station), self.data.stations[station].location)?);
        self.cache.lock().expect("cache lock").insert(station, ctx.clone());
        Ok(ctx)
    }

    fn geometry(&self, station: Option<usize>, center: GeoPoint) -> Result<StationContext> {
        let l = &self.layout;
        let others: Vec<usize> = (0..self.data.stations.len()).filter(|&i| Some(i) != station).collect();
        let points: Vec<GeoPoint> = others.iter().map(|&i| self.data.stations[i].location).collect();
        let hi_grid = GridSpec::centered(center, l.hi_resolution_m, l.hi_size, l.hi_size)?;
        let lo_grid = GridSpec::centered(center, l.lo_resolution_m, l.lo_size, l.lo_size)?;
        let incidence_all = SegmentIncidence::new(&self.data.roads, &hi_grid);
        let segments: Vec<usize> = incidence_all.active().collect();
        let categories: Vec<_> = self.data.roads.iter().map(|r| r.category).collect();
        let roads = incidence_all.roads(&categories);
        let incidence = SegmentIncidence {
            width: incidence_all.width,
            height: incidence_all.height,
            cells: segments.iter().map(|&s| incidence_all.cells[s].clone()).collect(),
        };
        let targets = l
            .output_grids
            .iter()
            .map(|&(r, n)| TargetProjector::new(center, r, n, &points, &l.targets))
            .collect::<Result<_>>()?;
        Ok(StationContext {
            proj_hi: KernelProjector::new(&hi_grid, l.sigma_hi_m, &points)?,
            proj_lo: KernelProjector::new(&lo_grid, l.sigma_lo_m, &points)?,
            others,
            hi_grid,
            lo_grid,
            targets,
            incidence,
            segments,
            roads,
        })
    }

    /// Issuance usable for a patch at `t0`: issued at `t0` and holding every
    /// forecast hour `t0+1 ..= t0+N_out`.
    fn issuance<'d>(&self, feed: &'d std::collections::BTreeMap<Hour, GridIssuance>, t0: Hour, name: &str) -> Result<&'d GridIssuance> {
        let iss = feed
            .get(&t0)
            .ok_or_else(|| Error::IncompletePatch(format!("no {name} issuance at {t0}")))?;
        let last = t0.offset(self.layout.n_out as i64);
        if iss.step_of(t0.offset(1)).is_none() || iss.step_of(last).is_none() {
            return Err(Error::IncompletePatch(format!(
                "{name} issuance {t0} does not reach {last}"
            )));
        }
        Ok(iss)
    }

    /// Checks every source covers `[t0 - N_in + 1, t0 + N_out]`.
    pub fn check_coverage(&self, t0: Hour) -> Result<()> {
        let l = &self.layout;
        let first = t0.offset(1 - l.n_in as i64);
        let last = t0.offset(l.n_out as i64);
        if !self.data.measurements.covers(first, last) {
            return Err(Error::IncompletePatch(format!(
                "measurements cover {} .. {}, patch needs {first} .. {last}",
                self.data.measurements.start,
                self.data.measurements.end().offset(-1)
            )));
        }
        if !self.data.roads.is_empty() && !self.data.traffic.covers(first, t0) {
            return Err(Error::IncompletePatch(format!("traffic does not cover {first} .. {t0}")));
        }
        self.issuance(&self.data.weather, t0, "weather")?;
        self.issuance(&self.data.physical, t0, "physical-model")?;
        Ok(())
    }

    /// Start hours for which every source is complete, every `stride_h` hours.
    pub fn candidate_t0s(&self, stride_h: usize) -> Vec<Hour> {
        let l = &self.layout;
        let m = &self.data.measurements;
        if m.hours < l.n_in + l.n_out {
            return Vec::new();
        }
        let first = m.start.offset(l.n_in as i64 - 1);
        let last = m.end().offset(-(l.n_out as i64) - 1);
        let mut out = Vec::new();
        let mut t = first;
        while t <= last {
            if self.check_coverage(t).is_ok() {
                out.push(t);
                t = t.offset(stride_h.max(1) as i64);
            } else {
                t = t.offset(1);
            }
        }
        out
    }

    pub fn build(&self, station: usize, t0: Hour) -> Result<Patch> {
        self.check_coverage(t0)?;
        let ctx = self.context(station)?;
        self.assemble(&ctx, Some(station), t0)
    }

    /// Patch centered on an arbitrary point, fed by every station. Station
    /// truth and benchmark are NaN.
    pub fn build_at(&self, center: GeoPoint, t0: Hour) -> Result<Patch> {
        self.check_coverage(t0)?;
        let ctx = self.geometry(None, center)?;
        self.assemble(&ctx, None, t0)
    }

    fn assemble(&self, ctx: &StationContext, station: Option<usize>, t0: Hour) -> Result<Patch> {
        let l = &self.layout;
        let data = self.data;
        let sc = l.station_channels();

        let readings = |t: Hour| -> Vec<[f64; N_POLLUTANTS]> {
            ctx.others
                .iter()
                .map(|&i| {
                    data.measurements
                        .get(i, t)
                        .map_or([f64::NAN; N_POLLUTANTS], |v| v.map(|x| x as f64))
                })
                .collect()
        };
        let project = |proj: &KernelProjector, vals: &[[f64; N_POLLUTANTS]], out: &mut [f32], stride: usize| {
            for p in 0..N_POLLUTANTS {
                let v: Vec<Option<f64>> = vals.iter().map(|x| x[p].is_finite().then_some(x[p])).collect();
                let wg = proj.project(&v);
                for cell in 0..wg.values.len() {
                    out[cell * stride + p] = wg.values[cell] as f32;
                    if l.station_weight_channels {
                        out[cell * stride + N_POLLUTANTS + p] = wg.weight_sum[cell] as f32;
                    }
                }
            }
        };

        let hi_cells = l.hi_size * l.hi_size;
        let lo_cells = l.lo_size * l.lo_size;
        let c_hh = sc + 3;
        let mut hi_hist = vec![0f32; l.n_in * hi_cells * c_hh];
        let mut lo_hist = vec![0f32; l.n_in * lo_cells * sc];
        for k in 0..l.n_in {
            let t = t0.offset(k as i64 + 1 - l.n_in as i64);
            let vals = readings(t);
            let hi_frame = &mut hi_hist[k * hi_cells * c_hh..(k + 1) * hi_cells * c_hh];
            project(&ctx.proj_hi, &vals, hi_frame, c_hh);
            project(&ctx.proj_lo, &vals, &mut lo_hist[k * lo_cells * sc..(k + 1) * lo_cells * sc], sc);
            let traffic: Vec<Option<[f64; 3]>> = ctx
                .segments
                .iter()
                .map(|&s| {
                    data.traffic.get(s, t).and_then(|r| {
                        r.jam_factor
                            .is_finite()
                            .then_some([r.jam_factor as f64, r.speed as f64, r.historical_speed as f64])
                    })
                })
                .collect();
            let tr = ctx.incidence.traffic(&traffic);
            for cell in 0..hi_cells {
                for j in 0..3 {
                    hi_frame[cell * c_hh + sc + j] = tr[cell * 3 + j] as f32;
                }
            }
        }

        let weather = self.issuance(&data.weather, t0, "weather")?;
        let physical = self.issuance(&data.physical, t0, "physical-model")?;
        let n_w = weather.channels.len();
        let n_f = n_w + physical.channels.len();
        let mut lo_fcst = vec![0f32; l.n_out * lo_cells * n_f];
        for s in 0..l.n_out {
            let t = t0.offset(s as i64 + 1);
            for (offset, iss) in [(0, weather), (n_w, physical)] {
                let step = iss.step_of(t).expect("coverage checked");
                for ch in 0..iss.channels.len() {
                    let src: Vec<f64> = iss.field(step, ch).iter().map(|&v| v as f64).collect();
                    let dst = bilinear_resample(&src, &iss.grid, &ctx.lo_grid)?;
                    for (cell, v) in dst.into_iter().enumerate() {
                        lo_fcst[(s * lo_cells + cell) * n_f + offset + ch] = v as f32;
                    }
                }
            }
        }

        let horizon: Vec<Vec<[f64; N_POLLUTANTS]>> =
            (1..=l.n_out).map(|s| readings(t0.offset(s as i64))).collect();
        let targets = ctx.targets.iter().map(|tp| tp.build(&horizon, &l.targets)).collect();

        let truth: Vec<f32> = (1..=l.n_out)
            .flat_map(|s| {
                let t = t0.offset(s as i64);
                Pollutant::ALL.map(|p| {
                    station
                        .and_then(|i| data.measurement(i, t, p))
                        .map_or(f32::NAN, |v| v as f32)
                })
            })
            .collect();
        let bench = match station {
            Some(i) => closest_measurement_benchmark(data, i, t0).map(|v| v.map_or(f32::NAN, |x| x as f32)),
            None => [f32::NAN; N_POLLUTANTS],
        };

        let roads: Vec<f32> = ctx.roads.iter().map(|&v| v as f32).collect();
        debug_assert_eq!(ctx.hi_grid.cells(), hi_cells);
        Ok(Patch {
            center_station_id: station.map_or_else(String::new, |i| data.stations[i].id.clone()),
            center: station.map_or(ctx.hi_grid.center, |i| data.stations[i].location),
            t0,
            hi_hist: Tensor::from_vec(&[l.n_in, l.hi_size, l.hi_size, c_hh], hi_hist)?,
            hi_const: Tensor::from_vec(&[l.hi_size, l.hi_size, 2], roads)?,
            lo_hist: Tensor::from_vec(&[l.n_in, l.lo_size, l.lo_size, sc], lo_hist)?,
            lo_fcst: Tensor::from_vec(&[l.n_out, l.lo_size, l.lo_size, n_f], lo_fcst)?,
            targets,
            station_truth: Tensor::from_vec(&[l.n_out, N_POLLUTANTS], truth)?,
            benchmark: Tensor::from_vec(&[N_POLLUTANTS], bench.to_vec())?,
        })
    }
}

/// Reading at `t0` of the nearest other station, per pollutant. Distances are
/// euclidean in the evaluated station's local frame; ties go to the smaller id.
pub fn closest_measurement_benchmark(data: &Dataset, station: usize, t0: Hour) -> [Option<f64>; N_POLLUTANTS] {
    let frame = crate::geo::LocalFrame::new(data.stations[station].location);
    let mut best: [Option<(f64, f64)>; N_POLLUTANTS] = [None; N_POLLUTANTS];
    // stations are sorted by id, so a strict comparison keeps the smaller id on ties
    for (i, s) in data.stations.iter().enumerate() {
        if i == station {
            continue;
        }
        let (x, y) = frame.to_local(s.location);
        let d = x.hypot(y);
        for p in Pollutant::ALL {
            if let Some(v) = data.measurement(i, t0, p) {
                let slot = &mut best[p.index()];
                if slot.is_none_or(|(bd, _)| d < bd) {
                    *slot = Some((d, v));
                }
            }
        }
    }
    best.map(|b| b.map(|(_, v)| v))
}
