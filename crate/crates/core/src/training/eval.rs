//! Station-level evaluation against the closest-measurement benchmark.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::batch::make_batch;
use super::train::PatchSource;
use crate::config::N_POLLUTANTS;
use crate::error::{Error, Result};
use crate::features::{FeatureStats, Patch};
use crate::geo::GridSpec;
use crate::model::Unet;
use crate::time::Pollutant;

pub const ENGINE: &str = "engine";
pub const BENCHMARK: &str = "closest_measurement";

/// Pollutant rows in report order, followed by the pooled row.
pub const REPORT_ROWS: [Pollutant; 4] = [Pollutant::NO2, Pollutant::O3, Pollutant::PM10, Pollutant::PM25];

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accum {
    pub sum: f64,
    pub n: u64,
}

impl Accum {
    pub fn add(&mut self, pred: f64, truth: f64) {
        let d = pred.max(0.0).ln_1p() - truth.ln_1p();
        self.sum += d * d;
        self.n += 1;
    }

    pub fn merge(&mut self, o: &Accum) {
        self.sum += o.sum;
        self.n += o.n;
    }

    pub fn msle(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Squared-log-error totals keyed by (method, pollutant, horizon hour).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub n_out: usize,
    pub cells: BTreeMap<(String, Pollutant, usize), Accum>,
    /// Samples dropped for lack of a benchmark (no other station at t0).
    pub excluded_no_benchmark: u64,
    /// (patch, horizon, pollutant) slots without a station reading.
    pub excluded_no_truth: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub pollutant: String,
    pub horizon_h: usize,
    pub method: String,
    pub msle: f64,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub pollutant: String,
    pub method: String,
    pub msle: f64,
    pub n_samples: u64,
}

impl EvalReport {
    pub fn new(n_out: usize) -> Self {
        Self {
            n_out,
            ..Default::default()
        }
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.cells.keys().map(|k| k.0.clone()).collect();
        m.dedup();
        m.sort_by_key(|x| (x != ENGINE, x != BENCHMARK, x.clone()));
        m.dedup();
        m
    }

    fn accum(&mut self, method: &str, p: Pollutant, h: usize) -> &mut Accum {
        self.cells.entry((method.to_string(), p, h)).or_default()
    }

    pub fn merge(&mut self, o: &EvalReport) {
        for (k, v) in &o.cells {
            self.cells.entry(k.clone()).or_default().merge(v);
        }
        self.excluded_no_benchmark += o.excluded_no_benchmark;
        self.excluded_no_truth += o.excluded_no_truth;
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let mut out = Vec::new();
        for method in self.methods() {
            for p in REPORT_ROWS {
                for h in 1..=self.n_out {
                    let a = self.cells.get(&(method.clone(), p, h)).copied().unwrap_or_default();
                    out.push(ReportRow {
                        pollutant: p.name().into(),
                        horizon_h: h,
                        method: method.clone(),
                        msle: a.msle(),
                        n_samples: a.n,
                    });
                }
            }
        }
        out
    }

    /// Horizon average for one pollutant (hours weighted by sample count).
    pub fn average(&self, method: &str, p: Pollutant) -> Accum {
        let mut a = Accum::default();
        for h in 1..=self.n_out {
            if let Some(c) = self.cells.get(&(method.to_string(), p, h)) {
                a.merge(c);
            }
        }
        a
    }

    /// Sample-weighted mean over all pollutants and hours.
    pub fn global(&self, method: &str) -> Accum {
        let mut a = Accum::default();
        for p in REPORT_ROWS {
            a.merge(&self.average(method, p));
        }
        a
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for method in self.methods() {
            for p in REPORT_ROWS {
                let a = self.average(&method, p);
                out.push(SummaryRow {
                    pollutant: p.name().into(),
                    method: method.clone(),
                    msle: a.msle(),
                    n_samples: a.n,
                });
            }
            let g = self.global(&method);
            out.push(SummaryRow {
                pollutant: "Global".into(),
                method: method.clone(),
                msle: g.msle(),
                n_samples: g.n,
            });
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.summary() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Table in the layout of pollutant rows plus a Global row.
    pub fn render(&self) -> String {
        let methods = self.methods();
        let mut s = format!("{:<8}", "");
        for m in &methods {
            s += &format!("{m:>22}");
        }
        s.push('\n');
        let mut line = |label: &str, get: &dyn Fn(&str) -> Accum| {
            s += &format!("{label:<8}");
            for m in &methods {
                let a = get(m);
                s += &format!("{:>14.4} (n={:>4})", a.msle(), a.n);
            }
            s.push('\n');
        };
        for p in REPORT_ROWS {
            line(p.name(), &|m| self.average(m, p));
        }
        line("Global", &|m| self.global(m));
        s
    }
}

/// What plays the engine's role in an evaluation.
pub enum Predictor<'a> {
    Model { model: &'a Unet<f32>, stats: &'a FeatureStats },
    /// The station's own readings (sanity mode: engine MSLE is zero).
    Perfect,
    Constant(f64),
}

impl Predictor<'_> {
    /// Forecasts `(N_out, H_R, W_R, 4)` per output grid for one patch.
    fn forecast(&self, patch: &Patch) -> Result<Option<Vec<plume_tensor::Tensor<f32>>>> {
        match self {
            Predictor::Model { model, stats } => {
                let batch = make_batch(std::slice::from_ref(patch), stats)?;
                let outs = model.predict(&batch.inputs)?;
                Ok(Some(
                    outs.into_iter()
                        .map(|t| {
                            let s = t.shape().to_vec();
                            t.reshape(&[s[0], s[2], s[3], s[4]])
                        })
                        .collect::<std::result::Result<_, _>>()?,
                ))
            }
            _ => Ok(None),
        }
    }
}

/// Engine value at the cell containing the station for every hour and pollutant.
fn station_cell_values(grid_out: &plume_tensor::Tensor<f32>, cell: (usize, usize)) -> Vec<[f64; N_POLLUTANTS]> {
    let s = grid_out.shape();
    let (n_out, h, w) = (s[0], s[1], s[2]);
    (0..n_out)
        .map(|t| {
            let base = ((t * h + cell.0) * w + cell.1) * N_POLLUTANTS;
            std::array::from_fn(|p| grid_out.data()[base + p] as f64)
        })
        .collect()
}

/// Evaluates one patch. Engine and benchmark share the sample set: a
/// (patch, hour, pollutant) slot counts only when both the station reading and
/// the benchmark exist.
pub fn evaluate_patch(
    patch: &Patch,
    predictor: &Predictor<'_>,
    output_grids: &[(f64, usize)],
) -> Result<(EvalReport, EvalReport)> {
    let n_out = patch.station_truth.shape()[0];
    let mut main = EvalReport::new(n_out);
    let mut diag = EvalReport::new(n_out);
    let forecasts = predictor.forecast(patch)?;
    let per_grid: Vec<Vec<[f64; N_POLLUTANTS]>> = match &forecasts {
        Some(outs) => outs
            .iter()
            .zip(output_grids)
            .map(|(t, &(r, n))| {
                let grid = GridSpec::centered(patch.center, r, n, n)?;
                let cell = grid
                    .cell_of(patch.center)
                    .ok_or_else(|| Error::InvalidShape("station outside its own patch".into()))?;
                Ok(station_cell_values(t, cell))
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    for p in Pollutant::ALL {
        let bench = patch.benchmark.data()[p.index()] as f64;
        for h in 1..=n_out {
            let truth = patch.station_truth.data()[(h - 1) * N_POLLUTANTS + p.index()] as f64;
            if !truth.is_finite() {
                main.excluded_no_truth += 1;
                continue;
            }
            if !bench.is_finite() {
                main.excluded_no_benchmark += 1;
                continue;
            }
            let engine = match predictor {
                Predictor::Perfect => truth,
                Predictor::Constant(c) => *c,
                Predictor::Model { .. } => per_grid[0][h - 1][p.index()],
            };
            main.accum(ENGINE, p, h).add(engine, truth);
            main.accum(BENCHMARK, p, h).add(bench, truth);
            for (k, grid) in per_grid.iter().enumerate().skip(1) {
                let name = format!("engine_{}m", output_grids[k].0);
                diag.accum(&name, p, h).add(grid[h - 1][p.index()], truth);
            }
        }
    }
    Ok((main, diag))
}

/// Evaluates every patch of `source` in parallel, reducing in index order.
pub fn evaluate(
    source: &dyn PatchSource,
    predictor: &Predictor<'_>,
    output_grids: &[(f64, usize)],
    n_out: usize,
) -> Result<(EvalReport, EvalReport)> {
    let parts: Vec<(EvalReport, EvalReport)> = (0..source.len())
        .into_par_iter()
        .map(|i| evaluate_patch(&source.get(i)?, predictor, output_grids))
        .collect::<Result<_>>()?;
    let mut main = EvalReport::new(n_out);
    let mut diag = EvalReport::new(n_out);
    for (m, d) in &parts {
        main.merge(m);
        diag.merge(d);
    }
    Ok((main, diag))
}
