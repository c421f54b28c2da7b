//! Scale-Unit encoder–decoder blocks and their multi-resolution U-Net.
//!
//! Sequences are time-major: `(T, B, H, W, C)`. Inside a unit they travel
//! flattened as `(T*B, H, W, C)` so that time-distributed layers are plain
//! 2-D convolutions.

mod layers;
mod params;

pub use layers::{Conv, ConvLstm, Forward, Mode, Norm};
pub use params::{Param, ParamStore, RunningStats, BN_MOMENTUM};

use plume_tensor::{Graph, Initializer, Scalar, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, ScaleUnitConfig};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, GridSpec};

/// Initial bias of the forecasting head, keeping the relu active at start.
pub const HEAD_BIAS_INIT: f64 = 1.0;

/// Encoded and decoded streams of one unit, flattened `(N_out*B, H, W, C)`.
#[derive(Debug, Clone, Copy)]
pub struct ScaleUnitOutput {
    pub forecasts: Var,
    pub decoded: Var,
}

/// Inputs of a Scale-Unit. `hist` is `(N_in, B, H, W, C)`, `constant` is
/// `(B, H, W, C)`, `forecast` and `lower_decoded` are `(N_out, B, H, W, C)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScaleUnitInputs {
    pub hist: Option<Var>,
    pub constant: Option<Var>,
    pub forecast: Option<Var>,
    pub lower_decoded: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ScaleUnit {
    pub cfg: ScaleUnitConfig,
    n_out: usize,
    hist_conv: Conv,
    hist_conv_norm: Norm,
    hist_lstm: ConvLstm,
    hist_lstm_norm: Norm,
    constant: Option<(Conv, Norm)>,
    forecast: Option<[(ConvLstm, Norm); 2]>,
    decoder: Conv,
    decoder_norm: Norm,
    head: Conv,
}

/// Input channel counts a unit is built for.
#[derive(Debug, Clone, Copy)]
pub struct UnitChannels {
    pub hist: usize,
    pub constant: usize,
    pub forecast: usize,
    pub lower: usize,
}

impl ScaleUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ScaleUnitConfig,
        ch: UnitChannels,
        kernel: usize,
        n_pol: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Self {
        let (f1, f2) = cfg.historical_encoder_filters;
        let hist_conv = Conv::new(store, &format!("{name}/hist_conv"), kernel, ch.hist, f1, 0.0, rng);
        let hist_conv_norm = Norm::new(store, &format!("{name}/hist_conv_bn"), f1, rng);
        let hist_lstm = ConvLstm::new(store, &format!("{name}/hist_lstm"), kernel, f1, f2, rng);
        let hist_lstm_norm = Norm::new(store, &format!("{name}/hist_lstm_bn"), f2, rng);
        let mut concat = f2;
        let constant = cfg.constant_encoder_filters.map(|f| {
            concat += f;
            (
                Conv::new(store, &format!("{name}/const_conv"), kernel, ch.constant, f, 0.0, rng),
                Norm::new(store, &format!("{name}/const_bn"), f, rng),
            )
        });
        let forecast = cfg.forecast_encoder_filters.map(|(g1, g2)| {
            concat += g2;
            [
                (
                    ConvLstm::new(store, &format!("{name}/fcst_lstm1"), kernel, ch.forecast, g1, rng),
                    Norm::new(store, &format!("{name}/fcst_lstm1_bn"), g1, rng),
                ),
                (
                    ConvLstm::new(store, &format!("{name}/fcst_lstm2"), kernel, g1, g2, rng),
                    Norm::new(store, &format!("{name}/fcst_lstm2_bn"), g2, rng),
                ),
            ]
        });
        if cfg.accepts_lower_decoded {
            concat += ch.lower;
        }
        let d = cfg.decoder_filters;
        let decoder = Conv::new(store, &format!("{name}/decoder"), kernel, concat, d, 0.0, rng);
        let decoder_norm = Norm::new(store, &format!("{name}/decoder_bn"), d, rng);
        let head = Conv::with_init(store, &format!("{name}/head"), 1, d, n_pol, Initializer::Zeros, HEAD_BIAS_INIT, rng);
        Self {
            cfg: cfg.clone(),
            n_out,
            hist_conv,
            hist_conv_norm,
            hist_lstm,
            hist_lstm_norm,
            constant,
            forecast,
            decoder,
            decoder_norm,
            head,
        }
    }

    /// TimeDistributedConv2D + BN + relu, then ConvLSTM + BN; the last hidden
    /// state is replicated over the forecast horizon.
    pub fn encode_historical<S: Scalar>(&self, fw: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let conv = self.hist_conv;
        let norm = self.hist_conv_norm;
        let y = fw.time_distributed(x, |fw, v| {
            let v = conv.apply(fw, v)?;
            let v = norm.apply(fw, v)?;
            Ok(fw.graph.relu(v))
        })?;
        let last = self.hist_lstm.scan(fw, y, false)?;
        let last = self.hist_lstm_norm.apply(fw, last)?;
        Ok(fw.graph.repeat(last, self.n_out)?)
    }

    /// Conv + BN + relu computed once and replicated over the horizon.
    pub fn encode_constant<S: Scalar>(&self, fw: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let (conv, norm) = self
            .constant
            .ok_or_else(|| Error::Config("unit has no constant encoder".into()))?;
        let y = conv.apply(fw, x)?;
        let y = norm.apply(fw, y)?;
        let y = fw.graph.relu(y);
        Ok(fw.graph.repeat(y, self.n_out)?)
    }

    /// Two stacked ConvLSTMs (each followed by BN) over the forecast steps.
    pub fn encode_forecast<S: Scalar>(&self, fw: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let layers = self
            .forecast
            .ok_or_else(|| Error::Config("unit has no forecast encoder".into()))?;
        let mut seq = x;
        for (lstm, norm) in layers {
            let y = lstm.scan(fw, seq, true)?;
            let shape = fw.graph.shape(y).to_vec();
            let flat = fw.graph.reshape(y, &[shape[0] * shape[1], shape[2], shape[3], shape[4]])?;
            let flat = norm.apply(fw, flat)?;
            seq = fw.graph.reshape(flat, &shape)?;
        }
        let s = fw.graph.shape(seq).to_vec();
        Ok(fw.graph.reshape(seq, &[s[0] * s[1], s[2], s[3], s[4]])?)
    }

    pub fn forward<S: Scalar>(&self, fw: &mut Forward<'_, S>, inputs: ScaleUnitInputs) -> Result<ScaleUnitOutput> {
        let hist = inputs
            .hist
            .ok_or_else(|| Error::Config("historical input is mandatory".into()))?;
        let mut streams = vec![self.encode_historical(fw, hist)?];
        match (self.constant.is_some(), inputs.constant) {
            (true, Some(x)) => streams.push(self.encode_constant(fw, x)?),
            (false, None) => {}
            (true, None) => return Err(Error::Config("constant input missing".into())),
            (false, Some(_)) => return Err(Error::Config("unit takes no constant input".into())),
        }
        match (self.forecast.is_some(), inputs.forecast) {
            (true, Some(x)) => streams.push(self.encode_forecast(fw, x)?),
            (false, None) => {}
            (true, None) => return Err(Error::Config("forecast input missing".into())),
            (false, Some(_)) => return Err(Error::Config("unit takes no forecast input".into())),
        }
        match (self.cfg.accepts_lower_decoded, inputs.lower_decoded) {
            (true, Some(x)) => {
                let s = fw.graph.shape(x).to_vec();
                let flat = match s[..] {
                    [t, b, h, w, c] => fw.graph.reshape(x, &[t * b, h, w, c])?,
                    _ => x,
                };
                streams.push(flat);
            }
            (false, None) => {}
            (true, None) => return Err(Error::Config("decoded features from below missing".into())),
            (false, Some(_)) => return Err(Error::Config("unit takes no decoded features".into())),
        }
        let shapes: Vec<Vec<usize>> = streams.iter().map(|&v| fw.graph.shape(v).to_vec()).collect();
        if shapes.iter().any(|s| s[..3] != shapes[0][..3]) {
            return Err(Error::InvalidShape(format!(
                "decoder junction at {} m: stream shapes {shapes:?}",
                self.cfg.resolution_m
            )));
        }
        let cat = fw.graph.concat(&streams, 3)?;
        let d = self.decoder.apply(fw, cat)?;
        let d = self.decoder_norm.apply(fw, d)?;
        let decoded = fw.graph.relu(d);
        let f = self.head.apply(fw, decoded)?;
        let forecasts = fw.graph.relu(f);
        Ok(ScaleUnitOutput { forecasts, decoded })
    }
}

/// Rows and columns (half-open) of the smallest block of `lo` cells that
/// covers the footprint of `hi`.
pub fn spatial_scaling_window(lo: &GridSpec, hi: &GridSpec) -> Result<((usize, usize), (usize, usize))> {
    let (lw, _, _, ln) = lo.bounds_local();
    let (w, s, e, n) = {
        let (w, s, e, n) = hi.bounds_local();
        // both grids must share a frame for the comparison to hold
        let shift = |x: f64, y: f64| {
            let p = hi.frame.to_geo(x, y);
            lo.frame.to_local(p)
        };
        let (w2, s2) = shift(w, s);
        let (e2, n2) = shift(e, n);
        (w2, s2, e2, n2)
    };
    let tol = 1e-9 * lo.resolution_m;
    let r = lo.resolution_m;
    let c0 = ((w - lw) / r + tol).floor();
    let c1 = ((e - lw) / r - tol).ceil();
    let r0 = ((ln - n) / r + tol).floor();
    let r1 = ((ln - s) / r - tol).ceil();
    let corner = if c0 < 0.0 && r0 < 0.0 {
        Some("north-west")
    } else if c1 > lo.width as f64 && r0 < 0.0 {
        Some("north-east")
    } else if c0 < 0.0 && r1 > lo.height as f64 {
        Some("south-west")
    } else if c1 > lo.width as f64 && r1 > lo.height as f64 {
        Some("south-east")
    } else if c0 < 0.0 || r0 < 0.0 || c1 > lo.width as f64 || r1 > lo.height as f64 {
        Some("edge")
    } else {
        None
    };
    if let Some(corner) = corner {
        let g = hi.center;
        return Err(Error::OutOfCoverage {
            corner: corner.into(),
            lat: g.lat,
            lon: g.lon,
        });
    }
    Ok(((r0 as usize, r1 as usize), (c0 as usize, c1 as usize)))
}

/// Crop–average–replicate of low-resolution decoded features `(N, H, W, D)`
/// onto an `out x out` grid.
pub fn spatial_scaling<S: Scalar>(
    graph: &mut Graph<S>,
    lo_decoded: Var,
    window: ((usize, usize), (usize, usize)),
    out: usize,
) -> Result<Var> {
    Ok(graph.region_mean(lo_decoded, window.0, window.1, out, out)?)
}

/// Batched model inputs, time-major.
#[derive(Debug, Clone)]
pub struct UnetInputs<S> {
    /// `(N_in, B, hi, hi, C_hh)`
    pub hi_hist: Tensor<S>,
    /// `(B, hi, hi, C_hc)`
    pub hi_const: Tensor<S>,
    /// `(N_in, B, lo, lo, C_lh)`
    pub lo_hist: Tensor<S>,
    /// `(N_out, B, lo, lo, C_lf)`
    pub lo_fcst: Tensor<S>,
}

impl<S: Scalar> UnetInputs<S> {
    pub fn batch_size(&self) -> usize {
        self.hi_const.shape()[0]
    }
}

/// The two-block U-Net: a stack of high-resolution units (finest first) and
/// one low-resolution unit feeding the coarsest of them.
#[derive(Debug, Clone)]
pub struct Unet<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    /// Per-pollutant multiplier applied after the relu head.
    pub output_scale: Vec<f64>,
    hi: Vec<ScaleUnit>,
    lo: ScaleUnit,
    window: ((usize, usize), (usize, usize)),
}

impl<S: Scalar> Unet<S> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let k = config.kernel_size;
        let mut store = ParamStore::default();
        let lo = ScaleUnit::new(
            &mut store,
            "lo0",
            &config.lo_unit,
            UnitChannels {
                hist: ch.lo_hist.len(),
                constant: 0,
                forecast: ch.lo_fcst.len(),
                lower: 0,
            },
            k,
            config.n_pol,
            config.n_out,
            rng,
        );
        let levels = config.hi_levels();
        let mut hi_rev = Vec::with_capacity(levels);
        let mut lower = config.lo_unit.decoder_filters;
        for level in (0..levels).rev() {
            let cfg = &config.hi_units[level];
            let unit = ScaleUnit::new(
                &mut store,
                &format!("hi{level}"),
                cfg,
                UnitChannels {
                    hist: ch.hi_hist.len(),
                    constant: ch.hi_const.len(),
                    forecast: 0,
                    lower,
                },
                k,
                config.n_pol,
                config.n_out,
                rng,
            );
            lower = cfg.decoder_filters;
            hi_rev.push(unit);
        }
        hi_rev.reverse();
        let origin = GeoPoint { lat: 0.0, lon: 0.0 };
        let lo_grid = GridSpec::centered(origin, config.lo_resolution_m, config.lo_size, config.lo_size)?;
        let bottom = levels - 1;
        let hi_grid = GridSpec::centered(
            origin,
            config.hi_units[bottom].resolution_m,
            config.hi_level_size(bottom),
            config.hi_level_size(bottom),
        )?;
        let window = spatial_scaling_window(&lo_grid, &hi_grid)?;
        Ok(Self {
            config: config.clone(),
            store,
            output_scale: vec![1.0; config.n_pol],
            hi: hi_rev,
            lo,
            window,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn scaling_window(&self) -> ((usize, usize), (usize, usize)) {
        self.window
    }

    /// Records every parameter on `graph`; trainable when `train` is set.
    pub fn bind(&self, graph: &mut Graph<S>, train: bool) -> Vec<Var> {
        self.store
            .params
            .iter()
            .map(|p| {
                if train {
                    graph.input(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Forecast stacks `(N_out*B, H_R, W_R, N_pol)` per output grid, in
    /// [`ModelConfig::output_grids`] order.
    pub fn forward(&self, fw: &mut Forward<'_, S>, x: &UnetInputs<S>) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let b = x.batch_size();
        let check = |name: &str, t: &Tensor<S>, want: &[usize]| -> Result<()> {
            if t.shape() != want {
                return Err(Error::InvalidShape(format!("{name}: expected {want:?}, got {:?}", t.shape())));
            }
            Ok(())
        };
        let ch = cfg.channels();
        let (hs, ls) = (cfg.hi_size, cfg.lo_size);
        check("hi_hist", &x.hi_hist, &[cfg.n_in, b, hs, hs, ch.hi_hist.len()])?;
        check("hi_const", &x.hi_const, &[b, hs, hs, ch.hi_const.len()])?;
        check("lo_hist", &x.lo_hist, &[cfg.n_in, b, ls, ls, ch.lo_hist.len()])?;
        check("lo_fcst", &x.lo_fcst, &[cfg.n_out, b, ls, ls, ch.lo_fcst.len()])?;

        let lo_hist = fw.graph.constant(x.lo_hist.clone());
        let lo_fcst = fw.graph.constant(x.lo_fcst.clone());
        let lo_out = self.lo.forward(
            fw,
            ScaleUnitInputs {
                hist: Some(lo_hist),
                forecast: Some(lo_fcst),
                ..Default::default()
            },
        )?;

        let hist_flat = x.hi_hist.clone().reshape(&[cfg.n_in * b, hs, hs, ch.hi_hist.len()])?;
        let hist_flat = fw.graph.constant(hist_flat);
        let hi_const = fw.graph.constant(x.hi_const.clone());

        let levels = cfg.hi_levels();
        let mut outputs = vec![None; levels];
        let mut lower: Option<Var> = None;
        for level in (0..levels).rev() {
            let size = cfg.hi_level_size(level);
            let factor = 1usize << level;
            let (hist, constant) = if factor == 1 {
                (hist_flat, hi_const)
            } else {
                (
                    fw.graph.avg_pool2d(hist_flat, factor)?,
                    fw.graph.avg_pool2d(hi_const, factor)?,
                )
            };
            let hist = fw.graph.reshape(hist, &[cfg.n_in, b, size, size, ch.hi_hist.len()])?;
            let lower_decoded = match lower {
                None => spatial_scaling(fw.graph, lo_out.decoded, self.window, size)?,
                Some(d) => fw.graph.upsample_nearest2d(d, 2)?,
            };
            let out = self.hi[level].forward(
                fw,
                ScaleUnitInputs {
                    hist: Some(hist),
                    constant: Some(constant),
                    forecast: None,
                    lower_decoded: Some(lower_decoded),
                },
            )?;
            lower = Some(out.decoded);
            outputs[level] = Some(out.forecasts);
        }
        let mut result: Vec<Var> = outputs.into_iter().map(|v| v.expect("every level ran")).collect();
        result.push(lo_out.forecasts);
        if self.output_scale.iter().any(|&s| s != 1.0) {
            let factors: Vec<S> = self.output_scale.iter().map(|&s| S::lit(s)).collect();
            for v in result.iter_mut() {
                *v = fw.graph.scale_channels(*v, &factors)?;
            }
        }
        Ok(result)
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn update_running(&mut self, stats: &[Option<plume_tensor::BatchStats<S>>]) {
        for (rs, s) in self.store.running.iter_mut().zip(stats) {
            if let Some(s) = s {
                rs.update(s);
            }
        }
    }

    /// Inference on a batch; returns values `(N_out, B, H_R, W_R, N_pol)` per grid.
    pub fn predict(&self, x: &UnetInputs<S>) -> Result<Vec<Tensor<S>>> {
        let mut graph = Graph::new();
        let params = self.bind(&mut graph, false);
        let mut fw = Forward::new(&mut graph, &params, &self.store, Mode::Infer);
        let outs = self.forward(&mut fw, x)?;
        let b = x.batch_size();
        outs.iter()
            .map(|&v| {
                let t = graph.value(v).clone();
                let s = t.shape().to_vec();
                Ok(t.reshape(&[self.config.n_out, b, s[1], s[2], s[3]])?)
            })
            .collect()
    }

    /// Fills every parameter with zeros (used for degenerate-case checks).
    pub fn zero_params(&mut self) {
        for p in self.store.params.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}
