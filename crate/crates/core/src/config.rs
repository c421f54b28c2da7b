//! Architecture and data-layout hyperparameters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const N_POLLUTANTS: usize = 4;

/// Filter counts and stream layout of one Scale-Unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleUnitConfig {
    pub resolution_m: f64,
    /// TimeDistributedConv2D filters, then ConvLSTM filters.
    pub historical_encoder_filters: (usize, usize),
    pub constant_encoder_filters: Option<usize>,
    /// Two stacked ConvLSTM layers.
    pub forecast_encoder_filters: Option<(usize, usize)>,
    pub decoder_filters: usize,
    pub accepts_lower_decoded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_pol: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub hi_size: usize,
    pub hi_resolution_m: f64,
    pub lo_size: usize,
    pub lo_resolution_m: f64,
    pub kernel_size: usize,
    /// Station projections carry a kernel weight-sum channel per pollutant.
    pub station_weight_channels: bool,
    pub sigma_hi_m: f64,
    pub sigma_lo_m: f64,
    /// High-resolution units, finest first.
    pub hi_units: Vec<ScaleUnitConfig>,
    pub lo_unit: ScaleUnitConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let hi = |k: u32, decoder| ScaleUnitConfig {
            resolution_m: 50.0 * 2f64.powi(k as i32),
            historical_encoder_filters: (8, 16),
            constant_encoder_filters: Some(1),
            forecast_encoder_filters: None,
            decoder_filters: decoder,
            accepts_lower_decoded: true,
        };
        Self {
            n_pol: N_POLLUTANTS,
            n_in: 24,
            n_out: 24,
            hi_size: 64,
            hi_resolution_m: 50.0,
            lo_size: 20,
            lo_resolution_m: 20_000.0,
            kernel_size: 3,
            station_weight_channels: true,
            sigma_hi_m: 5_000.0,
            sigma_lo_m: 50_000.0,
            hi_units: vec![hi(0, 8), hi(1, 32), hi(2, 64)],
            lo_unit: ScaleUnitConfig {
                resolution_m: 20_000.0,
                historical_encoder_filters: (16, 32),
                constant_encoder_filters: None,
                forecast_encoder_filters: Some((64, 32)),
                decoder_filters: 64,
                accepts_lower_decoded: false,
            },
        }
    }
}

/// Channels in each input stream, in storage order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub hi_hist: Vec<String>,
    pub hi_const: Vec<String>,
    pub lo_hist: Vec<String>,
    pub lo_fcst: Vec<String>,
}

pub const POLLUTANT_NAMES: [&str; N_POLLUTANTS] = ["NO2", "O3", "PM25", "PM10"];
pub const TRAFFIC_CHANNELS: [&str; 3] = ["jam_factor", "speed", "historical_speed"];
pub const ROAD_CHANNELS: [&str; 2] = ["roads", "major_roads"];
pub const WEATHER_CHANNELS: [&str; 6] = [
    "temperature",
    "relative_humidity",
    "wind_u",
    "wind_v",
    "pbl_height",
    "precipitation_rate",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_pol != N_POLLUTANTS {
            return bad(format!("n_pol must be {N_POLLUTANTS}, got {}", self.n_pol));
        }
        if self.n_in == 0 || self.n_out == 0 {
            return bad("n_in and n_out must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.hi_units.is_empty() {
            return bad("at least one high-resolution unit is required".into());
        }
        let levels = self.hi_units.len() as u32;
        let factor = 1usize << (levels - 1);
        if self.hi_size % factor != 0 {
            return bad(format!(
                "hi_size {} not divisible by {factor} for {levels} units",
                self.hi_size
            ));
        }
        for (k, u) in self.hi_units.iter().enumerate() {
            if u.forecast_encoder_filters.is_some() {
                return bad(format!("hi unit {k}: forecast features only exist on the low-resolution grid"));
            }
            let expected = self.hi_resolution_m * (1u64 << k) as f64;
            if (u.resolution_m - expected).abs() > 1e-9 {
                return bad(format!("hi unit {k}: resolution {} should be {expected}", u.resolution_m));
            }
            if !u.accepts_lower_decoded {
                return bad(format!("hi unit {k} must accept decoded features from below"));
            }
        }
        if self.lo_unit.accepts_lower_decoded || self.lo_unit.forecast_encoder_filters.is_none() {
            return bad("low-resolution unit needs a forecast encoder and no lower input".into());
        }
        if self.lo_unit.constant_encoder_filters.is_some() {
            return bad("low-resolution unit has no constant features".into());
        }
        if self.hi_size as f64 * self.hi_resolution_m > self.lo_size as f64 * self.lo_resolution_m {
            return bad("high-resolution patch must fit inside the low-resolution patch".into());
        }
        Ok(())
    }

    pub fn hi_levels(&self) -> usize {
        self.hi_units.len()
    }

    /// Grid side of high-resolution level `k`.
    pub fn hi_level_size(&self, k: usize) -> usize {
        self.hi_size >> k
    }

    /// Output resolutions, finest first, low-resolution grid last.
    pub fn output_grids(&self) -> Vec<(f64, usize)> {
        let mut v: Vec<(f64, usize)> = (0..self.hi_levels())
            .map(|k| (self.hi_units[k].resolution_m, self.hi_level_size(k)))
            .collect();
        v.push((self.lo_resolution_m, self.lo_size));
        v
    }

    pub fn channels(&self) -> ChannelLayout {
        let s = |x: &[&str]| x.iter().map(|c| c.to_string()).collect::<Vec<_>>();
        let station = |suffix: &str| {
            let mut v: Vec<String> = POLLUTANT_NAMES.iter().map(|p| format!("{p}{suffix}")).collect();
            if self.station_weight_channels {
                v.extend(POLLUTANT_NAMES.iter().map(|p| format!("{p}{suffix}_weight")));
            }
            v
        };
        let mut hi_hist = station("");
        hi_hist.extend(s(&TRAFFIC_CHANNELS));
        let mut lo_fcst = s(&WEATHER_CHANNELS);
        lo_fcst.extend(POLLUTANT_NAMES.iter().map(|p| format!("{p}_model")));
        ChannelLayout {
            hi_hist,
            hi_const: s(&ROAD_CHANNELS),
            lo_hist: station(""),
            lo_fcst,
        }
    }

    /// SHA-256 of the canonical JSON rendering (keys sorted).
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }

    /// Reduced architecture for smoke runs: same topology and grids, narrower layers.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.n_in = 12;
        for (u, dec) in c.hi_units.iter_mut().zip([4, 8, 16]) {
            u.historical_encoder_filters = (4, 8);
            u.decoder_filters = dec;
        }
        c.lo_unit.historical_encoder_filters = (8, 8);
        c.lo_unit.forecast_encoder_filters = Some((16, 8));
        c.lo_unit.decoder_filters = 16;
        c
    }

    /// Toy geometry for gradient checks and overfit runs.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.n_in = 3;
        c.n_out = 3;
        c.hi_size = 8;
        c.hi_resolution_m = 400.0;
        c.lo_size = 4;
        c.lo_resolution_m = 4_000.0;
        for (k, u) in c.hi_units.iter_mut().enumerate() {
            u.resolution_m = 400.0 * (1u64 << k) as f64;
            u.historical_encoder_filters = (2, 3);
            u.decoder_filters = 3;
        }
        c.lo_unit.resolution_m = 4_000.0;
        c.lo_unit.historical_encoder_filters = (2, 3);
        c.lo_unit.forecast_encoder_filters = Some((3, 3));
        c.lo_unit.decoder_filters = 3;
        c.sigma_hi_m = 1_000.0;
        c.sigma_lo_m = 6_000.0;
        c
    }
}

/// Target gridding: σ = `sigma_factor` · R, cells below `weight_threshold` masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub sigma_factor: f64,
    pub weight_threshold: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            sigma_factor: 3.0,
            weight_threshold: 0.5,
        }
    }
}

pub(crate) fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json::Value maps are ordered by key
    let v = serde_json::to_value(value).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}
