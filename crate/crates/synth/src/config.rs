use serde::{Deserialize, Serialize};

use plume_core::time::Hour;

use crate::error::{Result, SynthError};

/// Everything that determines a synthetic dataset. The seed fixes all random
/// draws; two runs with equal configs write byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub start: Hour,
    pub days: usize,
    /// Hours simulated before `start` and discarded.
    pub spinup_hours: usize,
    pub center_lat: f64,
    pub center_lon: f64,

    /// Outer simulation grid: `domain_cells` x `domain_cells` at `outer_resolution_m`.
    pub domain_cells: usize,
    pub outer_resolution_m: f64,
    /// Nested core around the main town; 0 disables it.
    pub core_cells: usize,
    pub core_resolution_m: f64,
    /// Explicit time steps; `None` picks 90 % of the stable bound each hour.
    pub dt_outer_s: Option<f64>,
    pub dt_core_s: Option<f64>,

    pub n_towns: usize,
    /// Town centers lie within this radius of the domain center.
    pub town_spread_km: f64,
    pub town_radius_km: f64,
    pub n_road_segments: usize,
    pub n_stations: usize,
    /// Share of stations placed next to a road rather than anywhere in town.
    pub roadside_fraction: f64,
    pub noise_std: f64,
    pub drop_fraction: f64,

    pub diffusion_m2s: f64,
    pub max_wind_ms: f64,
    pub mean_wind_ms: f64,
    /// First-order loss per hour for NO2, PM2.5 and PM10.
    pub decay_per_hour: [f64; 3],
    /// Road NO2 emission per metre at unit traffic volume (µg/s/m).
    pub road_emission: f64,
    pub major_road_factor: f64,
    /// Area-source strength for PM2.5 (µg/s/m²); PM10 adds a coarse share.
    pub pm_source: f64,
    pub pm10_coarse_factor: f64,
    /// Share of road emission that reaches PM10 as road dust.
    pub road_dust: f64,
    /// Regional background levels for PM2.5 and PM10 (µg/m³).
    pub pm_background: [f64; 2],
    pub o3_background: f64,
    pub o3_daytime_boost: f64,
    pub titration: f64,

    /// Hours between weather / physical-model issuances.
    pub issuance_every_h: usize,
    pub forecast_hours: usize,
    /// Half-width of the square covered by issuance grids (km).
    pub feed_half_extent_km: f64,
    pub weather_step_deg: f64,
    pub physical_step_deg: f64,
    pub blur_km: f64,
    /// Additive bias per pollutant (NO2, O3, PM25, PM10).
    pub physical_bias: [f64; 4],
    pub physical_noise_std: f64,
    /// Outer ground truth is stored as block means of this many cells.
    pub ground_truth_stride: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            start: Hour::from_ymdh(2021, 1, 4, 0),
            days: 60,
            spinup_hours: 24,
            center_lat: 48.0,
            center_lon: 11.0,
            domain_cells: 400,
            outer_resolution_m: 1_000.0,
            core_cells: 64,
            core_resolution_m: 50.0,
            dt_outer_s: None,
            dt_core_s: None,
            n_towns: 10,
            town_spread_km: 60.0,
            town_radius_km: 3.0,
            n_road_segments: 400,
            n_stations: 48,
            roadside_fraction: 0.6,
            noise_std: 2.0,
            drop_fraction: 0.03,
            diffusion_m2s: 50.0,
            max_wind_ms: 7.0,
            mean_wind_ms: 3.0,
            decay_per_hour: [0.25, 0.04, 0.08],
            road_emission: 8_000.0,
            major_road_factor: 3.0,
            pm_source: 0.4,
            pm10_coarse_factor: 1.4,
            road_dust: 0.3,
            pm_background: [8.0, 14.0],
            o3_background: 55.0,
            o3_daytime_boost: 25.0,
            titration: 0.7,
            issuance_every_h: 6,
            forecast_hours: 24,
            feed_half_extent_km: 290.0,
            weather_step_deg: 0.25,
            physical_step_deg: 0.4,
            blur_km: 8.0,
            physical_bias: [3.0, -4.0, 2.0, 3.0],
            physical_noise_std: 3.0,
            ground_truth_stride: 4,
        }
    }
}

impl SynthConfig {
    /// A small, fast world for tests: 60 km domain, 2 towns, a few days.
    pub fn small() -> Self {
        Self {
            days: 3,
            spinup_hours: 6,
            domain_cells: 60,
            core_cells: 32,
            n_towns: 3,
            town_spread_km: 12.0,
            n_road_segments: 60,
            n_stations: 9,
            feed_half_extent_km: 40.0,
            ground_truth_stride: 2,
            ..Self::default()
        }
    }

    pub fn hours(&self) -> usize {
        self.days * 24
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Parameter(m));
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        if self.domain_cells < 4 || !(self.outer_resolution_m > 0.0) {
            return bad("outer grid needs at least 4x4 cells and a positive resolution".into());
        }
        if self.core_cells > 0 {
            if !(self.core_resolution_m > 0.0) {
                return bad("core resolution must be positive".into());
            }
            let ratio = self.outer_resolution_m / self.core_resolution_m;
            if (ratio - ratio.round()).abs() > 1e-9 {
                return bad("outer resolution must be a multiple of the core resolution".into());
            }
            let core_m = self.core_cells as f64 * self.core_resolution_m;
            if core_m + 2.0 * self.outer_resolution_m > self.domain_cells as f64 * self.outer_resolution_m {
                return bad("core does not fit inside the outer domain".into());
            }
        }
        if self.n_towns == 0 || self.n_stations < 2 {
            return bad("need at least one town and two stations".into());
        }
        if self.n_road_segments < self.n_towns {
            return bad("need at least one road segment per town".into());
        }
        let half_domain_km = self.domain_cells as f64 * self.outer_resolution_m / 2_000.0;
        if self.town_spread_km + 2.0 * self.town_radius_km >= half_domain_km {
            return bad(format!(
                "towns (spread {} km + radius) must stay inside the {half_domain_km} km half-domain",
                self.town_spread_km
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_fraction) || !(0.0..=1.0).contains(&self.roadside_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.noise_std < 0.0 || self.physical_noise_std < 0.0 || self.diffusion_m2s < 0.0 {
            return bad("noise levels and diffusion must be non-negative".into());
        }
        if self.decay_per_hour.iter().any(|&d| !(0.0..3_600.0).contains(&d)) {
            return bad("decay rates must be in [0, 3600) per hour".into());
        }
        if !(self.blur_km > 0.0) {
            return bad("blur_km must be positive".into());
        }
        if self.issuance_every_h == 0 || self.forecast_hours == 0 || self.ground_truth_stride == 0 {
            return bad("issuance cadence, forecast length and ground-truth stride must be positive".into());
        }
        if self.domain_cells % self.ground_truth_stride != 0 {
            return bad("domain_cells must be divisible by ground_truth_stride".into());
        }
        if !(self.weather_step_deg > 0.0 && self.physical_step_deg > 0.0 && self.feed_half_extent_km > 0.0) {
            return bad("issuance grids need positive steps and extent".into());
        }
        if !(self.max_wind_ms > 0.0 && self.mean_wind_ms > 0.0 && self.mean_wind_ms <= self.max_wind_ms) {
            return bad("wind speeds must satisfy 0 < mean <= max".into());
        }
        Ok(())
    }
}
