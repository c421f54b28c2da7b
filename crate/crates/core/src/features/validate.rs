use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::ingest::StationMeasurement;
use crate::time::Pollutant;

/// Per-pollutant plausibility caps in µg/m³, indexed like [`Pollutant::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationRules {
    pub caps: [f64; 4],
}

impl Default for ValidationRules {
    fn default() -> Self {
        Self {
            caps: Pollutant::ALL.map(Pollutant::default_cap),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RejectionReport {
    pub non_finite: usize,
    pub negative: usize,
    pub above_cap: usize,
    pub duplicate: usize,
}

impl RejectionReport {
    pub fn total(&self) -> usize {
        self.non_finite + self.negative + self.above_cap + self.duplicate
    }
}

/// Drops non-finite, negative, implausibly high and duplicated readings.
/// The first occurrence of a (station, time, pollutant) key wins.
pub fn validate_measurements(
    raw: Vec<StationMeasurement>,
    rules: &ValidationRules,
) -> (Vec<StationMeasurement>, RejectionReport) {
    let mut report = RejectionReport::default();
    let mut seen = HashSet::new();
    let mut clean = Vec::with_capacity(raw.len());
    for m in raw {
        if !m.value.is_finite() {
            report.non_finite += 1;
        } else if m.value < 0.0 {
            report.negative += 1;
        } else if m.value > rules.caps[m.pollutant.index()] {
            report.above_cap += 1;
        } else if !seen.insert((m.station_id.clone(), m.time, m.pollutant)) {
            report.duplicate += 1;
        } else {
            clean.push(m);
        }
    }
    (clean, report)
}
