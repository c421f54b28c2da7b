//! UTC hour stamps and the pollutant enumeration.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whole hours since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Hour(pub i64);

impl Hour {
    pub fn from_datetime(dt: DateTime<Utc>) -> Result<Self> {
        if dt.minute() != 0 || dt.second() != 0 || dt.nanosecond() != 0 {
            return Err(Error::InvalidParameter(format!("{dt} is not on a whole hour")));
        }
        Ok(Self(dt.timestamp().div_euclid(3600)))
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.0 * 3600, 0).expect("hour within chrono range")
    }

    pub fn offset(self, hours: i64) -> Self {
        Self(self.0 + hours)
    }

    pub fn hours_since(self, other: Hour) -> i64 {
        self.0 - other.0
    }

    /// Panics on an invalid calendar date.
    pub fn from_ymdh(year: i32, month: u32, day: u32, hour: u32) -> Self {
        let dt = chrono::NaiveDate::from_ymd_opt(year, month, day)
            .and_then(|d| d.and_hms_opt(hour, 0, 0))
            .expect("valid calendar hour");
        Self(dt.and_utc().timestamp().div_euclid(3600))
    }

    pub fn hour_of_day(self) -> u32 {
        self.0.rem_euclid(24) as u32
    }

    /// 0 = Monday.
    pub fn weekday(self) -> u32 {
        // 1970-01-01 was a Thursday
        ((self.0.div_euclid(24) + 3).rem_euclid(7)) as u32
    }
}

impl fmt::Display for Hour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%MZ"))
    }
}

impl FromStr for Hour {
    type Err = Error;

    /// Accepts `2020-11-11T06:00Z`, `2020-11-11T06:00:00Z` and `2020-11-11T06Z`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let body = t
            .strip_suffix('Z')
            .ok_or_else(|| Error::InvalidParameter(format!("time {t:?} must end in Z")))?;
        let parsed = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%dT%H"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(body, f).ok())
            .or_else(|| {
                NaiveDateTime::parse_from_str(&format!("{body}:00"), "%Y-%m-%dT%H:%M").ok()
            })
            .ok_or_else(|| Error::InvalidParameter(format!("unparseable time {t:?}")))?;
        Self::from_datetime(parsed.and_utc())
    }
}

impl TryFrom<String> for Hour {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Hour> for String {
    fn from(h: Hour) -> String {
        h.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pollutant {
    NO2,
    O3,
    PM25,
    PM10,
}

impl Pollutant {
    pub const ALL: [Pollutant; 4] = [Pollutant::NO2, Pollutant::O3, Pollutant::PM25, Pollutant::PM10];

    /// Channel index in every pollutant stack.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Pollutant::NO2 => "NO2",
            Pollutant::O3 => "O3",
            Pollutant::PM25 => "PM25",
            Pollutant::PM10 => "PM10",
        }
    }

    /// Default plausibility cap in µg/m³.
    pub fn default_cap(self) -> f64 {
        match self {
            Pollutant::NO2 => 1000.0,
            Pollutant::O3 => 800.0,
            Pollutant::PM25 => 1500.0,
            Pollutant::PM10 => 2500.0,
        }
    }
}

impl fmt::Display for Pollutant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pollutant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "NO2" => Ok(Pollutant::NO2),
            "O3" => Ok(Pollutant::O3),
            "PM25" | "PM2.5" => Ok(Pollutant::PM25),
            "PM10" => Ok(Pollutant::PM10),
            other => Err(Error::InvalidParameter(format!("unknown pollutant {other:?}"))),
        }
    }
}
