use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

/// Seconds since 2000-01-01T12:00:00 on a uniform timescale (no leap seconds).
///
/// The text form has microsecond resolution, which an `f64` holds exactly for
/// |t| up to about 2e9 s (roughly 1937 to 2063).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Epoch(f64);

fn j2000() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2000, 1, 1)
        .and_then(|d| d.and_hms_opt(12, 0, 0))
        .expect("valid J2000 literal")
}

impl Epoch {
    pub const J2000: Epoch = Epoch(0.0);

    pub const fn from_seconds(t: f64) -> Self {
        Epoch(t)
    }

    pub fn from_micros(us: i64) -> Self {
        Epoch(us as f64 / 1e6)
    }

    pub fn seconds(self) -> f64 {
        self.0
    }

    /// Rounds to the nearest microsecond, the resolution of the text form.
    pub fn micros(self) -> i64 {
        (self.0 * 1e6).round() as i64
    }

    pub fn round_to_micros(self) -> Self {
        Self::from_micros(self.micros())
    }

    pub fn days_since(self, other: Epoch) -> f64 {
        (self.0 - other.0) / super::SECONDS_PER_DAY
    }

    /// ISO-8601 text with six fractional digits, e.g. `2000-01-01T12:00:00.000000`.
    pub fn to_iso(self) -> String {
        match j2000().checked_add_signed(Duration::microseconds(self.micros())) {
            Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.6f").to_string(),
            None => format!("J2000{:+}", self.0),
        }
    }

    pub fn parse_iso(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let dt = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f")
            .map_err(|e| format!("bad epoch '{s}': {e}"))?;
        let us = dt
            .signed_duration_since(j2000())
            .num_microseconds()
            .ok_or_else(|| format!("epoch '{s}' out of range"))?;
        Ok(Self::from_micros(us))
    }
}

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl FromStr for Epoch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_iso(s)
    }
}

impl PartialEq for Epoch {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}

impl Eq for Epoch {}

impl PartialOrd for Epoch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Epoch {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add<f64> for Epoch {
    type Output = Epoch;
    fn add(self, dt: f64) -> Epoch {
        Epoch(self.0 + dt)
    }
}

impl Sub<f64> for Epoch {
    type Output = Epoch;
    fn sub(self, dt: f64) -> Epoch {
        Epoch(self.0 - dt)
    }
}

impl Sub for Epoch {
    type Output = f64;
    fn sub(self, rhs: Epoch) -> f64 {
        self.0 - rhs.0
    }
}
