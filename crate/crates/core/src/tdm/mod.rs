//! Tracking Data Messages: a strict KVN profile and the simulated sensor.
//!
//! A [`Tdm`] is always canonical. Construction rounds epochs to microseconds,
//! quantizes angles to the nine decimal degrees of the text form and sorts
//! records, so the content hash is a pure function of the observation content.
//! The grammar is documented in `docs/tdm-profile.md`.

mod kvn;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{wrap_two_pi, Epoch};
use crate::Digest32;

pub use kvn::{parse_tdm, parse_tdm_bytes, serialize_tdm};
pub use synth::{synth_tdm, synth_tdm_with, SynthOptions, ELEVATION_MASK_DEG};

pub const TIME_SYSTEM: &str = "SIM-J2000";
pub const UNKNOWN_PARTICIPANT: &str = "UNKNOWN";
pub const MIN_RECORDS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdmError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: missing mandatory key {key}")]
    MissingKey { key: &'static str, line: usize },
    #[error("invalid TDM: {0}")]
    Validation(String),
    #[error("below the {mask_deg} deg elevation mask at {}", .epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", "))]
    Visibility { mask_deg: f64, epochs: Vec<Epoch> },
    #[error("propagation failed: {0}")]
    Propagation(#[from] crate::astro::AstroError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AngleMode {
    /// Azimuth (clockwise from north) and elevation.
    Azel,
    /// Topocentric right ascension and declination.
    Radec,
}

impl AngleMode {
    pub fn keyword(self) -> &'static str {
        match self {
            AngleMode::Azel => "AZEL",
            AngleMode::Radec => "RADEC",
        }
    }

    pub fn is_radec(self) -> bool {
        self == AngleMode::Radec
    }
}

impl fmt::Display for AngleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdmMeta {
    pub site_id: String,
    /// Claimed object id, or `UNKNOWN`.
    pub participant: String,
    pub mode: AngleMode,
    pub has_range: bool,
}

impl TdmMeta {
    pub fn time_system(&self) -> &'static str {
        TIME_SYSTEM
    }

    pub fn claims_object(&self) -> Option<&str> {
        (self.participant != UNKNOWN_PARTICIPANT).then_some(self.participant.as_str())
    }
}

/// One observation: two angles in radians and an optional slant range in km.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub epoch: Epoch,
    pub angle1: f64,
    pub angle2: f64,
    pub range: Option<f64>,
}

/// Nine-decimal degree text used on the wire.
pub(crate) fn fmt_deg(rad: f64) -> String {
    format!("{:.9}", rad.to_degrees())
}

pub(crate) fn fmt_km(km: f64) -> String {
    format!("{km:.6}")
}

fn quantize_deg(rad: f64) -> f64 {
    fmt_deg(rad).parse::<f64>().map(f64::to_radians).unwrap_or(f64::NAN)
}

fn quantize_km(km: f64) -> f64 {
    fmt_km(km).parse::<f64>().unwrap_or(f64::NAN)
}

impl ObservationRecord {
    /// Snaps the record onto the grid of the text form.
    fn canonical(self) -> Self {
        let mut a1 = quantize_deg(wrap_two_pi(self.angle1));
        if a1.to_degrees() >= 360.0 - 0.5e-9 {
            a1 = 0.0;
        }
        Self {
            epoch: self.epoch.round_to_micros(),
            angle1: a1,
            angle2: quantize_deg(self.angle2),
            range: self.range.map(quantize_km),
        }
    }
}

/// A canonical, hashed tracking session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TdmParts")]
pub struct Tdm {
    meta: TdmMeta,
    records: Vec<ObservationRecord>,
    content_hash: Digest32,
}

#[derive(Deserialize)]
struct TdmParts {
    meta: TdmMeta,
    records: Vec<ObservationRecord>,
    content_hash: Digest32,
}

impl TryFrom<TdmParts> for Tdm {
    type Error = TdmError;
    fn try_from(p: TdmParts) -> Result<Self, TdmError> {
        let t = Tdm::new(p.meta, p.records)?;
        if t.content_hash != p.content_hash {
            return Err(TdmError::Validation("content_hash does not match content".into()));
        }
        Ok(t)
    }
}

impl Tdm {
    /// Canonicalizes and validates. Records are sorted by epoch; equal epochs
    /// after microsecond rounding are rejected.
    pub fn new(meta: TdmMeta, records: Vec<ObservationRecord>) -> Result<Self, TdmError> {
        let mut records: Vec<ObservationRecord> =
            records.into_iter().map(ObservationRecord::canonical).collect();
        records.sort_by(|a, b| a.epoch.cmp(&b.epoch));
        Self::from_sorted(meta, records)
    }

    /// Like [`Tdm::new`] but rejects records that are not already in strictly
    /// increasing epoch order.
    pub fn new_ordered(meta: TdmMeta, records: Vec<ObservationRecord>) -> Result<Self, TdmError> {
        let records: Vec<ObservationRecord> =
            records.into_iter().map(ObservationRecord::canonical).collect();
        Self::from_sorted(meta, records)
    }

    fn from_sorted(meta: TdmMeta, records: Vec<ObservationRecord>) -> Result<Self, TdmError> {
        check_meta(&meta)?;
        if records.len() < MIN_RECORDS {
            return Err(TdmError::Validation(format!(
                "{} records, at least {MIN_RECORDS} required",
                records.len()
            )));
        }
        for (k, r) in records.iter().enumerate() {
            check_record(&meta, r).map_err(|m| TdmError::Validation(format!("record {k}: {m}")))?;
            if k > 0 && records[k - 1].epoch >= r.epoch {
                return Err(TdmError::Validation(format!(
                    "record {k}: epoch {} not after {}",
                    r.epoch,
                    records[k - 1].epoch
                )));
            }
        }
        let mut t = Tdm {
            meta,
            records,
            content_hash: Digest32::ZERO,
        };
        t.content_hash = Digest32::of(serialize_tdm(&t).as_bytes());
        Ok(t)
    }

    pub fn meta(&self) -> &TdmMeta {
        &self.meta
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    pub fn content_hash(&self) -> Digest32 {
        self.content_hash
    }

    pub fn first_epoch(&self) -> Epoch {
        self.records[0].epoch
    }

    pub fn last_epoch(&self) -> Epoch {
        self.records[self.records.len() - 1].epoch
    }

    pub fn epochs(&self) -> Vec<Epoch> {
        self.records.iter().map(|r| r.epoch).collect()
    }

    pub fn to_kvn(&self) -> String {
        serialize_tdm(self)
    }
}

fn check_meta(meta: &TdmMeta) -> Result<(), TdmError> {
    for (name, v) in [("site_id", &meta.site_id), ("participant", &meta.participant)] {
        if v.is_empty() || v.chars().any(|c| c.is_whitespace() || c.is_control() || c == '=') {
            return Err(TdmError::Validation(format!(
                "{name} '{v}' must be a nonempty token without whitespace or '='"
            )));
        }
    }
    Ok(())
}

fn check_record(meta: &TdmMeta, r: &ObservationRecord) -> Result<(), String> {
    if !r.epoch.seconds().is_finite() {
        return Err("non-finite epoch".into());
    }
    let a1 = r.angle1.to_degrees();
    let a2 = r.angle2.to_degrees();
    if !(0.0..360.0).contains(&a1) {
        return Err(format!("angle_1 {a1} deg outside [0, 360)"));
    }
    if !(-90.0..=90.0).contains(&a2) {
        return Err(format!("angle_2 {a2} deg outside [-90, 90]"));
    }
    match (meta.has_range, r.range) {
        (true, Some(rho)) if rho > 0.0 && rho.is_finite() => Ok(()),
        (true, Some(rho)) => Err(format!("range {rho} km must be positive")),
        (true, None) => Err("range missing".into()),
        (false, Some(_)) => Err("range present but RANGE_UNITS not declared".into()),
        (false, None) => Ok(()),
    }
}

/// An orbit and a site under it, with five visible epochs one minute apart.
#[cfg(test)]
pub(crate) fn synth_test_fixture() -> (
    crate::astro::OrbitRecord,
    crate::astro::GroundSite,
    Vec<Epoch>,
) {
    use crate::astro::{
        gmst, propagate_j2, GroundSite, KeplerianElements, ObjectSource, OrbitRecord,
        PropagatorConfig,
    };
    let el = KeplerianElements::new(7000.0, 0.001, 0.9, 0.0, 0.0, 0.0, Epoch::J2000).unwrap();
    let rec = OrbitRecord {
        object_id: "OBJ-1".into(),
        elements: el,
        bstar: 1e-5,
        source: ObjectSource::Cataloged,
    };
    let t = Epoch::from_seconds(300.0);
    let s = propagate_j2(&el, rec.bstar, t, &PropagatorConfig::default()).unwrap();
    let lat = (s.r.z / s.r.norm()).asin();
    let lon = s.r.y.atan2(s.r.x) - gmst(t);
    let site = GroundSite { site_id: "S1".into(), lat, lon, alt: 0.1 };
    let epochs = (0..5).map(|k| Epoch::from_seconds(180.0 + 60.0 * k as f64)).collect();
    (rec, site, epochs)
}
