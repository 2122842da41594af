use std::fmt::Write;

use super::{
    fmt_deg, fmt_km, AngleMode, ObservationRecord, Tdm, TdmError, TdmMeta, TIME_SYSTEM,
};
use crate::astro::Epoch;

const VERSION: &str = "2.0";

/// Canonical KVN text: fixed key order, LF endings, angles in degrees with nine
/// decimals, epochs with six fractional digits.
pub fn serialize_tdm(tdm: &Tdm) -> String {
    let m = tdm.meta();
    let mut s = String::with_capacity(160 + tdm.records().len() * 120);
    s.push_str("CCSDS_TDM_VERS = ");
    s.push_str(VERSION);
    s.push_str("\nMETA_START\n");
    let _ = writeln!(s, "TIME_SYSTEM = {TIME_SYSTEM}");
    let _ = writeln!(s, "PARTICIPANT_1 = {}", m.participant);
    let _ = writeln!(s, "PARTICIPANT_2 = {}", m.site_id);
    s.push_str("MODE = SEQUENTIAL\n");
    let _ = writeln!(s, "ANGLE_TYPE = {}", m.mode.keyword());
    if m.has_range {
        s.push_str("RANGE_UNITS = km\n");
    }
    s.push_str("META_STOP\nDATA_START\n");
    for r in tdm.records() {
        let t = r.epoch.to_iso();
        let _ = writeln!(s, "ANGLE_1 = {t} {}", fmt_deg(r.angle1));
        let _ = writeln!(s, "ANGLE_2 = {t} {}", fmt_deg(r.angle2));
        if let Some(rho) = r.range {
            let _ = writeln!(s, "RANGE = {t} {}", fmt_km(rho));
        }
    }
    s.push_str("DATA_STOP\n");
    s
}

/// Parses raw bytes; invalid UTF-8 is reported at the offending line.
pub fn parse_tdm_bytes(bytes: &[u8]) -> Result<Tdm, TdmError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_tdm(text),
        Err(e) => {
            let line = 1 + bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count();
            Err(TdmError::Parse {
                line,
                msg: "invalid UTF-8".into(),
            })
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Header,
    BeforeMeta,
    Meta,
    BeforeData,
    Data,
    Done,
}

#[derive(Default)]
struct MetaFields {
    time_system: Option<String>,
    participant_1: Option<String>,
    participant_2: Option<String>,
    mode: Option<String>,
    angle_type: Option<AngleMode>,
    range_units: bool,
}

struct Pending {
    epoch: Epoch,
    angle1: f64,
    angle2: Option<f64>,
}

fn perr(line: usize, msg: impl Into<String>) -> TdmError {
    TdmError::Parse {
        line,
        msg: msg.into(),
    }
}

fn split_kv(line: &str, no: usize) -> Result<(&str, &str), TdmError> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| perr(no, format!("expected KEY = VALUE, found '{line}'")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return Err(perr(no, format!("empty key or value in '{line}'")));
    }
    Ok((k, v))
}

fn parse_data_value(v: &str, no: usize) -> Result<(Epoch, f64), TdmError> {
    let mut it = v.split_whitespace();
    let (Some(t), Some(x), None) = (it.next(), it.next(), it.next()) else {
        return Err(perr(no, format!("expected '<epoch> <value>', found '{v}'")));
    };
    let epoch = Epoch::parse_iso(t).map_err(|e| perr(no, e))?;
    let x: f64 = x
        .parse()
        .map_err(|_| perr(no, format!("'{x}' is not a number")))?;
    if !x.is_finite() {
        return Err(perr(no, format!("'{x}' is not finite")));
    }
    Ok((epoch, x))
}

/// Parses a KVN document under the strict profile.
pub fn parse_tdm(text: &str) -> Result<Tdm, TdmError> {
    let mut section = Section::Header;
    let mut meta = MetaFields::default();
    let mut records: Vec<ObservationRecord> = Vec::new();
    let mut pending: Option<Pending> = None;

    for (idx, raw) in text.split('\n').enumerate() {
        let no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        if line.is_empty() || line == "COMMENT" || line.starts_with("COMMENT ") {
            continue;
        }
        match section {
            Section::Header => {
                let is_version = line
                    .split_once('=')
                    .is_some_and(|(k, _)| k.trim() == "CCSDS_TDM_VERS");
                if !is_version {
                    return Err(TdmError::MissingKey { key: "CCSDS_TDM_VERS", line: no });
                }
                let (_, v) = split_kv(line, no)?;
                if v != VERSION {
                    return Err(perr(no, format!("unsupported version '{v}', expected {VERSION}")));
                }
                section = Section::BeforeMeta;
            }
            Section::BeforeMeta => {
                if line != "META_START" {
                    return Err(TdmError::MissingKey { key: "META_START", line: no });
                }
                section = Section::Meta;
            }
            Section::Meta => {
                if line == "META_STOP" {
                    check_meta_complete(&meta, no)?;
                    section = Section::BeforeData;
                    continue;
                }
                if matches!(line, "DATA_START" | "DATA_STOP" | "META_START") {
                    return Err(TdmError::MissingKey { key: "META_STOP", line: no });
                }
                let (k, v) = split_kv(line, no)?;
                meta_line(&mut meta, k, v, no)?;
            }
            Section::BeforeData => {
                if line != "DATA_START" {
                    return Err(TdmError::MissingKey { key: "DATA_START", line: no });
                }
                section = Section::Data;
            }
            Section::Data => {
                if line == "DATA_STOP" {
                    if pending.is_some() {
                        return Err(perr(no, "incomplete observation before DATA_STOP"));
                    }
                    section = Section::Done;
                    continue;
                }
                if matches!(line, "DATA_START" | "META_START" | "META_STOP") {
                    return Err(TdmError::MissingKey { key: "DATA_STOP", line: no });
                }
                let (k, v) = split_kv(line, no)?;
                let (epoch, x) = parse_data_value(v, no)?;
                let has_range = meta.range_units;
                data_line(&mut pending, &mut records, k, epoch, x, has_range, no)?;
            }
            Section::Done => {
                return Err(perr(no, format!("content after DATA_STOP: '{line}'")));
            }
        }
    }

    let eof = text.lines().count() + 1;
    let missing = match section {
        Section::Header => Some("CCSDS_TDM_VERS"),
        Section::BeforeMeta => Some("META_START"),
        Section::Meta => Some("META_STOP"),
        Section::BeforeData => Some("DATA_START"),
        Section::Data => Some("DATA_STOP"),
        Section::Done => None,
    };
    if let Some(key) = missing {
        return Err(TdmError::MissingKey { key, line: eof });
    }

    let m = TdmMeta {
        site_id: meta.participant_2.unwrap_or_default(),
        participant: meta.participant_1.unwrap_or_default(),
        mode: meta.angle_type.unwrap_or(AngleMode::Azel),
        has_range: meta.range_units,
    };
    Tdm::new_ordered(m, records)
}

fn meta_line(meta: &mut MetaFields, k: &str, v: &str, no: usize) -> Result<(), TdmError> {
    fn set<T>(slot: &mut Option<T>, val: T, k: &str, no: usize) -> Result<(), TdmError> {
        if slot.is_some() {
            return Err(perr(no, format!("duplicate key {k}")));
        }
        *slot = Some(val);
        Ok(())
    }
    match k {
        "TIME_SYSTEM" => {
            if v != TIME_SYSTEM {
                return Err(perr(no, format!("TIME_SYSTEM must be {TIME_SYSTEM}, found '{v}'")));
            }
            set(&mut meta.time_system, v.to_string(), k, no)
        }
        "PARTICIPANT_1" => set(&mut meta.participant_1, token(v, k, no)?, k, no),
        "PARTICIPANT_2" => set(&mut meta.participant_2, token(v, k, no)?, k, no),
        "MODE" => {
            if v != "SEQUENTIAL" {
                return Err(perr(no, format!("MODE must be SEQUENTIAL, found '{v}'")));
            }
            set(&mut meta.mode, v.to_string(), k, no)
        }
        "ANGLE_TYPE" => {
            let mode = match v {
                "AZEL" => AngleMode::Azel,
                "RADEC" => AngleMode::Radec,
                _ => return Err(perr(no, format!("ANGLE_TYPE must be AZEL or RADEC, found '{v}'"))),
            };
            set(&mut meta.angle_type, mode, k, no)
        }
        "RANGE_UNITS" => {
            if v != "km" {
                return Err(perr(no, format!("RANGE_UNITS must be km, found '{v}'")));
            }
            if meta.range_units {
                return Err(perr(no, "duplicate key RANGE_UNITS"));
            }
            meta.range_units = true;
            Ok(())
        }
        _ => Err(perr(no, format!("unknown metadata key {k}"))),
    }
}

fn token(v: &str, k: &str, no: usize) -> Result<String, TdmError> {
    if v.split_whitespace().count() != 1 {
        return Err(perr(no, format!("{k} must be a single token")));
    }
    Ok(v.to_string())
}

fn check_meta_complete(meta: &MetaFields, no: usize) -> Result<(), TdmError> {
    let required: [(&'static str, bool); 4] = [
        ("PARTICIPANT_1", meta.participant_1.is_some()),
        ("PARTICIPANT_2", meta.participant_2.is_some()),
        ("MODE", meta.mode.is_some()),
        ("ANGLE_TYPE", meta.angle_type.is_some()),
    ];
    for (key, present) in required {
        if !present {
            return Err(TdmError::MissingKey { key, line: no });
        }
    }
    Ok(())
}

fn data_line(
    pending: &mut Option<Pending>,
    records: &mut Vec<ObservationRecord>,
    k: &str,
    epoch: Epoch,
    x: f64,
    has_range: bool,
    no: usize,
) -> Result<(), TdmError> {
    let same_epoch = |p: &Pending| -> Result<(), TdmError> {
        if p.epoch != epoch {
            return Err(perr(no, format!("{k} epoch {epoch} differs from ANGLE_1 epoch {}", p.epoch)));
        }
        Ok(())
    };
    let push = |records: &mut Vec<ObservationRecord>, r: ObservationRecord| -> Result<(), TdmError> {
        if let Some(prev) = records.last() {
            if prev.epoch >= r.epoch {
                return Err(TdmError::Validation(format!(
                    "line {no}: epoch {} not after {}",
                    r.epoch, prev.epoch
                )));
            }
        }
        records.push(r);
        Ok(())
    };
    match (k, pending.as_mut()) {
        ("ANGLE_1", None) => {
            if !(0.0..360.0).contains(&x) {
                return Err(perr(no, format!("ANGLE_1 {x} outside [0, 360)")));
            }
            *pending = Some(Pending { epoch, angle1: x, angle2: None });
            Ok(())
        }
        ("ANGLE_2", Some(p)) if p.angle2.is_none() => {
            same_epoch(p)?;
            if !(-90.0..=90.0).contains(&x) {
                return Err(perr(no, format!("ANGLE_2 {x} outside [-90, 90]")));
            }
            p.angle2 = Some(x);
            if !has_range {
                let p = pending.take().expect("pending record");
                push(records, record(&p, x, None))?;
            }
            Ok(())
        }
        ("RANGE", Some(p)) if has_range && p.angle2.is_some() => {
            same_epoch(p)?;
            if x <= 0.0 {
                return Err(perr(no, format!("RANGE {x} must be positive")));
            }
            let p = pending.take().expect("pending record");
            let a2 = p.angle2.expect("checked above");
            push(records, record(&p, a2, Some(x)))?;
            Ok(())
        }
        ("ANGLE_1" | "ANGLE_2" | "RANGE", _) => {
            let expected = match pending.as_ref() {
                None => "ANGLE_1",
                Some(p) if p.angle2.is_none() => "ANGLE_2",
                Some(_) => "RANGE",
            };
            if k == "RANGE" && !has_range {
                return Err(perr(no, "RANGE line without RANGE_UNITS in metadata"));
            }
            Err(perr(no, format!("expected {expected}, found {k}")))
        }
        _ => Err(perr(no, format!("unknown data key {k}"))),
    }
}

fn record(p: &Pending, angle2_deg: f64, range: Option<f64>) -> ObservationRecord {
    ObservationRecord {
        epoch: p.epoch,
        angle1: p.angle1.to_radians(),
        angle2: angle2_deg.to_radians(),
        range,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOOD: &str = "CCSDS_TDM_VERS = 2.0
COMMENT hand-written fixture
META_START
TIME_SYSTEM = SIM-J2000
PARTICIPANT_1 = OBJ-7
PARTICIPANT_2 = SITE-A
MODE = SEQUENTIAL
ANGLE_TYPE = AZEL
META_STOP
DATA_START
ANGLE_1 = 2000-01-01T12:00:00 10.5
ANGLE_2 = 2000-01-01T12:00:00 45.25
ANGLE_1 = 2000-01-01T12:01:00.5 11.0
ANGLE_2 = 2000-01-01T12:01:00.5 46.0

ANGLE_1 = 2000-01-01T12:02:00 12.0
ANGLE_2 = 2000-01-01T12:02:00 47.0
DATA_STOP
";

    #[test]
    fn minimal_document() {
        let t = parse_tdm(GOOD).unwrap();
        assert_eq!(t.records().len(), 3);
        assert!(!t.meta().has_range);
        assert_eq!(t.meta().participant, "OBJ-7");
        assert_eq!(t.meta().site_id, "SITE-A");
        assert!((t.records()[0].angle2 - 45.25f64.to_radians()).abs() < 1e-15);
    }

    #[test]
    fn canonical_form_and_hash() {
        let t = parse_tdm(GOOD).unwrap();
        let canon = serialize_tdm(&t);
        assert!(canon.contains("ANGLE_1 = 2000-01-01T12:01:00.500000 11.000000000\n"));
        assert!(!canon.contains("COMMENT"));
        let again = parse_tdm(&canon).unwrap();
        assert_eq!(again, t);
        assert_eq!(serialize_tdm(&again), canon);
        assert_eq!(t.content_hash(), crate::Digest32::of(canon.as_bytes()));
    }

    #[test]
    fn crlf_accepted() {
        let t = parse_tdm(&GOOD.replace('\n', "\r\n")).unwrap();
        assert_eq!(t, parse_tdm(GOOD).unwrap());
    }

    #[test]
    fn missing_data_stop_names_key_and_line() {
        let text = GOOD.replace("DATA_STOP\n", "");
        let err = parse_tdm(&text).unwrap_err();
        assert_eq!(err, TdmError::MissingKey { key: "DATA_STOP", line: 18 });
        assert!(err.to_string().contains("DATA_STOP"));
    }

    #[test]
    fn missing_mandatory_meta() {
        let err = parse_tdm(&GOOD.replace("ANGLE_TYPE = AZEL\n", "")).unwrap_err();
        assert_eq!(err, TdmError::MissingKey { key: "ANGLE_TYPE", line: 8 });
        let err = parse_tdm(&GOOD.replace("PARTICIPANT_1 = OBJ-7\n", "")).unwrap_err();
        assert!(matches!(err, TdmError::MissingKey { key: "PARTICIPANT_1", .. }));
        let err = parse_tdm(&GOOD.replace("MODE = SEQUENTIAL\n", "")).unwrap_err();
        assert!(matches!(err, TdmError::MissingKey { key: "MODE", .. }));
        let err = parse_tdm(&GOOD.replace("CCSDS_TDM_VERS = 2.0\n", "")).unwrap_err();
        assert!(matches!(err, TdmError::MissingKey { key: "CCSDS_TDM_VERS", .. }));
        let err = parse_tdm(&GOOD.replace("META_STOP\n", "")).unwrap_err();
        assert!(matches!(err, TdmError::MissingKey { key: "META_STOP", line: 9 }));
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let err = parse_tdm(&GOOD.replace("MODE = SEQUENTIAL", "MODE = SEQUENTIAL\nORIGINATOR = X"))
            .unwrap_err();
        assert!(matches!(err, TdmError::Parse { line: 8, .. }), "{err}");
        let err = parse_tdm(&GOOD.replace("MODE = SEQUENTIAL", "MODE = SEQUENTIAL\nMODE = SEQUENTIAL"))
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn non_monotonic_epochs() {
        let text = GOOD
            .replace("12:02:00 12.0", "12:00:30 12.0")
            .replace("12:02:00 47.0", "12:00:30 47.0");
        assert!(matches!(parse_tdm(&text), Err(TdmError::Validation(_))));
    }

    #[test]
    fn range_documents() {
        let text = GOOD
            .replace("ANGLE_TYPE = AZEL", "ANGLE_TYPE = RADEC\nRANGE_UNITS = km")
            .replace(
                "ANGLE_2 = 2000-01-01T12:00:00 45.25\n",
                "ANGLE_2 = 2000-01-01T12:00:00 45.25\nRANGE = 2000-01-01T12:00:00 1200.5\n",
            );
        let err = parse_tdm(&text).unwrap_err();
        assert!(matches!(err, TdmError::Parse { line: 18, .. }), "{err}");
        let text = text
            .replace(
                "ANGLE_2 = 2000-01-01T12:01:00.5 46.0\n",
                "ANGLE_2 = 2000-01-01T12:01:00.5 46.0\nRANGE = 2000-01-01T12:01:00.5 1201\n",
            )
            .replace(
                "ANGLE_2 = 2000-01-01T12:02:00 47.0\n",
                "ANGLE_2 = 2000-01-01T12:02:00 47.0\nRANGE = 2000-01-01T12:02:00 1202\n",
            );
        let t = parse_tdm(&text).unwrap();
        assert!(t.meta().has_range);
        assert_eq!(t.meta().mode, AngleMode::Radec);
        assert_eq!(t.records()[1].range, Some(1201.0));
        assert_eq!(parse_tdm(&serialize_tdm(&t)).unwrap(), t);
    }

    #[test]
    fn rejects_bad_values() {
        for (from, to) in [
            ("45.25", "95.0"),
            ("10.5", "360.0"),
            ("10.5", "NaN"),
            ("10.5", "inf"),
            ("45.25", "45.25 extra"),
            ("2000-01-01T12:00:00 10.5", "2000-13-01T12:00:00 10.5"),
        ] {
            assert!(parse_tdm(&GOOD.replacen(from, to, 1)).is_err(), "{to}");
        }
    }

    #[test]
    fn invalid_utf8_reports_line() {
        let mut b = GOOD.as_bytes().to_vec();
        b.insert(30, 0xff);
        assert!(matches!(parse_tdm_bytes(&b), Err(TdmError::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..600)) {
            let _ = parse_tdm_bytes(&bytes);
        }

        #[test]
        fn mutated_documents_never_panic(pos in 0usize..400, byte in any::<u8>(), cut in 0usize..420) {
            let mut b = GOOD.as_bytes().to_vec();
            let p = pos % b.len();
            b[p] = byte;
            b.truncate(cut.min(b.len()));
            let _ = parse_tdm_bytes(&b);
        }

        #[test]
        fn line_shuffles_never_panic(seed in any::<u64>()) {
            let mut lines: Vec<&str> = GOOD.lines().collect();
            let n = lines.len();
            let (i, j) = ((seed % n as u64) as usize, ((seed >> 16) % n as u64) as usize);
            lines.swap(i, j);
            let _ = parse_tdm(&lines.join("\n"));
        }
    }
}
