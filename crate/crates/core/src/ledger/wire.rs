//! Canonical binary form: serde field order, fixed-width big-endian
//! integers, IEEE-754 floats as big-endian bit patterns, `u64` length
//! prefixes on strings and sequences, `u32` enum tags, one tag byte for
//! options. Trailing bytes are an error.

use std::io::Write;

use bincode::Options;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::Block;

/// Largest accepted block record.
pub const MAX_RECORD: u32 = 64 << 20;

fn options() -> impl Options {
    bincode::DefaultOptions::new()
        .with_big_endian()
        .with_fixint_encoding()
        .with_limit(MAX_RECORD as u64)
}

pub fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    options().serialize(v).expect("in-memory values encode")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, String> {
    options().deserialize(bytes).map_err(|e| e.to_string())
}

/// Appends one length-prefixed block record.
pub fn write_block<W: Write>(w: &mut W, b: &Block) -> std::io::Result<()> {
    let body = encode(b);
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)
}

/// Splits a log into records, decoding each. Parsing stops at the first
/// record that cannot be framed or decoded; its index is reported.
pub fn read_blocks(bytes: &[u8]) -> (Vec<Block>, Option<(u64, String)>) {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let k = out.len() as u64;
        if rest.len() < 4 {
            return (out, Some((k, "truncated length prefix".into())));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes"));
        if len > MAX_RECORD || rest.len() - 4 < len as usize {
            return (out, Some((k, format!("record length {len} overruns the log"))));
        }
        let (body, tail) = rest[4..].split_at(len as usize);
        match decode::<Block>(body) {
            // one byte string per block: re-encoding must reproduce the record
            Ok(b) if encode(&b) != body => return (out, Some((k, "record is not in canonical form".into()))),
            Ok(b) => out.push(b),
            Err(e) => return (out, Some((k, e))),
        }
        rest = tail;
    }
    (out, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::astro::Epoch;

    #[test]
    fn integers_are_big_endian_and_fixed_width() {
        assert_eq!(encode(&0x0102u64), vec![0, 0, 0, 0, 0, 0, 1, 2]);
        assert_eq!(encode(&"ab"), vec![0, 0, 0, 0, 0, 0, 0, 2, b'a', b'b']);
        assert_eq!(encode(&Some(1u8)), vec![1, 1]);
        assert_eq!(encode(&1.0f64), 1.0f64.to_be_bytes().to_vec());
        assert_eq!(encode(&Epoch::from_seconds(2.5)), 2.5f64.to_be_bytes().to_vec());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut b = encode(&7u32);
        b.push(0);
        assert!(decode::<u32>(&b).is_err());
    }
}
