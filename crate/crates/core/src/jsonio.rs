//! JSON persistence with bit-faithful float round trips.
//!
//! Every artifact (tasks, pools, backbones, checkpoints, reports) is plain
//! JSON. Floats are written with 17 significant digits, which is enough for
//! any `f64` to survive a write/read cycle exactly.

use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter};
use sha2::{Digest, Sha256};

use crate::error::Result;

struct SigDigitFormatter;

impl Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        if !value.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("non-finite float {value} cannot be serialized"),
            ));
        }
        // {:.16e} prints one digit before the point and 16 after: 17
        // significant digits total.
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        CompactFormatter.begin_array(writer)
    }
}

/// Serialize to a JSON string with 17-significant-digit floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigitFormatter);
    value.serialize(&mut ser)?;
    // The formatter only emits ASCII.
    Ok(String::from_utf8(out).expect("json output is ascii"))
}

pub fn from_json_str<T: DeserializeOwned>(s: &str) -> Result<T> {
    Ok(serde_json::from_str(s)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = to_json_string(value)?;
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path)?;
    from_json_str(&body)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash of a value's canonical JSON encoding.
pub fn value_sha256<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(to_json_string(value)?.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bit_exactly() {
        let values = vec![
            0.1,
            1.0 / 3.0,
            std::f64::consts::PI,
            1e-300,
            -2.2250738585072014e-308,
            123456789.123456789,
            0.0,
        ];
        let json = to_json_string(&values).unwrap();
        let back: Vec<f64> = from_json_str(&json).unwrap();
        for (a, b) in values.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} did not round trip");
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let v = vec![0.1, 0.2, 0.30000000000000004];
        assert_eq!(to_json_string(&v).unwrap(), to_json_string(&v).unwrap());
    }

    #[test]
    fn non_finite_never_round_trips_as_a_number() {
        // serde_json renders non-finite floats as null before the formatter
        // sees them; a later read then fails instead of resurrecting a NaN.
        assert_eq!(to_json_string(&f64::NAN).unwrap(), "null");
        assert!(from_json_str::<f64>("null").is_err());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
