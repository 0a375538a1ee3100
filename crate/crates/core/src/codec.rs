//! Base64 of little-endian `f64`s, bit-exact including NaN payloads and -0.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serializer};

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>, String> {
    let bytes = B64.decode(text.as_bytes()).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err("payload is not a whole number of f64 values".into());
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// `#[serde(with = "crate::codec::f64s")]` for `Vec<f64>` fields.
pub mod f64s {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode_f64s(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        decode_f64s(&String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}
