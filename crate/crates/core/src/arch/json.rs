//! Canonical JSON text format (schema version 1).
//!
//! ```json
//! {"layers":[{"activation":"relu","channels":32,"filter_width":3,"op_kind":"conv2d","pool_width":0,"src1":-1,"src2":-1}],"mode":"layer_net","schema_version":1}
//! ```
//!
//! Keys are sorted at every level and integers never carry a fractional
//! part, so two equal architectures always serialize to identical bytes.

use super::{validate_structure, Architecture, BranchSpec, LayerSpec, Mode, StackingTemplate, ValidationReport};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchError {
    #[error("parse error at line {line}, column {column}, field `{path}`: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("unsupported schema_version {0} (expected 1)")]
    SchemaVersion(u32),
    #[error("mode `{mode}` requires field `{field}`")]
    MissingField { mode: &'static str, field: &'static str },
    #[error("mode `{mode}` does not allow field `{field}`")]
    UnexpectedField { mode: &'static str, field: &'static str },
    #[error("invalid architecture: {0}")]
    Invalid(ValidationReport),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    schema_version: u32,
    mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<LayerSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cell: Option<Vec<BranchSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stacking: Option<StackingTemplate>,
}

fn document(arch: &Architecture) -> Document {
    match arch {
        Architecture::Layers(layers) => Document {
            schema_version: SCHEMA_VERSION,
            mode: Mode::LayerNet,
            layers: Some(layers.clone()),
            cell: None,
            stacking: None,
        },
        Architecture::Cell { branches, stacking } => Document {
            schema_version: SCHEMA_VERSION,
            mode: Mode::CellNet,
            layers: None,
            cell: Some(branches.clone()),
            stacking: Some(stacking.clone()),
        },
    }
}

/// The canonical JSON value (keys sorted by `serde_json::Map`).
pub fn to_json_value(arch: &Architecture) -> serde_json::Value {
    serde_json::to_value(document(arch)).expect("architecture documents always serialize")
}

/// Canonical single-line serialization. Requires a structurally valid
/// architecture, so expanded networks serialize too.
pub fn to_json(arch: &Architecture) -> Result<String, ArchError> {
    let report = validate_structure(arch);
    if !report.is_ok() {
        return Err(ArchError::Invalid(report));
    }
    Ok(to_json_value(arch).to_string())
}

/// Parses canonical (or any key-order) JSON. The result is structurally
/// checked; use [`super::validate_in`] to additionally check search-space
/// domains.
pub fn from_json(text: &str) -> Result<Architecture, ArchError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: Document = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ArchError::Parse { path, line: inner.line(), column: inner.column(), message: inner.to_string() }
    })?;
    from_document(doc)
}

/// Parses from an already-decoded JSON value (wire payloads).
pub fn from_value(value: serde_json::Value) -> Result<Architecture, ArchError> {
    let doc: Document = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ArchError::Parse { path, line: 0, column: 0, message: e.into_inner().to_string() }
    })?;
    from_document(doc)
}

fn from_document(doc: Document) -> Result<Architecture, ArchError> {
    if doc.schema_version != SCHEMA_VERSION {
        return Err(ArchError::SchemaVersion(doc.schema_version));
    }
    let arch = match doc.mode {
        Mode::LayerNet => {
            const MODE: &str = "layer_net";
            if doc.cell.is_some() {
                return Err(ArchError::UnexpectedField { mode: MODE, field: "cell" });
            }
            if doc.stacking.is_some() {
                return Err(ArchError::UnexpectedField { mode: MODE, field: "stacking" });
            }
            let layers = doc.layers.ok_or(ArchError::MissingField { mode: MODE, field: "layers" })?;
            Architecture::Layers(layers)
        }
        Mode::CellNet => {
            const MODE: &str = "cell_net";
            if doc.layers.is_some() {
                return Err(ArchError::UnexpectedField { mode: MODE, field: "layers" });
            }
            let branches = doc.cell.ok_or(ArchError::MissingField { mode: MODE, field: "cell" })?;
            let stacking = doc.stacking.ok_or(ArchError::MissingField { mode: MODE, field: "stacking" })?;
            Architecture::Cell { branches, stacking }
        }
    };
    let report = validate_structure(&arch);
    if !report.is_ok() {
        return Err(ArchError::Invalid(report));
    }
    Ok(arch)
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        to_json_value(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        from_value(value).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{random_architecture, Activation, Mode, RandomLimits};

    #[test]
    fn round_trip_random_archs() {
        for seed in 0..50 {
            for mode in [Mode::LayerNet, Mode::CellNet] {
                let arch = random_architecture(seed, mode, &RandomLimits::default());
                let text = to_json(&arch).unwrap();
                assert_eq!(from_json(&text).unwrap(), arch);
            }
        }
    }

    #[test]
    fn unknown_op_kind_names_the_field() {
        let text = r#"{"schema_version":1,"mode":"layer_net","layers":[
            {"op_kind":"conv3d","filter_width":3,"pool_width":0,"channels":16,"activation":"relu","src1":-1,"src2":-1}]}"#;
        let err = from_json(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layers[0].op_kind"), "{msg}");
        assert!(msg.contains("conv3d"), "{msg}");
        assert!(matches!(err, ArchError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn key_order_does_not_change_canonical_bytes() {
        let permuted = r#"{"layers":[{"src2":-1,"src1":-1,"pool_width":0,"op_kind":"conv2d",
            "filter_width":3,"channels":32,"activation":"relu"}],"schema_version":1,"mode":"layer_net"}"#;
        let ordered = r#"{"mode":"layer_net","schema_version":1,"layers":[{"activation":"relu",
            "channels":32,"filter_width":3,"op_kind":"conv2d","pool_width":0,"src1":-1,"src2":-1}]}"#;
        let a = to_json(&from_json(permuted).unwrap()).unwrap();
        let b = to_json(&from_json(ordered).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a,
            r#"{"layers":[{"activation":"relu","channels":32,"filter_width":3,"op_kind":"conv2d","pool_width":0,"src1":-1,"src2":-1}],"mode":"layer_net","schema_version":1}"#
        );
    }

    #[test]
    fn whole_multipliers_are_integers() {
        let arch = random_architecture(3, Mode::CellNet, &RandomLimits::default());
        let text = to_json(&arch).unwrap();
        assert!(text.contains(r#""stage_channel_multiplier":2"#), "{text}");
        assert!(!text.contains("2.0"));
    }

    #[test]
    fn structural_errors_are_rejected_after_parse() {
        let text = r#"{"schema_version":1,"mode":"layer_net","layers":[
            {"op_kind":"conv2d","filter_width":3,"pool_width":0,"channels":16,"activation":"relu","src1":0,"src2":-1}]}"#;
        assert!(matches!(from_json(text), Err(ArchError::Invalid(_))));
        let text = r#"{"schema_version":2,"mode":"layer_net","layers":[]}"#;
        assert!(matches!(from_json(text), Err(ArchError::SchemaVersion(2))));
        let text = r#"{"schema_version":1,"mode":"cell_net","layers":[]}"#;
        assert!(matches!(from_json(text), Err(ArchError::UnexpectedField { .. })));
    }

    #[test]
    fn serialize_requires_valid() {
        let bad = Architecture::Layers(vec![crate::arch::LayerSpec::conv(3, 16, Activation::Relu, 3)]);
        assert!(to_json(&bad).is_err());
    }
}
