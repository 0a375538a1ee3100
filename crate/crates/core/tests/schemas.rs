//! The checked-in JSON schemas accept what the engine writes and reject what
//! it refuses to read.

use jsonschema::{Registry, Validator};
use morphnas::arch::{from_json, random_architecture, to_json, to_json_value, Mode, RandomLimits};
use morphnas::evaluation::protocol::{encode_hello, encode_request, encode_result, serve, Behavior, Hello};
use morphnas::evaluation::{EvalRequest, EvalResult, TrainConfig};
use morphnas::resources::{ConstraintSet, ConstraintSpec, Metric};
use serde_json::{json, Value};
use std::path::PathBuf;

const BASE: &str = "https://morphnas.invalid/schemas/";

fn load(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn validator(name: &str) -> Validator {
    let arch = "architecture.v1.schema.json";
    let registry = Registry::new().add(format!("{BASE}{arch}"), load(arch)).unwrap().prepare().unwrap();
    jsonschema::options().with_registry(&registry).build(&load(name)).unwrap()
}

fn assert_valid(v: &Validator, instance: &Value) {
    let errors: Vec<String> = v.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?} for {instance}");
}

fn sample_archs() -> Vec<morphnas::arch::Architecture> {
    (0..60)
        .map(|s| random_architecture(s, if s % 2 == 0 { Mode::LayerNet } else { Mode::CellNet }, &RandomLimits::default()))
        .collect()
}

#[test]
fn architecture_documents_validate() {
    let v = validator("architecture.v1.schema.json");
    for a in sample_archs() {
        assert_valid(&v, &to_json_value(&a));
    }
}

#[test]
fn architecture_schema_rejects_what_the_parser_rejects() {
    let v = validator("architecture.v1.schema.json");
    let good = to_json_value(&sample_archs()[0]);
    let cell = to_json_value(&sample_archs()[1]);
    let mut bad = Vec::new();
    let mut t = good.clone();
    t["schema_version"] = json!(2);
    bad.push(t);
    let mut t = good.clone();
    t["cell"] = cell["cell"].clone();
    bad.push(t);
    let mut t = good.clone();
    t["layers"][0]["op_kind"] = json!("conv3d");
    bad.push(t);
    let mut t = good.clone();
    t["extra"] = json!(1);
    bad.push(t);
    let mut t = cell.clone();
    t.as_object_mut().unwrap().remove("stacking");
    bad.push(t);
    for b in bad {
        assert!(!v.is_valid(&b), "schema accepted {b}");
        assert!(from_json(&b.to_string()).is_err(), "parser accepted {b}");
    }
    assert!(from_json(&to_json(&sample_archs()[0]).unwrap()).is_ok());
}

fn line(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn wire_messages_validate() {
    let req = validator("eval-request.v1.schema.json");
    let res = validator("eval-result.v1.schema.json");
    let hello = validator("hello.v1.schema.json");
    let echo = ConstraintSet(vec![ConstraintSpec::upper(Metric::ModelSize, 1e5)]);
    for (i, a) in sample_archs().into_iter().enumerate() {
        let r = EvalRequest {
            id: format!("r{i}"),
            architecture: a,
            train_config: if i % 2 == 0 { TrainConfig::predictive() } else { TrainConfig::full() },
            constraints_echo: (i % 3 == 0).then(|| echo.clone()),
        };
        assert_valid(&req, &line(&encode_request(&r)));
    }
    assert_valid(&res, &line(&encode_result(&EvalResult::ok("a", 0.5))));
    assert_valid(&res, &line(&encode_result(&EvalResult::error("a", "boom"))));
    assert_valid(&hello, &line(&encode_hello(&Hello { protocol: 1, capabilities: vec!["echo_surrogate".into()] })));
    assert!(!res.is_valid(&json!({"type": "result", "id": "a", "status": "ok"})));
    assert!(!req.is_valid(&json!({"type": "eval", "id": "a"})));
}

#[test]
fn echo_fixture_output_validates() {
    let res = validator("eval-result.v1.schema.json");
    let hello = validator("hello.v1.schema.json");
    let mut input = String::new();
    for (i, a) in sample_archs().into_iter().take(10).enumerate() {
        let r = EvalRequest { id: format!("r{i}"), architecture: a, train_config: TrainConfig::predictive(), constraints_echo: None };
        input.push_str(&encode_request(&r));
        input.push('\n');
    }
    input.push_str("not json\n");
    let mut out = Vec::new();
    serve(input.as_bytes(), &mut out, Behavior::Echo).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_valid(&hello, &line(lines.next().unwrap()));
    let rest: Vec<&str> = lines.collect();
    assert_eq!(rest.len(), 11);
    for l in rest {
        assert_valid(&res, &line(l));
    }
}
