//! Replays the recorded worker session against the in-process echo worker,
//! the TCP fixture and the external evaluator.

use morphnas::arch::{expand_stack, Architecture};
use morphnas::evaluation::protocol::{decode_request_line, serve, Behavior, EchoFixture};
use morphnas::evaluation::{Endpoint, EvalRequest, Evaluator, ExternalConfig, ExternalEvaluator, Status};
use morphnas::resources::estimate;
use serde::Deserialize;
use serde_json::Value;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

#[derive(Deserialize)]
struct Record {
    dir: String,
    line: String,
}

fn transcript() -> Vec<Record> {
    include_str!("data/conformance_transcript.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn lines(dir: &str) -> Vec<String> {
    transcript().into_iter().filter(|r| r.dir == dir).map(|r| r.line).collect()
}

/// Structural equality with numbers compared to 1e-9.
fn close(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() <= 1e-9,
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| close(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| close(v, w)))
        }
        _ => a == b,
    }
}

fn assert_replays(got: &[String], want: &[String]) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        let (gv, wv): (Value, Value) = (serde_json::from_str(g).unwrap(), serde_json::from_str(w).unwrap());
        assert!(close(&gv, &wv), "got {g}\nwant {w}");
    }
}

#[test]
fn transcript_alternates_requests_and_answers() {
    let t = transcript();
    assert_eq!(t[0].dir, "from_worker");
    assert!(t[0].line.contains("\"hello\""));
    for pair in t[1..].chunks(2) {
        assert_eq!((pair[0].dir.as_str(), pair[1].dir.as_str()), ("to_worker", "from_worker"));
    }
    assert!(lines("to_worker").len() >= 100);
}

#[test]
fn in_process_worker_replays_byte_for_byte() {
    let input = lines("to_worker").join("\n") + "\n";
    let mut out = Vec::new();
    serve(input.as_bytes(), &mut out, Behavior::Echo).unwrap();
    let got: Vec<String> = String::from_utf8(out).unwrap().lines().map(String::from).collect();
    assert_eq!(got, lines("from_worker"));
}

#[test]
fn tcp_fixture_replays() {
    let fixture = EchoFixture::spawn(Behavior::Echo).unwrap();
    let mut stream = TcpStream::connect(fixture.addr).unwrap();
    stream.set_nodelay(true).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut got = Vec::new();
    let mut read_line = |got: &mut Vec<String>| {
        let mut l = String::new();
        reader.read_line(&mut l).unwrap();
        got.push(l.trim_end().to_string());
    };
    read_line(&mut got);
    for l in lines("to_worker") {
        writeln!(stream, "{l}").unwrap();
        read_line(&mut got);
    }
    assert_replays(&got, &lines("from_worker"));
}

fn requests() -> Vec<EvalRequest> {
    lines("to_worker").iter().filter_map(|l| decode_request_line(l).ok()).collect()
}

#[test]
fn external_evaluator_agrees_with_the_recording() {
    let fixture = EchoFixture::spawn(Behavior::Echo).unwrap();
    let mut cfg = ExternalConfig::new(Endpoint::Address(fixture.addr.to_string()));
    cfg.workers = 3;
    let mut ev = ExternalEvaluator::new(cfg);
    let reqs = requests();
    let results = ev.evaluate_batch(&reqs).unwrap();
    let recorded: Vec<Value> = lines("from_worker")[1..].iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (r, want) in results.iter().zip(&recorded) {
        assert_eq!(want["id"], Value::from(r.id.clone()));
        match r.status {
            Status::Ok => assert!((r.performance.unwrap() - want["performance"].as_f64().unwrap()).abs() <= 1e-9),
            Status::Error => assert_eq!(want["status"], "error"),
        }
    }
}

#[test]
fn recorded_param_counts_match_the_estimator() {
    let answers: Vec<Value> = lines("from_worker")[1..].iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut checked = 0;
    for (req, ans) in requests().iter().zip(&answers) {
        if ans["status"] != "ok" {
            continue;
        }
        let input = req.train_config.input_shape;
        let lowered = match &req.architecture {
            Architecture::Layers(_) => req.architecture.clone(),
            cell => expand_stack(cell, input).unwrap(),
        };
        assert_eq!(ans["metrics"]["params"].as_u64(), Some(estimate(&lowered, input).unwrap().params));
        checked += 1;
    }
    assert_eq!(checked, 100);
}
