//! Regenerates `tests/data/conformance_transcript.jsonl`: a recorded session
//! with the reference echo worker that any worker implementation must replay.
//!
//! cargo run -p morphnas --example conformance_transcript

use morphnas::arch::{random_architecture, Mode, RandomLimits, Shape};
use morphnas::evaluation::protocol::{encode_request, serve, Behavior};
use morphnas::evaluation::surrogate::surrogate_performance;
use morphnas::evaluation::{EvalRequest, TrainConfig};
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let mut to_worker = Vec::new();
    let (mut scorable, mut underflow, mut seed) = (0, 0, 1000u64);
    // 100 scorable architectures plus a few that shrink below 1x1
    while scorable < 100 || underflow < 4 {
        let mode = if seed % 2 == 0 { Mode::LayerNet } else { Mode::CellNet };
        let input = if seed % 4 < 2 { Shape::new(32, 32, 3) } else { Shape::new(8, 8, 1) };
        let arch = random_architecture(seed, mode, &RandomLimits::default());
        seed += 1;
        let ok = surrogate_performance(&arch, input).is_ok();
        if (ok && scorable == 100) || (!ok && underflow == 4) {
            continue;
        }
        if ok {
            scorable += 1;
        } else {
            underflow += 1;
        }
        let mut train = TrainConfig::predictive();
        train.input_shape = input;
        let req = EvalRequest {
            id: format!("c{:03}", to_worker.len()),
            architecture: arch,
            train_config: train,
            constraints_echo: None,
        };
        to_worker.push(encode_request(&req));
    }
    to_worker.push("{\"type\":\"eval\",\"id\":\"bad-ref\",\"architecture\":{\"schema_version\":1,\"mode\":\"layer_net\",\"layers\":[{\"op_kind\":\"conv2d\",\"filter_width\":3,\"pool_width\":0,\"channels\":8,\"activation\":\"relu\",\"src1\":4,\"src2\":-1}]},\"train_config\":{}}".into());
    to_worker.push("this line is not json".into());

    let input = to_worker.join("\n") + "\n";
    let mut output = Vec::new();
    serve(input.as_bytes(), &mut output, Behavior::Echo)?;
    let output = String::from_utf8(output).expect("utf-8");
    let mut from_worker = output.lines();

    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/conformance_transcript.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let mut record = |dir: &str, line: &str| writeln!(f, "{}", json!({"dir": dir, "line": line}));
    record("from_worker", from_worker.next().expect("hello"))?;
    for line in &to_worker {
        record("to_worker", line)?;
        record("from_worker", from_worker.next().expect("one answer per request"))?;
    }
    assert!(from_worker.next().is_none());
    f.flush()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}
