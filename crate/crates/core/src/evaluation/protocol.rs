//! Wire protocol v1 for external evaluators: line-delimited JSON over a
//! subprocess's standard streams or a TCP connection.
//!
//! ```text
//! worker → engine  {"type":"hello","protocol":1,"capabilities":["echo_surrogate"]}
//! engine → worker  {"type":"eval","id":"e0b1s2","architecture":{...},"train_config":{...}}
//! worker → engine  {"type":"result","id":"e0b1s2","status":"ok","performance":0.73,"metrics":{}}
//! ```
//!
//! This module also hosts the reference echo worker ([`serve`]) used as an
//! in-process fixture and behind the CLI's hidden `echo-worker` command.

use super::surrogate::surrogate_evaluate;
use super::{EvalRequest, EvalResult};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::net::{SocketAddr, TcpListener};
use std::thread;
use std::time::Duration;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol: u32,
    #[serde(default)]
    pub capabilities: Vec<String>,
}

/// A decoded worker → engine line.
#[derive(Clone, Debug, PartialEq)]
pub enum WorkerMessage {
    Hello(Hello),
    Result(EvalResult),
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("unexpected message type `{0}`")]
    UnexpectedType(String),
}

fn tagged(kind: &str, body: serde_json::Value) -> String {
    let mut v = body;
    v.as_object_mut().expect("messages are JSON objects").insert("type".into(), kind.into());
    v.to_string()
}

pub fn encode_hello(h: &Hello) -> String {
    tagged("hello", serde_json::to_value(h).expect("hello serializes"))
}

pub fn encode_request(r: &EvalRequest) -> String {
    tagged("eval", serde_json::to_value(r).expect("requests serialize"))
}

pub fn encode_result(r: &EvalResult) -> String {
    tagged("result", serde_json::to_value(r).expect("results serialize"))
}

fn split_type(line: &str) -> Result<(String, serde_json::Value), ProtocolError> {
    let mut v: serde_json::Value = serde_json::from_str(line.trim()).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let obj = v.as_object_mut().ok_or_else(|| ProtocolError::Malformed("not a JSON object".into()))?;
    let kind = match obj.remove("type") {
        Some(serde_json::Value::String(s)) => s,
        _ => return Err(ProtocolError::Malformed("missing string field `type`".into())),
    };
    Ok((kind, v))
}

pub fn decode_worker_line(line: &str) -> Result<WorkerMessage, ProtocolError> {
    let (kind, body) = split_type(line)?;
    let parse_err = |e: serde_json::Error| ProtocolError::Malformed(e.to_string());
    match kind.as_str() {
        "hello" => Ok(WorkerMessage::Hello(serde_json::from_value(body).map_err(parse_err)?)),
        "result" => {
            let r: EvalResult = serde_json::from_value(body).map_err(parse_err)?;
            if r.status == super::Status::Ok && r.usable_performance().is_none() {
                return Err(ProtocolError::Malformed("status ok requires performance in [0, 1]".into()));
            }
            Ok(WorkerMessage::Result(r))
        }
        other => Err(ProtocolError::UnexpectedType(other.into())),
    }
}

/// Decodes an engine → worker line. On failure returns the request id if one
/// could be recovered, for the error reply.
pub fn decode_request_line(line: &str) -> Result<EvalRequest, (String, String)> {
    let (kind, body) = split_type(line).map_err(|e| ("unknown".to_string(), e.to_string()))?;
    let id = body.get("id").and_then(|v| v.as_str()).unwrap_or("unknown").to_string();
    if kind != "eval" {
        return Err((id, ProtocolError::UnexpectedType(kind).to_string()));
    }
    serde_json::from_value(body).map_err(|e| (id, e.to_string()))
}

/// How the reference worker misbehaves, for exercising the client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Behavior {
    /// Answers with the surrogate.
    Echo,
    /// Answers every request with this performance.
    Fixed(f64),
    /// Writes one garbage line before the first answer.
    MalformedFirst,
    /// Reads requests and never answers.
    Silent,
    /// Announces an unsupported protocol version.
    WrongProtocol,
    /// Collects this many requests, then answers them in reverse order.
    Reversed(usize),
    /// Closes the stream after this many answers.
    CrashAfter(usize),
}

/// Runs the reference worker until the input closes.
pub fn serve(input: impl BufRead, mut output: impl Write, behavior: Behavior) -> std::io::Result<()> {
    let protocol = if behavior == Behavior::WrongProtocol { PROTOCOL_VERSION + 1 } else { PROTOCOL_VERSION };
    let hello = Hello { protocol, capabilities: vec!["echo_surrogate".into()] };
    writeln!(output, "{}", encode_hello(&hello))?;
    output.flush()?;
    let mut answered = 0usize;
    let mut held: Vec<EvalResult> = Vec::new();
    let mut garbage_pending = behavior == Behavior::MalformedFirst;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let result = match decode_request_line(&line) {
            Ok(req) => match behavior {
                Behavior::Fixed(p) => EvalResult::ok(req.id, p),
                _ => surrogate_evaluate(&req),
            },
            Err((id, msg)) => EvalResult::error(id, msg),
        };
        match behavior {
            Behavior::Silent => continue,
            Behavior::Reversed(group) => {
                held.push(result);
                if held.len() < group.max(1) {
                    continue;
                }
                for r in held.drain(..).rev() {
                    writeln!(output, "{}", encode_result(&r))?;
                }
            }
            Behavior::CrashAfter(n) if answered >= n => return Ok(()),
            _ => {
                if garbage_pending {
                    writeln!(output, "{{this is not json")?;
                    garbage_pending = false;
                }
                writeln!(output, "{}", encode_result(&result))?;
            }
        }
        answered += 1;
        output.flush()?;
    }
    Ok(())
}

/// A TCP echo worker on localhost serving every connection on its own thread.
/// Lives until the process exits.
pub struct EchoFixture {
    pub addr: SocketAddr,
}

impl EchoFixture {
    pub fn spawn(behavior: Behavior) -> std::io::Result<EchoFixture> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                thread::spawn(move || {
                    let _ = stream.set_read_timeout(Some(Duration::from_secs(600)));
                    let _ = stream.set_nodelay(true);
                    if let Ok(read) = stream.try_clone() {
                        let _ = serve(std::io::BufReader::new(read), stream, behavior);
                    }
                });
            }
        });
        Ok(EchoFixture { addr })
    }
}
