//! Client side of the wire protocol.
//!
//! Requests are pipelined: a batch is written at once and answers are matched
//! by id in whatever order they arrive. Each request has a deadline of
//! `timeout_ms`; malformed lines and answers with unknown ids count against
//! the oldest unanswered request and trigger a re-send, up to `retries` times.
//! Timeouts and a closed stream produce `status=error` results. The evaluator
//! is only reported unreachable when no connection can be established.

use super::protocol::{decode_worker_line, encode_request, WorkerMessage, PROTOCOL_VERSION};
use super::{EvalRequest, EvalResult, Evaluator, Unreachable};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Program and arguments of a worker speaking on its standard streams.
    Command(Vec<String>),
    /// `host:port` of a worker listening on TCP.
    Address(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub endpoint: Endpoint,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Parallel worker connections; requests are dealt round-robin.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Time allowed for connecting and receiving the hello line.
    #[serde(default = "default_connect_timeout_ms")]
    pub connect_timeout_ms: u64,
    #[serde(default = "default_connect_attempts")]
    pub connect_attempts: u32,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_retries() -> u32 {
    2
}

fn default_workers() -> usize {
    1
}

fn default_connect_timeout_ms() -> u64 {
    10_000
}

fn default_connect_attempts() -> u32 {
    3
}

impl ExternalConfig {
    pub fn new(endpoint: Endpoint) -> Self {
        ExternalConfig {
            endpoint,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            workers: default_workers(),
            connect_timeout_ms: default_connect_timeout_ms(),
            connect_attempts: default_connect_attempts(),
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<Option<String>>,
    child: Option<Child>,
    closed: bool,
    timed_out: bool,
    answered: HashSet<String>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn spawn_reader(read: impl std::io::Read + Send + 'static) -> Receiver<Option<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(read).lines() {
            match line {
                Ok(l) => {
                    if tx.send(Some(l)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(None);
    });
    rx
}

fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Connection, String> {
    let (writer, lines, child): (Box<dyn Write + Send>, _, _) = match endpoint {
        Endpoint::Command(argv) => {
            let (program, args) = argv.split_first().ok_or("empty worker command")?;
            let mut child = Command::new(program)
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| format!("cannot spawn `{program}`: {e}"))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            (Box::new(stdin), spawn_reader(stdout), Some(child))
        }
        Endpoint::Address(addr) => {
            let sock = addr
                .to_socket_addrs()
                .map_err(|e| format!("bad address `{addr}`: {e}"))?
                .next()
                .ok_or_else(|| format!("address `{addr}` resolves to nothing"))?;
            let stream = TcpStream::connect_timeout(&sock, timeout).map_err(|e| format!("cannot connect to {addr}: {e}"))?;
            let _ = stream.set_nodelay(true);
            let read = stream.try_clone().map_err(|e| e.to_string())?;
            (Box::new(stream), spawn_reader(read), None)
        }
    };
    let conn = Connection { writer, lines, child, closed: false, timed_out: false, answered: HashSet::new() };
    match conn.lines.recv_timeout(timeout) {
        Ok(Some(line)) => match decode_worker_line(&line) {
            Ok(WorkerMessage::Hello(h)) if h.protocol == PROTOCOL_VERSION => Ok(conn),
            Ok(WorkerMessage::Hello(h)) => Err(format!("worker speaks protocol {}, expected {PROTOCOL_VERSION}", h.protocol)),
            _ => Err(format!("expected hello, got `{line}`")),
        },
        Ok(None) | Err(RecvTimeoutError::Disconnected) => Err("worker closed the stream before hello".into()),
        Err(RecvTimeoutError::Timeout) => Err(format!("no hello within {} ms", timeout.as_millis())),
    }
}

struct Pending {
    slot: usize,
    id: String,
    line: String,
    attempts: u32,
    deadline: Instant,
}

impl Connection {
    fn send(&mut self, line: &str) -> bool {
        let ok = writeln!(self.writer, "{line}").and_then(|_| self.writer.flush()).is_ok();
        if !ok {
            self.closed = true;
        }
        ok
    }

    fn run(&mut self, requests: &[&EvalRequest], cfg: &ExternalConfig) -> Vec<EvalResult> {
        let timeout = Duration::from_millis(cfg.timeout_ms);
        let mut results: Vec<Option<EvalResult>> = vec![None; requests.len()];
        let mut pending: Vec<Pending> = Vec::with_capacity(requests.len());
        for (slot, r) in requests.iter().enumerate() {
            let line = encode_request(r);
            if !self.closed {
                self.send(&line);
            }
            pending.push(Pending { slot, id: r.id.clone(), line, attempts: 0, deadline: Instant::now() + timeout });
        }
        while !pending.is_empty() {
            if self.closed {
                for p in pending.drain(..) {
                    results[p.slot] = Some(EvalResult::error(p.id, "worker closed the stream"));
                }
                break;
            }
            let now = Instant::now();
            if let Some(i) = pending.iter().position(|p| p.deadline <= now) {
                let p = pending.remove(i);
                self.timed_out = true;
                results[p.slot] = Some(EvalResult::error(p.id, format!("no answer within {} ms", cfg.timeout_ms)));
                continue;
            }
            let wait = pending.iter().map(|p| p.deadline).min().expect("non-empty") - now;
            let blame = match self.lines.recv_timeout(wait) {
                Ok(Some(line)) => match decode_worker_line(&line) {
                    Ok(WorkerMessage::Result(r)) => {
                        if let Some(i) = pending.iter().position(|p| p.id == r.id) {
                            let p = pending.remove(i);
                            self.answered.insert(p.id);
                            results[p.slot] = Some(r);
                            None
                        } else if self.answered.contains(&r.id) {
                            // late answer to a re-sent request
                            None
                        } else {
                            Some(format!("answer for unknown id `{}`", r.id))
                        }
                    }
                    Ok(WorkerMessage::Hello(_)) => Some("unexpected hello".to_string()),
                    Err(e) => Some(e.to_string()),
                },
                Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                    self.closed = true;
                    None
                }
                Err(RecvTimeoutError::Timeout) => None,
            };
            if let Some(reason) = blame {
                log::warn!("external evaluator: {reason}");
                let p = &mut pending[0];
                p.attempts += 1;
                if p.attempts > cfg.retries {
                    let p = pending.remove(0);
                    results[p.slot] = Some(EvalResult::error(p.id, format!("{reason} (after {} retries)", cfg.retries)));
                } else {
                    let line = p.line.clone();
                    self.send(&line);
                }
            }
        }
        results.into_iter().map(|r| r.expect("every request resolved")).collect()
    }
}

/// Evaluates through one or more external workers.
pub struct ExternalEvaluator {
    pub config: ExternalConfig,
    conns: Vec<Option<Connection>>,
}

impl std::fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEvaluator").field("config", &self.config).finish_non_exhaustive()
    }
}

impl ExternalEvaluator {
    pub fn new(config: ExternalConfig) -> Self {
        let workers = config.workers.max(1);
        ExternalEvaluator { config, conns: (0..workers).map(|_| None).collect() }
    }

    /// Connects every missing worker slot.
    pub fn connect(&mut self) -> Result<(), Unreachable> {
        let timeout = Duration::from_millis(self.config.connect_timeout_ms);
        for slot in self.conns.iter_mut().filter(|c| c.is_none()) {
            let mut last = String::new();
            for attempt in 0..self.config.connect_attempts.max(1) {
                match connect(&self.config.endpoint, timeout) {
                    Ok(c) => {
                        *slot = Some(c);
                        break;
                    }
                    Err(e) => {
                        log::warn!("external evaluator: connect attempt {}: {e}", attempt + 1);
                        last = e;
                    }
                }
            }
            if slot.is_none() {
                return Err(Unreachable(last));
            }
        }
        Ok(())
    }
}

impl Evaluator for ExternalEvaluator {
    fn name(&self) -> &'static str {
        "external"
    }

    fn evaluate_batch(&mut self, requests: &[EvalRequest]) -> Result<Vec<EvalResult>, Unreachable> {
        self.connect()?;
        let k = self.conns.len();
        let cfg = &self.config;
        let mut per_conn: Vec<Vec<EvalResult>> = Vec::with_capacity(k);
        thread::scope(|s| {
            let handles: Vec<_> = self
                .conns
                .iter_mut()
                .enumerate()
                .map(|(w, conn)| {
                    let mine: Vec<&EvalRequest> = requests.iter().skip(w).step_by(k).collect();
                    s.spawn(move || conn.as_mut().expect("connected").run(&mine, cfg))
                })
                .collect();
            per_conn.extend(handles.into_iter().map(|h| h.join().expect("worker thread")));
        });
        for conn in &mut self.conns {
            // a hung or closed worker is replaced before the next batch
            if conn.as_ref().is_some_and(|c| c.closed || c.timed_out) {
                *conn = None;
            }
        }
        let mut iters: Vec<_> = per_conn.into_iter().map(Vec::into_iter).collect();
        Ok((0..requests.len()).map(|i| iters[i % k].next().expect("one result per request")).collect())
    }
}
