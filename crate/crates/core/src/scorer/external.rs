//! Client for scorers running in another process, over stdio or TCP.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde_json::Value;

use super::protocol::{Op, Request};
use super::{check_batch, logsumexp, Scorer, ScorerInfo};
use crate::error::{Error, Result};
use crate::token_index::TokenId;

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Where an external scorer lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    /// Shell command whose stdin/stdout carry the protocol.
    Stdio(String),
    /// `host:port` of a listening server.
    Tcp(String),
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    // set after a timeout or transport failure: a late reply would desync ids
    broken: bool,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn spawn_reader<R: Read + Send + 'static>(reader: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => {
                    let _ = tx.send(Err(std::io::ErrorKind::UnexpectedEof.into()));
                    return;
                }
                Ok(_) => {
                    if tx.send(Ok(line)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            }
        }
    });
    rx
}

impl Connection {
    fn open(transport: &Transport) -> Result<Connection> {
        match transport {
            Transport::Stdio(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Transport(format!("spawning `{cmd}`: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Connection {
                    writer: Box::new(stdin),
                    lines: spawn_reader(stdout),
                    next_id: 1,
                    broken: false,
                    child: Some(child),
                })
            }
            Transport::Tcp(addr) => {
                let stream =
                    TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connecting to {addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let read_half = stream.try_clone().map_err(|e| Error::Transport(e.to_string()))?;
                Ok(Connection {
                    writer: Box::new(stream),
                    lines: spawn_reader(read_half),
                    next_id: 1,
                    broken: false,
                    child: None,
                })
            }
        }
    }

    fn call(&mut self, op: Op, timeout: Duration) -> Result<Value> {
        if self.broken {
            return Err(Error::Transport("connection is no longer usable".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_vec(&Request { id, op }).expect("request serializes");
        line.push(b'\n');
        if let Err(e) = self.writer.write_all(&line).and_then(|_| self.writer.flush()) {
            self.broken = true;
            return Err(Error::Transport(e.to_string()));
        }

        let reply = match self.lines.recv_timeout(timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => {
                self.broken = true;
                return Err(Error::Transport(format!("reading reply: {e}")));
            }
            Err(RecvTimeoutError::Timeout) => {
                self.broken = true;
                return Err(Error::Timeout);
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.broken = true;
                return Err(Error::Transport("connection closed".into()));
            }
        };
        let value: Value =
            serde_json::from_str(&reply).map_err(|e| Error::Protocol(format!("malformed reply: {e}")))?;
        match value.get("id").and_then(Value::as_u64) {
            Some(got) if got == id => {}
            // only one request is ever in flight, so any other id is foreign
            other => {
                self.broken = true;
                return Err(Error::Protocol(format!(
                    "reply id {other:?} does not match request id {id}"
                )));
            }
        }
        if let Some(code) = value.get("error") {
            return Err(Error::Remote {
                code: code.as_str().unwrap_or("unknown").to_string(),
                message: value
                    .get("message")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
            });
        }
        Ok(value)
    }
}

/// A [`Scorer`] proxied over the wire protocol. Requests are serialized over
/// a single connection.
pub struct ExternalScorer {
    info: ScorerInfo,
    conn: Mutex<Connection>,
    timeout: Duration,
}

/// Opens `transport` and performs the `info` handshake.
pub fn connect_external(transport: &Transport, timeout: Duration) -> Result<ExternalScorer> {
    let mut conn = Connection::open(transport)?;
    let reply = conn.call(Op::Info, timeout).map_err(|e| match e {
        Error::Remote { code, message } => Error::Handshake(format!("{code}: {message}")),
        other => other,
    })?;
    let info = parse_info(reply).map_err(|e| Error::Handshake(e.to_string()))?;
    Ok(ExternalScorer {
        info,
        conn: Mutex::new(conn),
        timeout,
    })
}

fn parse_info(reply: Value) -> Result<ScorerInfo> {
    let info: ScorerInfo = serde_json::from_value(reply).map_err(|e| Error::Protocol(format!("info reply: {e}")))?;
    info.validate()?;
    Ok(info)
}

impl ExternalScorer {
    fn call(&self, op: Op) -> Result<Value> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Transport("connection lock poisoned".into()))?;
        conn.call(op, self.timeout)
    }

    /// Re-queries `info` from the server.
    pub fn refresh_info(&self) -> Result<ScorerInfo> {
        parse_info(self.call(Op::Info)?)
    }
}

impl Scorer for ExternalScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        check_batch(&self.info, contexts)?;
        let reply = self.call(Op::Logprobs {
            contexts: contexts.iter().map(|c| c.iter().map(|&t| t as u64).collect()).collect(),
        })?;
        let rows: Vec<Vec<f64>> = serde_json::from_value(
            reply
                .get("logprobs")
                .cloned()
                .ok_or_else(|| Error::Protocol("reply lacks `logprobs`".into()))?,
        )
        .map_err(|e| Error::Protocol(format!("logprobs reply: {e}")))?;
        if rows.len() != contexts.len() {
            return Err(Error::Protocol(format!(
                "{} vectors for {} contexts",
                rows.len(),
                contexts.len()
            )));
        }
        let vocab = self.info.vocab_size as usize;
        for row in &rows {
            if row.len() != vocab {
                return Err(Error::Protocol(format!(
                    "vector of length {} for vocab_size {vocab}",
                    row.len()
                )));
            }
            let lse = logsumexp(row);
            if !lse.is_finite() || lse.abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::Protocol(format!("vector not normalized (logsumexp {lse})")));
            }
        }
        Ok(rows)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if !self.info.supports_tokenize {
            return Err(Error::Unsupported("tokenize"));
        }
        let reply = self.call(Op::Tokenize { text: text.to_string() })?;
        let tokens: Vec<u64> = serde_json::from_value(
            reply
                .get("tokens")
                .cloned()
                .ok_or_else(|| Error::Protocol("reply lacks `tokens`".into()))?,
        )
        .map_err(|e| Error::Protocol(format!("tokenize reply: {e}")))?;
        let tokens = tokens
            .into_iter()
            .map(|t| u32::try_from(t).map_err(|_| Error::Protocol(format!("token {t} overflows"))))
            .collect::<Result<Vec<_>>>()?;
        self.info.check_context(&tokens)?;
        Ok(tokens)
    }
}
