//! Client for environments served by a child process.
//!
//! One JSON object per line on the child's stdin/stdout; diagnostics go to
//! its stderr. Requests and replies strictly alternate.
//!
//! ```text
//! > {"id":0,"cmd":"spec"}
//! < {"id":0,"v":1,"obs_dim":3,"act_dim":2,"max_episode_steps":100}
//! > {"id":1,"cmd":"reset","seed":7}
//! < {"id":1,"obs":[...]}
//! > {"id":2,"cmd":"step","action":[1.0000000000000001e-1,-2.0000000000000001e-1]}
//! < {"id":2,"obs":[...],"reward":-0.1,"terminated":false,"truncated":false}
//! > {"id":3,"cmd":"close"}
//! < {"id":3}
//! ```
//!
//! Any reply may instead be `{"id":n,"error":"..."}`. Request ids start at
//! 0 and increase by one per request. Real numbers are written with 17
//! significant digits so they round-trip exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{Map, Value};

use crate::approximator::Real;
use crate::envs::{EnvSpec, Environment, StepResult};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u64 = 1;

/// Stderr kept for diagnostics, in bytes.
const STDERR_KEEP: usize = 64 * 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeOptions {
    pub handshake_timeout: Duration,
    pub step_timeout: Duration,
    /// Time the child gets to exit after `close` before it is killed.
    pub close_grace: Duration,
    /// Keep every protocol line in memory (see [`BridgeHandle::transcript`]).
    pub record_transcript: bool,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        BridgeOptions {
            handshake_timeout: Duration::from_secs(10),
            step_timeout: Duration::from_secs(30),
            close_grace: Duration::from_secs(2),
            record_transcript: false,
        }
    }
}

enum Incoming {
    Line(String),
    Eof,
    Failed(String),
}

pub struct BridgeHandle {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    replies: Receiver<Incoming>,
    stderr: Arc<Mutex<String>>,
    spec: EnvSpec,
    version: u64,
    next_id: u64,
    options: BridgeOptions,
    transcript: Vec<String>,
    closed: bool,
}

/// Decimal form with 17 significant digits.
pub fn format_real(x: Real) -> String {
    format!("{:.16e}", x as f64)
}

fn format_array(xs: &[Real]) -> String {
    let parts: Vec<String> = xs.iter().map(|&x| format_real(x)).collect();
    format!("[{}]", parts.join(","))
}

fn split_command(command: &str) -> Result<(String, Vec<String>)> {
    let mut parts = command.split_whitespace().map(str::to_owned);
    let program = parts
        .next()
        .ok_or_else(|| Error::config("bridge command is empty"))?;
    Ok((program, parts.collect()))
}

impl BridgeHandle {
    /// Starts `command` (split on whitespace) and performs the handshake.
    pub fn spawn(command: &str, options: BridgeOptions) -> Result<Self> {
        let (program, args) = split_command(command)?;
        let mut child = Command::new(&program)
            .args(&args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Bridge {
                message: format!("could not start '{command}': {e}"),
                stderr: String::new(),
            })?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr_pipe = child.stderr.take().expect("piped stderr");
        let stdin = child.stdin.take();

        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                let msg = match reader.read_line(&mut line) {
                    Ok(0) => Incoming::Eof,
                    Ok(_) => Incoming::Line(line.trim_end_matches(['\n', '\r']).to_owned()),
                    Err(e) => Incoming::Failed(e.to_string()),
                };
                let stop = !matches!(msg, Incoming::Line(_));
                if tx.send(msg).is_err() || stop {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut pipe = stderr_pipe;
            let mut buf = [0u8; 4096];
            while let Ok(n) = pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().unwrap_or_else(|p| p.into_inner());
                s.push_str(&String::from_utf8_lossy(&buf[..n]));
                if s.len() > STDERR_KEEP {
                    let cut = s.len() - STDERR_KEEP;
                    let cut = (cut..s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(s.len());
                    s.drain(..cut);
                }
            }
        });

        let mut handle = BridgeHandle {
            command: command.to_owned(),
            child,
            stdin,
            replies: rx,
            stderr,
            spec: EnvSpec {
                obs_dim: 0,
                act_dim: 0,
                max_episode_steps: 0,
                reward_range: (f64::NEG_INFINITY, f64::INFINITY),
            },
            version: 0,
            next_id: 0,
            transcript: Vec::new(),
            closed: false,
            options,
        };
        handle.handshake()?;
        Ok(handle)
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Protocol lines exchanged so far, prefixed `> ` (sent) or `< `
    /// (received). Empty unless `record_transcript` is set.
    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    /// Stderr captured from the child so far.
    pub fn stderr(&self) -> String {
        self.stderr.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        // Give the stderr reader a moment to catch up with a dying child.
        thread::sleep(Duration::from_millis(20));
        Error::Bridge {
            message: message.into(),
            stderr: self.stderr(),
        }
    }

    fn request(&mut self, body: &str, timeout: Duration) -> Result<Map<String, Value>> {
        if self.closed {
            return Err(Error::Protocol("bridge is closed".into()));
        }
        match self.replies.try_recv() {
            Ok(Incoming::Line(line)) => {
                return Err(self.fail(format!("unsolicited output from child: {line}")));
            }
            Ok(Incoming::Eof) => {
                let msg = self.exit_message();
                return Err(self.fail(msg));
            }
            Ok(Incoming::Failed(e)) => return Err(self.fail(format!("reading child output failed: {e}"))),
            Err(_) => {}
        }
        let id = self.next_id;
        self.next_id += 1;
        let line = if body.is_empty() {
            format!("{{\"id\":{id}}}")
        } else {
            format!("{{\"id\":{id},{body}}}")
        };
        if self.options.record_transcript {
            self.transcript.push(format!("> {line}"));
        }
        let write = match self.stdin.as_mut() {
            Some(stdin) => writeln!(stdin, "{line}").and_then(|_| stdin.flush()),
            None => return Err(Error::Protocol("bridge stdin already closed".into())),
        };
        if let Err(e) = write {
            let msg = format!("writing to child failed: {e}; {}", self.exit_message());
            return Err(self.fail(msg));
        }
        let reply = match self.replies.recv_timeout(timeout) {
            Ok(Incoming::Line(reply)) => reply,
            Ok(Incoming::Eof) | Err(RecvTimeoutError::Disconnected) => {
                let msg = self.exit_message();
                return Err(self.fail(msg));
            }
            Ok(Incoming::Failed(e)) => return Err(self.fail(format!("reading child output failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(self.fail(format!(
                    "no reply to request {id} within {:.1} s",
                    timeout.as_secs_f64()
                )));
            }
        };
        if self.options.record_transcript {
            self.transcript.push(format!("< {reply}"));
        }
        let value: Value = serde_json::from_str(&reply)
            .map_err(|e| self.fail(format!("malformed reply ({e}): {reply}")))?;
        let Value::Object(map) = value else {
            return Err(self.fail(format!("reply is not a JSON object: {reply}")));
        };
        match map.get("id").and_then(Value::as_u64) {
            Some(got) if got == id => {}
            Some(got) => {
                return Err(self.fail(format!("reply id {got} does not match request id {id}: {reply}")));
            }
            None => return Err(self.fail(format!("reply without a numeric id: {reply}"))),
        }
        if let Some(err) = map.get("error") {
            let msg = err.as_str().map(str::to_owned).unwrap_or_else(|| err.to_string());
            return Err(self.fail(format!("child reported an error: {msg}")));
        }
        Ok(map)
    }

    fn exit_message(&mut self) -> String {
        match self.child.try_wait() {
            Ok(Some(status)) => format!("child exited ({status})"),
            _ => "child closed its output".into(),
        }
    }

    fn handshake(&mut self) -> Result<()> {
        let timeout = self.options.handshake_timeout;
        let map = self.request("\"cmd\":\"spec\"", timeout)?;
        let line = Value::Object(map.clone()).to_string();
        let version = map
            .get("v")
            .and_then(Value::as_u64)
            .ok_or_else(|| self.fail(format!("handshake reply lacks protocol version \"v\": {line}")))?;
        if version != PROTOCOL_VERSION {
            return Err(self.fail(format!(
                "protocol version {version} is not supported (expected {PROTOCOL_VERSION})"
            )));
        }
        let dim = |key: &str| -> Option<usize> { map.get(key).and_then(Value::as_u64).map(|v| v as usize) };
        let (Some(obs_dim), Some(act_dim), Some(max_episode_steps)) =
            (dim("obs_dim"), dim("act_dim"), dim("max_episode_steps"))
        else {
            return Err(self.fail(format!(
                "handshake reply needs obs_dim, act_dim and max_episode_steps: {line}"
            )));
        };
        let reward_range = match map.get("reward_range").and_then(Value::as_array) {
            Some(r) if r.len() == 2 => (
                r[0].as_f64().unwrap_or(f64::NEG_INFINITY),
                r[1].as_f64().unwrap_or(f64::INFINITY),
            ),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        };
        let spec = EnvSpec {
            obs_dim,
            act_dim,
            max_episode_steps,
            reward_range,
        };
        spec.validate().map_err(|_| self.fail(format!("invalid spec in handshake: {line}")))?;
        self.spec = spec;
        self.version = version;
        Ok(())
    }

    fn observation(&self, map: &Map<String, Value>) -> Result<Vec<Real>> {
        let line = || Value::Object(map.clone()).to_string();
        let arr = map
            .get("obs")
            .and_then(Value::as_array)
            .ok_or_else(|| self.fail(format!("reply lacks \"obs\": {}", line())))?;
        if arr.len() != self.spec.obs_dim {
            return Err(self.fail(format!(
                "observation has {} entries, spec says {}: {}",
                arr.len(),
                self.spec.obs_dim,
                line()
            )));
        }
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .filter(|x| x.is_finite())
                    .map(|x| x as Real)
                    .ok_or_else(|| self.fail(format!("non-numeric observation entry: {}", line())))
            })
            .collect()
    }

    /// Sends `close`, waits for the child to exit, and kills it after the
    /// grace period.
    pub fn shutdown(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        let grace = self.options.close_grace;
        let outcome = self.request("\"cmd\":\"close\"", grace).map(|_| ());
        self.closed = true;
        self.stdin = None;
        let deadline = Instant::now() + grace;
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                _ => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    break;
                }
            }
        }
        outcome
    }
}

impl Environment for BridgeHandle {
    fn spec(&self) -> EnvSpec {
        self.spec.clone()
    }

    fn name(&self) -> String {
        format!("bridge:{}", self.command)
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Real>> {
        let timeout = self.options.step_timeout;
        let map = self.request(&format!("\"cmd\":\"reset\",\"seed\":{seed}"), timeout)?;
        self.observation(&map)
    }

    fn step(&mut self, action: &[Real]) -> Result<StepResult> {
        if action.len() != self.spec.act_dim {
            return Err(Error::Protocol(format!(
                "action has {} components, spec says {}",
                action.len(),
                self.spec.act_dim
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Protocol("non-finite action".into()));
        }
        let timeout = self.options.step_timeout;
        let body = format!("\"cmd\":\"step\",\"action\":{}", format_array(action));
        let map = self.request(&body, timeout)?;
        let obs = self.observation(&map)?;
        let line = || Value::Object(map.clone()).to_string();
        let reward = map
            .get("reward")
            .and_then(Value::as_f64)
            .filter(|r| r.is_finite())
            .ok_or_else(|| self.fail(format!("step reply lacks a finite \"reward\": {}", line())))?;
        let flag = |key: &str| -> Result<bool> {
            match map.get(key) {
                None => Ok(false),
                Some(Value::Bool(b)) => Ok(*b),
                Some(_) => Err(self.fail(format!("\"{key}\" must be a boolean: {}", line()))),
            }
        };
        let terminated = flag("terminated")?;
        let truncated = flag("truncated")?;
        Ok(StepResult {
            obs,
            reward: reward as Real,
            terminated,
            truncated: truncated && !terminated,
        })
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        if !self.closed {
            let _ = self.shutdown();
        }
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}
