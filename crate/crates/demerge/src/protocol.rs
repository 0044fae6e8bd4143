//! Line-delimited JSON evaluator protocol.
//!
//! The engine writes one request object per line to the child's stdin and
//! reads one response object per line from its stdout:
//!
//! ```text
//! → {"id":1,"cmd":"info"}
//! ← {"id":1,"ok":true,"name":"…","version":"…","capacity":1}
//! → {"id":2,"cmd":"evaluate","weights_path":"/tmp/c.st","split":"dev","metric":"accuracy"}
//! ← {"id":2,"ok":true,"score":0.83,"metric":"accuracy","n_examples":500}
//! → {"id":3,"cmd":"shutdown"}
//! ← {"id":3,"ok":true}
//! ```
//!
//! Weights travel as checkpoint files. Any protocol violation (unparsable
//! line, unknown id, score outside `[0, 1]`, timeout) marks the session
//! unusable; later calls fail fast with the original error.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command as Process, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use demerge_core::eval::{EvalError, EvalErrorKind, Evaluator, FitnessReport, Metric};
use demerge_core::FlatVector;
use serde::{Deserialize, Serialize};

use crate::checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Info,
    Evaluate {
        weights_path: String,
        split: Split,
        metric: Metric,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_examples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

impl Response {
    pub fn info(id: u64, name: &str, version: &str, capacity: usize) -> Self {
        Self {
            id,
            ok: true,
            name: Some(name.into()),
            version: Some(version.into()),
            capacity: Some(capacity),
            ..Default::default()
        }
    }

    pub fn score(id: u64, score: f64, metric: Metric, n_examples: usize) -> Self {
        Self {
            id,
            ok: true,
            score: Some(score),
            metric: Some(metric),
            n_examples: Some(n_examples),
            ..Default::default()
        }
    }

    pub fn ack(id: u64) -> Self {
        Self {
            id,
            ok: true,
            ..Default::default()
        }
    }

    pub fn error(id: u64, message: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            error_message: Some(message.into()),
            ..Default::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Server side

/// What a protocol server needs from the model it wraps.
pub trait Backend {
    fn name(&self) -> String;
    fn version(&self) -> String;
    fn capacity(&self) -> usize {
        1
    }
    /// Score and example count, or a message for an `ok:false` reply.
    fn evaluate(
        &self,
        weights_path: &Path,
        split: Split,
        metric: Metric,
    ) -> Result<(f64, usize), String>;
}

/// Deliberate protocol violations, for exercising client error handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Fault {
    #[default]
    None,
    /// Answer evaluate requests with a line that is not JSON.
    Malformed,
    /// Report a score of 1.2.
    OutOfRange,
    /// Echo the wrong id on evaluate responses.
    IdMismatch,
    /// Never answer evaluate requests.
    Hang,
    /// Exit before reading anything.
    Exit,
    /// Add a little noise to every score.
    Noisy,
    /// Answer every evaluate with ok:false.
    Reject,
}

fn send(output: &mut impl Write, response: &Response) -> io::Result<()> {
    let line = serde_json::to_string(response).expect("plain struct");
    writeln!(output, "{line}")?;
    output.flush()
}

/// Answers requests from `input` until `shutdown` or end of input.
pub fn serve(backend: &dyn Backend, input: impl BufRead, output: impl Write) -> io::Result<()> {
    serve_with_fault(backend, Fault::None, input, output)
}

pub fn serve_with_fault(
    backend: &dyn Backend,
    fault: Fault,
    input: impl BufRead,
    mut output: impl Write,
) -> io::Result<()> {
    if fault == Fault::Exit {
        return Ok(());
    }
    let mut noise = 0.0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id")?.as_u64())
                    .unwrap_or(0);
                send(
                    &mut output,
                    &Response::error(id, format!("bad request: {e}")),
                )?;
                continue;
            }
        };
        let id = request.id;
        match request.command {
            Command::Info => send(
                &mut output,
                &Response::info(id, &backend.name(), &backend.version(), backend.capacity()),
            )?,
            Command::Shutdown => {
                send(&mut output, &Response::ack(id))?;
                return Ok(());
            }
            Command::Evaluate {
                weights_path,
                split,
                metric,
            } => {
                let result = backend.evaluate(Path::new(&weights_path), split, metric);
                let response = match (fault, result) {
                    (Fault::Malformed, _) => {
                        writeln!(output, "this is not json")?;
                        output.flush()?;
                        continue;
                    }
                    (Fault::Hang, _) => loop {
                        thread::sleep(Duration::from_secs(3600));
                    },
                    (Fault::Reject, _) => Response::error(id, "rejected by request"),
                    (_, Err(message)) => Response::error(id, message),
                    (Fault::OutOfRange, Ok((_, n))) => Response::score(id, 1.2, metric, n),
                    (Fault::IdMismatch, Ok((s, n))) => Response::score(id + 1000, s, metric, n),
                    (Fault::Noisy, Ok((s, n))) => {
                        noise += 1e-6;
                        Response::score(id, (s + noise).min(1.0), metric, n)
                    }
                    (_, Ok((s, n))) => Response::score(id, s, metric, n),
                };
                send(&mut output, &response)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Client side

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub program: String,
    pub args: Vec<String>,
    pub handshake_timeout: Duration,
    pub evaluate_timeout: Duration,
    pub split: Split,
    pub metric: Metric,
    /// Copied into the metadata of every checkpoint sent to the child.
    pub metadata: BTreeMap<String, String>,
}

impl SessionConfig {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            handshake_timeout: Duration::from_secs(10),
            evaluate_timeout: Duration::from_secs(300),
            split: Split::Dev,
            metric: Metric::Accuracy,
            metadata: BTreeMap::new(),
        }
    }

    /// Splits a command line on whitespace: program first, then arguments.
    pub fn from_command_line(line: &str) -> Result<Self, EvalError> {
        let mut parts = line.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| EvalError::new(EvalErrorKind::Spawn, "empty evaluator command"))?;
        Ok(Self::new(program, parts.collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluatorInfo {
    pub name: String,
    pub version: String,
    pub capacity: usize,
}

#[derive(Default)]
struct Shared {
    pending: Mutex<HashMap<u64, mpsc::Sender<Response>>>,
    failure: Mutex<Option<EvalError>>,
}

impl Shared {
    fn failure(&self) -> Option<EvalError> {
        self.failure.lock().expect("lock").clone()
    }

    /// Records the first failure and releases every waiting caller.
    fn fail(&self, error: EvalError) {
        let mut slot = self.failure.lock().expect("lock");
        if slot.is_none() {
            *slot = Some(error);
        }
        drop(slot);
        self.pending.lock().expect("lock").clear();
    }
}

struct Semaphore {
    free: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("lock");
        while *free == 0 {
            free = self.freed.wait(free).expect("lock");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("lock") += 1;
        self.0.freed.notify_one();
    }
}

/// One running evaluator process.
pub struct Session {
    config: SessionConfig,
    child: Mutex<Child>,
    stdin: Mutex<Option<ChildStdin>>,
    shared: Arc<Shared>,
    reader: Option<JoinHandle<()>>,
    next_id: AtomicU64,
    info: EvaluatorInfo,
    permits: Semaphore,
    scratch: tempfile::TempDir,
    intervals: Mutex<Vec<(Instant, Instant)>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("program", &self.config.program)
            .field("info", &self.info)
            .field("failed", &self.shared.failure().is_some())
            .finish()
    }
}

fn protocol(message: impl Into<String>) -> EvalError {
    EvalError::new(EvalErrorKind::Protocol, message)
}

fn read_responses(stdout: impl io::Read, shared: Arc<Shared>) {
    for line in BufReader::new(stdout).lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                shared.fail(EvalError::new(
                    EvalErrorKind::SessionClosed,
                    format!("reading evaluator output: {e}"),
                ));
                return;
            }
        };
        let response: Response = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                shared.fail(protocol(format!("malformed response line {line:?}: {e}")));
                return;
            }
        };
        let waiter = shared.pending.lock().expect("lock").remove(&response.id);
        match waiter {
            Some(tx) => {
                let _ = tx.send(response);
            }
            None => {
                shared.fail(protocol(format!(
                    "response id {} matches no outstanding request",
                    response.id
                )));
                return;
            }
        }
    }
    shared.fail(EvalError::new(
        EvalErrorKind::SessionClosed,
        "evaluator closed its output",
    ));
}

impl Session {
    /// Spawns the evaluator and completes the `info` handshake.
    pub fn connect(config: SessionConfig) -> Result<Self, EvalError> {
        let mut child = Process::new(&config.program)
            .args(&config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                EvalError::new(
                    EvalErrorKind::Spawn,
                    format!("spawning `{}`: {e}", config.program),
                )
            })?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let shared = Arc::new(Shared::default());
        let reader = {
            let shared = Arc::clone(&shared);
            thread::spawn(move || read_responses(stdout, shared))
        };
        let scratch = tempfile::Builder::new()
            .prefix("demerge-eval")
            .tempdir()
            .map_err(|e| EvalError::internal(format!("scratch directory: {e}")))?;
        let mut session = Self {
            config,
            child: Mutex::new(child),
            stdin: Mutex::new(Some(stdin)),
            shared,
            reader: Some(reader),
            next_id: AtomicU64::new(1),
            info: EvaluatorInfo {
                name: String::new(),
                version: String::new(),
                capacity: 1,
            },
            permits: Semaphore::new(1),
            scratch,
            intervals: Mutex::new(Vec::new()),
        };
        let response = session
            .request(Command::Info, session.config.handshake_timeout)
            .map_err(|e| match e.kind {
                EvalErrorKind::Timeout => {
                    EvalError::new(EvalErrorKind::Timeout, format!("handshake: {}", e.message))
                }
                _ => EvalError::new(
                    EvalErrorKind::Spawn,
                    format!("handshake failed: {}", e.message),
                ),
            })?;
        let info = match response {
            Response {
                ok: true,
                name: Some(name),
                version: Some(version),
                capacity: Some(capacity),
                ..
            } if capacity >= 1 => EvaluatorInfo {
                name,
                version,
                capacity,
            },
            other => {
                let e = protocol(format!("bad info response: {other:?}"));
                session.shared.fail(e.clone());
                return Err(e);
            }
        };
        session.permits = Semaphore::new(info.capacity);
        session.info = info;
        Ok(session)
    }

    /// Evaluates `probe` twice and fails unless both scores agree to 1e-12.
    pub fn probe_determinism(&self, probe: &FlatVector) -> Result<(), EvalError> {
        let a = self.evaluate_split(probe, self.config.split)?.score;
        let b = self.evaluate_split(probe, self.config.split)?.score;
        if (a - b).abs() > 1e-12 {
            let e = protocol(format!("evaluator is not deterministic: {a} then {b}"));
            self.shared.fail(e.clone());
            return Err(e);
        }
        Ok(())
    }

    pub fn info(&self) -> &EvaluatorInfo {
        &self.info
    }

    pub fn is_usable(&self) -> bool {
        self.shared.failure().is_none()
    }

    /// Start and end of every completed evaluate call.
    pub fn intervals(&self) -> Vec<(Instant, Instant)> {
        self.intervals.lock().expect("lock").clone()
    }

    fn request(&self, command: Command, timeout: Duration) -> Result<Response, EvalError> {
        if let Some(e) = self.shared.failure() {
            return Err(e);
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.shared.pending.lock().expect("lock").insert(id, tx);
        let line = serde_json::to_string(&Request { id, command }).expect("plain struct");
        {
            let mut stdin = self.stdin.lock().expect("lock");
            let written = match stdin.as_mut() {
                Some(pipe) => writeln!(pipe, "{line}").and_then(|_| pipe.flush()),
                None => Err(io::Error::new(io::ErrorKind::BrokenPipe, "stdin closed")),
            };
            if let Err(e) = written {
                self.shared.pending.lock().expect("lock").remove(&id);
                let e = EvalError::new(
                    EvalErrorKind::SessionClosed,
                    format!("writing request: {e}"),
                );
                self.shared.fail(e.clone());
                return Err(self.shared.failure().unwrap_or(e));
            }
        }
        match rx.recv_timeout(timeout) {
            Ok(response) => Ok(response),
            Err(RecvTimeoutError::Timeout) => {
                self.shared.pending.lock().expect("lock").remove(&id);
                let e = EvalError::new(
                    EvalErrorKind::Timeout,
                    format!("no response to request {id} within {timeout:?}"),
                );
                self.shared.fail(e.clone());
                let _ = self.child.lock().expect("lock").kill();
                Err(e)
            }
            Err(RecvTimeoutError::Disconnected) => Err(self
                .shared
                .failure()
                .unwrap_or_else(|| EvalError::new(EvalErrorKind::SessionClosed, "session closed"))),
        }
    }

    pub fn evaluate_split(
        &self,
        weights: &FlatVector,
        split: Split,
    ) -> Result<FitnessReport, EvalError> {
        let _permit = self.permits.acquire();
        if let Some(e) = self.shared.failure() {
            return Err(e);
        }
        let mut map = weights.unflatten();
        map.metadata_mut().extend(self.config.metadata.clone());
        let n = self.next_id.load(Ordering::Relaxed);
        let path = self.scratch.path().join(format!(
            "candidate-{n}-{:?}.safetensors",
            thread::current().id()
        ));
        checkpoint::save_checkpoint(&map, &path).map_err(|e| EvalError::internal(e.to_string()))?;
        let metric = self.config.metric;
        let start = Instant::now();
        let response = self.request(
            Command::Evaluate {
                weights_path: path.display().to_string(),
                split,
                metric,
            },
            self.config.evaluate_timeout,
        );
        let end = Instant::now();
        let _ = std::fs::remove_file(&path);
        let response = response?;
        self.intervals.lock().expect("lock").push((start, end));

        if !response.ok {
            return Err(EvalError::new(
                EvalErrorKind::Rejected,
                response
                    .error_message
                    .unwrap_or_else(|| "evaluator reported failure".into()),
            ));
        }
        let violation = match (response.score, response.metric, response.n_examples) {
            (None, _, _) => Some("ok response without a score".to_owned()),
            (Some(s), _, _) if !(0.0..=1.0).contains(&s) => {
                Some(format!("score {s} out of range [0, 1]"))
            }
            (_, m, _) if m != Some(metric) => {
                Some(format!("metric {m:?} does not match requested {metric:?}"))
            }
            (_, _, None) => Some("ok response without n_examples".to_owned()),
            _ => None,
        };
        if let Some(v) = violation {
            let e = protocol(v);
            self.shared.fail(e.clone());
            return Err(e);
        }
        Ok(FitnessReport {
            score: response.score.expect("checked"),
            metric,
            n_examples: response.n_examples.expect("checked"),
        })
    }

    /// Asks the child to exit and waits for it.
    pub fn shutdown(&mut self) {
        if self.is_usable() {
            let _ = self.request(Command::Shutdown, Duration::from_secs(2));
        }
        self.stdin.lock().expect("lock").take();
        let mut child = self.child.lock().expect("lock");
        let deadline = Instant::now() + Duration::from_secs(2);
        loop {
            match child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                _ => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break;
                }
            }
        }
        drop(child);
        if let Some(reader) = self.reader.take() {
            let _ = reader.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Evaluator for Session {
    fn evaluate(&self, weights: &FlatVector) -> Result<f64, EvalError> {
        self.evaluate_split(weights, self.config.split)
            .map(|r| r.score)
    }

    /// Runs up to `capacity` requests at once.
    fn evaluate_batch(&self, batch: &[&FlatVector]) -> Vec<Result<f64, EvalError>> {
        let workers = self.info.capacity.min(batch.len());
        if workers <= 1 {
            return batch.iter().map(|w| self.evaluate(w)).collect();
        }
        let results: Vec<Mutex<Option<Result<f64, EvalError>>>> =
            batch.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(w) = batch.get(i) else { break };
                    *results[i].lock().expect("lock") = Some(self.evaluate(w));
                });
            }
        });
        results
            .into_iter()
            .map(|r| r.into_inner().expect("lock").expect("every slot filled"))
            .collect()
    }

    fn capacity(&self) -> usize {
        self.info.capacity
    }

    fn identity(&self) -> String {
        format!("{} {}", self.info.name, self.info.version)
    }
}
