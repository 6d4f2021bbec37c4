//! Client for an out-of-process quality scorer.
//!
//! Wire format, one image per request:
//!
//! ```text
//! GRID <channels> <height> <width> <base64 of little-endian f64 pixels, channel-major>
//! ```
//!
//! The reply is one line holding a decimal score in `[1, 5]`. In subprocess mode
//! requests are written to the child's stdin and replies read from its stdout,
//! one line each. In HTTP mode the request line is the POST body and the reply
//! is the response body.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::reward::scorer::{SCORE_MAX, SCORE_MIN};

/// Environment variable read by [`ExternalScorerConfig::from_env`].
pub const SCORER_ENDPOINT_ENV: &str = "RESTORE_RL_SCORER_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Endpoint {
    /// Shell command kept running for the lifetime of the client.
    Subprocess { command: String },
    Http { url: String },
}

impl Endpoint {
    /// URLs starting with `http://` or `https://` select HTTP; anything else is a command.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.is_empty() {
            return Err(Error::Config("empty scorer endpoint".into()));
        }
        Ok(if spec.starts_with("http://") || spec.starts_with("https://") {
            Endpoint::Http { url: spec.into() }
        } else {
            Endpoint::Subprocess { command: spec.into() }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalScorerConfig {
    pub endpoint: Endpoint,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl ExternalScorerConfig {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            timeout_ms: 10_000,
            max_in_flight: 4,
        }
    }

    pub fn from_env() -> Result<Self> {
        let spec = std::env::var(SCORER_ENDPOINT_ENV)
            .map_err(|_| Error::Config(format!("{SCORER_ENDPOINT_ENV} is not set")))?;
        Ok(Self::new(Endpoint::parse(&spec)?))
    }
}

pub fn encode_request(image: &Grid) -> String {
    let s = image.shape();
    let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    format!("GRID {} {} {} {}", s.channels, s.height, s.width, STANDARD.encode(bytes))
}

pub fn decode_request(line: &str) -> Result<Grid> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("GRID") {
        return Err(Error::Format("request must start with GRID".into()));
    }
    let mut dim = || -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Format("bad GRID shape header".into()))
    };
    let shape = Shape::new(dim()?, dim()?, dim()?);
    let payload = parts.next().ok_or_else(|| Error::Format("missing GRID payload".into()))?;
    let bytes = STANDARD
        .decode(payload)
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() != 8 * shape.len() {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape} needs {}",
            bytes.len(),
            8 * shape.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Grid::from_vec(shape, data)
}

pub fn parse_response(text: &str) -> Result<f64> {
    let score: f64 = text
        .trim()
        .parse()
        .map_err(|_| Error::RewardService(format!("malformed score response {:?}", text.trim())))?;
    if !score.is_finite() || !(SCORE_MIN..=SCORE_MAX).contains(&score) {
        return Err(Error::RewardService(format!(
            "score {score} outside [{SCORE_MIN}, {SCORE_MAX}]"
        )));
    }
    Ok(score)
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::RewardService(format!("cannot start scorer {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Blocking scorer client shared across rollout threads.
pub struct ExternalScorer {
    config: ExternalScorerConfig,
    worker: Mutex<Option<Worker>>,
    agent: Option<ureq::Agent>,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
}

impl std::fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScorer").field("config", &self.config).finish()
    }
}

impl ExternalScorer {
    pub fn new(config: ExternalScorerConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        let agent = match &config.endpoint {
            Endpoint::Http { .. } => Some(
                ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
                    .build()
                    .into(),
            ),
            Endpoint::Subprocess { .. } => None,
        };
        Ok(Self {
            config,
            worker: Mutex::new(None),
            agent,
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
        })
    }

    pub fn config(&self) -> &ExternalScorerConfig {
        &self.config
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().expect("in-flight counter");
        while *n >= self.config.max_in_flight {
            n = self.slot_freed.wait(n).expect("in-flight counter");
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().expect("in-flight counter") -= 1;
        self.slot_freed.notify_one();
    }

    fn request_subprocess(&self, command: &str, line: &str) -> Result<String> {
        let mut guard = self.worker.lock().expect("scorer worker");
        if guard.is_none() {
            *guard = Some(Worker::spawn(command)?);
        }
        let worker = guard.as_mut().expect("worker present");
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let outcome = writeln!(worker.stdin, "{line}")
            .and_then(|_| worker.stdin.flush())
            .map_err(|e| Error::RewardService(format!("scorer stdin closed: {e}")))
            .and_then(|_| match worker.lines.recv_timeout(timeout) {
                Ok(Ok(reply)) => Ok(reply),
                Ok(Err(e)) => Err(Error::RewardService(format!("scorer stdout: {e}"))),
                Err(RecvTimeoutError::Timeout) => Err(Error::RewardService(format!(
                    "scorer timed out after {} ms",
                    self.config.timeout_ms
                ))),
                Err(RecvTimeoutError::Disconnected) => Err(Error::RewardService("scorer process exited".into())),
            });
        if outcome.is_err() {
            // A stale reply could pair with the next request.
            *guard = None;
        }
        outcome
    }

    fn request_http(&self, url: &str, line: &str) -> Result<String> {
        let agent = self.agent.as_ref().expect("http agent");
        let mut resp = agent
            .post(url)
            .header("content-type", "text/plain")
            .send(line)
            .map_err(|e| Error::RewardService(format!("POST {url}: {e}")))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| Error::RewardService(format!("reading response from {url}: {e}")))
    }

    pub fn score(&self, image: &Grid) -> Result<f64> {
        image.ensure_finite("externally scored image")?;
        let line = encode_request(image);
        self.acquire();
        let reply = match &self.config.endpoint {
            Endpoint::Subprocess { command } => self.request_subprocess(command, &line),
            Endpoint::Http { url } => self.request_http(url, &line),
        };
        self.release();
        parse_response(&reply?)
    }
}

pub fn external_score(scorer: &ExternalScorer, image: &Grid) -> Result<f64> {
    scorer.score(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    fn subprocess(command: &str, timeout_ms: u64) -> ExternalScorer {
        let mut cfg = ExternalScorerConfig::new(Endpoint::Subprocess { command: command.into() });
        cfg.timeout_ms = timeout_ms;
        ExternalScorer::new(cfg).unwrap()
    }

    #[test]
    fn request_round_trip() {
        let g = Grid::from_vec(Shape::new(1, 1, 3), vec![0.25, -1.5, 1e-300]).unwrap();
        let line = encode_request(&g);
        assert!(line.starts_with("GRID 1 1 3 "));
        assert_eq!(decode_request(&line).unwrap(), g);
        assert!(decode_request("GRID 1 1 2 AAAA").is_err());
    }

    #[test]
    fn response_validation() {
        assert_eq!(parse_response("3.0\n").unwrap(), 3.0);
        assert!(matches!(parse_response("7.5"), Err(Error::RewardService(_))));
        assert!(matches!(parse_response("good"), Err(Error::RewardService(_))));
        assert!(matches!(parse_response("NaN"), Err(Error::RewardService(_))));
    }

    #[test]
    fn echo_subprocess_returns_constant() {
        let s = subprocess("while read line; do echo 3.0; done", 5_000);
        let g = Grid::filled(Shape::new(1, 4, 4), 0.5);
        assert_eq!(external_score(&s, &g).unwrap(), 3.0);
        assert_eq!(external_score(&s, &g).unwrap(), 3.0);
    }

    #[test]
    fn silent_subprocess_times_out() {
        let s = subprocess("while read line; do sleep 5; done", 100);
        let err = s.score(&Grid::scalar(0.5)).unwrap_err();
        assert!(matches!(err, Error::RewardService(m) if m.contains("timed out")));
    }

    #[test]
    fn out_of_range_reply_is_an_error() {
        let s = subprocess("while read line; do echo 9; done", 5_000);
        assert!(s.score(&Grid::scalar(0.5)).is_err());
    }

    #[test]
    fn http_endpoint() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let mut req = Vec::new();
            // read headers plus the short body
            while !String::from_utf8_lossy(&req).contains("GRID") {
                let n = stream.read(&mut buf).unwrap();
                if n == 0 {
                    break;
                }
                req.extend_from_slice(&buf[..n]);
            }
            let body = "4.25";
            write!(stream, "HTTP/1.1 200 OK\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}", body.len()).unwrap();
        });
        let s = ExternalScorer::new(ExternalScorerConfig::new(Endpoint::Http {
            url: format!("http://{addr}/score"),
        }))
        .unwrap();
        assert_eq!(s.score(&Grid::scalar(0.5)).unwrap(), 4.25);
    }

    #[test]
    fn unreachable_http_endpoint_errors() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = ExternalScorerConfig::new(Endpoint::Http {
            url: format!("http://127.0.0.1:{port}/score"),
        });
        cfg.timeout_ms = 2_000;
        let s = ExternalScorer::new(cfg).unwrap();
        assert!(matches!(s.score(&Grid::scalar(0.5)), Err(Error::RewardService(_))));
    }

    #[test]
    fn endpoint_parsing() {
        assert!(matches!(Endpoint::parse("http://x/y").unwrap(), Endpoint::Http { .. }));
        assert!(matches!(Endpoint::parse("python3 score.py").unwrap(), Endpoint::Subprocess { .. }));
        assert!(Endpoint::parse("  ").is_err());
    }
}
