//! Binary search for the smallest sparsity constant that preserves the
//! model's output, against an external evaluator.
//!
//! The evaluator speaks line-delimited JSON:
//!
//! ```text
//! > {"type":"eval","k":6,"l_d":3,"b_q":32,"b_k":32,"max_tokens":16}
//! < {"type":"result","tokens":[...],"matched":16,"ppl":null,"status":"ok","message":null}
//! ```
//!
//! A probe at `k` succeeds when the evaluator reports at least `n_match`
//! leading generated tokens equal to the unpruned reference.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub k: usize,
    pub matched: usize,
    pub success: bool,
    pub ppl: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("no k in [{k_min}, {k_max}] preserves the output")]
    SearchExhausted {
        k_min: usize,
        k_max: usize,
        probes: Vec<Probe>,
    },
    #[error("evaluator failure: {message}")]
    EvaluatorFailure { message: String, probes: Vec<Probe> },
}

impl SearchError {
    fn evaluator(message: impl Into<String>) -> Self {
        SearchError::EvaluatorFailure {
            message: message.into(),
            probes: Vec::new(),
        }
    }

    /// Probes issued before the failure.
    pub fn probes(&self) -> &[Probe] {
        match self {
            SearchError::InvalidConfig(_) => &[],
            SearchError::SearchExhausted { probes, .. }
            | SearchError::EvaluatorFailure { probes, .. } => probes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "eval")]
pub struct EvalRequest {
    pub k: usize,
    pub l_d: usize,
    pub b_q: usize,
    pub b_k: usize,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "result")]
pub struct EvalResponse {
    pub tokens: Vec<i64>,
    pub matched: usize,
    pub ppl: Option<f64>,
    pub status: EvalStatus,
    pub message: Option<String>,
}

impl EvalResponse {
    pub fn error(message: impl Into<String>) -> Self {
        Self {
            tokens: Vec::new(),
            matched: 0,
            ppl: None,
            status: EvalStatus::Error,
            message: Some(message.into()),
        }
    }
}

/// Serializes a protocol message as one line, newline included.
pub fn to_line<T: Serialize>(msg: &T) -> String {
    let mut s = serde_json::to_string(msg).expect("protocol message serializes");
    s.push('\n');
    s
}

pub trait Evaluator {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResponse, SearchError>;
}

impl<E: Evaluator + ?Sized> Evaluator for &mut E {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResponse, SearchError> {
        (**self).evaluate(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub n_match: usize,
    pub l_d: usize,
    pub b_q: usize,
    pub b_k: usize,
    pub max_tokens: usize,
}

impl SearchConfig {
    /// Defaults: `n_match = 2`, `l_d = 3`, 16 generated tokens.
    pub fn new(k_max: usize, b_q: usize, b_k: usize) -> Self {
        Self {
            k_min: 1,
            k_max,
            n_match: 2,
            l_d: 3,
            b_q,
            b_k,
            max_tokens: 16,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.to_string()));
        if self.k_min < 1 || self.k_min > self.k_max {
            return bad("need 1 <= k_min <= k_max");
        }
        if self.n_match < 1 {
            return bad("n_match must be >= 1");
        }
        if self.max_tokens < self.n_match {
            return bad("max_tokens must be >= n_match");
        }
        if self.b_q == 0 || self.b_k == 0 {
            return bad("block sizes must be >= 1");
        }
        Ok(())
    }

    fn request(&self, k: usize) -> EvalRequest {
        EvalRequest {
            k,
            l_d: self.l_d,
            b_q: self.b_q,
            b_k: self.b_k,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub k_star: usize,
    pub success: bool,
    pub probes: Vec<Probe>,
}

/// Smallest `k` in `[k_min, k_max]` whose probe succeeds, assuming success is
/// monotone in `k`. Uses at most `ceil(log2(k_max - k_min + 1))` bisection
/// probes plus one confirming probe of the answer, so a returned `k_star`
/// always has a verified success even for non-monotone evaluators.
pub fn find_min_k<E: Evaluator>(
    config: &SearchConfig,
    mut evaluator: E,
) -> Result<SearchOutcome, SearchError> {
    config.validate()?;
    let mut probes: Vec<Probe> = Vec::new();
    let mut probe = |k: usize, probes: &mut Vec<Probe>| -> Result<bool, SearchError> {
        let req = config.request(k);
        let resp = match evaluator.evaluate(&req) {
            Ok(r) => r,
            Err(SearchError::EvaluatorFailure { message, .. }) => {
                return Err(SearchError::EvaluatorFailure {
                    message,
                    probes: std::mem::take(probes),
                })
            }
            Err(e) => return Err(e),
        };
        if resp.status == EvalStatus::Error {
            return Err(SearchError::EvaluatorFailure {
                message: resp
                    .message
                    .unwrap_or_else(|| "evaluator reported an error".into()),
                probes: std::mem::take(probes),
            });
        }
        if resp.matched > req.max_tokens {
            return Err(SearchError::EvaluatorFailure {
                message: format!(
                    "matched = {} exceeds max_tokens = {}",
                    resp.matched, req.max_tokens
                ),
                probes: std::mem::take(probes),
            });
        }
        let success = resp.matched >= config.n_match;
        probes.push(Probe {
            k,
            matched: resp.matched,
            success,
            ppl: resp.ppl,
        });
        Ok(success)
    };

    let (mut lo, mut hi) = (config.k_min, config.k_max);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if probe(mid, &mut probes)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    if probe(lo, &mut probes)? {
        Ok(SearchOutcome {
            k_star: lo,
            success: true,
            probes,
        })
    } else {
        Err(SearchError::SearchExhausted {
            k_min: config.k_min,
            k_max: config.k_max,
            probes,
        })
    }
}

/// Deterministic stand-in evaluator: output is preserved iff `k >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEvaluator {
    pub threshold: usize,
    pub n_match: usize,
}

impl MockEvaluator {
    pub fn new(threshold: usize, n_match: usize) -> Self {
        Self { threshold, n_match }
    }

    pub fn respond(&self, req: &EvalRequest) -> EvalResponse {
        let matched = if req.k >= self.threshold {
            self.n_match.min(req.max_tokens)
        } else {
            0
        };
        EvalResponse {
            tokens: (0..matched as i64).collect(),
            matched,
            ppl: None,
            status: EvalStatus::Ok,
            message: None,
        }
    }
}

impl Evaluator for MockEvaluator {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResponse, SearchError> {
        Ok(self.respond(req))
    }
}

/// Evaluator client over any line-oriented byte stream pair.
pub struct LineEvaluator<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead, W: Write> LineEvaluator<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer }
    }
}

impl<R: BufRead, W: Write> Evaluator for LineEvaluator<R, W> {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResponse, SearchError> {
        self.writer
            .write_all(to_line(req).as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| SearchError::evaluator(format!("write failed: {e}")))?;
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| SearchError::evaluator(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(SearchError::evaluator("evaluator closed the stream"));
        }
        serde_json::from_str(line.trim_end()).map_err(|e| {
            SearchError::evaluator(format!("malformed response `{}`: {e}", line.trim_end()))
        })
    }
}

/// Evaluator running as a child process, spoken to over its stdin/stdout.
pub struct ProcessEvaluator {
    child: Child,
    inner: LineEvaluator<BufReader<ChildStdout>, ChildStdin>,
}

impl ProcessEvaluator {
    /// Spawns `command` through `sh -c`.
    pub fn spawn(command: &str) -> std::io::Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            child,
            inner: LineEvaluator::new(BufReader::new(stdout), stdin),
        })
    }
}

impl Evaluator for ProcessEvaluator {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResponse, SearchError> {
        self.inner.evaluate(req)
    }
}

impl Drop for ProcessEvaluator {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Server side of the protocol: answers each request line with `handler`.
/// Malformed lines get an error response and the loop continues.
pub fn serve_lines<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    mut handler: impl FnMut(&EvalRequest) -> EvalResponse,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<EvalRequest>(&line) {
            Ok(req) => handler(&req),
            Err(e) => EvalResponse::error(format!("malformed request: {e}")),
        };
        writer.write_all(to_line(&resp).as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}
