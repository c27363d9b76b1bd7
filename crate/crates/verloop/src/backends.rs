//! HTTP judge and oracle clients, plus backend selection from config.
//!
//! Both clients speak request-response JSON: the judge receives the question,
//! the think text, the expected answer form, and a rendered extraction
//! prompt, and replies `{"answer": ...}`; the oracle receives the question
//! and ground truth and replies `{"response": ...}` with a fully tagged
//! reasoning response. Endpoint URLs and bearer tokens come from environment
//! variables so credentials stay out of config files. All calls share one
//! in-flight cap; retrying is the caller's job (transport failures are
//! surfaced as retryable, semantic nulls are not).

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::config::{BackendKind, BackendsConfig};
use crate::error::{Error, Result};
use crate::extraction::{CanonicalAnswer, QuestionType};
use crate::pairs::{MockOracle, OracleProvider};
use crate::verifier::{BackendFailure, JudgeBackend, MockJudge};

pub const JUDGE_URL_ENV: &str = "VERLOOP_JUDGE_URL";
pub const JUDGE_TOKEN_ENV: &str = "VERLOOP_JUDGE_TOKEN";
pub const ORACLE_URL_ENV: &str = "VERLOOP_ORACLE_URL";
pub const ORACLE_TOKEN_ENV: &str = "VERLOOP_ORACLE_TOKEN";

/// Counting semaphore bounding concurrent HTTP requests.
#[derive(Debug)]
pub struct InFlightLimit {
    state: Mutex<usize>,
    released: Condvar,
    max: usize,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Arc<Self> {
        Arc::new(Self { state: Mutex::new(0), released: Condvar::new(), max: max.max(1) })
    }

    fn acquire(self: &Arc<Self>) -> InFlightGuard {
        let mut in_flight = self.state.lock().expect("limit lock");
        while *in_flight >= self.max {
            in_flight = self.released.wait(in_flight).expect("limit lock");
        }
        *in_flight += 1;
        InFlightGuard { limit: Arc::clone(self) }
    }
}

struct InFlightGuard {
    limit: Arc<InFlightLimit>,
}

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        *self.limit.state.lock().expect("limit lock") -= 1;
        self.limit.released.notify_one();
    }
}

/// Human-readable answer form sent to the judge alongside the raw type.
fn answer_form(qtype: QuestionType) -> &'static str {
    match qtype {
        QuestionType::MultipleChoice => "a single choice letter",
        QuestionType::Math | QuestionType::DistanceEstimation => "a number",
    }
}

fn transport(context: &str, err: impl std::fmt::Display) -> BackendFailure {
    BackendFailure::Transport(format!("{context}: {err}"))
}

/// Shared plumbing for both HTTP clients.
struct HttpEndpoint {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
    limit: Arc<InFlightLimit>,
}

impl HttpEndpoint {
    fn new(
        url: String,
        token: Option<String>,
        timeout: Duration,
        limit: Arc<InFlightLimit>,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Backend(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client, url, token, limit })
    }

    fn from_env(
        url_env: &str,
        token_env: &str,
        timeout: Duration,
        limit: Arc<InFlightLimit>,
    ) -> Result<Self> {
        let url = std::env::var(url_env)
            .map_err(|_| Error::Config(format!("{url_env} must be set for the http backend")))?;
        Self::new(url, std::env::var(token_env).ok(), timeout, limit)
    }

    /// POST a JSON body and decode a JSON reply. Non-success statuses and
    /// undecodable bodies are transport failures (retryable).
    fn post<T: for<'de> Deserialize<'de>>(
        &self,
        body: &serde_json::Value,
    ) -> std::result::Result<T, BackendFailure> {
        let _slot = self.limit.acquire();
        let mut request = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| transport("request failed", e))?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendFailure::Transport(format!("status {status}")));
        }
        response.json().map_err(|e| transport("undecodable reply", e))
    }
}

#[derive(Deserialize)]
struct JudgeReply {
    answer: Option<String>,
}

/// Chat-completion-style judge client.
pub struct HttpJudge {
    endpoint: HttpEndpoint,
    prompt_template: String,
}

impl HttpJudge {
    pub fn new(
        url: String,
        token: Option<String>,
        prompt_template: String,
        timeout: Duration,
        limit: Arc<InFlightLimit>,
    ) -> Result<Self> {
        Ok(Self { endpoint: HttpEndpoint::new(url, token, timeout, limit)?, prompt_template })
    }

    /// Read the endpoint URL from `VERLOOP_JUDGE_URL` and the optional
    /// bearer token from `VERLOOP_JUDGE_TOKEN`.
    pub fn from_env(
        prompt_template: String,
        timeout: Duration,
        limit: Arc<InFlightLimit>,
    ) -> Result<Self> {
        Ok(Self {
            endpoint: HttpEndpoint::from_env(JUDGE_URL_ENV, JUDGE_TOKEN_ENV, timeout, limit)?,
            prompt_template,
        })
    }

    fn render_prompt(&self, question: &str, think: &str, qtype: QuestionType) -> String {
        self.prompt_template
            .replace("{question}", question)
            .replace("{think}", think)
            .replace("{answer_form}", answer_form(qtype))
    }
}

impl JudgeBackend for HttpJudge {
    fn extract_answer(
        &self,
        question: &str,
        think: &str,
        qtype: QuestionType,
    ) -> std::result::Result<String, BackendFailure> {
        let body = json!({
            "prompt": self.render_prompt(question, think, qtype),
            "question": question,
            "think": think,
            "question_type": qtype,
            "answer_form": answer_form(qtype),
        });
        let reply: JudgeReply = self.endpoint.post(&body)?;
        match reply.answer {
            Some(answer) if !answer.trim().is_empty() => Ok(answer),
            _ => Err(BackendFailure::Extraction),
        }
    }
}

#[derive(Deserialize)]
struct OracleReply {
    response: Option<String>,
}

/// Client for the long-reasoning generation endpoint.
pub struct HttpOracle {
    endpoint: HttpEndpoint,
}

impl HttpOracle {
    pub fn new(
        url: String,
        token: Option<String>,
        timeout: Duration,
        limit: Arc<InFlightLimit>,
    ) -> Result<Self> {
        Ok(Self { endpoint: HttpEndpoint::new(url, token, timeout, limit)? })
    }

    /// Read the endpoint URL from `VERLOOP_ORACLE_URL` and the optional
    /// bearer token from `VERLOOP_ORACLE_TOKEN`.
    pub fn from_env(timeout: Duration, limit: Arc<InFlightLimit>) -> Result<Self> {
        Ok(Self {
            endpoint: HttpEndpoint::from_env(ORACLE_URL_ENV, ORACLE_TOKEN_ENV, timeout, limit)?,
        })
    }
}

impl OracleProvider for HttpOracle {
    fn generate_response(
        &self,
        question: &str,
        ground_truth: &CanonicalAnswer,
        qtype: QuestionType,
    ) -> std::result::Result<String, BackendFailure> {
        let body = json!({
            "question": question,
            "ground_truth": ground_truth,
            "question_type": qtype,
        });
        let reply: OracleReply = self.endpoint.post(&body)?;
        match reply.response {
            Some(text) if !text.trim().is_empty() => Ok(text),
            _ => Err(BackendFailure::Extraction),
        }
    }
}

/// Instantiate the judge and oracle declared in config. HTTP clients share
/// one in-flight cap.
pub fn build_backends(
    config: &BackendsConfig,
) -> Result<(Box<dyn JudgeBackend>, Box<dyn OracleProvider>)> {
    let timeout = Duration::from_millis(config.timeout_ms);
    let limit = InFlightLimit::new(config.max_in_flight);
    let judge: Box<dyn JudgeBackend> = match config.judge {
        BackendKind::Mock => Box::new(MockJudge),
        BackendKind::Http => Box::new(HttpJudge::from_env(
            config.judge_prompt_template.clone(),
            timeout,
            Arc::clone(&limit),
        )?),
    };
    let oracle: Box<dyn OracleProvider> = match config.oracle {
        BackendKind::Mock => Box::new(MockOracle),
        BackendKind::Http => Box::new(HttpOracle::from_env(timeout, limit)?),
    };
    Ok((judge, oracle))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_judge_prompt_template;
    use crate::verifier::judge_extract_answer;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{SocketAddr, TcpListener, TcpStream};
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Minimal threaded HTTP server: the handler sees (request index, body)
    /// and returns (status line suffix, response body).
    fn spawn_server<F>(handler: F) -> SocketAddr
    where
        F: Fn(usize, &str) -> (&'static str, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let addr = listener.local_addr().expect("addr");
        let handler = Arc::new(handler);
        let counter = Arc::new(AtomicUsize::new(0));
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let handler = Arc::clone(&handler);
                let counter = Arc::clone(&counter);
                std::thread::spawn(move || {
                    let index = counter.fetch_add(1, Ordering::SeqCst);
                    handle_connection(stream, &*handler, index);
                });
            }
        });
        addr
    }

    fn handle_connection<F>(mut stream: TcpStream, handler: &F, index: usize)
    where
        F: Fn(usize, &str) -> (&'static str, String),
    {
        let mut reader = BufReader::new(stream.try_clone().expect("clone"));
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() || line.trim_end().is_empty() {
                break;
            }
            if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body).expect("body");
        let (status, reply) = handler(index, &String::from_utf8_lossy(&body));
        let response = format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
            reply.len()
        );
        stream.write_all(response.as_bytes()).expect("write");
        let _ = stream.flush();
    }

    fn judge_for(addr: SocketAddr, timeout_ms: u64, max_in_flight: usize) -> HttpJudge {
        HttpJudge::new(
            format!("http://{addr}/judge"),
            Some("secret-token".into()),
            default_judge_prompt_template(),
            Duration::from_millis(timeout_ms),
            InFlightLimit::new(max_in_flight),
        )
        .unwrap()
    }

    // ------------------------------------------------------------------

    #[test]
    fn judge_round_trips_and_sends_the_rendered_prompt() {
        let addr = spawn_server(|_, body| {
            let request: serde_json::Value = serde_json::from_str(body).unwrap();
            assert_eq!(request["question"], "Which letter?");
            assert_eq!(request["think"], "clearly B");
            assert_eq!(request["question_type"], "multiple_choice");
            assert_eq!(request["answer_form"], "a single choice letter");
            let prompt = request["prompt"].as_str().unwrap();
            assert!(prompt.contains("Question: Which letter?"));
            assert!(prompt.contains("Reasoning: clearly B"));
            assert!(prompt.contains("a single choice letter"));
            ("200 OK", r#"{"answer": "B"}"#.to_owned())
        });
        let judge = judge_for(addr, 2000, 2);
        let got = judge.extract_answer("Which letter?", "clearly B", QuestionType::MultipleChoice);
        assert_eq!(got.unwrap(), "B");
    }

    #[test]
    fn judge_maps_reply_shapes_to_failure_kinds() {
        let addr = spawn_server(|index, _| match index {
            0 => ("200 OK", r#"{"answer": ""}"#.to_owned()),
            1 => ("200 OK", r#"{}"#.to_owned()),
            2 => ("503 Service Unavailable", "{}".to_owned()),
            _ => ("200 OK", "not json at all".to_owned()),
        });
        let judge = judge_for(addr, 2000, 2);
        let call = || judge.extract_answer("q", "t", QuestionType::Math);
        assert_eq!(call().unwrap_err(), BackendFailure::Extraction);
        assert_eq!(call().unwrap_err(), BackendFailure::Extraction);
        assert!(matches!(call().unwrap_err(), BackendFailure::Transport(s) if s.contains("503")));
        assert!(matches!(call().unwrap_err(), BackendFailure::Transport(_)));
    }

    #[test]
    fn transient_server_errors_are_retried_by_the_wrapper() {
        let addr = spawn_server(|index, _| {
            if index < 2 {
                ("500 Internal Server Error", "{}".to_owned())
            } else {
                ("200 OK", r#"{"answer": "7"}"#.to_owned())
            }
        });
        let judge = judge_for(addr, 2000, 2);
        let got = judge_extract_answer("q", "the value is 7", QuestionType::Math, &judge, 2);
        assert_eq!(got, Some(CanonicalAnswer::Number(7.0)));
    }

    #[test]
    fn slow_servers_hit_the_client_timeout() {
        let addr = spawn_server(|_, _| {
            std::thread::sleep(Duration::from_millis(400));
            ("200 OK", r#"{"answer": "B"}"#.to_owned())
        });
        let judge = judge_for(addr, 80, 2);
        let err = judge.extract_answer("q", "t", QuestionType::Math).unwrap_err();
        assert!(matches!(err, BackendFailure::Transport(_)), "{err:?}");
    }

    #[test]
    fn oracle_round_trips_the_tagged_response() {
        let addr = spawn_server(|_, body| {
            let request: serde_json::Value = serde_json::from_str(body).unwrap();
            assert_eq!(request["ground_truth"]["kind"], "choice");
            assert_eq!(request["ground_truth"]["value"], "B");
            (
                "200 OK",
                r#"{"response": "<think> it is B </think> <answer> B </answer>"}"#.to_owned(),
            )
        });
        let oracle = HttpOracle::new(
            format!("http://{addr}/oracle"),
            None,
            Duration::from_millis(2000),
            InFlightLimit::new(2),
        )
        .unwrap();
        let text = oracle
            .generate_response("q", &CanonicalAnswer::Choice('B'), QuestionType::MultipleChoice)
            .unwrap();
        assert!(text.starts_with("<think>"));
        assert!(text.ends_with("</answer>"));
    }

    #[test]
    fn in_flight_cap_bounds_server_side_concurrency() {
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (active_s, peak_s) = (Arc::clone(&active), Arc::clone(&peak));
        let addr = spawn_server(move |_, _| {
            let now = active_s.fetch_add(1, Ordering::SeqCst) + 1;
            peak_s.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(40));
            active_s.fetch_sub(1, Ordering::SeqCst);
            ("200 OK", r#"{"answer": "1"}"#.to_owned())
        });
        let judge = Arc::new(judge_for(addr, 5000, 2));
        let mut workers = Vec::new();
        for _ in 0..8 {
            let judge = Arc::clone(&judge);
            workers.push(std::thread::spawn(move || {
                judge.extract_answer("q", "t", QuestionType::Math).unwrap();
            }));
        }
        for worker in workers {
            worker.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2, "peak {}", peak.load(Ordering::SeqCst));
    }

    #[test]
    fn http_backends_require_endpoint_env_vars() {
        // The URL variables are unset in the test environment; building the
        // http flavor must fail with a config error naming the variable.
        std::env::remove_var(JUDGE_URL_ENV);
        let config = BackendsConfig { judge: BackendKind::Http, ..Default::default() };
        let err = match build_backends(&config) {
            Ok(_) => panic!("expected a config error"),
            Err(e) => e,
        };
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains(JUDGE_URL_ENV), "{err}");
    }

    #[test]
    fn mock_backends_build_without_environment() {
        let (judge, oracle) = build_backends(&BackendsConfig::default()).unwrap();
        assert!(judge.extract_answer("q", "the answer is B", QuestionType::MultipleChoice).is_ok());
        assert!(oracle
            .generate_response("q", &CanonicalAnswer::Choice('B'), QuestionType::MultipleChoice)
            .is_ok());
    }
}
