//! Completion backends.
//!
//! [`OpenAiBackend`] talks to any OpenAI-compatible `/chat/completions`
//! endpoint. [`ReplayBackend`] serves recorded fixtures in order, one queue
//! per request tag, so whole pipeline runs can be reproduced offline.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{BackendError, Error, Result};
use crate::retry::RetryPolicy;
use crate::types::{BackendConfig, TemperaturePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTag {
    Sampling,
    Testbench,
    RefineIntra,
    RefineInter,
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestTag::Sampling => "sampling",
            RequestTag::Testbench => "testbench",
            RequestTag::RefineIntra => "refine_intra",
            RequestTag::RefineInter => "refine_inter",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature_policy: TemperaturePolicy,
    pub tag: RequestTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub reasoning_trace: String,
    pub final_text: String,
    pub raw: String,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    /// False when the provider hides its reasoning text, in which case an
    /// empty reasoning trace is not held against a candidate.
    fn exposes_reasoning(&self) -> bool {
        true
    }

    /// True when responses depend on call order (replay). Callers then
    /// issue requests sequentially.
    fn order_sensitive(&self) -> bool {
        false
    }

    /// Tags of every request issued so far, in issue order.
    fn call_log(&self) -> Vec<RequestTag>;
}

#[derive(Debug, Default)]
struct CallLog(Mutex<Vec<RequestTag>>);

impl CallLog {
    fn push(&self, tag: RequestTag) {
        self.0.lock().unwrap().push(tag);
    }

    fn snapshot(&self) -> Vec<RequestTag> {
        self.0.lock().unwrap().clone()
    }
}

/// Splits a raw model answer into its `<think>` segment and the rest.
///
/// Handles the common variant where the opening tag was swallowed by the
/// chat template and only `</think>` remains.
pub fn split_reasoning(raw: &str) -> (String, String) {
    const OPEN: &str = "<think>";
    const CLOSE: &str = "</think>";
    let Some(close) = raw.find(CLOSE) else {
        return (String::new(), raw.trim().to_string());
    };
    let after = &raw[close + CLOSE.len()..];
    let (before, reasoning) = match raw[..close].find(OPEN) {
        Some(open) => (&raw[..open], &raw[open + OPEN.len()..close]),
        None => ("", &raw[..close]),
    };
    let final_text = format!("{}{}", before.trim(), after)
        .trim()
        .to_string();
    (reasoning.trim().to_string(), final_text)
}

/// Pulls Verilog source out of a model answer.
///
/// Preference order: the last fenced block, then the span from the first
/// line starting with `module` through the last `endmodule`. Text that is
/// already bare code (only comments, directives or blank lines outside the
/// module span) is returned whole, which makes extraction idempotent.
pub fn extract_code_block(final_text: &str) -> Option<String> {
    if let Some(block) = last_fenced_block(final_text) {
        return Some(block);
    }
    module_region(final_text)
}

fn last_fenced_block(text: &str) -> Option<String> {
    let mut last = None;
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let is_fence = line.trim_start().starts_with("```");
        match (&mut current, is_fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(_), true) => last = current.take(),
            (Some(lines), false) => lines.push(line),
            (None, false) => {}
        }
    }
    let body = last?.join("\n");
    let body = body.trim_matches('\n').to_string();
    (!body.trim().is_empty()).then_some(body)
}

fn module_region(text: &str) -> Option<String> {
    let start_re = Regex::new(r"(?m)^[ \t]*module\b").unwrap();
    let end_re = Regex::new(r"\bendmodule\b").unwrap();
    let start = start_re.find(text)?.start();
    let end = end_re.find_iter(&text[start..]).last()?.end() + start;
    let outside_is_code = [&text[..start], &text[end..]].iter().all(|part| {
        part.lines().all(|l| {
            let l = l.trim();
            l.is_empty() || l.starts_with("//") || l.starts_with("/*") || l.starts_with('*') || l.starts_with('`')
        })
    });
    if outside_is_code {
        Some(text.trim().to_string())
    } else {
        Some(text[start..end].trim().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub tag: RequestTag,
    #[serde(default)]
    pub reasoning: String,
    #[serde(rename = "final")]
    pub final_text: String,
}

impl FixtureEntry {
    pub fn new(tag: RequestTag, reasoning: impl Into<String>, final_text: impl Into<String>) -> Self {
        FixtureEntry {
            tag,
            reasoning: reasoning.into(),
            final_text: final_text.into(),
        }
    }
}

/// Serves recorded completions, in order, per request tag.
#[derive(Debug)]
pub struct ReplayBackend {
    queues: Mutex<HashMap<RequestTag, VecDeque<FixtureEntry>>>,
    exposes_reasoning: bool,
    log: CallLog,
}

impl ReplayBackend {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut queues: HashMap<RequestTag, VecDeque<FixtureEntry>> = HashMap::new();
        for e in entries {
            queues.entry(e.tag).or_default().push_back(e);
        }
        ReplayBackend {
            queues: Mutex::new(queues),
            exposes_reasoning: true,
            log: CallLog::default(),
        }
    }

    pub fn with_exposes_reasoning(mut self, exposes: bool) -> Self {
        self.exposes_reasoning = exposes;
        self
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<FixtureEntry> = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self::new(entries))
    }

    pub fn remaining(&self, tag: RequestTag) -> usize {
        self.queues.lock().unwrap().get(&tag).map_or(0, VecDeque::len)
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.log.push(request.tag);
        let entry = self
            .queues
            .lock()
            .unwrap()
            .get_mut(&request.tag)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| BackendError::FixtureExhausted(request.tag.to_string()))?;
        let raw = if entry.reasoning.is_empty() {
            entry.final_text
        } else {
            format!("<think>{}</think>\n{}", entry.reasoning, entry.final_text)
        };
        let (reasoning_trace, final_text) = split_reasoning(&raw);
        Ok(CompletionResponse {
            reasoning_trace,
            final_text,
            raw,
        })
    }

    fn exposes_reasoning(&self) -> bool {
        self.exposes_reasoning
    }

    fn order_sensitive(&self) -> bool {
        true
    }

    fn call_log(&self) -> Vec<RequestTag> {
        self.log.snapshot()
    }
}

/// Caps concurrent requests and spaces their start times.
#[derive(Debug)]
struct Throttle {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max_in_flight: usize,
    min_interval: Duration,
    last_start: Mutex<Option<Instant>>,
}

struct Permit<'a>(&'a Throttle);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

impl Throttle {
    fn new(max_in_flight: usize, min_interval: Duration) -> Self {
        Throttle {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max_in_flight: max_in_flight.max(1),
            min_interval,
            last_start: Mutex::new(None),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        drop(n);
        let mut last = self.last_start.lock().unwrap();
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
        Permit(self)
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
    /// DeepSeek-style native reasoning field.
    #[serde(default)]
    reasoning_content: Option<String>,
    /// OpenRouter-style native reasoning field.
    #[serde(default)]
    reasoning: Option<String>,
}

/// Client for OpenAI-compatible chat-completion endpoints.
pub struct OpenAiBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    exposes_reasoning: bool,
    retry: RetryPolicy,
    throttle: Throttle,
    log: CallLog,
}

impl fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("url", &self.url)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl OpenAiBackend {
    /// The API key is read from `config.api_key_env`; when unset, requests go
    /// out without an `Authorization` header (local servers).
    pub fn new(config: &BackendConfig, retry: RetryPolicy) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.request_timeout_ms))
            .build()
            .map_err(|e| Error::Environment(format!("http client: {e}")))?;
        Ok(OpenAiBackend {
            client,
            url: format!("{}/chat/completions", config.endpoint.trim_end_matches('/')),
            model: config.model.clone(),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            exposes_reasoning: config.exposes_reasoning,
            retry,
            throttle: Throttle::new(config.max_in_flight, Duration::from_millis(config.min_interval_ms)),
            log: CallLog::default(),
        })
    }

    fn request_body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "stream": false,
            "messages": [
                { "role": "system", "content": request.system_prompt },
                { "role": "user", "content": request.user_prompt },
            ],
        });
        if let TemperaturePolicy::Explicit(t) = request.temperature_policy {
            body["temperature"] = json!(t);
        }
        body
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<CompletionResponse, BackendError> {
        let _permit = self.throttle.acquire();
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let raw = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Rejected(format!("HTTP {status}: {raw}")));
        }
        parse_chat_response(&raw)
    }
}

pub(crate) fn parse_chat_response(raw: &str) -> Result<CompletionResponse, BackendError> {
    let parsed: ChatResponse =
        serde_json::from_str(raw).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let message = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?
        .message;
    let content = message.content.unwrap_or_default();
    let native = message
        .reasoning_content
        .or(message.reasoning)
        .map(|r| r.trim().to_string())
        .filter(|r| !r.is_empty());
    let (reasoning_trace, final_text) = match native {
        Some(r) => (r, split_reasoning(&content).1),
        None => split_reasoning(&content),
    };
    Ok(CompletionResponse {
        reasoning_trace,
        final_text,
        raw: raw.to_string(),
    })
}

impl Backend for OpenAiBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.log.push(request.tag);
        let body = self.request_body(request);
        let mut attempt = 1;
        loop {
            match self.send_once(&body) {
                Err(e) if e.is_retryable() && attempt < self.retry.limit => {
                    log::warn!("{} request attempt {attempt} failed: {e}", request.tag);
                    attempt += 1;
                    self.retry.wait_before(attempt);
                }
                other => return other,
            }
        }
    }

    fn exposes_reasoning(&self) -> bool {
        self.exposes_reasoning
    }

    fn call_log(&self) -> Vec<RequestTag> {
        self.log.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(tag: RequestTag) -> CompletionRequest {
        CompletionRequest {
            system_prompt: "sys".into(),
            user_prompt: "user".into(),
            temperature_policy: TemperaturePolicy::ModelDefault,
            tag,
        }
    }

    #[test]
    fn replay_serves_recorded_entry() {
        let b = ReplayBackend::new([FixtureEntry::new(RequestTag::Sampling, "think hard", "answer")]);
        let r = b.complete(&req(RequestTag::Sampling)).unwrap();
        assert_eq!(r.reasoning_trace, "think hard");
        assert_eq!(r.final_text, "answer");
        assert_eq!(b.call_log(), vec![RequestTag::Sampling]);
    }

    #[test]
    fn replay_queues_are_per_tag_and_exhaust() {
        let b = ReplayBackend::new([
            FixtureEntry::new(RequestTag::Sampling, "", "s1"),
            FixtureEntry::new(RequestTag::Testbench, "", "t1"),
            FixtureEntry::new(RequestTag::Sampling, "", "s2"),
        ]);
        assert_eq!(b.complete(&req(RequestTag::Testbench)).unwrap().final_text, "t1");
        assert_eq!(b.complete(&req(RequestTag::Sampling)).unwrap().final_text, "s1");
        assert_eq!(b.complete(&req(RequestTag::Sampling)).unwrap().final_text, "s2");
        let err = b.complete(&req(RequestTag::Sampling)).unwrap_err();
        assert!(matches!(err, BackendError::FixtureExhausted(_)));
        assert!(!err.is_retryable());
    }

    #[test]
    fn fixture_json_uses_final_key() {
        let entries: Vec<FixtureEntry> =
            serde_json::from_str(r#"[{"tag":"refine_inter","reasoning":"r","final":"f"}]"#).unwrap();
        assert_eq!(entries[0], FixtureEntry::new(RequestTag::RefineInter, "r", "f"));
    }

    // Shape of an answer from an open reasoning model served without a
    // native reasoning field.
    const THINK_ANSWER: &str = "<think>\nThe output is high when sel picks b.\nSo y = sel ? b : a.\n</think>\n\nHere is the module:\n```verilog\nmodule TopModule(input a, input b, input sel, output y);\n  assign y = sel ? b : a;\nendmodule\n```\n";

    #[test]
    fn think_tags_split_reasoning_from_answer() {
        let (reasoning, final_text) = split_reasoning(THINK_ANSWER);
        assert_eq!(
            reasoning,
            "The output is high when sel picks b.\nSo y = sel ? b : a."
        );
        assert!(final_text.starts_with("Here is the module:"));
        assert!(final_text.ends_with("```"));
    }

    #[test]
    fn dangling_close_tag_still_splits() {
        let (r, f) = split_reasoning("step one\nstep two</think>final");
        assert_eq!(r, "step one\nstep two");
        assert_eq!(f, "final");
    }

    #[test]
    fn no_delimiters_means_empty_reasoning() {
        let (r, f) = split_reasoning("module m; endmodule");
        assert_eq!(r, "");
        assert_eq!(f, "module m; endmodule");
    }

    #[test]
    fn single_fenced_block() {
        let text = "Sure.\n```verilog\nmodule m; endmodule\n```\nDone.";
        assert_eq!(extract_code_block(text).unwrap(), "module m; endmodule");
    }

    #[test]
    fn bare_module_after_prose() {
        let text = "The design follows.\nmodule m(input a, output y);\n  assign y = a;\nendmodule\nHope this helps.";
        assert_eq!(
            extract_code_block(text).unwrap(),
            "module m(input a, output y);\n  assign y = a;\nendmodule"
        );
    }

    #[test]
    fn last_of_two_fenced_blocks() {
        let text = "Draft:\n```\nmodule draft; endmodule\n```\nFixed version:\n```verilog\nmodule fixed; endmodule\n```\n";
        assert_eq!(extract_code_block(text).unwrap(), "module fixed; endmodule");
    }

    #[test]
    fn no_code_at_all() {
        assert_eq!(extract_code_block("I cannot help with that."), None);
        assert_eq!(extract_code_block("module m(input a);\n assign"), None);
    }

    #[test]
    fn extraction_keeps_leading_comments_of_bare_code() {
        let code = "`timescale 1ns/1ps\n// mux\nmodule m; endmodule // tail";
        assert_eq!(extract_code_block(code).unwrap(), code);
    }

    #[test]
    fn chat_response_with_native_reasoning() {
        let raw = r#"{"choices":[{"message":{"role":"assistant","content":"```\nmodule m; endmodule\n```","reasoning_content":"think"}}]}"#;
        let r = parse_chat_response(raw).unwrap();
        assert_eq!(r.reasoning_trace, "think");
        assert_eq!(r.final_text, "```\nmodule m; endmodule\n```");
        assert_eq!(r.raw, raw);
    }

    #[test]
    fn chat_response_with_inline_think() {
        let raw = r#"{"choices":[{"message":{"content":"<think>abc</think>done"}}]}"#;
        let r = parse_chat_response(raw).unwrap();
        assert_eq!((r.reasoning_trace.as_str(), r.final_text.as_str()), ("abc", "done"));
        assert!(parse_chat_response(r#"{"choices":[]}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn code_line() -> impl Strategy<Value = String> {
            prop_oneof![
                "[a-z_][a-z0-9_]{0,6} = [a-z0-9_ &|^~]{0,12};".prop_map(|s| format!("  assign {s}")),
                "[a-z ]{0,20}".prop_map(|s| format!("  // {s}")),
                Just(String::new()),
            ]
        }

        proptest! {
            #[test]
            fn extraction_is_idempotent(
                name in "[a-z][a-z0-9_]{0,8}",
                body in prop::collection::vec(code_line(), 0..6),
                header in prop::option::of("[a-z ]{1,20}"),
                fenced in any::<bool>(),
            ) {
                let mut code = String::new();
                if let Some(h) = header {
                    code.push_str(&format!("// {h}\n"));
                }
                code.push_str(&format!("module {name}(input a, output y);\n"));
                for l in &body {
                    code.push_str(l);
                    code.push('\n');
                }
                code.push_str("endmodule");
                let text = if fenced {
                    format!("Here you go:\n```verilog\n{code}\n```\nThanks")
                } else {
                    format!("Answer below.\n{code}\nBye.")
                };
                let once = extract_code_block(&text).unwrap();
                let twice = extract_code_block(&once).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
