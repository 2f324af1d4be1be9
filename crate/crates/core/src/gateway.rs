//! Chat-completion access behind one provider contract, a scripted provider
//! for offline runs, and extraction of the fixed-format JSON report from
//! free-form model output.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::domain::{
    validate_report, BinaryClass, DiagnosticReport, DomainError, Finding, SeverityDegree, Violation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self { temperature: 0.7, max_tokens: 1024, timeout_ms: 60_000, retries: 2 }
    }
}

impl CompletionParams {
    /// Parameters for report generation: temperature pinned at 0.
    pub fn report() -> Self {
        Self { temperature: 0.0, max_tokens: 2048, ..Self::default() }
    }
}

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider error: {0}")]
    Provider(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Timeout(_) | GatewayError::Transport(_))
    }
}

#[async_trait]
pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;

    /// One attempt, no retries.
    async fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String, GatewayError>;
}

const BACKOFF_BASE_MS: u64 = 50;
const BACKOFF_CAP_MS: u64 = 2_000;

/// Sends `messages` with a per-attempt timeout, retrying retryable failures
/// up to `params.retries` times with exponential backoff.
pub async fn complete_chat(
    provider: &dyn ChatProvider,
    messages: &[ChatMessage],
    params: &CompletionParams,
) -> Result<String, GatewayError> {
    match messages.last() {
        None => return Err(GatewayError::InvalidRequest("no messages".into())),
        Some(m) if m.role != ChatRole::User => {
            return Err(GatewayError::InvalidRequest("last message must come from the user".into()))
        }
        _ => {}
    }
    if let Some(m) = messages.iter().find(|m| m.role != ChatRole::System && m.content.trim().is_empty()) {
        return Err(GatewayError::InvalidRequest(format!("empty {:?} message", m.role)));
    }
    if params.temperature < 0.0 || params.max_tokens == 0 || params.timeout_ms == 0 {
        return Err(GatewayError::InvalidRequest("invalid completion parameters".into()));
    }
    let mut attempt = 0;
    loop {
        let call = provider.complete(messages, params);
        let outcome = match tokio::time::timeout(Duration::from_millis(params.timeout_ms), call).await {
            Ok(r) => r,
            Err(_) => Err(GatewayError::Timeout(params.timeout_ms)),
        };
        match outcome {
            Err(e) if e.is_retryable() && attempt < params.retries => {
                let delay = (BACKOFF_BASE_MS << attempt.min(16)).min(BACKOFF_CAP_MS);
                log::debug!("{}: attempt {} failed ({e}), retrying in {delay} ms", provider.name(), attempt + 1);
                tokio::time::sleep(Duration::from_millis(delay)).await;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// How a scripted rule matches the last user message.
#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Regex(Regex),
}

impl Matcher {
    pub fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Substring(s) => text.contains(s.as_str()),
            Matcher::Regex(r) => r.is_match(text),
        }
    }
}

/// Placeholder in a scripted response replaced by the last user message.
pub const ECHO_SLOT: &str = "{{echo}}";

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    pub matcher: Matcher,
    pub response: String,
}

impl ScriptedRule {
    pub fn substring(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self { matcher: Matcher::Substring(pattern.into()), response: response.into() }
    }

    pub fn regex(pattern: &str, response: impl Into<String>) -> Result<Self, regex::Error> {
        Ok(Self { matcher: Matcher::Regex(Regex::new(pattern)?), response: response.into() })
    }
}

#[derive(Deserialize)]
struct RuleRecord {
    #[serde(rename = "match")]
    pattern: String,
    response: String,
    #[serde(default)]
    regex: bool,
}

/// Deterministic test double: ordered rules over the last user message,
/// first match wins, otherwise the default response. Every request is
/// recorded in a call log.
#[derive(Debug)]
pub struct ScriptedProvider {
    rules: Vec<ScriptedRule>,
    default_response: String,
    log: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedProvider {
    pub const DEFAULT_RESPONSE: &'static str = "I hear you. Could you tell me a little more about that?";

    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        Self { rules, default_response: Self::DEFAULT_RESPONSE.to_string(), log: Mutex::new(Vec::new()) }
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default_response = response.into();
        self
    }

    /// Reads `{"match": str, "response": str, "regex"?: bool}` lines.
    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidRequest(format!("{}: {e}", path.display())))?;
        let mut rules = Vec::new();
        for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: RuleRecord = serde_json::from_str(line)
                .map_err(|e| GatewayError::InvalidRequest(format!("{} line {}: {e}", path.display(), i + 1)))?;
            rules.push(if rec.regex {
                ScriptedRule::regex(&rec.pattern, rec.response)
                    .map_err(|e| GatewayError::InvalidRequest(format!("line {}: {e}", i + 1)))?
            } else {
                ScriptedRule::substring(rec.pattern, rec.response)
            });
        }
        Ok(Self::new(rules))
    }

    /// The response for a given last user message.
    pub fn respond(&self, last_user: &str) -> String {
        let template = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(last_user))
            .map(|r| r.response.as_str())
            .unwrap_or(&self.default_response);
        template.replace(ECHO_SLOT, last_user)
    }

    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.log.lock().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().len()
    }
}

#[async_trait]
impl ChatProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    async fn complete(&self, messages: &[ChatMessage], _params: &CompletionParams) -> Result<String, GatewayError> {
        self.log.lock().push(messages.to_vec());
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        Ok(self.respond(last))
    }
}

/// Client for an HTTP chat endpoint speaking
/// `{"model", "messages", "temperature", "max_tokens"} -> {"content"}`.
#[derive(Debug, Clone)]
pub struct RemoteChatProvider {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    content: String,
}

impl RemoteChatProvider {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self { client: reqwest::Client::new(), endpoint: endpoint.into(), model: model.into(), api_key: None }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    /// Reads the bearer credential from `var` when it is set.
    pub fn with_api_key_env(self, var: &str) -> Self {
        match std::env::var(var) {
            Ok(key) if !key.is_empty() => self.with_api_key(key),
            _ => self,
        }
    }
}

#[async_trait]
impl ChatProvider for RemoteChatProvider {
    fn name(&self) -> &str {
        &self.model
    }

    async fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String, GatewayError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .timeout(Duration::from_millis(params.timeout_ms))
            .json(&ChatRequest {
                model: &self.model,
                messages,
                temperature: params.temperature,
                max_tokens: params.max_tokens,
            });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(params.timeout_ms)
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(GatewayError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(GatewayError::Provider(format!("HTTP {status}: {body}")));
        }
        let body: ChatResponse = resp.json().await.map_err(|e| GatewayError::Provider(e.to_string()))?;
        Ok(body.content)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no JSON object found in model output")]
    NoJsonObject,
}

/// Returns the first syntactically valid top-level JSON object in `text`.
///
/// Scans for balanced braces outside string literals rather than trusting
/// code fences; a candidate that fails to parse is skipped.
pub fn extract_json(text: &str) -> Result<Map<String, Value>, ExtractError> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(close) = matching_brace(bytes, open) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[open..=close]) {
                return Ok(map);
            }
        }
        start = open + 1;
    }
    Err(ExtractError::NoJsonObject)
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportParseError {
    #[error(transparent)]
    NoJson(#[from] ExtractError),
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("report violates {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Inconsistent(Vec<Violation>),
}

impl ReportParseError {
    /// Names of the offending fields.
    pub fn fields(&self) -> Vec<String> {
        match self {
            ReportParseError::NoJson(_) => vec![],
            ReportParseError::MissingField(f) => vec![f.clone()],
            ReportParseError::InvalidField { field, .. } => vec![field.clone()],
            ReportParseError::Inconsistent(v) => v.iter().map(|v| v.field.clone()).collect(),
        }
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, path: &str) -> Result<&'a Value, ReportParseError> {
    match obj.get(name) {
        None | Some(Value::Null) => Err(ReportParseError::MissingField(format!("{path}{name}"))),
        Some(v) => Ok(v),
    }
}

fn string_field(obj: &Map<String, Value>, name: &str, path: &str) -> Result<String, ReportParseError> {
    field(obj, name, path)?.as_str().map(str::to_string).ok_or_else(|| ReportParseError::InvalidField {
        field: format!("{path}{name}"),
        reason: "expected a string".into(),
    })
}

fn enum_field<T: std::str::FromStr<Err = DomainError>>(
    obj: &Map<String, Value>,
    name: &str,
) -> Result<T, ReportParseError> {
    string_field(obj, name, "")?
        .parse()
        .map_err(|e: DomainError| ReportParseError::InvalidField { field: name.to_string(), reason: e.to_string() })
}

/// Maps a model's JSON output onto a validated [`DiagnosticReport`].
/// Unknown fields are ignored; bookkeeping fields (`id`, `dialogue_ids`,
/// `created_at`) are optional.
pub fn parse_report(text: &str) -> Result<DiagnosticReport, ReportParseError> {
    let obj = extract_json(text)?;
    let binary_class: BinaryClass = enum_field(&obj, "binary_class")?;
    let severity: SeverityDegree = enum_field(&obj, "severity_degree")?;
    let subtype_category = string_field(&obj, "subtype_category", "")?;
    let findings_value = field(&obj, "findings", "")?;
    let items = findings_value.as_array().ok_or_else(|| ReportParseError::InvalidField {
        field: "findings".into(),
        reason: "expected an array".into(),
    })?;
    let mut findings = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let path = format!("findings[{i}].");
        let f = item.as_object().ok_or_else(|| ReportParseError::InvalidField {
            field: format!("findings[{i}]"),
            reason: "expected an object".into(),
        })?;
        let agreement = field(f, "agreement", &path)?.as_bool().ok_or_else(|| ReportParseError::InvalidField {
            field: format!("{path}agreement"),
            reason: "expected a boolean".into(),
        })?;
        findings.push(Finding {
            symptom: string_field(f, "symptom", &path)?,
            evidence: string_field(f, "evidence", &path)?,
            criterion: string_field(f, "criterion", &path)?,
            agreement,
        });
    }
    let narrative = match obj.get("narrative") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(ReportParseError::InvalidField { field: "narrative".into(), reason: "expected a string".into() })
        }
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        _ => String::new(),
    };
    let dialogue_ids = match obj.get("dialogue_ids") {
        Some(Value::Array(a)) => a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
        _ => Vec::new(),
    };
    let created_at = obj.get("created_at").and_then(Value::as_i64).unwrap_or(0);
    let report = DiagnosticReport {
        id,
        dialogue_ids,
        binary_class,
        severity,
        findings,
        subtype_category,
        narrative,
        created_at,
    };
    let violations = validate_report(&report);
    if violations.is_empty() {
        Ok(report)
    } else {
        Err(ReportParseError::Inconsistent(violations))
    }
}

/// Corrective message appended after unparseable report output.
pub const CORRECTIVE_PROMPT: &str =
    "Your previous answer could not be parsed. Output only the JSON object for the report, with no other text.";

#[derive(Debug, Clone, Error)]
pub enum ReportRequestError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("unparseable report after corrective round: {error}")]
    Unparseable { error: ReportParseError, raw: String },
}

/// Requests a report at temperature 0. Output that does not parse triggers
/// exactly one corrective round; a second failure carries the raw text.
pub async fn request_report(
    provider: &dyn ChatProvider,
    prompt: &str,
    params: &CompletionParams,
) -> Result<DiagnosticReport, ReportRequestError> {
    let params = CompletionParams { temperature: 0.0, ..params.clone() };
    let mut messages = vec![ChatMessage::user(prompt)];
    let first = complete_chat(provider, &messages, &params).await?;
    match parse_report(&first) {
        Ok(r) => return Ok(r),
        Err(e) => log::debug!("report output rejected ({e}); sending corrective prompt"),
    }
    messages.push(ChatMessage::assistant(if first.trim().is_empty() { "(empty)".to_string() } else { first }));
    messages.push(ChatMessage::user(CORRECTIVE_PROMPT));
    let second = complete_chat(provider, &messages, &params).await?;
    parse_report(&second).map_err(|error| ReportRequestError::Unparseable { error, raw: second })
}

/// Shared handle used across the pipeline and service.
pub type SharedChat = Arc<dyn ChatProvider>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn valid_report_json() -> String {
        r#"{"binary_class":"depressed","severity_degree":"mild","findings":[{"symptom":"insomnia","evidence":"I can't sleep","criterion":"Insomnia nearly every day","agreement":true}],"subtype_category":"major depressive disorder","narrative":"Mild symptoms."}"#.to_string()
    }

    #[tokio::test]
    async fn scripted_first_match_and_default() {
        let p = ScriptedProvider::new(vec![
            ScriptedRule::substring("hello", "hi"),
            ScriptedRule::substring("hell", "second"),
        ]);
        let params = CompletionParams::default();
        let out = complete_chat(&p, &[ChatMessage::user("hello there")], &params).await.unwrap();
        assert_eq!(out, "hi");
        let out = complete_chat(&p, &[ChatMessage::user("goodbye")], &params).await.unwrap();
        assert_eq!(out, ScriptedProvider::DEFAULT_RESPONSE);
        assert_eq!(p.call_count(), 2);

        let echo = ScriptedProvider::new(vec![ScriptedRule::regex(r"^ECHO", "got: {{echo}}").unwrap()]);
        assert_eq!(echo.respond("ECHO me"), "got: ECHO me");
    }

    #[tokio::test]
    async fn request_validation() {
        let p = ScriptedProvider::new(vec![]);
        let params = CompletionParams::default();
        assert!(matches!(complete_chat(&p, &[], &params).await, Err(GatewayError::InvalidRequest(_))));
        let msgs = [ChatMessage::user("a"), ChatMessage::assistant("b")];
        assert!(matches!(complete_chat(&p, &msgs, &params).await, Err(GatewayError::InvalidRequest(_))));
        assert!(matches!(
            complete_chat(&p, &[ChatMessage::user(" ")], &params).await,
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    struct Flaky {
        failures: Mutex<u32>,
        calls: Mutex<u32>,
    }

    #[async_trait]
    impl ChatProvider for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        async fn complete(&self, _: &[ChatMessage], _: &CompletionParams) -> Result<String, GatewayError> {
            *self.calls.lock() += 1;
            let mut left = self.failures.lock();
            if *left > 0 {
                *left -= 1;
                return Err(GatewayError::Transport("connection reset".into()));
            }
            Ok("ok".into())
        }
    }

    #[tokio::test(start_paused = true)]
    async fn retries_with_backoff() {
        let p = Flaky { failures: Mutex::new(2), calls: Mutex::new(0) };
        let params = CompletionParams { retries: 2, ..Default::default() };
        assert_eq!(complete_chat(&p, &[ChatMessage::user("x")], &params).await.unwrap(), "ok");
        assert_eq!(*p.calls.lock(), 3);

        let p = Flaky { failures: Mutex::new(1), calls: Mutex::new(0) };
        let params = CompletionParams { retries: 0, ..Default::default() };
        assert!(matches!(
            complete_chat(&p, &[ChatMessage::user("x")], &params).await,
            Err(GatewayError::Transport(_))
        ));
    }

    struct Slow;

    #[async_trait]
    impl ChatProvider for Slow {
        fn name(&self) -> &str {
            "slow"
        }
        async fn complete(&self, _: &[ChatMessage], _: &CompletionParams) -> Result<String, GatewayError> {
            tokio::time::sleep(Duration::from_secs(10)).await;
            Ok("late".into())
        }
    }

    #[tokio::test(start_paused = true)]
    async fn timeout_is_reported() {
        let params = CompletionParams { timeout_ms: 100, retries: 1, ..Default::default() };
        assert!(matches!(
            complete_chat(&Slow, &[ChatMessage::user("x")], &params).await,
            Err(GatewayError::Timeout(100))
        ));
    }

    #[tokio::test]
    async fn unreachable_remote_is_transport_error() {
        let p = RemoteChatProvider::new("http://127.0.0.1:9/v1/chat", "m");
        let params = CompletionParams { retries: 0, timeout_ms: 2_000, ..Default::default() };
        let err = complete_chat(&p, &[ChatMessage::user("x")], &params).await.unwrap_err();
        assert!(matches!(err, GatewayError::Transport(_) | GatewayError::Timeout(_)), "{err}");
    }

    #[test]
    fn extract_examples() {
        let m = extract_json("```json\n{\"a\":1}\n```").unwrap();
        assert_eq!(m["a"], 1);
        let m = extract_json("Here is the report: {\"binary_class\":\"depressed\"} Thanks.").unwrap();
        assert_eq!(m["binary_class"], "depressed");
        assert_eq!(extract_json("no braces here"), Err(ExtractError::NoJsonObject));
        let m = extract_json("{not json} then {\"k\":\"}{\"}").unwrap();
        assert_eq!(m["k"], "}{");
        let m = extract_json("outer {\"a\":{\"b\":[1,2]}} tail {\"c\":2}").unwrap();
        assert!(m.contains_key("a") && !m.contains_key("c"));
    }

    #[test]
    fn parse_report_examples() {
        let r = parse_report(&valid_report_json()).unwrap();
        assert_eq!(r.severity, SeverityDegree::Mild);
        assert_eq!(r.findings.len(), 1);

        let bad = valid_report_json().replace("\"depressed\"", "\"not_depressed\"");
        match parse_report(&bad).unwrap_err() {
            ReportParseError::Inconsistent(v) => {
                assert!(v.iter().any(|v| v.message == "binary/severity mismatch"))
            }
            e => panic!("{e}"),
        }

        let missing = valid_report_json().replace("\"subtype_category\":\"major depressive disorder\",", "");
        let err = parse_report(&missing).unwrap_err();
        assert_eq!(err, ReportParseError::MissingField("subtype_category".into()));
        assert!(err.to_string().contains("subtype_category"));

        let weird = valid_report_json().replace("\"mild\"", "\"catastrophic\"");
        assert_eq!(parse_report(&weird).unwrap_err().fields(), ["severity_degree"]);

        let no_agree = valid_report_json().replace(",\"agreement\":true", "");
        assert_eq!(parse_report(&no_agree).unwrap_err().fields(), ["findings[0].agreement"]);

        let extra = valid_report_json().replace("{\"binary_class\"", "{\"confidence\":0.9,\"binary_class\"");
        assert!(parse_report(&extra).is_ok());
    }

    #[tokio::test]
    async fn corrective_round_is_bounded() {
        let good = ScriptedProvider::new(vec![
            ScriptedRule::substring(CORRECTIVE_PROMPT, valid_report_json()),
            ScriptedRule::substring("REPORT", "Sorry, here it is: depressed, mild."),
        ]);
        let r = request_report(&good, "REPORT please", &CompletionParams::report()).await.unwrap();
        assert_eq!(r.severity, SeverityDegree::Mild);
        let calls = good.calls();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[1].len(), 3);

        let hopeless = ScriptedProvider::new(vec![]).with_default("still prose");
        match request_report(&hopeless, "REPORT", &CompletionParams::report()).await.unwrap_err() {
            ReportRequestError::Unparseable { raw, .. } => assert_eq!(raw, "still prose"),
            e => panic!("{e}"),
        }
        assert_eq!(hopeless.call_count(), 2);
    }

    #[test]
    fn rules_from_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rules.jsonl");
        std::fs::write(
            &p,
            "{\"match\":\"sleep\",\"response\":\"How long has that been going on?\"}\n{\"match\":\"^x+$\",\"response\":\"xs\",\"regex\":true}\n",
        )
        .unwrap();
        let s = ScriptedProvider::from_jsonl(&p).unwrap();
        assert_eq!(s.respond("I can't sleep"), "How long has that been going on?");
        assert_eq!(s.respond("xxx"), "xs");
        std::fs::write(&p, "{\"match\":1}").unwrap();
        assert!(ScriptedProvider::from_jsonl(&p).is_err());
    }

    fn prose() -> impl Strategy<Value = String> {
        "[^{}]{0,40}"
    }

    proptest! {
        #[test]
        fn extraction_survives_wrappers(
            prefix in prose(),
            suffix in prose(),
            fenced in any::<bool>(),
            key in "[a-z]{1,8}",
            val in "[^\"\\\\]{0,12}",
            n in -1000i64..1000,
        ) {
            let obj = serde_json::json!({ key.clone(): val, "n": n, "nested": {"list": [1, 2]} });
            let body = obj.to_string();
            let body = if fenced { format!("```json\n{body}\n```") } else { body };
            let text = format!("{prefix}{body}{suffix}");
            let got = extract_json(&text).unwrap();
            prop_assert_eq!(Value::Object(got), obj);
        }
    }
}
