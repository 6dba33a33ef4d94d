//! Chat-completion client for the grouping prompts, with offline stand-ins.
//!
//! Every client maps a rendered prompt to the assistant's reply text. The
//! HTTP client speaks the common `chat/completions` JSON protocol; the mock,
//! recording and replay clients make tree construction reproducible without
//! a network.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Environment variable holding the API credential.
pub const CREDENTIAL_ENV: &str = "HIERSPLAT_LLM_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("endpoint answered with HTTP status {0}")]
    HttpError(u16),
    #[error("no credential: set {CREDENTIAL_ENV}")]
    CredentialMissing,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no usable JSON grouping in response: {0}")]
    UnparseableResponse(String),
    #[error("prompt placeholder {{{0}}} has no binding")]
    UnresolvedPlaceholder(String),
    #[error("no canned response for {0}")]
    NoResponse(String),
    #[error("transcript: {0}")]
    Transcript(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Size,
    Function,
    GeometrySummarize,
    Validator,
}

impl TemplateName {
    pub const ALL: [TemplateName; 4] = [
        TemplateName::Size,
        TemplateName::Function,
        TemplateName::GeometrySummarize,
        TemplateName::Validator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Size => "size",
            TemplateName::Function => "function",
            TemplateName::GeometrySummarize => "geometry_summarize",
            TemplateName::Validator => "validator",
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template {s:?}"))
    }
}

const JSON_SHAPE: &str = r#"{
    "<GROUP_1>": ["<ITEM_1>", ...],
    "<GROUP_2>": ["<ITEM_2>", ...],
    ...
}"#;

const SIZE_BODY: &str = "You are a smart assistant tasked with dividing the following items into meaningful groups based on their properties. The key requirements are:
Balance: The number of items in each group should be as evenly distributed as possible. A difference of 1 item between groups is acceptable, but larger differences should be avoided.
Meaningfulness: The groups must be meaningful, based on the items' inherent characteristics. Grouping should make logical sense to a human observer.
Descriptive Group Names: Each group must have a clear and descriptive name that reflects its characteristics.
Goal: Cluster items into size groups, based on their typical physical size in scenes. The groups must strictly be by sizes, for example: small, small medium, medium, large, extra large, etc.
Items: {classes input}

Ensure groups are meaningful and provide descriptive group names. Output must follow this JSON format:
";

const FUNCTION_BODY: &str = "You are a smart assistant tasked with dividing the following items into meaningful groups based on their properties. The key requirements are:
Balance: The number of items in each group should be as evenly distributed as possible. A difference of 1 item between groups is acceptable, but larger differences should be avoided.
Meaningfulness: The groups must be meaningful, based on the items' inherent characteristics. Grouping should make logical sense to a human observer.
Descriptive Group Names: Each group must have a clear and descriptive name that reflects its characteristics.
Goal: Cluster items in the '{size}' size group into functionality-based groups.
The name of the clusters should not be too specific, it could be as general like storage, furniture, etc.
Ensure that items in each group serve similar purposes or have similar functionalities.
Items: {classes input}

Ensure groups are meaningful and provide descriptive group names. Output must follow this JSON format:
";

const GEOMETRY_BODY: &str = "The following groups of indoor scene items have been clustered based on their shape: {formatted_clusters}
Instructions:
Balance: Ensure the groups are as evenly distributed as possible. A difference of 1 item between groups is acceptable. If needed, move a small number of items from one group to another to achieve balance, feel free to even remove a group if it has only one member (just dont leave any groups empty), ensuring that the groups remain meaningful.
Meaningful Naming: After balancing the groups, assign a descriptive and meaningful name to each group, based on the shared shape characteristic. The name should clearly reflect the shape or geometric property of the items in that group. Always prefer singular shapes names like box, rectangle, soft, flat, etc.
No Duplications: make sure to not repeat any class members, the group names are fine but not the groups' members.
The group names must strictly by shapes and DO NOT leave any group empty, you could remove it if its empty.
The output must be the same JSON format as below:
";

const VALIDATOR_BODY: &str = "The following groups of items in a scene have been clustered based on their shape: {formatted_clusters}
Instructions:
Balance: Ensure the groups are as evenly distributed as possible. A difference of 1 item between groups is acceptable. If needed, move a small number of items from one group to another to achieve balance, remove a group if it has only one member, ensuring that the groups remain meaningful.
Meaningful Naming: After balancing the groups, assign a descriptive and meaningful name to each group, based on the shared shape characteristic. The name should clearly reflect the shape or geometric property of the items in that group. Always prefer singular shapes names like box, rectangle, soft, flat, etc.
New Group: If it is necessary to create a new group, feel free to do so, DO NOT create any non-original items.
No Duplications: make sure to not repeat any class members, the group names are fine but not the groups' members.
The output must be the same JSON format as below:
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    body: &'static str,
}

impl PromptTemplate {
    pub fn get(name: TemplateName) -> Self {
        let body = match name {
            TemplateName::Size => SIZE_BODY,
            TemplateName::Function => FUNCTION_BODY,
            TemplateName::GeometrySummarize => GEOMETRY_BODY,
            TemplateName::Validator => VALIDATOR_BODY,
        };
        Self { name, body }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for p in ["classes input", "size", "formatted_clusters"] {
            if self.body.contains(&format!("{{{p}}}")) {
                out.push(p);
            }
        }
        out.sort_by_key(|p| self.body.find(&format!("{{{p}}}")));
        out
    }

    pub fn render(&self, bindings: &Bindings) -> Result<String, LlmError> {
        let mut text = self.body.to_string();
        for p in self.placeholders() {
            let value = bindings
                .0
                .get(p)
                .ok_or_else(|| LlmError::UnresolvedPlaceholder(p.to_string()))?;
            text = text.replace(&format!("{{{p}}}"), value);
        }
        text.push_str(JSON_SHAPE);
        Ok(text)
    }
}

/// Placeholder values for one prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bindings(pub BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    /// `{classes input}` as a JSON array of names.
    pub fn classes(names: &[String]) -> Self {
        Self::new().with("classes input", serde_json::to_string(names).expect("strings serialize"))
    }

    /// `{formatted_clusters}` as a JSON object of named groups.
    pub fn clusters(groups: &[(String, Vec<String>)]) -> Self {
        Self::new().with("formatted_clusters", format_groups(groups))
    }

    /// Stable text form used as a lookup key.
    pub fn canonical(&self) -> String {
        serde_json::to_string(&self.0).expect("strings serialize")
    }
}

/// Compact JSON object preserving group order.
pub fn format_groups(groups: &[(String, Vec<String>)]) -> String {
    let mut map = serde_json::Map::new();
    for (name, members) in groups {
        map.insert(name.clone(), Value::from(members.clone()));
    }
    Value::Object(map).to_string()
}

/// Extracts the first JSON object whose values are all string arrays,
/// searching bare text and fenced code blocks alike. Group order is kept.
pub fn parse_group_json(text: &str) -> Result<Vec<(String, Vec<String>)>, LlmError> {
    for (start, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        let Some(Ok(Value::Object(map))) = stream.next() else {
            continue;
        };
        let mut groups = Vec::with_capacity(map.len());
        let mut ok = true;
        for (name, members) in map {
            match members {
                Value::Array(items) => {
                    let names: Option<Vec<String>> =
                        items.into_iter().map(|v| v.as_str().map(str::to_string)).collect();
                    match names {
                        Some(names) => groups.push((name, names)),
                        None => ok = false,
                    }
                }
                _ => ok = false,
            }
        }
        if ok {
            return Ok(groups);
        }
    }
    let preview: String = text.chars().take(80).collect();
    Err(LlmError::UnparseableResponse(preview))
}

pub trait LlmClient: Send + Sync {
    /// Sends one rendered prompt and returns the assistant text.
    fn send(&self, template: TemplateName, bindings: &Bindings, prompt: &str) -> Result<String, LlmError>;

    fn complete(&self, template: TemplateName, bindings: &Bindings) -> Result<String, LlmError> {
        let prompt = PromptTemplate::get(template).render(bindings)?;
        self.send(template, bindings, &prompt)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for &C {
    fn send(&self, template: TemplateName, bindings: &Bindings, prompt: &str) -> Result<String, LlmError> {
        (**self).send(template, bindings, prompt)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn send(&self, template: TemplateName, bindings: &Bindings, prompt: &str) -> Result<String, LlmError> {
        (**self).send(template, bindings, prompt)
    }
}

/// Canned replies keyed by template and bindings. Several replies under one
/// key are served in order, the last one repeating.
#[derive(Debug, Default)]
pub struct MockClient {
    table: HashMap<(TemplateName, String), Vec<String>>,
    served: Mutex<HashMap<(TemplateName, String), usize>>,
}

impl MockClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn respond(mut self, template: TemplateName, bindings: &Bindings, reply: impl Into<String>) -> Self {
        self.table
            .entry((template, bindings.canonical()))
            .or_default()
            .push(reply.into());
        self
    }
}

impl LlmClient for MockClient {
    fn send(&self, template: TemplateName, bindings: &Bindings, _prompt: &str) -> Result<String, LlmError> {
        let key = (template, bindings.canonical());
        let replies = self
            .table
            .get(&key)
            .ok_or_else(|| LlmError::NoResponse(format!("{template} {}", key.1)))?;
        let mut served = self.served.lock().expect("mock lock");
        let n = served.entry(key).or_insert(0);
        let reply = replies[(*n).min(replies.len() - 1)].clone();
        *n += 1;
        Ok(reply)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl ChatExchange {
    pub fn new(request: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            request: request.into(),
            response: response.into(),
            model: None,
            timestamp: None,
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub exchanges: Vec<ChatExchange>,
}

impl Transcript {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcript serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        std::fs::write(path, self.to_json()).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))
    }
}

/// Wraps a client and keeps every successful exchange.
pub struct RecordingClient<C> {
    inner: C,
    log: Mutex<Transcript>,
}

impl<C: LlmClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            log: Mutex::new(Transcript::default()),
        }
    }

    pub fn transcript(&self) -> Transcript {
        self.log.lock().expect("recording lock").clone()
    }
}

impl<C: LlmClient> LlmClient for RecordingClient<C> {
    fn send(&self, template: TemplateName, bindings: &Bindings, prompt: &str) -> Result<String, LlmError> {
        let response = self.inner.send(template, bindings, prompt)?;
        self.log
            .lock()
            .expect("recording lock")
            .exchanges
            .push(ChatExchange::new(prompt, response.clone()));
        Ok(response)
    }
}

/// Serves recorded responses for byte-identical requests. Repeated requests
/// get their recorded replies in order.
#[derive(Debug)]
pub struct ReplayClient {
    queue: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayClient {
    pub fn new(transcript: &Transcript) -> Self {
        let mut queue: HashMap<String, VecDeque<String>> = HashMap::new();
        for ex in &transcript.exchanges {
            queue.entry(ex.request.clone()).or_default().push_back(ex.response.clone());
        }
        Self { queue: Mutex::new(queue) }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(&Transcript::load(path)?))
    }
}

impl LlmClient for ReplayClient {
    fn send(&self, template: TemplateName, _bindings: &Bindings, prompt: &str) -> Result<String, LlmError> {
        let mut queue = self.queue.lock().expect("replay lock");
        queue
            .get_mut(prompt)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| LlmError::NoResponse(format!("{template} prompt not in transcript")))
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            free: Mutex::new(cap.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Attempts per prompt, counting the first.
    pub retries: usize,
    pub max_in_flight: usize,
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4-turbo".into(),
            temperature: 0.0,
            timeout_secs: 120,
            retries: 3,
            max_in_flight: 4,
            backoff_ms: 500,
        }
    }
}

pub struct HttpClient {
    config: HttpConfig,
    key: String,
    agent: ureq::Agent,
    gate: Gate,
}

impl HttpClient {
    /// Reads the credential from the environment.
    pub fn from_env(config: HttpConfig) -> Result<Self, LlmError> {
        let key = std::env::var(CREDENTIAL_ENV).map_err(|_| LlmError::CredentialMissing)?;
        Self::new(config, key)
    }

    pub fn new(config: HttpConfig, key: String) -> Result<Self, LlmError> {
        if key.trim().is_empty() {
            return Err(LlmError::CredentialMissing);
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        let gate = Gate::new(config.max_in_flight);
        Ok(Self {
            config,
            key,
            agent,
            gate,
        })
    }

    fn attempt(&self, prompt: &str) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });
        let response = self
            .agent
            .post(&self.config.endpoint)
            .set("Authorization", &format!("Bearer {}", self.key))
            .send_json(body);
        let value: Value = match response {
            Ok(r) => r.into_json().map_err(|e| LlmError::Transport(e.to_string()))?,
            Err(ureq::Error::Status(code, _)) => return Err(LlmError::HttpError(code)),
            Err(ureq::Error::Transport(t)) => {
                let text = t.to_string();
                return Err(if text.contains("timed out") || text.contains("Timeout") {
                    LlmError::Timeout
                } else {
                    LlmError::Transport(text)
                });
            }
        };
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Transport("response has no choices[0].message.content".into()))
    }
}

fn retryable(e: &LlmError) -> bool {
    match e {
        LlmError::Timeout | LlmError::Transport(_) => true,
        LlmError::HttpError(code) => *code == 429 || *code >= 500,
        _ => false,
    }
}

impl LlmClient for HttpClient {
    fn send(&self, template: TemplateName, _bindings: &Bindings, prompt: &str) -> Result<String, LlmError> {
        let _slot = self.gate.enter();
        let mut last = LlmError::Transport("no attempt made".into());
        for attempt in 0..self.config.retries.max(1) {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
            match self.attempt(prompt) {
                Ok(text) => {
                    log::debug!("{template}: reply of {} bytes", text.len());
                    return Ok(text);
                }
                Err(e) if retryable(&e) => {
                    log::warn!("{template}: attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }
}
