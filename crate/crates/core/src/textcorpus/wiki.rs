//! Minimal MediaWiki action-API client: plain-text page extracts and title
//! search, with rate limiting and retry.
//!
//! Extracts are requested with `exsectionformat=wiki`, so section headings
//! come back as `== Title ==` lines and [`split_sections`] can recover the
//! page structure without a second request.

use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::error::{Error, Result};

pub const DEFAULT_WIKI_BASE: &str = "https://en.wikipedia.org/w/api.php";
pub const WIKI_BASE_ENV: &str = "FLOODLENS_WIKI_BASE";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClientConfig {
    pub base_url: String,
    pub requests_per_second: f64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    pub user_agent: String,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_WIKI_BASE.into(),
            requests_per_second: 2.0,
            max_retries: 3,
            initial_backoff_ms: 500,
            timeout_secs: 20,
            user_agent: concat!("floodlens/", env!("CARGO_PKG_VERSION")).into(),
        }
    }
}

impl ClientConfig {
    /// Defaults, with the base URL taken from `FLOODLENS_WIKI_BASE` when set.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(base) = std::env::var(WIKI_BASE_ENV) {
            if !base.trim().is_empty() {
                c.base_url = base.trim().to_string();
            }
        }
        c
    }
}

/// Where page text comes from. The HTTP client is the production source;
/// tests may substitute anything that answers the same two questions.
pub trait PageSource {
    /// Plain-text extract of `title` (redirects followed), or `None` when the
    /// page does not exist.
    fn page_extract(&mut self, title: &str) -> Result<Option<String>>;

    /// Title of the best search hit for `query`.
    fn search_top(&mut self, query: &str) -> Result<Option<String>>;

    /// HTTP requests issued so far.
    fn requests(&self) -> usize;
}

pub struct WikiClient {
    agent: ureq::Agent,
    config: ClientConfig,
    last_request: Option<Instant>,
    requests: usize,
}

impl WikiClient {
    pub fn new(config: ClientConfig) -> Result<Self> {
        if config.requests_per_second <= 0.0 || !config.requests_per_second.is_finite() {
            return Err(Error::Configuration(format!(
                "requests_per_second must be positive, got {}",
                config.requests_per_second
            )));
        }
        url::Url::parse(&config.base_url).map_err(|e| {
            Error::Configuration(format!("wiki base url {:?}: {e}", config.base_url))
        })?;
        let agent_config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .user_agent(config.user_agent.as_str())
            .build();
        Ok(Self {
            agent: ureq::Agent::new_with_config(agent_config),
            config,
            last_request: None,
            requests: 0,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn pace(&mut self) {
        let min_gap = Duration::from_secs_f64(1.0 / self.config.requests_per_second);
        if let Some(last) = self.last_request {
            let elapsed = last.elapsed();
            if elapsed < min_gap {
                thread::sleep(min_gap - elapsed);
            }
        }
        self.last_request = Some(Instant::now());
    }

    /// GET with the shared query parameters; retries transport failures,
    /// 429 and 5xx with exponential backoff.
    fn get_json(&mut self, params: &[(&str, &str)]) -> Result<Value> {
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last_err = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            self.pace();
            self.requests += 1;
            let mut req = self
                .agent
                .get(&self.config.base_url)
                .query("format", "json")
                .query("formatversion", "2");
            for (k, v) in params {
                req = req.query(*k, *v);
            }
            match req.call() {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 429 || status >= 500 {
                        last_err = format!("HTTP {status}");
                        continue;
                    }
                    let body = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| Error::Transient(e.to_string()))?;
                    if status != 200 {
                        return Err(Error::Protocol(format!("HTTP {status}: {body}")));
                    }
                    return serde_json::from_str(&body)
                        .map_err(|e| Error::Protocol(format!("invalid JSON: {e}")));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Transient(format!(
            "{} after {} attempts: {last_err}",
            self.config.base_url,
            self.config.max_retries + 1
        )))
    }
}

impl PageSource for WikiClient {
    fn page_extract(&mut self, title: &str) -> Result<Option<String>> {
        let v = self.get_json(&[
            ("action", "query"),
            ("prop", "extracts"),
            ("explaintext", "1"),
            ("exsectionformat", "wiki"),
            ("redirects", "1"),
            ("titles", title),
        ])?;
        parse_extract_response(&v)
    }

    fn search_top(&mut self, query: &str) -> Result<Option<String>> {
        let v = self.get_json(&[
            ("action", "query"),
            ("list", "search"),
            ("srlimit", "1"),
            ("srsearch", query),
        ])?;
        parse_search_response(&v)
    }

    fn requests(&self) -> usize {
        self.requests
    }
}

/// Accepts both `formatversion=2` (pages as array) and the legacy shape
/// (pages keyed by id).
pub fn parse_extract_response(v: &Value) -> Result<Option<String>> {
    let pages = v
        .get("query")
        .and_then(|q| q.get("pages"))
        .ok_or_else(|| Error::Protocol("missing query.pages".into()))?;
    let page = match pages {
        Value::Array(a) => a.first(),
        Value::Object(o) => o.values().next(),
        _ => None,
    }
    .ok_or_else(|| Error::Protocol("empty query.pages".into()))?;
    if page.get("missing").is_some() || page.get("invalid").is_some() {
        return Ok(None);
    }
    match page.get("extract") {
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::Protocol("extract is not a string".into())),
        None => Ok(None),
    }
}

pub fn parse_search_response(v: &Value) -> Result<Option<String>> {
    let hits = v
        .get("query")
        .and_then(|q| q.get("search"))
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Protocol("missing query.search".into()))?;
    Ok(hits
        .first()
        .and_then(|h| h.get("title"))
        .and_then(Value::as_str)
        .map(str::to_string))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub title: String,
    pub level: usize,
    /// Text before the next heading of any level.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PageSections {
    pub summary: String,
    pub sections: Vec<Section>,
}

fn heading(line: &str) -> Option<(usize, String)> {
    let t = line.trim();
    let level = t.chars().take_while(|c| *c == '=').count();
    if level < 2 || !t.ends_with(&"=".repeat(level)) || t.len() <= 2 * level {
        return None;
    }
    let title = t[level..t.len() - level].trim();
    (!title.is_empty() && !title.contains('=')).then(|| (level, title.to_string()))
}

pub fn split_sections(extract: &str) -> PageSections {
    let mut out = PageSections::default();
    let mut current: Option<Section> = None;
    let mut buf = String::new();
    for line in extract.lines() {
        if let Some((level, title)) = heading(line) {
            match current.take() {
                Some(mut s) => {
                    s.text = std::mem::take(&mut buf);
                    out.sections.push(s);
                }
                None => out.summary = std::mem::take(&mut buf),
            }
            current = Some(Section {
                title,
                level,
                text: String::new(),
            });
        } else {
            buf.push_str(line);
            buf.push('\n');
        }
    }
    match current {
        Some(mut s) => {
            s.text = buf;
            out.sections.push(s);
        }
        None => out.summary = buf,
    }
    out
}

impl PageSections {
    /// Leading text block of the first section titled "Geography…"; falls
    /// back to its subsections when the section itself only holds headings.
    pub fn geography(&self) -> Option<String> {
        let pos = self
            .sections
            .iter()
            .position(|s| s.title.to_lowercase().starts_with("geography"))?;
        let head = &self.sections[pos];
        let own = normalize_text(&head.text);
        if !own.is_empty() {
            return Some(own);
        }
        let nested: Vec<String> = self.sections[pos + 1..]
            .iter()
            .take_while(|s| s.level > head.level)
            .map(|s| normalize_text(&s.text))
            .filter(|t| !t.is_empty())
            .collect();
        (!nested.is_empty()).then(|| nested.join(" "))
    }

    pub fn summary_text(&self) -> Option<String> {
        let s = normalize_text(&self.summary);
        (!s.is_empty()).then_some(s)
    }
}

/// Strips wiki/HTML markup and collapses whitespace. Case is preserved.
pub fn normalize_text(raw: &str) -> String {
    let mut s = strip_delimited(raw, "<ref", "</ref>");
    s = strip_delimited(&s, "{{", "}}");
    s = strip_delimited(&s, "<!--", "-->");
    s = unlink(&s);
    s = strip_tags(&s);
    s = s.replace("'''", "").replace("''", "");
    let mut out = String::with_capacity(s.len());
    for line in s.lines() {
        if heading(line).is_some() {
            continue;
        }
        for word in line.split_whitespace() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
        }
    }
    out
}

/// Removes `open … close` spans, handling nesting of the same delimiters.
fn strip_delimited(s: &str, open: &str, close: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut depth = 0usize;
    let mut rest = s;
    while !rest.is_empty() {
        if rest.starts_with(open) {
            depth += 1;
            rest = &rest[open.len()..];
        } else if depth > 0 && rest.starts_with(close) {
            depth -= 1;
            rest = &rest[close.len()..];
        } else {
            let c = rest.chars().next().unwrap();
            if depth == 0 {
                out.push(c);
            }
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

/// `[[Target|label]]` → `label`, `[[Target]]` → `Target`.
fn unlink(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("[[") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("]]") {
            Some(end) => {
                let inner = &after[..end];
                out.push_str(inner.rsplit('|').next().unwrap_or(inner));
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn strip_tags(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_tag = false;
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '<' if !in_tag
                && chars
                    .peek()
                    .is_some_and(|n| n.is_ascii_alphabetic() || *n == '/') =>
            {
                in_tag = true
            }
            '>' if in_tag => {
                in_tag = false;
                out.push(' ');
            }
            _ if in_tag => {}
            _ => out.push(c),
        }
    }
    out
}
