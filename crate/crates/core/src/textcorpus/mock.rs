//! In-process stand-in for the wiki API, serving fixture pages over HTTP on
//! a loopback port. Answers the same two queries as [`super::wiki::WikiClient`]
//! sends.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

/// Fixture pages: title → plain-text extract in `exsectionformat=wiki` form.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockPages {
    pub pages: BTreeMap<String, String>,
    #[serde(default)]
    pub redirects: BTreeMap<String, String>,
}

impl MockPages {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve(&self, title: &str) -> Option<(&str, &str)> {
        let title = self
            .redirects
            .get(title)
            .map(String::as_str)
            .unwrap_or(title);
        self.pages
            .get_key_value(title)
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// First title (in sorted order) containing every query word,
    /// case-insensitively.
    fn search(&self, query: &str) -> Option<&str> {
        let words: Vec<String> = query
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return None;
        }
        self.pages.keys().map(String::as_str).find(|t| {
            let lower = t.to_lowercase();
            words.iter().all(|w| lower.contains(w.as_str()))
        })
    }

    fn answer(&self, params: &BTreeMap<String, String>) -> (u16, serde_json::Value) {
        if params.get("action").map(String::as_str) != Some("query") {
            return (400, json!({"error": {"code": "badaction"}}));
        }
        if let Some(title) = params.get("titles") {
            let page = match self.resolve(title) {
                Some((t, extract)) => json!({"pageid": 1, "title": t, "extract": extract}),
                None => json!({"title": title, "missing": true}),
            };
            return (
                200,
                json!({"batchcomplete": true, "query": {"pages": [page]}}),
            );
        }
        if let Some(q) = params.get("srsearch") {
            let hits: Vec<_> = self
                .search(q)
                .map(|t| json!({"ns": 0, "title": t}))
                .into_iter()
                .collect();
            return (
                200,
                json!({"batchcomplete": true, "query": {"search": hits}}),
            );
        }
        (400, json!({"error": {"code": "noquery"}}))
    }
}

pub struct MockWikiServer {
    server: Arc<tiny_http::Server>,
    base_url: String,
    requests: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl MockWikiServer {
    pub fn start(pages: MockPages) -> Result<Self> {
        Self::start_with_failures(pages, 0)
    }

    /// Like [`start`](Self::start), but the first `fail_first` requests get
    /// HTTP 503.
    pub fn start_with_failures(pages: MockPages, fail_first: usize) -> Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| Error::Environment(format!("mock wiki bind: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Environment("mock wiki has no IP address".into()))?;
        let server = Arc::new(server);
        let requests = Arc::new(AtomicUsize::new(0));
        let (srv, count) = (Arc::clone(&server), Arc::clone(&requests));
        let handle = std::thread::spawn(move || {
            for req in srv.incoming_requests() {
                let n = count.fetch_add(1, Ordering::SeqCst);
                let (status, body) = if n < fail_first {
                    (503, json!({"error": "unavailable"}))
                } else {
                    pages.answer(&query_params(req.url()))
                };
                let resp = tiny_http::Response::from_string(body.to_string())
                    .with_status_code(status)
                    .with_header(
                        tiny_http::Header::from_bytes("Content-Type", "application/json")
                            .expect("static header"),
                    );
                let _ = req.respond(resp);
            }
        });
        Ok(Self {
            server,
            base_url: format!("http://{addr}/w/api.php"),
            requests,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockWikiServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn query_params(raw_url: &str) -> BTreeMap<String, String> {
    let full = format!("http://mock{raw_url}");
    url::Url::parse(&full)
        .map(|u| u.query_pairs().into_owned().collect())
        .unwrap_or_default()
}
