//! Chat-completions HTTP backend and the shipped fallback tables.

use std::path::Path;
use std::time::Duration;

use mogo_core::prompt::{ChatBackend, FallbackTables};
use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "MOGO_LLM_ENDPOINT";
pub const ENV_KEY: &str = "MOGO_LLM_KEY";
pub const ENV_MODEL: &str = "MOGO_LLM_MODEL";

const BUILTIN_TABLES: &str = include_str!("../data/gateway_tables.toml");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    #[serde(default)]
    roles: Vec<String>,
    #[serde(default)]
    banned_objects: Vec<String>,
    #[serde(default)]
    phrases: Vec<(String, String)>,
}

pub fn parse_tables(text: &str) -> Result<FallbackTables> {
    let t: TableFile =
        toml::from_str(text).map_err(|e| Error::config(format!("gateway tables: {e}")))?;
    Ok(FallbackTables {
        roles: t.roles,
        phrases: t.phrases,
        banned_objects: t.banned_objects,
    })
}

/// Tables from `path`, or the copy compiled into the binary.
pub fn load_tables(path: Option<&Path>) -> Result<FallbackTables> {
    match path {
        Some(p) => parse_tables(
            &std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?,
        ),
        None => parse_tables(BUILTIN_TABLES),
    }
}

/// OpenAI-style `POST {endpoint}` with a system and a user message at
/// temperature 0.
pub struct HttpBackend {
    pub endpoint: String,
    pub key: Option<String>,
    pub model: String,
    pub verbose: bool,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, key: Option<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            key,
            model: model.into(),
            verbose: false,
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(30))
                .build(),
        }
    }

    /// Backend configured from the environment, if an endpoint is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        let key = std::env::var(ENV_KEY).ok().filter(|s| !s.is_empty());
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "glm-4".into());
        Some(Self::new(endpoint, key, model))
    }

    fn redact(&self, s: &str) -> String {
        match &self.key {
            Some(k) if !k.is_empty() => s.replace(k.as_str(), "[REDACTED]"),
            _ => s.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct Reply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl ChatBackend for HttpBackend {
    fn complete(&self, system: &str, user: &str) -> std::result::Result<String, String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json");
        if let Some(k) = &self.key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        if self.verbose {
            log::info!(
                "POST {} {}",
                self.redact(&self.endpoint),
                self.redact(&body.to_string())
            );
        }
        let resp = req
            .send_json(body)
            .map_err(|e| self.redact(&e.to_string()))?;
        let text = resp.into_string().map_err(|e| e.to_string())?;
        if self.verbose {
            log::info!("response {}", self.redact(&text));
        }
        let reply: Reply =
            serde_json::from_str(&text).map_err(|e| format!("unreadable reply: {e}"))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "reply has no choices".to_string())
    }
}
