//! Hierarchy providers: rule-based, precomputed file, or a chat-completion
//! endpoint with retry and heuristic fallback.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hierarchy::{
    assignment_from_value, heuristic_hierarchy, parse_assignment, HierarchyAssignment,
    HierarchyError,
};
use crate::layout::HeaderList;

pub const SYSTEM_PROMPT: &str = "You are an expert in analyzing section headers of documents and creating a hierarchical structure.
The following is a list of 'section header' texts extracted from a document.

For each item, determine its relationship with the parent section (parent-child relationship).

If possible, follow standard document numbering rules, such as treating '3.1' as a child of '3' and '3.1.1' as a child of '3.1'.

Even if there is no numeric pattern, infer hierarchy based on textual context.

If an item is a top-level heading (i.e., the root node is its parent), set `parent` to null.

Output format:

json only.

DO NOT include any other explanations or text.

[

  {\"id\": \"<id from the original header_list>\", \"parent\": \"<id of the parent node or null if root>\"}

]
";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no headers to send")]
    EmptyHeaders,
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("cannot read assignment file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("assignment file has no entry for document {0}")]
    MissingDocument(String),
    #[error("assignment for document {document_id}: {source}")]
    Invalid {
        document_id: String,
        source: HierarchyError,
    },
    #[error("request failed: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Response(String),
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderKind {
    Heuristic,
    File {
        file_path: PathBuf,
    },
    LlmEndpoint {
        endpoint_url: String,
        model_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env_var: Option<String>,
        #[serde(default = "default_timeout")]
        request_timeout_seconds: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(flatten)]
    pub kind: ProviderKind,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Heuristic,
            max_concurrent_requests: default_concurrency(),
        }
    }
}

impl ProviderConfig {
    pub fn heuristic() -> Self {
        Self::default()
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        ProviderConfig {
            kind: ProviderKind::File {
                file_path: path.into(),
            },
            ..Self::default()
        }
    }

    pub fn llm(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::LlmEndpoint {
                endpoint_url: endpoint_url.into(),
                model_name: model_name.into(),
                api_key_env_var: None,
                request_timeout_seconds: default_timeout(),
                max_retries: default_retries(),
            },
            ..Self::default()
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ProviderKind::Heuristic => "heuristic",
            ProviderKind::File { .. } => "file",
            ProviderKind::LlmEndpoint { .. } => "llm",
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.max_concurrent_requests == 0 {
            return Err(ProviderError::Config(
                "max_concurrent_requests must be positive".into(),
            ));
        }
        if let ProviderKind::LlmEndpoint {
            endpoint_url,
            request_timeout_seconds,
            ..
        } = &self.kind
        {
            if endpoint_url.is_empty() {
                return Err(ProviderError::Config("endpoint_url is empty".into()));
            }
            if !(request_timeout_seconds.is_finite() && *request_timeout_seconds > 0.0) {
                return Err(ProviderError::Config(
                    "request_timeout_seconds must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_payload: String,
}

/// Header records in reading order, one per line.
pub fn build_prompt(headers: &HeaderList) -> Result<PromptBundle, ProviderError> {
    if headers.is_empty() {
        return Err(ProviderError::EmptyHeaders);
    }
    let records: Vec<String> = headers
        .iter()
        .map(|h| {
            format!(
                "  {{\"id\": {}, \"text\": {}, \"page_number\": {}, \"top\": {}, \"left\": {}}}",
                Value::from(h.id.as_str()),
                Value::from(h.text.as_str()),
                h.bbox.page_number,
                h.bbox.top,
                h.bbox.left
            )
        })
        .collect();
    Ok(PromptBundle {
        system_prompt: SYSTEM_PROMPT.to_string(),
        user_payload: format!("[\n{}\n]", records.join(",\n")),
    })
}

/// An assignment plus the reason, if any, the heuristic had to stand in.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub assignment: HierarchyAssignment,
    pub fallback: Option<String>,
}

impl Resolution {
    fn direct(assignment: HierarchyAssignment) -> Self {
        Resolution {
            assignment,
            fallback: None,
        }
    }
}

#[derive(Debug)]
enum Backend {
    Heuristic,
    File(HashMap<String, Value>),
    Llm {
        agent: ureq::Agent,
        endpoint_url: String,
        model_name: String,
        api_key: Option<String>,
        max_retries: u32,
    },
}

/// A configured provider. Construction reads the assignment file or
/// prepares the HTTP client; resolution is then per document.
#[derive(Debug)]
pub struct HierarchyProvider {
    config: ProviderConfig,
    backend: Backend,
}

impl HierarchyProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let backend = match &config.kind {
            ProviderKind::Heuristic => Backend::Heuristic,
            ProviderKind::File { file_path } => {
                let err = |message: String| ProviderError::File {
                    path: file_path.clone(),
                    message,
                };
                let bytes = std::fs::read(file_path).map_err(|e| err(e.to_string()))?;
                let mut value: Value =
                    serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
                // Accept the versioned wrapper written by the store as well
                // as a bare `{document_id: [...]}` map.
                if value.get("version").is_some() && value.get("documents").is_some() {
                    value = value["documents"].take();
                }
                let map: HashMap<String, Value> =
                    serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
                Backend::File(map)
            }
            ProviderKind::LlmEndpoint {
                endpoint_url,
                model_name,
                api_key_env_var,
                request_timeout_seconds,
                max_retries,
            } => {
                let api_key = match api_key_env_var {
                    Some(var) => match std::env::var(var) {
                        Ok(key) => Some(key),
                        Err(_) => {
                            warn!("environment variable {var} is not set; sending no API key");
                            None
                        }
                    },
                    None => None,
                };
                Backend::Llm {
                    agent: ureq::AgentBuilder::new()
                        .timeout(Duration::from_secs_f64(*request_timeout_seconds))
                        .build(),
                    endpoint_url: endpoint_url.clone(),
                    model_name: model_name.clone(),
                    api_key,
                    max_retries: *max_retries,
                }
            }
        };
        Ok(HierarchyProvider { config, backend })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn resolve(
        &self,
        document_id: &str,
        headers: &HeaderList,
    ) -> Result<Resolution, ProviderError> {
        match &self.backend {
            Backend::Heuristic => Ok(Resolution::direct(heuristic_hierarchy(headers))),
            Backend::File(map) => {
                let value = map
                    .get(document_id)
                    .ok_or_else(|| ProviderError::MissingDocument(document_id.to_string()))?;
                let invalid = |source| ProviderError::Invalid {
                    document_id: document_id.to_string(),
                    source,
                };
                let assignment = assignment_from_value(value).map_err(invalid)?;
                assignment.validate().map_err(invalid)?;
                assignment.validate_against(headers).map_err(invalid)?;
                Ok(Resolution::direct(assignment))
            }
            Backend::Llm { max_retries, .. } => {
                if headers.is_empty() {
                    return Ok(Resolution::direct(HierarchyAssignment::default()));
                }
                let prompt = build_prompt(headers)?;
                let attempts = 1 + *max_retries;
                let mut last_error = String::new();
                for attempt in 1..=attempts {
                    match self.ask(&prompt, headers) {
                        Ok(assignment) => return Ok(Resolution::direct(assignment)),
                        Err(e) => {
                            warn!("{document_id}: attempt {attempt}/{attempts} failed: {e}");
                            last_error = e.to_string();
                        }
                    }
                }
                warn!("{document_id}: falling back to the heuristic hierarchy");
                Ok(Resolution {
                    assignment: heuristic_hierarchy(headers),
                    fallback: Some(last_error),
                })
            }
        }
    }

    fn ask(
        &self,
        prompt: &PromptBundle,
        headers: &HeaderList,
    ) -> Result<HierarchyAssignment, ProviderError> {
        let Backend::Llm {
            agent,
            endpoint_url,
            model_name,
            api_key,
            ..
        } = &self.backend
        else {
            unreachable!("ask is only called for endpoint providers");
        };
        let body = json!({
            "model": model_name,
            "messages": [
                {"role": "system", "content": prompt.system_prompt},
                {"role": "user", "content": prompt.user_payload},
            ],
            "temperature": 0,
        });
        let mut request = agent.post(endpoint_url);
        if let Some(key) = api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        let response: Value = request
            .send_json(body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| ProviderError::Response(e.to_string()))?;
        let content = response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Response("no choices[0].message.content".into()))?;
        let invalid = |source| ProviderError::Invalid {
            document_id: String::new(),
            source,
        };
        let assignment = parse_assignment(content.as_bytes()).map_err(invalid)?;
        assignment.validate_against(headers).map_err(invalid)?;
        Ok(assignment)
    }

    /// Resolves many documents, with at most `max_concurrent_requests`
    /// endpoint calls in flight. Output order follows input order.
    pub fn resolve_many(
        &self,
        docs: &[(String, HeaderList)],
    ) -> Vec<Result<Resolution, ProviderError>> {
        let run = || {
            docs.par_iter()
                .map(|(id, headers)| self.resolve(id, headers))
                .collect()
        };
        match &self.backend {
            Backend::Llm { .. } => match rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.max_concurrent_requests)
                .build()
            {
                Ok(pool) => pool.install(run),
                Err(_) => docs.iter().map(|(id, h)| self.resolve(id, h)).collect(),
            },
            _ => run(),
        }
    }
}

/// One-shot resolution for a single document.
pub fn resolve_hierarchy(
    config: &ProviderConfig,
    document_id: &str,
    headers: &HeaderList,
) -> Result<Resolution, ProviderError> {
    HierarchyProvider::new(config.clone())?.resolve(document_id, headers)
}
