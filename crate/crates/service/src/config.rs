//! TOML service configuration and construction of the report pipeline from
//! it. Relative paths resolve against the directory holding the file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use moodbridge_core::domain::Clock;
use moodbridge_core::gateway::{CompletionParams, RemoteChatProvider, ScriptedProvider, SharedChat};
use moodbridge_core::pipeline::{PipelineConfig, ReportPipeline};
use moodbridge_core::prompts::{PromptForge, PromptOptions, Templates};
use moodbridge_core::retrieval::{load_corpus, EmbeddingProvider, HashingEmbedder, RemoteEmbedder};
use moodbridge_core::{Role, SeverityStandard};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("account `{id}`: {reason}")]
    Account { id: String, reason: String },
    #[error("{0}")]
    Component(String),
}

fn default_locale() -> String {
    "en".into()
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub storage_dir: PathBuf,
    #[serde(default = "default_locale")]
    pub locale: String,
    /// Directory of prompt templates overriding the built-in set.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    pub corpus_path: PathBuf,
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub assessment: AssessmentConfig,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub accounts: Vec<AccountConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case", deny_unknown_fields)]
pub enum GatewayConfig {
    Scripted {
        #[serde(default)]
        rules_path: Option<PathBuf>,
        #[serde(default)]
        default_response: Option<String>,
    },
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        timeout_ms: Option<u64>,
        #[serde(default)]
        retries: Option<u32>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    #[default]
    Hashing,
    Remote { endpoint: String, model: String, dim: usize },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssessmentConfig {
    #[serde(default = "yes")]
    pub use_rag: bool,
    #[serde(default = "yes")]
    pub use_cot: bool,
    #[serde(default)]
    pub include_family_content_in_retrieval: bool,
}

impl Default for AssessmentConfig {
    fn default() -> Self {
        Self { use_rag: true, use_cot: true, include_family_content_in_retrieval: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { bind: default_bind() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountConfig {
    pub id: String,
    pub role: Role,
    #[serde(default)]
    pub display_name: Option<String>,
    pub password: String,
    /// Family: the one linked patient. Doctor: the assigned patients.
    #[serde(default)]
    pub patients: Vec<String>,
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ServiceConfig = toml::from_str(text)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.storage_dir);
        resolve(&mut cfg.corpus_path);
        if let Some(p) = cfg.prompts_dir.as_mut() {
            resolve(p);
        }
        if let GatewayConfig::Scripted { rules_path: Some(p), .. } = &mut cfg.gateway {
            resolve(p);
        }
        cfg.validate_accounts()?;
        Ok(cfg)
    }

    fn validate_accounts(&self) -> Result<(), ConfigError> {
        let err = |id: &str, reason: &str| ConfigError::Account { id: id.to_string(), reason: reason.to_string() };
        let mut ids = HashSet::new();
        for a in &self.accounts {
            if !ids.insert(a.id.as_str()) {
                return Err(err(&a.id, "duplicate id"));
            }
        }
        let patients: HashSet<&str> =
            self.accounts.iter().filter(|a| a.role == Role::Patient).map(|a| a.id.as_str()).collect();
        for a in &self.accounts {
            match a.role {
                Role::Patient if !a.patients.is_empty() => return Err(err(&a.id, "patient accounts take no `patients`")),
                Role::Family if a.patients.len() != 1 => return Err(err(&a.id, "family accounts link exactly one patient")),
                _ => {}
            }
            if let Some(p) = a.patients.iter().find(|p| !patients.contains(p.as_str())) {
                return Err(err(&a.id, &format!("unknown patient `{p}`")));
            }
        }
        Ok(())
    }

    pub fn prompt_options(&self) -> PromptOptions {
        PromptOptions { use_rag: self.assessment.use_rag, use_cot: self.assessment.use_cot, locale: self.locale.clone() }
    }

    pub fn chat_params(&self) -> CompletionParams {
        let mut params = CompletionParams::default();
        if let GatewayConfig::Remote { timeout_ms, retries, .. } = &self.gateway {
            params.timeout_ms = timeout_ms.unwrap_or(params.timeout_ms);
            params.retries = retries.unwrap_or(params.retries);
        }
        params
    }

    pub fn build_chat(&self) -> Result<SharedChat, ConfigError> {
        Ok(match &self.gateway {
            GatewayConfig::Scripted { rules_path, default_response } => {
                let mut provider = match rules_path {
                    Some(p) => ScriptedProvider::from_jsonl(p).map_err(|e| ConfigError::Component(e.to_string()))?,
                    None => ScriptedProvider::new(Vec::new()),
                };
                if let Some(text) = default_response {
                    provider = provider.with_default(text.clone());
                }
                Arc::new(provider)
            }
            GatewayConfig::Remote { endpoint, model, api_key_env, .. } => {
                let mut provider = RemoteChatProvider::new(endpoint.clone(), model.clone());
                if let Some(var) = api_key_env {
                    provider = provider.with_api_key_env(var);
                }
                Arc::new(provider)
            }
        })
    }

    pub fn build_embedder(&self) -> Arc<dyn EmbeddingProvider> {
        match &self.embedding {
            EmbeddingConfig::Hashing => Arc::new(HashingEmbedder),
            EmbeddingConfig::Remote { endpoint, model, dim } => {
                Arc::new(RemoteEmbedder::new(endpoint.clone(), model.clone(), *dim))
            }
        }
    }

    pub fn build_forge(&self) -> Result<PromptForge, ConfigError> {
        let templates = match &self.prompts_dir {
            Some(dir) => Templates::from_dir(dir, &self.locale),
            None => Templates::builtin(&self.locale),
        }
        .map_err(|e| ConfigError::Component(e.to_string()))?;
        Ok(PromptForge::new(templates))
    }

    pub fn build_pipeline(&self, clock: Arc<dyn Clock>) -> Result<ReportPipeline, ConfigError> {
        let corpus = load_corpus(&self.corpus_path).map_err(|e| ConfigError::Component(e.to_string()))?;
        let mut params = CompletionParams::report();
        let chat = self.chat_params();
        params.timeout_ms = chat.timeout_ms;
        params.retries = chat.retries;
        Ok(ReportPipeline::new(
            self.build_chat()?,
            self.build_embedder(),
            corpus,
            SeverityStandard::hamd_default(),
            self.build_forge()?,
            clock,
        )
        .with_params(params))
    }

    pub fn pipeline_config(&self, pipeline: &ReportPipeline) -> PipelineConfig {
        PipelineConfig {
            prompt_options: self.prompt_options(),
            include_family_content_in_retrieval: self.assessment.include_family_content_in_retrieval,
            ..pipeline.default_config()
        }
    }
}
