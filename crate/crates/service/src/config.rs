//! TOML configuration for provider, model and storage paths.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::Deserialize;

use qualcode_core::annotation::serialize_annotated;
use qualcode_core::embedding::{Embedder, EmbeddingCache, HttpEmbedding, MockEmbedding};
use qualcode_core::provider::{ChatBackend, FidelityChat, HttpChat, HttpSettings};

use crate::state::ProjectState;
use crate::workspace::{ChatSource, DEFAULT_MIN_ANNOTATIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Offline mock that reproduces human annotations with a probability
    /// rising in the number of examples.
    Mock,
    /// OpenAI-compatible HTTP endpoint.
    Http,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub store: PathBuf,
    pub provider: ProviderKind,
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub cache_path: Option<PathBuf>,
    pub timeout_secs: u64,
    pub min_annotations: usize,
    pub mock_seed: u64,
    /// Example count at which the mock reproduces half of the annotations.
    pub mock_half: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            store: PathBuf::from("qualcode-data"),
            provider: ProviderKind::Mock,
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-large".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            cache_path: None,
            timeout_secs: 120,
            min_annotations: DEFAULT_MIN_ANNOTATIONS,
            mock_seed: 0,
            mock_half: 4.0,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, or returns defaults when `path` is `None` and the
    /// default file is absent.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => {
                let default = Path::new("qualcode.toml");
                if default.is_file() {
                    Self::load(Some(default))
                } else {
                    Ok(Self::default())
                }
            }
        }
    }

    fn settings(&self, model: &str) -> anyhow::Result<HttpSettings> {
        let key = std::env::var(&self.api_key_env).ok();
        if key.is_none() {
            bail!("environment variable {} is not set", self.api_key_env);
        }
        let mut s = HttpSettings::new(&self.base_url, model, key);
        s.timeout_secs = self.timeout_secs;
        Ok(s)
    }

    fn cache(&self) -> anyhow::Result<EmbeddingCache> {
        match &self.cache_path {
            Some(p) => EmbeddingCache::open(p).map_err(Into::into),
            None => Ok(EmbeddingCache::in_memory()),
        }
    }

    pub fn embedder(&self) -> anyhow::Result<Embedder> {
        Ok(match self.provider {
            ProviderKind::Mock => Embedder::new(MockEmbedding, self.cache()?),
            ProviderKind::Http => Embedder::new(HttpEmbedding::new(self.settings(&self.embedding_model)?)?, self.cache()?),
        })
    }

    pub fn chat_source(&self) -> anyhow::Result<ChatSource> {
        Ok(match self.provider {
            ProviderKind::Mock => mock_chat_source(self.mock_seed, self.mock_half),
            ProviderKind::Http => {
                let chat: Arc<dyn ChatBackend> = Arc::new(HttpChat::new(self.settings(&self.chat_model)?)?);
                Arc::new(move |_: &ProjectState| Arc::clone(&chat))
            }
        })
    }
}

/// Mock chat whose reference outputs are the project's human annotations.
pub fn mock_chat_source(seed: u64, half: f64) -> ChatSource {
    Arc::new(move |state: &ProjectState| {
        let reference: HashMap<String, String> = state
            .corpus
            .iter()
            .filter_map(|t| {
                state
                    .human_layer
                    .get(&t.id)
                    .map(|a| (t.body.clone(), serialize_annotated(&t.body, &a.segments)))
            })
            .collect();
        Arc::new(FidelityChat::saturating(reference, seed, half)) as Arc<dyn ChatBackend>
    })
}
