//! Operator configuration: a flat TOML file, `SIDIFF_*` environment
//! variables and command-line flags, applied in that order over defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::backends::http::{HttpClient, HttpImageModel, OpenAiChat, OpenAiEmbed, RetryPolicy};
use crate::backends::mock::{MockChat, MockSet, MOCK_EMBED_DIM};
use crate::backends::BackendSet;
use crate::engine::WorkflowConfig;
use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 1024;
pub const DEFAULT_CHAT_MODEL: &str = "Qwen/Qwen2.5-VL-72B-Instruct";
pub const DEFAULT_EMBED_MODEL: &str = "text-embedding";

/// Keys accepted in the config file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub tau: Option<f64>,
    pub max_edits: Option<u32>,
    pub retrieval_k: Option<usize>,
    pub activation_threshold: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub negative_weight: Option<f64>,
    pub seed: Option<u64>,
    pub retries: Option<u32>,
    pub human_in_loop: Option<bool>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub gen_model: Option<String>,
    pub edit_model: Option<String>,
    pub episode: Option<String>,

    pub kb: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub mock: Option<bool>,
    pub mock_scores: Option<Vec<f64>>,
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub gen_url: Option<String>,
    pub edit_url: Option<String>,
    pub api_key: Option<String>,
    pub chat_model: Option<String>,
    pub embed_model: Option<String>,
    pub embed_dim: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub templates_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub kb: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mock: bool,
    pub mock_scores: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub max_edits: Option<u32>,
    pub k: Option<usize>,
    pub episode: Option<String>,
    pub concurrency: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub workflow: WorkflowConfig,
    pub kb: PathBuf,
    pub out: PathBuf,
    pub concurrency: usize,
    pub mock: bool,
    pub mock_scores: Vec<f64>,
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub gen_url: Option<String>,
    pub edit_url: Option<String>,
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
    /// Unset means 64 under `mock`, 1024 otherwise.
    pub embed_dim: Option<usize>,
    pub timeout: Duration,
    pub templates_dir: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            workflow: WorkflowConfig::default(),
            kb: PathBuf::from("kb"),
            out: PathBuf::from("."),
            concurrency: 1,
            mock: false,
            mock_scores: Vec::new(),
            chat_url: None,
            embed_url: None,
            gen_url: None,
            edit_url: None,
            api_key: None,
            chat_model: DEFAULT_CHAT_MODEL.into(),
            embed_model: DEFAULT_EMBED_MODEL.into(),
            embed_dim: None,
            timeout: Duration::from_secs(120),
            templates_dir: None,
        }
    }
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl CliConfig {
    /// Builds the effective config from an optional file, an environment
    /// lookup and command-line overrides.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        flags: &Overrides,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_file(FileConfig::load(path)?);
        }
        cfg.apply_env(env);
        cfg.apply_flags(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, f: FileConfig) {
        let w = &mut self.workflow;
        set!(w.tau, f.tau);
        set!(w.max_edits, f.max_edits);
        set!(w.retrieval_k, f.retrieval_k);
        set!(w.activation_threshold, f.activation_threshold);
        set!(w.guidance_scale, f.guidance_scale);
        set!(w.negative_weight, f.negative_weight);
        set!(w.seed, f.seed);
        set!(w.retries, f.retries);
        set!(w.human_in_loop, f.human_in_loop);
        set!(w.width, f.width);
        set!(w.height, f.height);
        set!(w.gen_model, f.gen_model);
        set!(w.edit_model, f.edit_model);
        if f.episode.is_some() {
            w.episode = f.episode;
        }
        set!(self.kb, f.kb);
        set!(self.out, f.out);
        set!(self.concurrency, f.concurrency);
        set!(self.mock, f.mock);
        set!(self.mock_scores, f.mock_scores);
        set!(self.chat_model, f.chat_model);
        set!(self.embed_model, f.embed_model);
        set!(self.timeout, f.timeout_secs.map(Duration::from_secs));
        for (dst, src) in [
            (&mut self.chat_url, f.chat_url),
            (&mut self.embed_url, f.embed_url),
            (&mut self.gen_url, f.gen_url),
            (&mut self.edit_url, f.edit_url),
            (&mut self.api_key, f.api_key),
        ] {
            if src.is_some() {
                *dst = src;
            }
        }
        if f.embed_dim.is_some() {
            self.embed_dim = f.embed_dim;
        }
        if f.templates_dir.is_some() {
            self.templates_dir = f.templates_dir;
        }
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) {
        let get = |k: &str| env(k).filter(|v| !v.is_empty());
        for (key, dst) in [
            ("SIDIFF_CHAT_URL", &mut self.chat_url),
            ("SIDIFF_EMBED_URL", &mut self.embed_url),
            ("SIDIFF_GEN_URL", &mut self.gen_url),
            ("SIDIFF_EDIT_URL", &mut self.edit_url),
            ("SIDIFF_API_KEY", &mut self.api_key),
        ] {
            if let Some(v) = get(key) {
                *dst = Some(v);
            }
        }
        set!(self.kb, get("SIDIFF_KB").map(PathBuf::from));
    }

    pub fn apply_flags(&mut self, o: &Overrides) {
        set!(self.kb, o.kb.clone());
        set!(self.out, o.out.clone());
        self.mock |= o.mock;
        set!(self.mock_scores, o.mock_scores.clone());
        set!(self.workflow.seed, o.seed);
        set!(self.workflow.tau, o.tau);
        set!(self.workflow.max_edits, o.max_edits);
        set!(self.workflow.retrieval_k, o.k);
        if o.episode.is_some() {
            self.workflow.episode = o.episode.clone();
        }
        set!(self.concurrency, o.concurrency);
    }

    pub fn validate(&self) -> Result<()> {
        self.workflow.validate()?;
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if let Some(s) = self.mock_scores.iter().find(|s| !(0.0..=10.0).contains(*s)) {
            return Err(Error::Config(format!("mock score {s} is outside [0, 10]")));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
            .unwrap_or(if self.mock { MOCK_EMBED_DIM } else { DEFAULT_EMBED_DIM })
    }

    /// A fresh backend set. Under `mock` every call returns new mocks, so an
    /// evaluation schedule applies per run.
    pub fn backends(&self) -> Result<BackendSet> {
        if self.mock {
            let chat = MockChat::new().with_eval_schedule(self.mock_scores.iter().copied());
            return Ok(MockSet::new(chat).backends());
        }
        let chat_url = self.chat_url.clone().ok_or_else(|| {
            Error::Config("no chat endpoint: set SIDIFF_CHAT_URL, chat_url, or pass --mock".into())
        })?;
        let embed_url = self.embed_url.clone().unwrap_or_else(|| chat_url.clone());
        let gen_url = self
            .gen_url
            .clone()
            .ok_or_else(|| Error::Config("no image endpoint: set SIDIFF_GEN_URL or gen_url".into()))?;
        let edit_url = self.edit_url.clone().unwrap_or_else(|| gen_url.clone());
        let client = HttpClient::new(self.api_key.clone(), RetryPolicy::default(), self.timeout);
        Ok(BackendSet {
            chat: Arc::new(OpenAiChat::new(client.clone(), &chat_url, &self.chat_model)),
            embed: Arc::new(OpenAiEmbed::new(client.clone(), &embed_url, &self.embed_model)),
            gen: Arc::new(HttpImageModel::generator(client.clone(), &gen_url)),
            edit: Arc::new(HttpImageModel::editor(client, &edit_url)),
        })
    }

    pub fn quarantine_dir(&self) -> PathBuf {
        self.out.join("quarantine")
    }
}
