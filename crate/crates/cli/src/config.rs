//! Settings resolved from flags, a TOML file and `TRAJVERIFY_*` environment
//! variables, in that order of precedence.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use trajverify::gateway::BackendConfig;
use trajverify::run::{BackendSpec, MockMode};
use trajverify::verifier::{Method, VerifierConfig};

pub const ENV_PREFIX: &str = "TRAJVERIFY_";

/// One layer of settings. Unset fields fall through to the next layer.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// Verifier method: binary, baseline, pan, sgv, unified-sgv, monolithic.
    #[arg(long)]
    pub method: Option<String>,
    /// Include (true) or drop (false) the reasoning slot.
    #[arg(long)]
    pub cot: Option<bool>,
    /// Majority voting over N samples.
    #[arg(long)]
    pub vote: Option<u32>,
    /// Deterministic simulated backend: prior-sensitive, biased or grounded.
    #[arg(long, num_args = 0..=1, default_missing_value = "prior-sensitive")]
    pub mock: Option<String>,
    #[arg(long)]
    pub catalog_seed: Option<u64>,
    /// OpenAI-compatible base URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Name of the variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Downscale images so neither side exceeds this many pixels.
    #[arg(long)]
    pub max_image_dim: Option<u32>,
    /// The model reasons natively; no reasoning instruction is sent.
    #[arg(long)]
    pub reasoning_model: Option<bool>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

macro_rules! env_field {
    ($layer:ident, $get:ident, $field:ident, $name:literal) => {
        if let Some(v) = $get($name) {
            $layer.$field = Some(v.parse().map_err(|e| anyhow!("{}{}: {e}", ENV_PREFIX, $name))?);
        }
    };
}

impl Layer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_env() -> Result<Self> {
        Self::from_vars(|k| std::env::var(format!("{ENV_PREFIX}{k}")).ok())
    }

    /// `get` receives the variable name without the prefix.
    pub fn from_vars(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut l = Layer::default();
        env_field!(l, get, method, "METHOD");
        env_field!(l, get, cot, "COT");
        env_field!(l, get, vote, "VOTE");
        env_field!(l, get, mock, "MOCK");
        env_field!(l, get, catalog_seed, "CATALOG_SEED");
        env_field!(l, get, endpoint, "ENDPOINT");
        env_field!(l, get, model, "MODEL");
        env_field!(l, get, api_key_env, "API_KEY_ENV");
        env_field!(l, get, timeout_secs, "TIMEOUT_SECS");
        env_field!(l, get, max_in_flight, "MAX_IN_FLIGHT");
        env_field!(l, get, max_image_dim, "MAX_IMAGE_DIM");
        env_field!(l, get, reasoning_model, "REASONING_MODEL");
        env_field!(l, get, parallelism, "PARALLELISM");
        env_field!(l, get, seed, "SEED");
        Ok(l)
    }

    /// `self` wins field by field. The backend kind is chosen as a unit: a
    /// layer naming `mock` or `endpoint` hides both in lower layers.
    pub fn over(self, mut lower: Layer) -> Layer {
        if self.mock.is_some() || self.endpoint.is_some() {
            lower.mock = None;
            lower.endpoint = None;
        }
        Layer {
            method: self.method.or(lower.method),
            cot: self.cot.or(lower.cot),
            vote: self.vote.or(lower.vote),
            mock: self.mock.or(lower.mock),
            catalog_seed: self.catalog_seed.or(lower.catalog_seed),
            endpoint: self.endpoint.or(lower.endpoint),
            model: self.model.or(lower.model),
            api_key_env: self.api_key_env.or(lower.api_key_env),
            timeout_secs: self.timeout_secs.or(lower.timeout_secs),
            max_in_flight: self.max_in_flight.or(lower.max_in_flight),
            max_image_dim: self.max_image_dim.or(lower.max_image_dim),
            reasoning_model: self.reasoning_model.or(lower.reasoning_model),
            parallelism: self.parallelism.or(lower.parallelism),
            seed: self.seed.or(lower.seed),
        }
    }

    /// Flags over the config file over the environment.
    pub fn resolve(flags: Layer, file: Option<&Path>) -> Result<Layer> {
        let file = match file {
            Some(p) => Layer::from_file(p)?,
            None => Layer::default(),
        };
        Ok(flags.over(file.over(Layer::from_env()?)))
    }

    pub fn verifier(&self) -> Result<VerifierConfig> {
        let method: Method = self.method.as_deref().unwrap_or("sgv").parse().map_err(|e: String| anyhow!(e))?;
        let mut v = VerifierConfig::new(method);
        if let Some(cot) = self.cot {
            v = v.with_cot(cot);
        }
        if let Some(n) = self.vote {
            v = v.with_voting(n);
        }
        v.reasoning_model = self.reasoning_model.unwrap_or(false);
        v.validate().map_err(|e| anyhow!("verifier config: {e}"))?;
        Ok(v)
    }

    pub fn backend(&self) -> Result<BackendSpec> {
        if let Some(mode) = &self.mock {
            let mode: MockMode = mode.parse().map_err(|e: String| anyhow!(e))?;
            return Ok(BackendSpec::Mock { mode, catalog_seed: self.catalog_seed.unwrap_or(0) });
        }
        let (Some(endpoint), Some(model)) = (&self.endpoint, &self.model) else {
            bail!("no backend configured: pass --mock, or --endpoint and --model");
        };
        let mut cfg = BackendConfig::new(endpoint.clone(), model.clone());
        if let Some(k) = &self.api_key_env {
            cfg.api_key_env = k.clone();
        }
        if let Some(t) = self.timeout_secs {
            cfg.timeout_secs = t;
        }
        if let Some(n) = self.max_in_flight {
            cfg.max_in_flight = n;
        }
        cfg.max_image_dim = self.max_image_dim;
        cfg.reasoning_model = self.reasoning_model.unwrap_or(false);
        Ok(BackendSpec::Http(cfg))
    }
}
