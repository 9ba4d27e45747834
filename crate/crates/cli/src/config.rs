//! Engine configuration file and service construction.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fingraph_core::connectors::{ConnectorSet, DataSources, FixtureMode, FixtureStore, LiveProviders, ProviderEndpoint};
use fingraph_core::llm::{ChatCompletionBackend, ChatEndpointConfig, LlmBackend, LlmRole, LlmRouter, LlmScript, RecordingBackend, ScriptedBackend};
use fingraph_core::pipeline::Services;
use fingraph_core::prompts::PromptTemplates;
use fingraph_core::temporal::TemporalParams;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Pre-recorded responses, replayed in order per role.
    Scripted { script: PathBuf },
    ChatCompletion {
        endpoint_url: String,
        model_name: String,
        api_key_env: String,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub default: BackendConfig,
    #[serde(default)]
    pub roles: BTreeMap<LlmRole, BackendConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorsConfig {
    pub news: Option<ProviderEndpoint>,
    pub web: Option<ProviderEndpoint>,
    pub finance: Option<ProviderEndpoint>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixturesConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub mode: FixtureMode,
}

/// The JSON config document. Relative paths are resolved against the
/// directory holding the config file. Secrets are never stored here, only
/// the names of the environment variables that hold them.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub llm: LlmConfig,
    #[serde(default)]
    pub connectors: ConnectorsConfig,
    #[serde(default)]
    pub temporal: TemporalParams,
    pub fixtures: FixturesConfig,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub questions: Option<PathBuf>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: EngineConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.temporal.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |b: &mut BackendConfig| {
            if let BackendConfig::Scripted { script } = b {
                *script = resolve(base, script);
            }
        };
        fix(&mut self.llm.default);
        self.llm.roles.values_mut().for_each(fix);
        self.fixtures.dir = resolve(base, &self.fixtures.dir);
        self.templates_dir = self.templates_dir.as_deref().map(|p| resolve(base, p));
        self.out_dir = resolve(base, &self.out_dir);
        self.questions = self.questions.as_deref().map(|p| resolve(base, p));
    }
}

/// Built services plus the recorders wrapped around LLM backends, when
/// recording.
pub struct Built {
    pub services: Services,
    pub recorders: Vec<Arc<RecordingBackend>>,
    pub store_dir: PathBuf,
}

impl Built {
    /// Every recorded LLM reply. Scripts are consumed per role, so
    /// concatenating recorders keeps each role's order intact.
    pub fn recorded_script(&self) -> LlmScript {
        LlmScript { entries: self.recorders.iter().flat_map(|r| r.script().entries).collect() }
    }
}

fn build_backend(cfg: &BackendConfig) -> Result<Arc<dyn LlmBackend>, CliError> {
    match cfg {
        BackendConfig::Scripted { script } => {
            if !script.exists() {
                return Err(config_err(format!("LLM script {} does not exist", script.display())));
            }
            Ok(Arc::new(ScriptedBackend::from_path(script).map_err(|e| config_err(e.to_string()))?))
        }
        BackendConfig::ChatCompletion { endpoint_url, model_name, api_key_env } => {
            let endpoint = ChatEndpointConfig {
                endpoint_url: endpoint_url.clone(),
                model_name: model_name.clone(),
                api_key_env: api_key_env.clone(),
            };
            Ok(Arc::new(ChatCompletionBackend::new(endpoint).map_err(|e| config_err(e.to_string()))?))
        }
    }
}

fn backend_key(cfg: &BackendConfig) -> String {
    match cfg {
        BackendConfig::Scripted { script } => format!("script:{}", script.display()),
        BackendConfig::ChatCompletion { endpoint_url, model_name, .. } => format!("chat:{endpoint_url}:{model_name}"),
    }
}

pub fn build_services(cfg: &EngineConfig, mode: FixtureMode, record_llm: bool) -> Result<Built, CliError> {
    // roles sharing one backend definition share one instance
    let mut cache: HashMap<String, Arc<dyn LlmBackend>> = HashMap::new();
    let mut recorders = Vec::new();
    let mut backend_for = |b: &BackendConfig| -> Result<Arc<dyn LlmBackend>, CliError> {
        let key = backend_key(b);
        if let Some(existing) = cache.get(&key) {
            return Ok(existing.clone());
        }
        let mut backend = build_backend(b)?;
        if record_llm {
            let rec = Arc::new(RecordingBackend::new(backend));
            recorders.push(rec.clone());
            backend = rec;
        }
        cache.insert(key, backend.clone());
        Ok(backend)
    };
    let mut llm = LlmRouter::uniform(backend_for(&cfg.llm.default)?);
    for (role, b) in &cfg.llm.roles {
        llm = llm.with_role(*role, backend_for(b)?);
    }

    let live = || {
        LiveProviders::new(cfg.connectors.news.clone(), cfg.connectors.web.clone(), cfg.connectors.finance.clone())
            .map_err(|e| config_err(e.to_string()))
    };
    let store = || FixtureStore::open(&cfg.fixtures.dir).map_err(|e| config_err(e.to_string()));
    let sources: Arc<dyn DataSources> = match mode {
        FixtureMode::Replay => {
            if !cfg.fixtures.dir.is_dir() {
                return Err(config_err(format!("fixtures directory {} does not exist", cfg.fixtures.dir.display())));
            }
            Arc::new(ConnectorSet::replay(store()?))
        }
        FixtureMode::Record => Arc::new(ConnectorSet::record(store()?, live()?)),
        FixtureMode::Live => Arc::new(ConnectorSet::live(live()?)),
    };

    let templates = match &cfg.templates_dir {
        Some(dir) if !dir.is_dir() => {
            return Err(config_err(format!("templates directory {} does not exist", dir.display())))
        }
        Some(dir) => PromptTemplates::load_dir(dir).map_err(|e| config_err(e.to_string()))?,
        None => PromptTemplates::default(),
    };

    Ok(Built {
        services: Services { llm, sources, templates, temporal: cfg.temporal },
        recorders,
        store_dir: cfg.fixtures.dir.clone(),
    })
}
