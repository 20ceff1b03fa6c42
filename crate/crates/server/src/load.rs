//! Loads everything a pipeline needs from the command-line paths.

use std::path::{Path, PathBuf};

use huddle_core::config::{self, ConfigErrors, ServerConfig};
use huddle_core::engine::PipelineConfig;
use huddle_core::llm::MockBackend;

#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub config: Option<PathBuf>,
    pub agents: Option<PathBuf>,
    pub plan: Option<PathBuf>,
}

/// Loads server settings, agents and plan, collecting every error.
pub fn pipeline(sources: &Sources) -> Result<PipelineConfig, Vec<ConfigErrors>> {
    let mut errors = Vec::new();
    let server = match &sources.config {
        Some(path) => config::load_server_file(path).unwrap_or_else(|e| {
            errors.push(e);
            ServerConfig::default()
        }),
        None => ServerConfig::default(),
    };
    let agents = match &sources.agents {
        Some(dir) => config::load_agents_dir(dir).unwrap_or_else(|e| {
            errors.extend(e);
            Vec::new()
        }),
        None => Vec::new(),
    };
    let plan = match &sources.plan {
        Some(path) => match config::load_plan_file(path) {
            Ok(plan) => Some(plan),
            Err(e) => {
                errors.push(e);
                None
            }
        },
        None => None,
    };
    if errors.is_empty() {
        Ok(PipelineConfig {
            server,
            agents,
            plan,
        })
    } else {
        Err(errors)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptLoadError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: huddle_core::llm::ScriptError,
    },
}

pub fn mock_backend(path: &Path) -> Result<MockBackend, ScriptLoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScriptLoadError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    MockBackend::parse(&text).map_err(|source| ScriptLoadError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// One-line summary printed at startup.
pub fn summary(config: &PipelineConfig) -> String {
    let names: Vec<&str> = config
        .agents
        .iter()
        .map(|a| a.persona.agent_name.as_str())
        .collect();
    let plan = match &config.plan {
        Some(plan) => format!("{} stages", plan.stages.len()),
        None => "no plan".to_string(),
    };
    format!(
        "{} agents [{}]; {}; {} rule actors; tick {} ms",
        names.len(),
        names.join(", "),
        plan,
        config.server.actors.len(),
        config.server.tick_interval_ms
    )
}
