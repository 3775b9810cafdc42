use std::sync::Arc;

use vcbot_core::deliberation::Session;
use vcbot_core::io::{load_primitives, PrimitiveSet, RunConfig};
use vcbot_core::observer::ObserverCheckpoint;
use vcbot_core::train::checkpoint::ModelCheckpoint;
use vcbot_core::train::initial_context;
use vcbot_core::{LatentState, NetworkParams};

use crate::error::{Result, ServiceError};
use crate::wire::{ConfigSummary, Polyline};

/// Everything a session needs, loaded once and shared read-only.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub config: RunConfig,
    pub model: ModelCheckpoint,
    pub observer: ObserverCheckpoint,
    pub primitives: PrimitiveSet,
    pub params: Arc<NetworkParams>,
    pub start: Option<LatentState>,
    pub config_hash: String,
    pub model_hash: String,
}

impl Artifacts {
    /// Loads the configured checkpoints and primitives; any missing file is
    /// an error.
    pub fn load(config: RunConfig) -> Result<Self> {
        let model_path = config.resolve(&config.paths.model);
        let observer_path = config.resolve(&config.paths.observer);
        let prim_dir = config.resolve(&config.paths.primitives);
        for (what, path) in [
            ("model checkpoint", &model_path),
            ("observer checkpoint", &observer_path),
            ("primitive directory", &prim_dir),
        ] {
            if !path.exists() {
                return Err(ServiceError::Missing {
                    what,
                    path: path.clone(),
                });
            }
        }
        let model = ModelCheckpoint::load(&model_path)?;
        let observer = ObserverCheckpoint::load(&observer_path)?;
        let primitives = load_primitives(&prim_dir)?;
        Self::new(config, model, observer, primitives)
    }

    pub fn new(config: RunConfig, model: ModelCheckpoint, observer: ObserverCheckpoint, primitives: PrimitiveSet) -> Result<Self> {
        config.validate()?;
        if model.config != config.network {
            return Err(ServiceError::Mismatch(
                "model checkpoint was trained with a different network configuration".into(),
            ));
        }
        if observer.labels.len() != model.windows.len() {
            return Err(ServiceError::Mismatch(format!(
                "observer knows {} categories, model has {} primitives",
                observer.labels.len(),
                model.windows.len()
            )));
        }
        if observer.net.inputs() != 2 * observer.config.buffer {
            return Err(ServiceError::Mismatch("observer input width does not match its buffer".into()));
        }
        let start = match config.session.start_primitive.as_str() {
            "" => None,
            name => {
                let i = observer
                    .labels
                    .iter()
                    .position(|l| l.eq_ignore_ascii_case(name))
                    .ok_or_else(|| ServiceError::Mismatch(format!("start primitive {name} is not a trained category")))?;
                Some(initial_context(&model.windows[i], &model.params, &model.config)?.0)
            }
        };
        Ok(Self {
            config_hash: config.hash()?,
            model_hash: model.params.content_hash(),
            params: Arc::new(model.params.clone()),
            config,
            model,
            observer,
            primitives,
            start,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.observer.labels
    }

    pub fn session(&self) -> Result<Session> {
        Ok(Session::new(
            Arc::clone(&self.params),
            self.model.config.clone(),
            self.config.mixer,
            self.config.deliberation,
            self.start.clone(),
        )?)
    }

    pub fn summary(&self) -> ConfigSummary {
        let c = &self.config;
        ConfigSummary {
            ticks: c.session.ticks,
            tick_ms: c.session.tick_ms,
            gamma: c.mixer.gamma,
            rate_cap: c.mixer.rate_cap,
            window_size: c.deliberation.window_size,
            epochs: c.deliberation.epochs,
            rate: c.deliberation.rate,
            budget_ms: c.deliberation.budget_ms,
            labels: self.labels().to_vec(),
            start_primitive: c.session.start_primitive.clone(),
            config_hash: self.config_hash.clone(),
            model_hash: self.model_hash.clone(),
        }
    }

    pub fn watermark(&self) -> Vec<Polyline> {
        self.primitives
            .primitives
            .iter()
            .map(|p| Polyline {
                label: p.label.clone(),
                points: p.rows.clone(),
            })
            .collect()
    }
}
