//! Architecture description of the hierarchical network.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One level of the multiple-timescale hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    /// Deterministic units.
    pub d_units: usize,
    /// Stochastic units.
    pub z_units: usize,
    /// Leaky-integrator time constant, >= 1.
    pub timescale: f64,
    /// Weight of this layer's KL term in the free energy.
    #[serde(default = "default_regulation")]
    pub regulation: f64,
}

fn default_regulation() -> f64 {
    0.1
}

impl LayerSpec {
    pub fn new(d_units: usize, z_units: usize, timescale: f64) -> Self {
        Self {
            d_units,
            z_units,
            timescale,
            regulation: default_regulation(),
        }
    }

    pub fn with_regulation(mut self, w: f64) -> Self {
        self.regulation = w;
        self
    }
}

/// Layers are ordered from the lowest (fastest, index 0) to the highest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    /// Controlled degrees of freedom.
    pub dof: usize,
    /// Softmax units per degree of freedom.
    pub softmax_bins: usize,
    /// Width of the Gaussian kernel used by the softmax encoding.
    #[serde(default = "default_softmax_sigma")]
    pub softmax_sigma: f64,
    pub seed: u64,
}

fn default_softmax_sigma() -> f64 {
    0.1
}

impl Default for NetworkConfig {
    /// Two-layer demo architecture: Low 40d/4z/τ2, High 10d/1z/τ10.
    fn default() -> Self {
        Self {
            layers: vec![LayerSpec::new(40, 4, 2.0), LayerSpec::new(10, 1, 10.0)],
            dof: 2,
            softmax_bins: 10,
            softmax_sigma: default_softmax_sigma(),
            seed: 1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::Config("at least one layer is required".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.d_units == 0 || layer.z_units == 0 {
                return Err(CoreError::Config(format!(
                    "layer {k}: d_units and z_units must be >= 1"
                )));
            }
            if !(layer.timescale >= 1.0) || !layer.timescale.is_finite() {
                return Err(CoreError::Config(format!(
                    "layer {k}: timescale must be >= 1, got {}",
                    layer.timescale
                )));
            }
            if !(layer.regulation >= 0.0) || !layer.regulation.is_finite() {
                return Err(CoreError::Config(format!(
                    "layer {k}: regulation weight must be >= 0, got {}",
                    layer.regulation
                )));
            }
        }
        for pair in self.layers.windows(2) {
            if pair[1].timescale < pair[0].timescale {
                return Err(CoreError::Config(
                    "timescales must be non-decreasing from low to high layers".into(),
                ));
            }
        }
        if self.dof == 0 {
            return Err(CoreError::Config("dof must be >= 1".into()));
        }
        if self.softmax_bins < 2 {
            return Err(CoreError::Config("softmax_bins must be >= 2".into()));
        }
        if !(self.softmax_sigma > 0.0) {
            return Err(CoreError::Config("softmax_sigma must be > 0".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total z units over all layers.
    pub fn total_z(&self) -> usize {
        self.layers.iter().map(|l| l.z_units).sum()
    }

    /// Width of the flattened output (dof × bins).
    pub fn output_width(&self) -> usize {
        self.dof * self.softmax_bins
    }

    pub fn set_regulation(&mut self, w: f64) {
        for layer in &mut self.layers {
            layer.regulation = w;
        }
    }
}
