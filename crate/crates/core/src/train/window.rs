use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};

/// Posterior adaptation vectors, one (a_μ, a_σ) pair per step and layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWindow {
    /// `[step][layer]`.
    pub a_mu: Vec<Vec<DVector<f64>>>,
    pub a_sigma: Vec<Vec<DVector<f64>>>,
}

impl AdaptiveWindow {
    pub fn zeros(config: &NetworkConfig, steps: usize) -> Self {
        let step = || -> Vec<DVector<f64>> {
            config
                .layers
                .iter()
                .map(|l| DVector::zeros(l.z_units))
                .collect()
        };
        Self {
            a_mu: (0..steps).map(|_| step()).collect(),
            a_sigma: (0..steps).map(|_| step()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.a_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_mu.is_empty()
    }

    /// Checks that every (step, layer) pair is present and sized for `config`.
    pub fn check(&self, config: &NetworkConfig) -> Result<()> {
        if self.a_mu.len() != self.a_sigma.len() {
            return Err(CoreError::Window("a_mu and a_sigma differ in length".into()));
        }
        for (t, (mu, sigma)) in self.a_mu.iter().zip(&self.a_sigma).enumerate() {
            if mu.len() != config.layers.len() || sigma.len() != config.layers.len() {
                return Err(CoreError::Window(format!("step {t} lacks a layer")));
            }
            for (k, spec) in config.layers.iter().enumerate() {
                if mu[k].len() != spec.z_units || sigma[k].len() != spec.z_units {
                    return Err(CoreError::Window(format!(
                        "step {t}, layer {k}: expected {} units",
                        spec.z_units
                    )));
                }
            }
        }
        Ok(())
    }

    /// Drops the oldest step and appends a zeroed one.
    pub fn slide(&mut self) {
        if self.a_mu.is_empty() {
            return;
        }
        let fresh: Vec<DVector<f64>> = self.a_mu[0].iter().map(|v| DVector::zeros(v.len())).collect();
        self.a_mu.remove(0);
        self.a_sigma.remove(0);
        self.a_mu.push(fresh.clone());
        self.a_sigma.push(fresh);
    }

    /// Appends a zeroed step.
    pub fn push_zeros(&mut self, config: &NetworkConfig) {
        let fresh: Vec<DVector<f64>> = config
            .layers
            .iter()
            .map(|l| DVector::zeros(l.z_units))
            .collect();
        self.a_mu.push(fresh.clone());
        self.a_sigma.push(fresh);
    }

    /// Drops the oldest step.
    pub fn pop_front(&mut self) {
        if !self.a_mu.is_empty() {
            self.a_mu.remove(0);
            self.a_sigma.remove(0);
        }
    }

    pub fn reset(&mut self) {
        self.for_each_slice_mut(|s| s.fill(0.0));
    }

    /// Visits a_μ for every step then a_σ for every step.
    pub fn for_each_slice_mut<F: FnMut(&mut [f64])>(&mut self, mut f: F) {
        for v in self.a_mu.iter_mut().chain(self.a_sigma.iter_mut()).flatten() {
            f(v.as_mut_slice());
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.a_mu
            .iter()
            .chain(self.a_sigma.iter())
            .flatten()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        let n = self.flatten().len();
        if values.len() != n {
            return Err(CoreError::Length {
                expected: n,
                actual: values.len(),
            });
        }
        let mut offset = 0;
        self.for_each_slice_mut(|s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slide_shifts_and_zero_fills() {
        let cfg = NetworkConfig::default();
        let mut w = AdaptiveWindow::zeros(&cfg, 3);
        w.check(&cfg).unwrap();
        w.a_mu[1][0][2] = 0.5;
        w.a_sigma[2][1][0] = -0.25;
        w.slide();
        assert_eq!(w.len(), 3);
        assert_eq!(w.a_mu[0][0][2], 0.5);
        assert_eq!(w.a_sigma[1][1][0], -0.25);
        assert!(w.a_mu[2].iter().all(|v| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn flatten_assign_roundtrip() {
        let cfg = NetworkConfig::default();
        let mut w = AdaptiveWindow::zeros(&cfg, 2);
        let values: Vec<f64> = (0..w.flatten().len()).map(|i| i as f64).collect();
        w.assign(&values).unwrap();
        assert_eq!(w.flatten(), values);
        assert_eq!(w.a_sigma[0][0][0], 10.0);
        assert!(w.assign(&values[1..]).is_err());
    }

    #[test]
    fn check_flags_missing_layer() {
        let cfg = NetworkConfig::default();
        let mut w = AdaptiveWindow::zeros(&cfg, 2);
        w.a_mu[1].pop();
        assert!(matches!(w.check(&cfg), Err(CoreError::Window(_))));
    }
}
