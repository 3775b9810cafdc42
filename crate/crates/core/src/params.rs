//! Trainable weights and biases of the network.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};

/// One-layer feed-forward head producing the mean and log standard deviation
/// of a diagonal Gaussian from the layer's previous deterministic state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub w_mu: DMatrix<f64>,
    pub b_mu: DVector<f64>,
    pub w_sigma: DMatrix<f64>,
    pub b_sigma: DVector<f64>,
}

impl GaussianHead {
    fn zeros(z: usize, d: usize) -> Self {
        Self {
            w_mu: DMatrix::zeros(z, d),
            b_mu: DVector::zeros(z),
            w_sigma: DMatrix::zeros(z, d),
            b_sigma: DVector::zeros(z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Recurrent map d^k_{t-1} -> h^k_t.
    pub w_rec: DMatrix<f64>,
    /// Bottom-up map d^{k-1}_{t-1} -> h^k_t; absent on the lowest layer.
    pub w_below: Option<DMatrix<f64>>,
    /// Top-down map d^{k+1}_{t-1} -> h^k_t; absent on the highest layer.
    pub w_above: Option<DMatrix<f64>>,
    /// Stochastic injection z^k_t -> h^k_t.
    pub w_zh: DMatrix<f64>,
    pub b_h: DVector<f64>,
    pub prior: GaussianHead,
    pub posterior: GaussianHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    /// Output head reading layer-0 d units; rows are grouped per degree of
    /// freedom, `softmax_bins` rows each.
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

impl NetworkParams {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &NetworkConfig) -> Self {
        let k_max = config.layers.len();
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let d = spec.d_units;
                let z = spec.z_units;
                LayerParams {
                    w_rec: DMatrix::zeros(d, d),
                    w_below: (k > 0).then(|| DMatrix::zeros(d, config.layers[k - 1].d_units)),
                    w_above: (k + 1 < k_max)
                        .then(|| DMatrix::zeros(d, config.layers[k + 1].d_units)),
                    w_zh: DMatrix::zeros(d, z),
                    b_h: DVector::zeros(d),
                    prior: GaussianHead::zeros(z, d),
                    posterior: GaussianHead::zeros(z, d),
                }
            })
            .collect();
        Self {
            layers,
            w_out: DMatrix::zeros(config.output_width(), config.layers[0].d_units),
            b_out: DVector::zeros(config.output_width()),
        }
    }

    /// Weights uniform in ±1/sqrt(fan_in), biases zero.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(config);
        let mut fill = |m: &mut DMatrix<f64>| {
            let bound = 1.0 / (m.ncols() as f64).sqrt();
            for v in m.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        for layer in &mut params.layers {
            fill(&mut layer.w_rec);
            if let Some(w) = layer.w_below.as_mut() {
                fill(w);
            }
            if let Some(w) = layer.w_above.as_mut() {
                fill(w);
            }
            fill(&mut layer.w_zh);
            fill(&mut layer.prior.w_mu);
            fill(&mut layer.prior.w_sigma);
            fill(&mut layer.posterior.w_mu);
            fill(&mut layer.posterior.w_sigma);
        }
        fill(&mut params.w_out);
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_slice_mut(|_, s| s.fill(0.0));
        out
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &NetworkConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let mine = self.named_shapes();
        let theirs = expected.named_shapes();
        if mine != theirs {
            let detail = mine
                .iter()
                .zip(theirs.iter())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} is {:?}, expected {:?} ({:?})", a.0, a.1, b.1, b.0))
                .unwrap_or_else(|| format!("{} tensors, expected {}", mine.len(), theirs.len()));
            return Err(CoreError::Shape(detail));
        }
        Ok(())
    }

    fn named_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.for_each_tensor(|name, rows, cols, _| out.push((name.to_string(), (rows, cols))));
        out
    }

    /// Visits every tensor in a fixed order as (name, rows, cols, column-major data).
    pub fn for_each_tensor<F: FnMut(&str, usize, usize, &[f64])>(&self, mut f: F) {
        for (k, layer) in self.layers.iter().enumerate() {
            let mut mat = |name: &str, m: &DMatrix<f64>| {
                f(&format!("layer{k}.{name}"), m.nrows(), m.ncols(), m.as_slice())
            };
            mat("w_rec", &layer.w_rec);
            if let Some(w) = &layer.w_below {
                mat("w_below", w);
            }
            if let Some(w) = &layer.w_above {
                mat("w_above", w);
            }
            mat("w_zh", &layer.w_zh);
            mat("prior.w_mu", &layer.prior.w_mu);
            mat("prior.w_sigma", &layer.prior.w_sigma);
            mat("posterior.w_mu", &layer.posterior.w_mu);
            mat("posterior.w_sigma", &layer.posterior.w_sigma);
            let mut vec = |name: &str, v: &DVector<f64>| {
                f(&format!("layer{k}.{name}"), v.len(), 1, v.as_slice())
            };
            vec("b_h", &layer.b_h);
            vec("prior.b_mu", &layer.prior.b_mu);
            vec("prior.b_sigma", &layer.prior.b_sigma);
            vec("posterior.b_mu", &layer.posterior.b_mu);
            vec("posterior.b_sigma", &layer.posterior.b_sigma);
        }
        f("w_out", self.w_out.nrows(), self.w_out.ncols(), self.w_out.as_slice());
        f("b_out", self.b_out.len(), 1, self.b_out.as_slice());
    }

    /// Mutable counterpart of [`for_each_tensor`](Self::for_each_tensor), same order.
    pub fn for_each_slice_mut<F: FnMut(&str, &mut [f64])>(&mut self, mut f: F) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let mut g = |name: &str, s: &mut [f64]| f(&format!("layer{k}.{name}"), s);
            g("w_rec", layer.w_rec.as_mut_slice());
            if let Some(w) = layer.w_below.as_mut() {
                g("w_below", w.as_mut_slice());
            }
            if let Some(w) = layer.w_above.as_mut() {
                g("w_above", w.as_mut_slice());
            }
            g("w_zh", layer.w_zh.as_mut_slice());
            g("prior.w_mu", layer.prior.w_mu.as_mut_slice());
            g("prior.w_sigma", layer.prior.w_sigma.as_mut_slice());
            g("posterior.w_mu", layer.posterior.w_mu.as_mut_slice());
            g("posterior.w_sigma", layer.posterior.w_sigma.as_mut_slice());
            g("b_h", layer.b_h.as_mut_slice());
            g("prior.b_mu", layer.prior.b_mu.as_mut_slice());
            g("prior.b_sigma", layer.prior.b_sigma.as_mut_slice());
            g("posterior.b_mu", layer.posterior.b_mu.as_mut_slice());
            g("posterior.b_sigma", layer.posterior.b_sigma.as_mut_slice());
        }
        f("w_out", self.w_out.as_mut_slice());
        f("b_out", self.b_out.as_mut_slice());
    }

    /// All parameters flattened in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.for_each_tensor(|_, _, _, s| out.extend_from_slice(s));
        out
    }

    /// Writes `values` back in tensor order.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(CoreError::Length {
                expected: self.len(),
                actual: values.len(),
            });
        }
        let mut offset = 0;
        self.for_each_slice_mut(|_, s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, r, c, _| n += r * c);
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over the little-endian bytes of every tensor, in tensor order.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.for_each_tensor(|name, rows, cols, data| {
            hasher.update(name.as_bytes());
            hasher.update((rows as u64).to_le_bytes());
            hasher.update((cols as u64).to_le_bytes());
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, _, _, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    /// Euclidean norm over all tensors.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_tensor(|_, _, _, s| acc += s.iter().map(|v| v * v).sum::<f64>());
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_slice_mut(|_, s| s.iter_mut().for_each(|v| *v *= factor));
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &NetworkParams) {
        let flat = other.flatten();
        let mut offset = 0;
        self.for_each_slice_mut(|_, s| {
            let n = s.len();
            for (dst, src) in s.iter_mut().zip(&flat[offset..offset + n]) {
                *dst += src;
            }
            offset += n;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerSpec;

    #[test]
    fn boundary_maps_are_absent() {
        let cfg = NetworkConfig::default();
        let p = NetworkParams::zeros(&cfg);
        assert!(p.layers[0].w_below.is_none());
        assert!(p.layers[0].w_above.is_some());
        assert!(p.layers[1].w_below.is_some());
        assert!(p.layers[1].w_above.is_none());
        assert_eq!(p.w_out.shape(), (20, 40));
        assert_eq!(p.layers[1].w_below.as_ref().unwrap().shape(), (10, 40));
        assert_eq!(p.layers[0].w_above.as_ref().unwrap().shape(), (40, 10));
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_biases() {
        let cfg = NetworkConfig::default();
        let p = NetworkParams::init(&cfg, 3);
        let bound = 1.0 / 40f64.sqrt();
        assert!(p.layers[0].w_rec.iter().all(|v| v.abs() <= bound));
        assert!(p.layers[0].b_h.iter().all(|v| *v == 0.0));
        assert!(p.layers[1].w_rec.iter().any(|v| *v != 0.0));
        assert_eq!(p, NetworkParams::init(&cfg, 3));
        assert_ne!(p, NetworkParams::init(&cfg, 4));
    }

    #[test]
    fn flatten_assign_and_hash() {
        let cfg = NetworkConfig {
            layers: vec![LayerSpec::new(3, 1, 1.0), LayerSpec::new(2, 1, 2.0)],
            dof: 1,
            softmax_bins: 3,
            softmax_sigma: 0.1,
            seed: 0,
        };
        let p = NetworkParams::init(&cfg, 9);
        let flat = p.flatten();
        assert_eq!(flat.len(), p.len());
        let mut q = NetworkParams::zeros(&cfg);
        assert_ne!(p.content_hash(), q.content_hash());
        q.assign(&flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.content_hash(), q.content_hash());
        assert!(q.assign(&flat[1..]).is_err());
        q.check_shapes(&cfg).unwrap();
        assert!(q.check_shapes(&NetworkConfig::default()).is_err());
    }
}
