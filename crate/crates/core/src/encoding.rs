//! Sparse softmax encoding of normalized positions.
//!
//! Each coordinate v in [-1, 1] is spread over `bins` reference points
//! r_j evenly spaced on [-1, 1] as softmax(-(v - r_j)² / σ²). Decoding takes
//! the expectation Σ p_j r_j and maps it back through the inverse of the
//! encoder's own expectation curve, which is strictly increasing; the plain
//! expectation is biased toward bin centres and the workspace interior.

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};
use crate::model::SoftmaxFrame;

const CALIBRATION_POINTS: usize = 4001;

#[derive(Debug, Clone)]
pub struct SoftmaxEncoder {
    refs: Vec<f64>,
    sigma: f64,
    dof: usize,
    /// Expectation of encode(v) on an even grid over [-1, 1].
    curve: Vec<f64>,
}

impl SoftmaxEncoder {
    pub fn new(bins: usize, sigma: f64, dof: usize) -> Result<Self> {
        if bins < 2 || !(sigma > 0.0) || dof == 0 {
            return Err(CoreError::Config(format!(
                "encoder needs bins >= 2, σ > 0 and dof >= 1 (got {bins}, {sigma}, {dof})"
            )));
        }
        let refs: Vec<f64> = (0..bins)
            .map(|j| -1.0 + 2.0 * j as f64 / (bins - 1) as f64)
            .collect();
        let mut enc = Self {
            refs,
            sigma,
            dof,
            curve: Vec::new(),
        };
        enc.curve = (0..CALIBRATION_POINTS)
            .map(|i| enc.expectation(&enc.encode_value(grid_value(i))))
            .collect();
        Ok(enc)
    }

    pub fn from_config(config: &NetworkConfig) -> Result<Self> {
        Self::new(config.softmax_bins, config.softmax_sigma, config.dof)
    }

    pub fn refs(&self) -> &[f64] {
        &self.refs
    }

    pub fn bins(&self) -> usize {
        self.refs.len()
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    /// Distribution over bins for one coordinate.
    pub fn encode_value(&self, v: f64) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        let logits: Vec<f64> = self.refs.iter().map(|r| -(v - r) * (v - r) / s2).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        p
    }

    fn expectation(&self, p: &[f64]) -> f64 {
        p.iter().zip(&self.refs).map(|(p, r)| p * r).sum()
    }

    /// Position for one coordinate's distribution.
    pub fn decode_value(&self, p: &[f64]) -> f64 {
        let e = self.expectation(p);
        let curve = &self.curve;
        if e <= curve[0] {
            return -1.0;
        }
        if e >= curve[curve.len() - 1] {
            return 1.0;
        }
        let hi = curve.partition_point(|c| *c < e);
        let lo = hi - 1;
        let frac = (e - curve[lo]) / (curve[hi] - curve[lo]);
        grid_value(lo) + frac * (grid_value(hi) - grid_value(lo))
    }

    /// Frame for a position with one coordinate per degree of freedom.
    pub fn encode(&self, position: &[f64]) -> Result<SoftmaxFrame> {
        if position.len() != self.dof {
            return Err(CoreError::Shape(format!(
                "position has {} coordinates, expected {}",
                position.len(),
                self.dof
            )));
        }
        let probs = position.iter().flat_map(|v| self.encode_value(*v)).collect();
        SoftmaxFrame::new(self.bins(), probs)
    }

    pub fn decode(&self, frame: &SoftmaxFrame) -> Vec<f64> {
        (0..frame.dof()).map(|i| self.decode_value(frame.get(i))).collect()
    }
}

fn grid_value(i: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (CALIBRATION_POINTS - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> SoftmaxEncoder {
        SoftmaxEncoder::new(10, 0.1, 2).unwrap()
    }

    #[test]
    fn reference_point_peaks_its_bin() {
        let enc = encoder();
        for (j, r) in enc.refs().iter().enumerate() {
            let p = enc.encode_value(*r);
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, j);
            assert!(p[j] > 0.98);
        }
    }

    #[test]
    fn zero_encodes_symmetrically() {
        let enc = encoder();
        let p = enc.encode_value(0.0);
        for j in 0..5 {
            assert!((p[j] - p[9 - j]).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_on_grid() {
        // Independent check: the plain expectation misses the gate, the
        // calibrated decode meets it.
        let enc = encoder();
        let mut worst_plain: f64 = 0.0;
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let v = -1.0 + 2.0 * i as f64 / 99.0;
            let p = enc.encode_value(v);
            let plain: f64 = p.iter().zip(enc.refs()).map(|(p, r)| p * r).sum();
            worst_plain = worst_plain.max((plain - v).abs());
            worst = worst.max((enc.decode_value(&p) - v).abs());
        }
        assert!(worst_plain > 0.01);
        assert!(worst < 1e-4, "worst roundtrip error {worst}");
    }

    #[test]
    fn frame_roundtrip_and_shape_check() {
        let enc = encoder();
        let f = enc.encode(&[0.3, -0.71]).unwrap();
        assert_eq!(f.dof(), 2);
        let back = enc.decode(&f);
        assert!((back[0] - 0.3).abs() < 1e-4 && (back[1] + 0.71).abs() < 1e-4);
        assert!(enc.encode(&[0.1]).is_err());
    }

    #[test]
    fn decode_saturates_outside_range() {
        let enc = encoder();
        let mut p = vec![0.0; 10];
        p[0] = 1.0;
        assert_eq!(enc.decode_value(&p), -1.0);
        p[0] = 0.0;
        p[9] = 1.0;
        assert_eq!(enc.decode_value(&p), 1.0);
    }
}
