//! Intent observer: a feed-forward classifier over short position buffers,
//! the congruence probability between human and robot intentions, and PCA
//! of high-layer latent states.

pub mod congruence;
pub mod net;
pub mod pca;

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::deliberation::Position;
use crate::encoding::SoftmaxEncoder;
use crate::error::{CoreError, Result};
use crate::params::NetworkParams;
use crate::train::checkpoint::{config_digest, seal, unseal, ByteReader, ByteWriter, CheckpointKind};
use crate::train::{regenerate, AdaptiveWindow};

pub use congruence::{
    congruence_flags, congruence_probability, congruence_series, event_means, segment_events,
    write_congruence_csv, CongruenceRow, CongruenceTracker, TickIntents, CONGRUENCE_HEADER,
};
pub use net::{argmax, one_hot, train_observer, IntentLabel, ObserverNet, ObserverTrainSettings};
pub use pca::Pca;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    pub hidden: Vec<usize>,
    /// Positions per classified buffer.
    pub buffer: usize,
    pub rollout_steps: usize,
    /// Leading rollout steps dropped before windowing.
    pub discard: usize,
    /// Positional noise on the held-out evaluation windows.
    pub test_noise: f64,
    /// Positional noise on augmented training copies.
    pub train_noise: f64,
    /// Noisy copies added to the clean training windows.
    pub noise_copies: usize,
    /// Trailing samples in the congruence probability.
    pub congruence_window: usize,
    /// Inactive ticks that close an intervention event.
    pub event_gap: usize,
    pub train: ObserverTrainSettings,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            hidden: vec![150, 100],
            buffer: 5,
            rollout_steps: 200,
            discard: 20,
            test_noise: 0.02,
            train_noise: 0.02,
            noise_copies: 2,
            congruence_window: 10,
            event_gap: 10,
            train: ObserverTrainSettings::default(),
        }
    }
}

impl ObserverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer == 0 || self.hidden.contains(&0) {
            return Err(CoreError::Config("observer sizes must be >= 1".into()));
        }
        if self.rollout_steps < self.discard + self.buffer {
            return Err(CoreError::Config(format!(
                "{} rollout steps leave no windows after discarding {}",
                self.rollout_steps, self.discard
            )));
        }
        if !(self.test_noise >= 0.0) || !(self.train_noise >= 0.0) {
            return Err(CoreError::Config("observer noise must be >= 0".into()));
        }
        if self.congruence_window == 0 {
            return Err(CoreError::Config("congruence_window must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer sizes for `classes` categories over 2-DOF buffers.
    pub fn sizes(&self, classes: usize) -> Vec<usize> {
        let mut s = vec![2 * self.buffer];
        s.extend(&self.hidden);
        s.push(classes);
        s
    }
}

/// Decoded closed-loop regeneration of every trained sequence.
pub fn prior_rollouts(
    params: &NetworkParams,
    windows: &[AdaptiveWindow],
    config: &NetworkConfig,
    steps: usize,
) -> Result<Vec<Vec<Position>>> {
    let enc = SoftmaxEncoder::from_config(config)?;
    windows
        .iter()
        .map(|w| {
            let r = regenerate(w, steps, params, config)?;
            Ok(r.outputs
                .iter()
                .map(|o| {
                    let d = enc.decode(o);
                    [d[0], d[1]]
                })
                .collect())
        })
        .collect()
}

/// Sliding `buffer`-step windows of each rollout after `discard` steps,
/// labelled by rollout index. Gaussian noise of `noise` is added to every
/// position when positive.
pub fn window_samples(
    rollouts: &[Vec<Position>],
    buffer: usize,
    discard: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| CoreError::Config(e.to_string()))?;
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (label, roll) in rollouts.iter().enumerate() {
        let kept = roll.get(discard..).unwrap_or(&[]);
        let noisy: Vec<Position> = kept
            .iter()
            .map(|p| {
                if noise > 0.0 {
                    [p[0] + normal.sample(rng), p[1] + normal.sample(rng)]
                } else {
                    *p
                }
            })
            .collect();
        for w in noisy.windows(buffer) {
            rows.extend(w.iter().flatten());
            labels.push(label);
        }
    }
    Ok((DMatrix::from_row_slice(labels.len(), 2 * buffer, &rows), labels))
}

/// Clean windows plus `copies` noisy replicas.
pub fn training_samples(
    rollouts: &[Vec<Position>],
    cfg: &ObserverConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let (mut x, mut labels) = window_samples(rollouts, cfg.buffer, cfg.discard, 0.0, rng)?;
    for _ in 0..cfg.noise_copies {
        let (xn, ln) = window_samples(rollouts, cfg.buffer, cfg.discard, cfg.train_noise, rng)?;
        let n = x.nrows();
        x = x.resize_vertically(n + xn.nrows(), 0.0);
        x.rows_mut(n, xn.nrows()).copy_from(&xn);
        labels.extend(ln);
    }
    Ok((x, labels))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Self {
        let mut counts = vec![vec![0; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            counts[t][p] += 1;
        }
        Self { counts }
    }

    /// Rows normalized per true class; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.normalized().iter().enumerate().map(|(i, r)| r[i]).collect()
    }

    pub fn write_csv<W: Write>(&self, labels: &[String], out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let mut header = vec!["true".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in labels.iter().zip(self.normalized()) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Predicted class index for every row of `inputs`.
pub fn predict(net: &ObserverNet, inputs: &DMatrix<f64>) -> Result<Vec<usize>> {
    inputs
        .row_iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().copied().collect();
            Ok(argmax(&net.forward(&v)?))
        })
        .collect()
}

/// Trains an observer on regenerated primitives and evaluates it on
/// noise-perturbed copies.
pub struct ObserverRun {
    pub net: ObserverNet,
    pub loss_history: Vec<f64>,
    pub train_pairs: usize,
    pub confusion: ConfusionMatrix,
}

pub fn fit_observer(rollouts: &[Vec<Position>], cfg: &ObserverConfig) -> Result<ObserverRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (x, labels) = training_samples(rollouts, cfg, &mut rng)?;
    let mut net = ObserverNet::new(&cfg.sizes(rollouts.len()), cfg.train.seed)?;
    let loss_history = train_observer(&mut net, &x, &labels, &cfg.train)?;
    let confusion = evaluate_observer(&net, rollouts, cfg)?;
    Ok(ObserverRun {
        net,
        loss_history,
        train_pairs: labels.len(),
        confusion,
    })
}

/// Confusion on the held-out noise-perturbed windows of `rollouts`.
pub fn evaluate_observer(net: &ObserverNet, rollouts: &[Vec<Position>], cfg: &ObserverConfig) -> Result<ConfusionMatrix> {
    if net.outputs() != rollouts.len() || net.inputs() != 2 * cfg.buffer {
        return Err(CoreError::Shape(format!(
            "observer {:?} cannot score {} categories over {}-step buffers",
            net.sizes,
            rollouts.len(),
            cfg.buffer
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let (x, truth) = window_samples(rollouts, cfg.buffer, cfg.discard, cfg.test_noise, &mut rng)?;
    let predicted = predict(net, &x)?;
    Ok(ConfusionMatrix::from_predictions(&truth, &predicted, rollouts.len()))
}

pub const PCA_HEADER: &str = "step,primitive,pc1,pc2";

#[derive(Debug, Clone, PartialEq)]
pub struct PcaRow {
    pub step: usize,
    pub primitive: String,
    pub pc1: f64,
    pub pc2: f64,
}

/// Two-component PCA of the highest layer's d states across all
/// primitives' regenerations, steps `from..to` of each.
pub fn pca_latent(
    params: &NetworkParams,
    windows: &[AdaptiveWindow],
    labels: &[String],
    config: &NetworkConfig,
    from: usize,
    to: usize,
) -> Result<(Pca, Vec<PcaRow>)> {
    if to <= from {
        return Err(CoreError::Config("empty PCA step range".into()));
    }
    let mut states: Vec<(usize, usize, DVector<f64>)> = Vec::new();
    for (p, w) in windows.iter().enumerate() {
        let r = regenerate(w, to, params, config)?;
        for t in from..to {
            states.push((t, p, r.steps[t].top_d().clone()));
        }
    }
    let dim = states.first().map_or(0, |s| s.2.len());
    let samples = DMatrix::from_fn(states.len(), dim, |i, j| states[i].2[j]);
    let pca = Pca::fit(&samples, 2.min(dim))?;
    let proj = pca.transform(&samples);
    let rows = states
        .iter()
        .enumerate()
        .map(|(i, (t, p, _))| PcaRow {
            step: *t,
            primitive: labels.get(*p).cloned().unwrap_or_else(|| p.to_string()),
            pc1: proj[(i, 0)],
            pc2: if proj.ncols() > 1 { proj[(i, 1)] } else { 0.0 },
        })
        .collect();
    Ok((pca, rows))
}

pub fn write_pca_csv<W: Write>(rows: &[PcaRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(PCA_HEADER.split(','))?;
    for r in rows {
        w.write_record([r.step.to_string(), r.primitive.clone(), r.pc1.to_string(), r.pc2.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Distance between a trace's last and first points relative to its
/// diameter (largest pairwise distance).
pub fn loop_closure_ratio(trace: &[[f64; 2]]) -> f64 {
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
        return f64::INFINITY;
    };
    let mut diameter: f64 = 0.0;
    for (i, a) in trace.iter().enumerate() {
        for b in &trace[i + 1..] {
            diameter = diameter.max(dist(a, b));
        }
    }
    if diameter == 0.0 {
        return 0.0;
    }
    dist(first, last) / diameter
}

/// Trained observer with the category names it predicts.
///
/// Payload: configuration TOML (u32 length + UTF-8), label count (u32) and
/// labels (u16 length + UTF-8), layer-size count (u32) and sizes (u32), then
/// per layer the weight matrix (column-major f64) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverCheckpoint {
    pub config: ObserverConfig,
    pub labels: Vec<String>,
    pub net: ObserverNet,
}

impl ObserverCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.str32(&toml::to_string(&self.config)?);
        w.u32(self.labels.len() as u32);
        for l in &self.labels {
            w.str16(l);
        }
        w.u32(self.net.sizes.len() as u32);
        for &s in &self.net.sizes {
            w.u32(s as u32);
        }
        for (m, b) in self.net.weights.iter().zip(&self.net.biases) {
            w.f64s(m.as_slice());
            w.f64s(b.as_slice());
        }
        Ok(seal(CheckpointKind::Observer, &config_digest(&self.config)?, &w.into_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hash, payload) = unseal(bytes, CheckpointKind::Observer)?;
        let mut r = ByteReader::new(payload);
        let config: ObserverConfig = toml::from_str(&r.str32()?)
            .map_err(|e| CoreError::Corrupt(format!("embedded configuration: {e}")))?;
        if config_digest(&config)? != hash {
            return Err(CoreError::Corrupt("configuration hash mismatch".into()));
        }
        let n_labels = r.u32()? as usize;
        let labels = (0..n_labels).map(|_| r.str16()).collect::<Result<Vec<_>>>()?;
        let n_sizes = r.u32()? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(CoreError::Corrupt(format!("{n_sizes} observer layers")));
        }
        let sizes = (0..n_sizes).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        if sizes.last() != Some(&n_labels) {
            return Err(CoreError::Corrupt("observer outputs do not match its labels".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            weights.push(DMatrix::from_vec(pair[1], pair[0], r.f64s(pair[0] * pair[1])?));
            biases.push(DVector::from_vec(r.f64s(pair[1])?));
        }
        if !r.finished() {
            return Err(CoreError::Corrupt("trailing bytes in payload".into()));
        }
        Ok(Self {
            config,
            labels,
            net: ObserverNet { sizes, weights, biases },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
