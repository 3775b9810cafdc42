use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deliberation::Position;
use crate::error::{CoreError, Result};
use crate::train::{AdamHyper, AdamState};

/// Feed-forward intent classifier: tanh hidden layers, sigmoid outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverNet {
    /// Layer widths from input to output.
    pub sizes: Vec<usize>,
    /// `weights[l]` maps layer l to layer l + 1 (rows = outputs).
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentLabel {
    pub index: usize,
    pub confidence: Vec<f64>,
}

/// Argmax with ties going to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl ObserverNet {
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(CoreError::Config(format!("invalid observer layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(pair[1], pair[0], |_, _| rng.random_range(-bound..bound)));
            biases.push(DVector::zeros(pair[1]));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap_or(&0)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.sizes.len();
        if n < 2 || self.weights.len() != n - 1 || self.biases.len() != n - 1 {
            return Err(CoreError::Shape("observer layer count mismatch".into()));
        }
        for l in 0..n - 1 {
            if self.weights[l].shape() != (self.sizes[l + 1], self.sizes[l]) || self.biases[l].len() != self.sizes[l + 1] {
                return Err(CoreError::Shape(format!("observer layer {l} has wrong shape")));
            }
        }
        Ok(())
    }

    fn param_len(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_len() {
            return Err(CoreError::Length {
                expected: self.param_len(),
                actual: values.len(),
            });
        }
        let mut o = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&values[o..o + n]);
            o += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&values[o..o + n]);
            o += n;
        }
        Ok(())
    }

    /// Batch forward pass; rows are samples. Returns every layer's activations.
    fn forward_batch(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = vec![x.clone()];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = &acts[l] * w.transpose();
            for mut row in z.row_iter_mut() {
                row += b.transpose();
            }
            if l == last {
                z.apply(|v| *v = 1.0 / (1.0 + (-*v).exp()));
            } else {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.inputs() {
            return Err(CoreError::Length {
                expected: self.inputs(),
                actual: input.len(),
            });
        }
        let x = DMatrix::from_row_slice(1, input.len(), input);
        let acts = self.forward_batch(&x);
        Ok(acts.last().map(|a| a.iter().copied().collect()).unwrap_or_default())
    }

    /// Mean squared error over samples and outputs, and its gradient.
    fn loss_and_grad(&self, x: &DMatrix<f64>, t: &DMatrix<f64>) -> (f64, Vec<f64>) {
        let acts = self.forward_batch(x);
        let y = acts.last().expect("output layer");
        let scale = 1.0 / (y.len() as f64);
        let diff = y - t;
        let loss = diff.norm_squared() * scale;
        // Output layer: d/dz of sigmoid is y(1 − y).
        let mut delta = diff.zip_map(y, |d, y| 2.0 * scale * d * y * (1.0 - y));
        let mut grads_w = vec![DMatrix::zeros(0, 0); self.weights.len()];
        let mut grads_b = vec![DVector::zeros(0); self.weights.len()];
        for l in (0..self.weights.len()).rev() {
            grads_w[l] = delta.transpose() * &acts[l];
            grads_b[l] = delta.row_sum().transpose();
            if l > 0 {
                let back = &delta * &self.weights[l];
                delta = back.zip_map(&acts[l], |g, a| g * (1.0 - a * a));
            }
        }
        let mut flat = Vec::with_capacity(self.param_len());
        for (w, b) in grads_w.iter().zip(&grads_b) {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b.as_slice());
        }
        (loss, flat)
    }

    /// Mean squared error against targets.
    pub fn loss(&self, x: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
        self.loss_and_grad(x, t).0
    }

    /// Label for the last `buffer` positions, or `None` while underfull.
    pub fn classify(&self, positions: &[Position]) -> Option<IntentLabel> {
        let steps = self.inputs() / 2;
        if positions.len() < steps {
            return None;
        }
        let input: Vec<f64> = positions[positions.len() - steps..].iter().flatten().copied().collect();
        let confidence = self.forward(&input).ok()?;
        Some(IntentLabel {
            index: argmax(&confidence),
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverTrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for ObserverTrainSettings {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            adam: AdamHyper::default(),
            seed: 3,
        }
    }
}

/// One-hot targets for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), classes, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
}

/// Minibatch Adam on MSE. Returns the per-epoch mean training loss.
pub fn train_observer(
    net: &mut ObserverNet,
    inputs: &DMatrix<f64>,
    labels: &[usize],
    settings: &ObserverTrainSettings,
) -> Result<Vec<f64>> {
    net.check()?;
    if inputs.nrows() != labels.len() || inputs.ncols() != net.inputs() {
        return Err(CoreError::Shape(format!(
            "{}x{} inputs for {} labels and {} input units",
            inputs.nrows(),
            inputs.ncols(),
            labels.len(),
            net.inputs()
        )));
    }
    if labels.iter().any(|&l| l >= net.outputs()) {
        return Err(CoreError::Config("label outside the observer's categories".into()));
    }
    if settings.batch_size == 0 {
        return Err(CoreError::Config("batch_size must be >= 1".into()));
    }
    let targets = one_hot(labels, net.outputs());
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = AdamState::new(net.flatten().len(), settings.adam);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let x = inputs.select_rows(chunk);
            let t = targets.select_rows(chunk);
            let (loss, grad) = net.loss_and_grad(&x, &t);
            if !loss.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    reason: format!("observer loss {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            let mut values = net.flatten();
            adam.update(&mut values, &grad)?;
            net.assign(&values)?;
        }
        history.push(total / labels.len() as f64);
    }
    Ok(history)
}
