//! Offline learning of the network parameters and per-sequence adaptation
//! vectors: full-batch BPTT with Adam.

pub mod adam;
pub mod bptt;
pub mod checkpoint;
pub mod gradcheck;
pub mod window;

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};
use crate::model::{step, LatentState, Noise, Rollout, SoftmaxFrame, StepMode};
use crate::params::NetworkParams;

pub use adam::{AdamHyper, AdamState};
pub use bptt::{bptt_gradients, loss_and_gradients, GradScope, Gradients};
pub use window::AdaptiveWindow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub label: String,
    pub frames: Vec<SoftmaxFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub sequences: Vec<TrainingSequence>,
}

impl TrainingSet {
    pub fn validate(&self, config: &NetworkConfig) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(CoreError::Dataset("training set is empty".into()));
        }
        for seq in &self.sequences {
            if seq.frames.len() < 2 {
                return Err(CoreError::Dataset(format!(
                    "sequence {} has {} steps, need at least 2",
                    seq.label,
                    seq.frames.len()
                )));
            }
            if let Some(f) = seq
                .frames
                .iter()
                .find(|f| f.dof() != config.dof || f.bins() != config.softmax_bins)
            {
                return Err(CoreError::Dataset(format!(
                    "sequence {} has frames of {}×{}, expected {}×{}",
                    seq.label,
                    f.dof(),
                    f.bins(),
                    config.dof,
                    config.softmax_bins
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub report_every: usize,
    #[serde(default)]
    pub adam: AdamHyper,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Times each closed primitive is traversed per training sequence.
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    pub seed: u64,
}

fn default_clip() -> f64 {
    10.0
}

fn default_cycles() -> usize {
    2
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 5_000,
            report_every: 100,
            adam: AdamHyper::default(),
            clip_norm: default_clip(),
            cycles: default_cycles(),
            seed: 1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be >= 1".into()));
        }
        if self.cycles == 0 {
            return Err(CoreError::Config("cycles must be >= 1".into()));
        }
        if !(self.clip_norm >= 0.0) || !self.clip_norm.is_finite() {
            return Err(CoreError::Config(format!("clip_norm {} must be >= 0", self.clip_norm)));
        }
        self.adam.validate()
    }
}

/// Per-epoch training curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub epoch: usize,
    /// Σ KL(x̄ ‖ x) of the posterior outputs, all sequences.
    pub post_rec: f64,
    /// Same for closed-loop prior regeneration.
    pub prior_rec: f64,
    /// Unweighted KL between posterior and prior latents.
    pub regulation: f64,
    pub nelbo: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub rows: Vec<ReportRow>,
}

impl TrainingReport {
    pub const CSV_HEADER: &'static str = "epoch,post_rec,prior_rec,regulation,nelbo";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.post_rec, r.prior_rec, r.regulation, r.nelbo
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: NetworkParams,
    /// One window per training sequence, covering all of its steps.
    pub windows: Vec<AdaptiveWindow>,
    pub adam: AdamState,
    pub report: TrainingReport,
    /// Set when training stopped before `epochs`; the parameters are the
    /// last ones that produced a finite loss.
    pub stopped_early: Option<String>,
}

/// Σ_t Σ_i KL(x̄_{i,t} ‖ x_{i,t}) between targets and outputs.
pub fn reconstruction_error(targets: &[SoftmaxFrame], outputs: &[SoftmaxFrame]) -> f64 {
    targets
        .iter()
        .zip(outputs)
        .map(|(t, x)| {
            t.as_slice()
                .iter()
                .zip(x.as_slice())
                .filter(|(t, _)| **t > 0.0)
                .map(|(t, x)| t * (t.ln() - x.max(f64::MIN_POSITIVE).ln()))
                .sum::<f64>()
        })
        .sum()
}

/// Context after the first posterior step of a trained sequence, ε = 0.
pub fn initial_context(
    window: &AdaptiveWindow,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<(LatentState, SoftmaxFrame)> {
    if window.is_empty() {
        return Err(CoreError::Window("empty window has no initial step".into()));
    }
    let mode = StepMode::Posterior {
        a_mu: &window.a_mu[0],
        a_sigma: &window.a_sigma[0],
    };
    step(
        &LatentState::initial(config),
        mode,
        &mut Noise::Zeros,
        0,
        params,
        config,
    )
}

/// Closed-loop regeneration of a trained sequence: the first step comes
/// from its posterior (which selects the primitive), the remaining
/// `steps − 1` from the prior, all with ε = 0.
pub fn regenerate(
    window: &AdaptiveWindow,
    steps: usize,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<Rollout> {
    if steps == 0 {
        return Err(CoreError::Config("regeneration needs at least one step".into()));
    }
    let (first, out) = initial_context(window, params, config)?;
    let mut states = vec![first];
    let mut outputs = vec![out];
    for t in 1..steps {
        let (s, o) = step(&states[t - 1], StepMode::Prior, &mut Noise::Zeros, t, params, config)?;
        states.push(s);
        outputs.push(o);
    }
    Ok(Rollout {
        initial: LatentState::initial(config),
        steps: states,
        outputs,
    })
}

fn clip(values: &mut [f64], limit: f64) {
    if limit > 0.0 {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > limit {
            let s = limit / norm;
            values.iter_mut().for_each(|v| *v *= s);
        }
    }
}

pub fn train(set: &TrainingSet, config: &NetworkConfig, settings: &TrainSettings) -> Result<TrainedModel> {
    train_from(set, config, settings, None, |_| {})
}

/// Training loop. `init` resumes from existing parameters; `on_epoch` sees
/// every report row as it is produced.
pub fn train_from<F: FnMut(&ReportRow)>(
    set: &TrainingSet,
    config: &NetworkConfig,
    settings: &TrainSettings,
    init: Option<(NetworkParams, Vec<AdaptiveWindow>)>,
    mut on_epoch: F,
) -> Result<TrainedModel> {
    config.validate()?;
    set.validate(config)?;
    settings.validate()?;
    let (mut params, mut windows) = match init {
        Some((p, w)) => {
            p.check_shapes(config)?;
            (p, w)
        }
        None => (
            NetworkParams::init(config, config.seed),
            set.sequences
                .iter()
                .map(|s| AdaptiveWindow::zeros(config, s.frames.len()))
                .collect(),
        ),
    };
    if windows.len() != set.sequences.len() {
        return Err(CoreError::Window(format!(
            "{} windows for {} sequences",
            windows.len(),
            set.sequences.len()
        )));
    }
    for (w, s) in windows.iter().zip(&set.sequences) {
        w.check(config)?;
        if w.len() != s.frames.len() {
            return Err(CoreError::Window(format!(
                "window for {} covers {} steps, sequence has {}",
                s.label,
                w.len(),
                s.frames.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = AdamState::new(params.len(), settings.adam);
    let mut window_adams: Vec<AdamState> = windows
        .iter()
        .map(|w| AdamState::new(w.flatten().len(), settings.adam))
        .collect();
    let mut report = TrainingReport::default();
    let init_state = LatentState::initial(config);

    for epoch in 1..=settings.epochs {
        let mut total = params.zeros_like();
        let mut row = ReportRow {
            epoch,
            post_rec: 0.0,
            prior_rec: 0.0,
            regulation: 0.0,
            nelbo: 0.0,
        };
        let mut window_grads = Vec::with_capacity(windows.len());
        for (seq, window) in set.sequences.iter().zip(&windows) {
            let (rollout, grads) = loss_and_gradients(
                &seq.frames,
                &init_state,
                window,
                &mut Noise::Sampled(&mut rng),
                &params,
                config,
                GradScope::All,
            )?;
            row.post_rec += reconstruction_error(&seq.frames, &rollout.outputs);
            row.regulation += grads.terms.kl_sum;
            row.nelbo += grads.terms.nelbo();
            let regen = regenerate(window, seq.frames.len(), &params, config)?;
            row.prior_rec += reconstruction_error(&seq.frames, &regen.outputs);
            total.add_assign(&grads.params);
            window_grads.push(grads.window.flatten());
        }

        if !row.nelbo.is_finite() || !total.all_finite() {
            let reason = format!("non-finite loss or gradient (N-ELBO {})", row.nelbo);
            warn!("epoch {epoch}: {reason}; keeping the last finite parameters");
            return Ok(TrainedModel {
                params,
                windows,
                adam,
                report,
                stopped_early: Some(reason),
            });
        }

        let mut flat = params.flatten();
        let mut g = total.flatten();
        clip(&mut g, settings.clip_norm);
        adam.update(&mut flat, &g)?;
        params.assign(&flat)?;
        for ((window, wadam), mut g) in windows.iter_mut().zip(&mut window_adams).zip(window_grads) {
            let mut values = window.flatten();
            clip(&mut g, settings.clip_norm);
            wadam.update(&mut values, &g)?;
            window.assign(&values)?;
        }

        if settings.report_every > 0 && epoch % settings.report_every == 0 {
            debug!(
                "epoch {epoch}: nelbo {:.4} post_rec {:.4} prior_rec {:.4} kl {:.4}",
                row.nelbo, row.post_rec, row.prior_rec, row.regulation
            );
        }
        on_epoch(&row);
        report.rows.push(row);
    }

    Ok(TrainedModel {
        params,
        windows,
        adam,
        report,
        stopped_early: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerSpec;
    use crate::encoding::SoftmaxEncoder;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            layers: vec![LayerSpec::new(6, 1, 2.0)],
            dof: 1,
            softmax_bins: 5,
            softmax_sigma: 0.3,
            seed: 5,
        }
    }

    fn constant_set(cfg: &NetworkConfig) -> TrainingSet {
        let enc = SoftmaxEncoder::from_config(cfg).unwrap();
        let frame = enc.encode(&[0.4]).unwrap();
        TrainingSet {
            sequences: vec![TrainingSequence {
                label: "const".into(),
                frames: vec![frame; 8],
            }],
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = tiny();
        let settings = TrainSettings {
            epochs: 0,
            ..TrainSettings::default()
        };
        assert!(train(&constant_set(&cfg), &cfg, &settings).is_err());
    }

    #[test]
    fn constant_frame_reconstruction_drops() {
        let cfg = tiny();
        let settings = TrainSettings {
            epochs: 200,
            report_every: 0,
            adam: AdamHyper {
                alpha: 0.01,
                ..AdamHyper::default()
            },
            ..TrainSettings::default()
        };
        let model = train(&constant_set(&cfg), &cfg, &settings).unwrap();
        assert_eq!(model.report.rows.len(), 200);
        let first = model.report.rows[0].post_rec;
        let last = model.report.rows[199].post_rec;
        assert!(last <= 0.1 * first, "post_rec {first} -> {last}");
    }

    #[test]
    fn same_seed_same_report() {
        let cfg = tiny();
        let settings = TrainSettings {
            epochs: 30,
            report_every: 0,
            ..TrainSettings::default()
        };
        let a = train(&constant_set(&cfg), &cfg, &settings).unwrap();
        let b = train(&constant_set(&cfg), &cfg, &settings).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn report_csv_header() {
        let report = TrainingReport {
            rows: vec![ReportRow {
                epoch: 1,
                post_rec: 0.5,
                prior_rec: 0.25,
                regulation: 0.125,
                nelbo: 2.0,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,post_rec,prior_rec,regulation,nelbo\n1,0.5,0.25,0.125,2\n"
        );
    }

    #[test]
    fn short_sequences_rejected() {
        let cfg = tiny();
        let mut set = constant_set(&cfg);
        set.sequences[0].frames.truncate(1);
        assert!(set.validate(&cfg).is_err());
    }
}
