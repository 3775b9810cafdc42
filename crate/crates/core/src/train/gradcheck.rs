//! Central finite-difference check of the analytic gradients. Only the
//! forward path (rollout + ELBO) is used to build the numeric side.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::NetworkConfig;
use crate::error::Result;
use crate::model::{elbo, rollout_posterior, LatentState, Noise, SoftmaxFrame};
use crate::params::NetworkParams;
use crate::train::bptt::{bptt_gradients, GradScope};
use crate::train::window::AdaptiveWindow;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-4,
            atol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    /// Tensor name, e.g. `layer1.w_below` or `a_sigma`.
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.ok)
    }

    /// Entries whose tensor name ends with `suffix`.
    pub fn for_tensor<'a>(&'a self, suffix: &'a str) -> impl Iterator<Item = &'a GradCheckEntry> + 'a {
        self.entries.iter().filter(move |e| e.tensor.ends_with(suffix))
    }

    /// Largest |analytic − numeric| / (atol + rtol·|numeric|).
    pub fn worst_ratio(&self, settings: &GradCheckSettings) -> f64 {
        self.entries
            .iter()
            .map(|e| (e.analytic - e.numeric).abs() / (settings.atol + settings.rtol * e.numeric.abs()))
            .fold(0.0, f64::max)
    }
}

/// A self-contained gradient-check instance.
#[derive(Debug, Clone)]
pub struct GradCheckProblem {
    pub config: NetworkConfig,
    pub params: NetworkParams,
    pub window: AdaptiveWindow,
    pub targets: Vec<SoftmaxFrame>,
    /// Recorded ε, `[step][layer]`.
    pub eps: Vec<Vec<DVector<f64>>>,
}

impl GradCheckProblem {
    /// Random parameters, adaptation vectors, targets and ε for `config`.
    pub fn random(config: &NetworkConfig, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetworkParams::init(config, rng.random());
        // Non-zero biases so every bias path is exercised.
        params.for_each_slice_mut(|name, s| {
            if name.contains(".b_") || name == "b_out" {
                s.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        });
        let mut window = AdaptiveWindow::zeros(config, steps);
        window.for_each_slice_mut(|s| s.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5)));
        let targets = (0..steps)
            .map(|_| {
                let logits: Vec<f64> = (0..config.output_width())
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect();
                SoftmaxFrame::from_logits(config.softmax_bins, &logits)
            })
            .collect();
        let eps = (0..steps)
            .map(|_| {
                config
                    .layers
                    .iter()
                    .map(|l| DVector::from_fn(l.z_units, |_, _| StandardNormal.sample(&mut rng)))
                    .collect()
            })
            .collect();
        Self {
            config: config.clone(),
            params,
            window,
            targets,
            eps,
        }
    }

    /// −ELBO with the recorded ε.
    pub fn loss(&self, params: &NetworkParams, window: &AdaptiveWindow) -> Result<f64> {
        let init = LatentState::initial(&self.config);
        let rollout = rollout_posterior(
            &init,
            &window.a_mu,
            &window.a_sigma,
            &mut Noise::Replay(&self.eps),
            params,
            &self.config,
        )?;
        Ok(elbo(&self.targets, &rollout, &self.config)?.nelbo())
    }

    /// Compares every analytic gradient entry with central differences.
    pub fn check(&self, settings: &GradCheckSettings) -> Result<GradCheckReport> {
        let init = LatentState::initial(&self.config);
        let rollout = rollout_posterior(
            &init,
            &self.window.a_mu,
            &self.window.a_sigma,
            &mut Noise::Replay(&self.eps),
            &self.params,
            &self.config,
        )?;
        let grads = bptt_gradients(
            &self.targets,
            &rollout,
            &self.window,
            &self.params,
            &self.config,
            GradScope::All,
        )?;

        let mut report = GradCheckReport::default();
        let judge = |analytic: f64, numeric: f64| {
            (analytic - numeric).abs() <= settings.atol + settings.rtol * numeric.abs()
        };

        let base = self.params.flatten();
        let analytic_params = grads.params.flatten();
        let mut names = Vec::with_capacity(base.len());
        self.params.for_each_tensor(|name, r, c, _| {
            for i in 0..r * c {
                names.push((name.to_string(), i));
            }
        });
        let mut probe = self.params.clone();
        for (j, (name, index)) in names.into_iter().enumerate() {
            let mut shifted = base.clone();
            shifted[j] = base[j] + settings.step;
            probe.assign(&shifted)?;
            let up = self.loss(&probe, &self.window)?;
            shifted[j] = base[j] - settings.step;
            probe.assign(&shifted)?;
            let down = self.loss(&probe, &self.window)?;
            let numeric = (up - down) / (2.0 * settings.step);
            let analytic = analytic_params[j];
            report.entries.push(GradCheckEntry {
                tensor: name,
                index,
                analytic,
                numeric,
                ok: judge(analytic, numeric),
            });
        }

        let base_w = self.window.flatten();
        let analytic_w = grads.window.flatten();
        let half = base_w.len() / 2;
        let mut probe_w = self.window.clone();
        for j in 0..base_w.len() {
            let mut shifted = base_w.clone();
            shifted[j] = base_w[j] + settings.step;
            probe_w.assign(&shifted)?;
            let up = self.loss(&self.params, &probe_w)?;
            shifted[j] = base_w[j] - settings.step;
            probe_w.assign(&shifted)?;
            let down = self.loss(&self.params, &probe_w)?;
            let numeric = (up - down) / (2.0 * settings.step);
            let analytic = analytic_w[j];
            let (tensor, index) = if j < half {
                ("a_mu", j)
            } else {
                ("a_sigma", j - half)
            };
            report.entries.push(GradCheckEntry {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
                ok: judge(analytic, numeric),
            });
        }
        Ok(report)
    }
}
