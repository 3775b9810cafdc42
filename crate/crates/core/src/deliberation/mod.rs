//! Real-time deliberation: prior generation of the robot's next intention,
//! sliding-window error regression against the enacted outcome, and the
//! human/robot mixing law.

mod inference;
pub mod log;

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::encoding::SoftmaxEncoder;
use crate::error::{CoreError, Result};
use crate::model::{step, LatentState, Noise, SoftmaxFrame, StepMode};
use crate::params::NetworkParams;
use crate::train::AdaptiveWindow;

pub use inference::{infer_window, InferenceOutcome};
pub use log::{read_session_log, SessionLogWriter, SESSION_LOG_HEADER};

pub type Position = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    /// Weight of the human intention while the human is active.
    pub gamma: f64,
    /// Largest per-coordinate change of the mixed position per tick.
    pub rate_cap: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            rate_cap: 0.1,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CoreError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.rate_cap > 0.0) || !self.rate_cap.is_finite() {
            return Err(CoreError::Config(format!("rate_cap {} must be positive", self.rate_cap)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeliberationConfig {
    pub window_size: usize,
    /// Error-regression epochs per tick.
    pub epochs: usize,
    /// Plain gradient step size for the adaptation vectors.
    pub rate: f64,
    /// Compute budget per tick; inference stops once it is spent.
    pub budget_ms: f64,
}

impl Default for DeliberationConfig {
    fn default() -> Self {
        Self {
            window_size: 15,
            epochs: 30,
            rate: 0.005,
            budget_ms: 60.0,
        }
    }
}

impl DeliberationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(CoreError::Config("window_size must be >= 1".into()));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(CoreError::Config(format!("inference rate {} must be positive", self.rate)));
        }
        if !(self.budget_ms > 0.0) || !self.budget_ms.is_finite() {
            return Err(CoreError::Config(format!("budget_ms {} must be positive", self.budget_ms)));
        }
        Ok(())
    }
}

fn clamp_workspace(p: Position) -> Position {
    p.map(|v| v.clamp(-1.0, 1.0))
}

/// Shared-control law. With a human intention the target is
/// γ·human + (1 − γ)·robot, otherwise the robot intention; the step from
/// `prev` is capped per coordinate and the result kept in the workspace.
pub fn mix_control(
    human: Option<Position>,
    robot: Position,
    prev: Option<Position>,
    mixer: &MixerConfig,
) -> Position {
    let target = match human {
        Some(h) => [
            mixer.gamma * h[0] + (1.0 - mixer.gamma) * robot[0],
            mixer.gamma * h[1] + (1.0 - mixer.gamma) * robot[1],
        ],
        None => robot,
    };
    let moved = match prev {
        Some(p) => [
            p[0] + (target[0] - p[0]).clamp(-mixer.rate_cap, mixer.rate_cap),
            p[1] + (target[1] - p[1]).clamp(-mixer.rate_cap, mixer.rate_cap),
        ],
        None => target,
    };
    clamp_workspace(moved)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanInput {
    pub x: f64,
    pub y: f64,
    pub active: bool,
}

impl HumanInput {
    pub fn position(&self) -> Position {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: usize,
    pub robot: Position,
    /// Last pointer position seen, whether or not the human is active.
    pub human: Option<Position>,
    pub human_active: bool,
    pub mixed: Position,
    pub nelbo: f64,
    pub epochs: usize,
    pub wall_ms: f64,
}

/// Limits on the error-regression epochs of one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpochBudget {
    /// Configured epochs, cut short at the instant.
    Deadline(Instant),
    /// Configured epochs regardless of time.
    Unbounded,
    /// Exactly this many epochs; used to replay a recorded session.
    Exact(usize),
}

/// Online state of one session.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub size: usize,
    /// Most recent enacted outcomes, oldest first.
    pub buffer: Vec<SoftmaxFrame>,
    /// Adaptation vectors aligned with `buffer`.
    pub window: AdaptiveWindow,
    /// Context preceding the first buffered step.
    pub anchor: LatentState,
    /// Context the next intention is generated from.
    pub context: LatentState,
    /// Posterior states for the buffered steps after the latest inference.
    pub states: Vec<LatentState>,
    pub prev_mixed: Option<Position>,
    pub t: usize,
}

/// Fresh window: empty buffer, zero adaptation vectors, anchor and context
/// at `start` (the network's initial state when absent).
pub fn reset_session(
    config: &NetworkConfig,
    params: &NetworkParams,
    size: usize,
    start: Option<LatentState>,
) -> Result<SlidingWindow> {
    config.validate()?;
    params.check_shapes(config)?;
    if size == 0 {
        return Err(CoreError::Config("window_size must be >= 1".into()));
    }
    let anchor = start.unwrap_or_else(|| LatentState::initial(config));
    Ok(SlidingWindow {
        size,
        buffer: Vec::with_capacity(size),
        window: AdaptiveWindow::zeros(config, 0),
        context: anchor.clone(),
        anchor,
        states: Vec::new(),
        prev_mixed: None,
        t: 0,
    })
}

/// One 100 ms step of the deliberation loop.
#[allow(clippy::too_many_arguments)]
pub fn tick(
    w: &mut SlidingWindow,
    params: &NetworkParams,
    config: &NetworkConfig,
    encoder: &SoftmaxEncoder,
    input: Option<HumanInput>,
    mixer: &MixerConfig,
    settings: &DeliberationConfig,
    budget: EpochBudget,
) -> Result<TickRecord> {
    let started = Instant::now();
    let (generated, frame) = step(&w.context, StepMode::Prior, &mut Noise::Zeros, w.t, params, config)?;
    let decoded = encoder.decode(&frame);
    let robot = clamp_workspace([decoded[0], decoded[1]]);
    let human = input.filter(|i| i.active).map(|i| i.position());
    let mixed = mix_control(human, robot, w.prev_mixed, mixer);
    w.prev_mixed = Some(mixed);
    w.buffer.push(encoder.encode(&mixed)?);
    w.window.push_zeros(config);

    let (nelbo, epochs) = if w.buffer.len() >= w.size {
        let (n, deadline) = match budget {
            EpochBudget::Deadline(d) => (settings.epochs, Some(d)),
            EpochBudget::Unbounded => (settings.epochs, None),
            EpochBudget::Exact(n) => (n, None),
        };
        let out = infer_window(&w.buffer, &w.anchor, &mut w.window, params, config, n, settings.rate, deadline)?;
        w.context = out.rollout.last_state().clone();
        let mut steps = out.rollout.steps;
        w.anchor = steps.remove(0);
        w.states = steps;
        w.buffer.remove(0);
        w.window.pop_front();
        (out.nelbo, out.epochs_run)
    } else {
        // Evaluation only until the buffer fills.
        let mut probe = w.window.clone();
        let out = infer_window(&w.buffer, &w.anchor, &mut probe, params, config, 0, settings.rate, None)?;
        w.context = generated;
        (out.nelbo, 0)
    };

    let record = TickRecord {
        t: w.t,
        robot,
        human: input.map(|i| i.position()),
        human_active: human.is_some(),
        mixed,
        nelbo,
        epochs,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    w.t += 1;
    Ok(record)
}

/// A deliberation session: read-only model view plus exclusively owned
/// window state.
#[derive(Debug, Clone)]
pub struct Session {
    pub params: Arc<NetworkParams>,
    pub config: NetworkConfig,
    pub encoder: SoftmaxEncoder,
    pub mixer: MixerConfig,
    pub settings: DeliberationConfig,
    pub window: SlidingWindow,
    start: Option<LatentState>,
}

impl Session {
    pub fn new(
        params: Arc<NetworkParams>,
        config: NetworkConfig,
        mixer: MixerConfig,
        settings: DeliberationConfig,
        start: Option<LatentState>,
    ) -> Result<Self> {
        mixer.validate()?;
        settings.validate()?;
        if config.dof != 2 {
            return Err(CoreError::Config(format!(
                "sessions drive a 2-DOF workspace, config has {} DOF",
                config.dof
            )));
        }
        let encoder = SoftmaxEncoder::from_config(&config)?;
        let window = reset_session(&config, &params, settings.window_size, start.clone())?;
        Ok(Self {
            params,
            config,
            encoder,
            mixer,
            settings,
            window,
            start,
        })
    }

    pub fn reset(&mut self) -> Result<()> {
        self.window = reset_session(&self.config, &self.params, self.settings.window_size, self.start.clone())?;
        Ok(())
    }

    pub fn t(&self) -> usize {
        self.window.t
    }

    pub fn tick(&mut self, input: Option<HumanInput>, budget: EpochBudget) -> Result<TickRecord> {
        tick(
            &mut self.window,
            &self.params,
            &self.config,
            &self.encoder,
            input,
            &self.mixer,
            &self.settings,
            budget,
        )
    }

    /// Tick with the configured compute budget starting now.
    pub fn tick_realtime(&mut self, input: Option<HumanInput>) -> Result<TickRecord> {
        let deadline = Instant::now() + Duration::from_secs_f64(self.settings.budget_ms / 1e3);
        self.tick(input, EpochBudget::Deadline(deadline))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerSpec;
    use crate::model::{generate_prior, EpsMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mixing_examples() {
        let m = MixerConfig { gamma: 0.9, rate_cap: 10.0 };
        let out = mix_control(Some([1.0, 1.0]), [0.0, 0.0], Some([0.0, 0.0]), &m);
        assert!((out[0] - 0.9).abs() < 1e-15 && (out[1] - 0.9).abs() < 1e-15);
        let pure_h = MixerConfig { gamma: 1.0, rate_cap: 10.0 };
        assert_eq!(mix_control(Some([0.3, -0.2]), [0.5, 0.5], None, &pure_h), [0.3, -0.2]);
        let pure_r = MixerConfig { gamma: 0.0, rate_cap: 10.0 };
        assert_eq!(mix_control(Some([0.3, -0.2]), [0.5, 0.5], None, &pure_r), [0.5, 0.5]);
        let capped = MixerConfig { gamma: 1.0, rate_cap: 0.05 };
        assert_eq!(mix_control(Some([1.0, 0.0]), [0.0, 0.0], Some([0.0, 0.0]), &capped), [0.05, 0.0]);
    }

    #[test]
    fn inactive_human_passes_robot_through() {
        let m = MixerConfig::default();
        assert_eq!(mix_control(None, [0.2, 0.1], Some([0.15, 0.12]), &m), [0.2, 0.1]);
    }

    #[test]
    fn mixer_validation() {
        assert!(MixerConfig { gamma: 1.1, rate_cap: 0.1 }.validate().is_err());
        assert!(MixerConfig { gamma: 0.5, rate_cap: 0.0 }.validate().is_err());
        assert!(MixerConfig::default().validate().is_ok());
    }

    fn small() -> (NetworkConfig, Arc<NetworkParams>) {
        let config = NetworkConfig {
            layers: vec![LayerSpec::new(6, 2, 2.0), LayerSpec::new(3, 1, 6.0)],
            dof: 2,
            softmax_bins: 6,
            softmax_sigma: 0.2,
            seed: 4,
        };
        let params = Arc::new(NetworkParams::init(&config, 4));
        (config, params)
    }

    #[test]
    fn resets_are_identical_and_empty() {
        let (config, params) = small();
        let settings = DeliberationConfig::default();
        let mut s = Session::new(params, config, MixerConfig::default(), settings, None).unwrap();
        let fresh = s.window.clone();
        for _ in 0..20 {
            s.tick(None, EpochBudget::Unbounded).unwrap();
        }
        assert_eq!(s.window.buffer.len(), settings.window_size - 1);
        s.reset().unwrap();
        assert!(s.window.buffer.is_empty());
        assert_eq!(s.window.anchor, fresh.anchor);
        assert_eq!(s.t(), 0);
    }

    #[test]
    fn no_human_prefix_matches_prior_generation() {
        let (config, params) = small();
        let mixer = MixerConfig { gamma: 0.0, rate_cap: 10.0 };
        let settings = DeliberationConfig { window_size: 5, ..DeliberationConfig::default() };
        let mut s = Session::new(params.clone(), config.clone(), mixer, settings, None).unwrap();
        let prior = generate_prior(
            &LatentState::initial(&config),
            5,
            EpsMode::Zeros,
            &mut ChaCha8Rng::seed_from_u64(0),
            &params,
            &config,
        )
        .unwrap();
        for frame in &prior.outputs {
            let rec = s.tick(None, EpochBudget::Unbounded).unwrap();
            let d = s.encoder.decode(frame);
            assert_eq!(rec.robot, [d[0].clamp(-1.0, 1.0), d[1].clamp(-1.0, 1.0)]);
            assert_eq!(rec.mixed, rec.robot);
        }
    }

    #[test]
    fn slide_is_exact() {
        let (config, params) = small();
        let settings = DeliberationConfig { window_size: 4, epochs: 5, ..DeliberationConfig::default() };
        let mut s = Session::new(params.clone(), config.clone(), MixerConfig::default(), settings, None).unwrap();
        for t in 0..10 {
            let input = HumanInput { x: 0.5, y: -0.3, active: t % 3 == 0 };
            s.tick(Some(input), EpochBudget::Unbounded).unwrap();
            let w = &s.window;
            if w.states.is_empty() {
                continue;
            }
            let re = crate::model::rollout_posterior(
                &w.anchor,
                &w.window.a_mu[..w.states.len()],
                &w.window.a_sigma[..w.states.len()],
                &mut Noise::Zeros,
                &params,
                &config,
            )
            .unwrap();
            for (a, b) in re.steps.iter().zip(&w.states) {
                for k in 0..config.layers.len() {
                    assert!((a.d(k) - b.d(k)).amax() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_epochs_leave_window_and_report_nelbo() {
        let (config, params) = small();
        let enc = SoftmaxEncoder::from_config(&config).unwrap();
        let targets = vec![enc.encode(&[0.9, -0.9]).unwrap(); 3];
        let mut window = AdaptiveWindow::zeros(&config, 3);
        window.a_mu[1][0][0] = 0.4;
        let before = window.clone();
        let out = infer_window(
            &targets,
            &LatentState::initial(&config),
            &mut window,
            &params,
            &config,
            0,
            0.1,
            None,
        )
        .unwrap();
        assert_eq!(window, before);
        assert_eq!(out.epochs_run, 0);
        assert!(out.nelbo.is_finite());
    }

    #[test]
    fn inference_leaves_params_untouched() {
        let (config, params) = small();
        let hash = params.content_hash();
        let enc = SoftmaxEncoder::from_config(&config).unwrap();
        let targets = vec![enc.encode(&[0.9, -0.9]).unwrap(); 6];
        let mut window = AdaptiveWindow::zeros(&config, 6);
        let out = infer_window(
            &targets,
            &LatentState::initial(&config),
            &mut window,
            &params,
            &config,
            20,
            0.05,
            None,
        )
        .unwrap();
        assert_eq!(params.content_hash(), hash);
        assert_eq!(out.epochs_run, 20);
        assert!(out.trace.last().unwrap() < &out.trace[0]);
    }

    #[test]
    fn expired_deadline_runs_no_epochs() {
        let (config, params) = small();
        let enc = SoftmaxEncoder::from_config(&config).unwrap();
        let targets = vec![enc.encode(&[0.1, 0.1]).unwrap(); 2];
        let mut window = AdaptiveWindow::zeros(&config, 2);
        let out = infer_window(
            &targets,
            &LatentState::initial(&config),
            &mut window,
            &params,
            &config,
            30,
            0.1,
            Some(Instant::now()),
        )
        .unwrap();
        assert_eq!(out.epochs_run, 0);
    }
}
