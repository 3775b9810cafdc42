use std::time::Instant;

use log::warn;

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};
use crate::model::{elbo, rollout_posterior, LatentState, Noise, Rollout, SoftmaxFrame};
use crate::params::NetworkParams;
use crate::train::{loss_and_gradients, AdaptiveWindow, GradScope};

#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub epochs_run: usize,
    /// N-ELBO after the last update.
    pub nelbo: f64,
    /// N-ELBO before each epoch, followed by the final value.
    pub trace: Vec<f64>,
    /// ε = 0 posterior rollout with the updated adaptation vectors.
    pub rollout: Rollout,
    /// The adaptation vectors were zeroed after a non-finite loss.
    pub reset: bool,
}

/// Error regression over a window: plain gradient steps on the adaptation
/// vectors only, ε = 0 throughout. Stops early at `deadline`.
#[allow(clippy::too_many_arguments)]
pub fn infer_window(
    targets: &[SoftmaxFrame],
    anchor: &LatentState,
    window: &mut AdaptiveWindow,
    params: &NetworkParams,
    config: &NetworkConfig,
    n_epochs: usize,
    rate: f64,
    deadline: Option<Instant>,
) -> Result<InferenceOutcome> {
    if targets.len() != window.len() {
        return Err(CoreError::Window(format!(
            "{} targets for a window of {} steps",
            targets.len(),
            window.len()
        )));
    }
    if targets.is_empty() {
        return Err(CoreError::Window("inference over an empty window".into()));
    }
    let mut trace = Vec::with_capacity(n_epochs + 1);
    let mut epochs_run = 0;
    let mut reset = false;
    for _ in 0..n_epochs {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        let (_, grads) = loss_and_gradients(
            targets,
            anchor,
            window,
            &mut Noise::Zeros,
            params,
            config,
            GradScope::WindowOnly,
        )?;
        let loss = grads.terms.nelbo();
        let g = grads.window.flatten();
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            warn!("non-finite window loss {loss}; zeroing adaptation vectors");
            window.reset();
            reset = true;
            break;
        }
        trace.push(loss);
        let mut values = window.flatten();
        values.iter_mut().zip(&g).for_each(|(v, g)| *v -= rate * g);
        window.assign(&values)?;
        epochs_run += 1;
    }
    let rollout = rollout_posterior(
        anchor,
        &window.a_mu,
        &window.a_sigma,
        &mut Noise::Zeros,
        params,
        config,
    )?;
    let nelbo = elbo(targets, &rollout, config)?.nelbo();
    trace.push(nelbo);
    Ok(InferenceOutcome {
        epochs_run,
        nelbo,
        trace,
        rollout,
        reset,
    })
}
