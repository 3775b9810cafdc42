//! Analytic gradients of the free energy (−ELBO) by back-propagation through
//! time.
//!
//! Sign convention: every gradient returned here is ∂(−ELBO)/∂θ, so a
//! descent step `θ -= α·g` increases the ELBO.

use nalgebra::DVector;

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};
use crate::model::{elbo, rollout_posterior, ElboTerms, LatentState, Noise, Rollout, SoftmaxFrame};
use crate::params::{GaussianHead, NetworkParams};
use crate::train::window::AdaptiveWindow;

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as the parameters. All zero when parameter gradients
    /// were not requested.
    pub params: NetworkParams,
    pub window: AdaptiveWindow,
    pub terms: ElboTerms,
}

/// Which gradients to accumulate. The adaptation-vector gradients are
/// always produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    WindowOnly,
}

fn accumulate_head(
    grad: &mut GaussianHead,
    g_u: &DVector<f64>,
    g_rho: &DVector<f64>,
    d_prev: &DVector<f64>,
) {
    grad.w_mu.ger(1.0, g_u, d_prev, 1.0);
    grad.b_mu += g_u;
    grad.w_sigma.ger(1.0, g_rho, d_prev, 1.0);
    grad.b_sigma += g_rho;
}

/// Gradients of −ELBO for a posterior rollout that was produced from
/// `window` (its recorded ε are replayed implicitly, being stored per step).
pub fn bptt_gradients(
    targets: &[SoftmaxFrame],
    rollout: &Rollout,
    window: &AdaptiveWindow,
    params: &NetworkParams,
    config: &NetworkConfig,
    scope: GradScope,
) -> Result<Gradients> {
    let steps = rollout.len();
    if window.len() != steps {
        return Err(CoreError::Window(format!(
            "window covers {} steps, rollout has {steps}",
            window.len()
        )));
    }
    let terms = elbo(targets, rollout, config)?;
    let k_max = config.layers.len();
    let n_x = config.dof as f64;
    let n_z = config.total_z() as f64;
    let all = scope == GradScope::All;

    let mut grads = params.zeros_like();
    let mut g_window = AdaptiveWindow::zeros(config, steps);

    let zeros_d = || -> Vec<DVector<f64>> {
        config
            .layers
            .iter()
            .map(|l| DVector::zeros(l.d_units))
            .collect()
    };
    // ∂L/∂d^k_t arriving from step t+1, and ∂L/∂h^k_{t+1}.
    let mut g_d_future = zeros_d();
    let mut g_h_future = zeros_d();

    for t in (0..steps).rev() {
        let cur = &rollout.steps[t];
        let prev: &LatentState = rollout.prev(t);
        if cur.layers.iter().any(|l| l.posterior.is_none()) {
            return Err(CoreError::Replay(format!(
                "step {t} was not drawn from the posterior"
            )));
        }

        // Output head: ∂L/∂o = (x − x̄)/n_x per degree of freedom.
        let x = rollout.outputs[t].as_slice();
        let xbar = targets[t].as_slice();
        let delta_o = DVector::from_iterator(x.len(), x.iter().zip(xbar).map(|(x, xb)| (x - xb) / n_x));
        if all {
            grads.w_out.ger(1.0, &delta_o, &cur.layers[0].d, 1.0);
            grads.b_out += &delta_o;
        }

        let mut g_h = Vec::with_capacity(k_max);
        for k in 0..k_max {
            let mut g_d = g_d_future[k].clone();
            if k == 0 {
                g_d += params.w_out.tr_mul(&delta_o);
            }
            let d = &cur.layers[k].d;
            let leak = 1.0 - 1.0 / config.layers[k].timescale;
            let gh = g_d.zip_map(d, |g, d| g * (1.0 - d * d)) + &g_h_future[k] * leak;
            g_h.push(gh);
        }

        let mut g_d_prev = zeros_d();
        for k in 0..k_max {
            let lp = &params.layers[k];
            let gl = &mut grads.layers[k];
            let layer = &cur.layers[k];
            let d_prev = &prev.layers[k].d;
            let pre = &g_h[k] / config.layers[k].timescale;

            if all {
                gl.w_rec.ger(1.0, &pre, d_prev, 1.0);
                gl.w_zh.ger(1.0, &pre, &layer.z, 1.0);
                gl.b_h += &pre;
                if let Some(g) = gl.w_below.as_mut() {
                    g.ger(1.0, &pre, &prev.layers[k - 1].d, 1.0);
                }
                if let Some(g) = gl.w_above.as_mut() {
                    g.ger(1.0, &pre, &prev.layers[k + 1].d, 1.0);
                }
            }
            g_d_prev[k] += lp.w_rec.tr_mul(&pre);
            if let Some(w) = &lp.w_below {
                g_d_prev[k - 1] += w.tr_mul(&pre);
            }
            if let Some(w) = &lp.w_above {
                g_d_prev[k + 1] += w.tr_mul(&pre);
            }

            let g_z = lp.w_zh.tr_mul(&pre);
            let c = config.layers[k].regulation / n_z;
            let p = &layer.prior;
            let q = layer.posterior.as_ref().expect("checked above");
            let z_units = g_z.len();
            let mut g_u_q = DVector::zeros(z_units);
            let mut g_rho_q = DVector::zeros(z_units);
            let mut g_u_p = DVector::zeros(z_units);
            let mut g_rho_p = DVector::zeros(z_units);
            for m in 0..z_units {
                let dm = q.mu[m] - p.mu[m];
                let sp2 = p.sigma[m] * p.sigma[m];
                let sq2 = q.sigma[m] * q.sigma[m];
                let g_mu_q = g_z[m] + c * dm / sp2;
                let g_ls_q = g_z[m] * q.sigma[m] * layer.eps[m] + c * (sq2 / sp2 - 1.0);
                let g_mu_p = -c * dm / sp2;
                let g_ls_p = c * (1.0 - (dm * dm + sq2) / sp2);
                g_u_q[m] = g_mu_q * (1.0 - q.mu[m] * q.mu[m]);
                g_rho_q[m] = g_ls_q * q.log_sigma_mask(m);
                g_u_p[m] = g_mu_p * (1.0 - p.mu[m] * p.mu[m]);
                g_rho_p[m] = g_ls_p * p.log_sigma_mask(m);
            }
            if all {
                accumulate_head(&mut gl.prior, &g_u_p, &g_rho_p, d_prev);
                accumulate_head(&mut gl.posterior, &g_u_q, &g_rho_q, d_prev);
            }
            g_d_prev[k] += lp.prior.w_mu.tr_mul(&g_u_p)
                + lp.prior.w_sigma.tr_mul(&g_rho_p)
                + lp.posterior.w_mu.tr_mul(&g_u_q)
                + lp.posterior.w_sigma.tr_mul(&g_rho_q);
            g_window.a_mu[t][k] = g_u_q;
            g_window.a_sigma[t][k] = g_rho_q;
        }
        g_d_future = g_d_prev;
        g_h_future = g_h;
    }

    Ok(Gradients {
        params: grads,
        window: g_window,
        terms,
    })
}

/// Posterior rollout from `initial` followed by its gradients.
pub fn loss_and_gradients(
    targets: &[SoftmaxFrame],
    initial: &LatentState,
    window: &AdaptiveWindow,
    noise: &mut Noise<'_>,
    params: &NetworkParams,
    config: &NetworkConfig,
    scope: GradScope,
) -> Result<(Rollout, Gradients)> {
    let rollout = rollout_posterior(initial, &window.a_mu, &window.a_sigma, noise, params, config)?;
    let grads = bptt_gradients(targets, &rollout, window, params, config, scope)?;
    Ok((rollout, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerSpec;
    use crate::encoding::SoftmaxEncoder;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            layers: vec![LayerSpec::new(2, 1, 1.0)],
            dof: 1,
            softmax_bins: 3,
            softmax_sigma: 0.3,
            seed: 0,
        }
    }

    #[test]
    fn zero_params_output_head_matches_finite_differences() {
        let cfg = tiny();
        let params = NetworkParams::zeros(&cfg);
        let window = AdaptiveWindow::zeros(&cfg, 3);
        let uniform = SoftmaxFrame::new(3, vec![1.0 / 3.0; 3]).unwrap();
        let targets = vec![uniform; 3];
        let init = LatentState::initial(&cfg);
        let (_, g) = loss_and_gradients(&targets, &init, &window, &mut Noise::Zeros, &params, &cfg, GradScope::All)
            .unwrap();
        // Uniform target and uniform output: output-head gradient vanishes.
        assert!(g.params.b_out.iter().all(|v| v.abs() < 1e-15));
        let h = 1e-4;
        for i in 0..3 {
            let loss = |delta: f64| {
                let mut p = params.clone();
                p.b_out[i] += delta;
                let r = rollout_posterior(&init, &window.a_mu, &window.a_sigma, &mut Noise::Zeros, &p, &cfg)
                    .unwrap();
                elbo(&targets, &r, &cfg).unwrap().nelbo()
            };
            let fd = (loss(h) - loss(-h)) / (2.0 * h);
            assert!((fd - g.params.b_out[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn unregulated_prior_heads_receive_no_gradient() {
        let mut cfg = NetworkConfig {
            layers: vec![LayerSpec::new(3, 1, 2.0), LayerSpec::new(2, 1, 4.0)],
            dof: 1,
            softmax_bins: 4,
            softmax_sigma: 0.3,
            seed: 0,
        };
        cfg.set_regulation(0.0);
        let params = NetworkParams::init(&cfg, 2);
        let enc = SoftmaxEncoder::from_config(&cfg).unwrap();
        let targets: Vec<_> = [0.2, -0.4, 0.5].iter().map(|v| enc.encode(&[*v]).unwrap()).collect();
        let window = AdaptiveWindow::zeros(&cfg, 3);
        let init = LatentState::initial(&cfg);
        let (_, g) = loss_and_gradients(&targets, &init, &window, &mut Noise::Zeros, &params, &cfg, GradScope::All)
            .unwrap();
        for layer in &g.params.layers {
            assert!(layer.prior.w_mu.iter().all(|v| *v == 0.0));
            assert!(layer.prior.b_sigma.iter().all(|v| *v == 0.0));
        }
        assert!(g.params.layers[0].posterior.b_mu.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn window_only_scope_leaves_param_gradients_zero() {
        let cfg = tiny();
        let params = NetworkParams::init(&cfg, 4);
        let enc = SoftmaxEncoder::from_config(&cfg).unwrap();
        let targets: Vec<_> = [0.1, 0.6].iter().map(|v| enc.encode(&[*v]).unwrap()).collect();
        let window = AdaptiveWindow::zeros(&cfg, 2);
        let init = LatentState::initial(&cfg);
        let (_, full) =
            loss_and_gradients(&targets, &init, &window, &mut Noise::Zeros, &params, &cfg, GradScope::All).unwrap();
        let (_, only) =
            loss_and_gradients(&targets, &init, &window, &mut Noise::Zeros, &params, &cfg, GradScope::WindowOnly)
                .unwrap();
        assert_eq!(only.params.norm(), 0.0);
        assert_eq!(full.window, only.window);
    }

    #[test]
    fn prior_rollout_is_rejected() {
        let cfg = tiny();
        let params = NetworkParams::init(&cfg, 4);
        let init = LatentState::initial(&cfg);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let r = crate::model::generate_prior(&init, 2, crate::model::EpsMode::Zeros, &mut rng, &params, &cfg)
            .unwrap();
        let targets = r.outputs.clone();
        let window = AdaptiveWindow::zeros(&cfg, 2);
        assert!(matches!(
            bptt_gradients(&targets, &r, &window, &params, &cfg, GradScope::All),
            Err(CoreError::Replay(_))
        ));
    }
}
