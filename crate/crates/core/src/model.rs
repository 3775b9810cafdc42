//! Forward computation of the generative (prior) and inference (posterior)
//! passes, output decoding and free-energy evaluation.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{CoreError, Result};
use crate::params::{GaussianHead, NetworkParams};

/// log σ is clamped to ±this before exponentiation.
pub const LOG_SIGMA_BOUND: f64 = 7.0;

/// Mean and (log) standard deviation of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    /// Clamped to ±[`LOG_SIGMA_BOUND`].
    pub log_sigma: DVector<f64>,
    pub sigma: DVector<f64>,
}

impl GaussianStats {
    fn from_heads(mu_pre: DVector<f64>, log_sigma_pre: DVector<f64>) -> Self {
        let mu = mu_pre.map(f64::tanh);
        let log_sigma = log_sigma_pre.map(|v| v.clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND));
        let sigma = log_sigma.map(f64::exp);
        Self {
            mu,
            log_sigma,
            sigma,
        }
    }

    /// 1 where log σ is inside the clamp range (gradient passes), else 0.
    pub(crate) fn log_sigma_mask(&self, i: usize) -> f64 {
        if self.log_sigma[i].abs() < LOG_SIGMA_BOUND {
            1.0
        } else {
            0.0
        }
    }
}

fn check_len(what: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(CoreError::Shape(format!(
            "{what} has {} entries, expected {n}",
            v.len()
        )));
    }
    Ok(())
}

fn evaluate_head(
    head: &GaussianHead,
    d_prev: &DVector<f64>,
    adapt: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<GaussianStats> {
    check_len("d_prev", d_prev, head.w_mu.ncols())?;
    let mut u = &head.w_mu * d_prev + &head.b_mu;
    let mut rho = &head.w_sigma * d_prev + &head.b_sigma;
    if let Some((a_mu, a_sigma)) = adapt {
        check_len("a_mu", a_mu, u.len())?;
        check_len("a_sigma", a_sigma, rho.len())?;
        u += a_mu;
        rho += a_sigma;
    }
    Ok(GaussianStats::from_heads(u, rho))
}

/// Prior of layer `k` given that layer's previous deterministic state.
pub fn prior_stats(params: &NetworkParams, k: usize, d_prev: &DVector<f64>) -> Result<GaussianStats> {
    let layer = layer_params(params, k)?;
    evaluate_head(&layer.prior, d_prev, None)
}

/// Approximate posterior of layer `k`; the adaptation vectors shift the
/// pre-activations of both heads.
pub fn posterior_stats(
    params: &NetworkParams,
    k: usize,
    d_prev: &DVector<f64>,
    a_mu: &DVector<f64>,
    a_sigma: &DVector<f64>,
) -> Result<GaussianStats> {
    let layer = layer_params(params, k)?;
    evaluate_head(&layer.posterior, d_prev, Some((a_mu, a_sigma)))
}

fn layer_params(params: &NetworkParams, k: usize) -> Result<&crate::params::LayerParams> {
    params
        .layers
        .get(k)
        .ok_or_else(|| CoreError::Config(format!("no layer {k}")))
}

/// Reparameterized sample z = μ + σ∗ε.
pub fn sample_z(stats: &GaussianStats, eps: &DVector<f64>) -> DVector<f64> {
    &stats.mu + stats.sigma.component_mul(eps)
}

/// Where the standard-normal draws come from.
pub enum Noise<'a> {
    Zeros,
    Sampled(&'a mut ChaCha8Rng),
    /// Recorded draws indexed `[step][layer]`.
    Replay(&'a [Vec<DVector<f64>>]),
}

impl Noise<'_> {
    fn draw(&mut self, step: usize, k: usize, n: usize) -> Result<DVector<f64>> {
        match self {
            Noise::Zeros => Ok(DVector::zeros(n)),
            Noise::Sampled(rng) => Ok(DVector::from_fn(n, |_, _| StandardNormal.sample(*rng))),
            Noise::Replay(record) => {
                let eps = record
                    .get(step)
                    .and_then(|layers| layers.get(k))
                    .ok_or_else(|| {
                        CoreError::Replay(format!("no ε recorded for step {step}, layer {k}"))
                    })?;
                check_len("replayed ε", eps, n)?;
                Ok(eps.clone())
            }
        }
    }
}

/// State of one layer at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    /// Internal (pre-activation) state.
    pub h: DVector<f64>,
    /// tanh(h).
    pub d: DVector<f64>,
    pub z: DVector<f64>,
    /// The standard-normal draw that produced `z`.
    pub eps: DVector<f64>,
    pub prior: GaussianStats,
    /// Present when `z` was drawn from the posterior.
    pub posterior: Option<GaussianStats>,
}

impl LayerState {
    /// The distribution `z` was drawn from.
    pub fn active(&self) -> &GaussianStats {
        self.posterior.as_ref().unwrap_or(&self.prior)
    }
}

/// Full network context at one time step, lowest layer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub layers: Vec<LayerState>,
}

impl LatentState {
    /// h = 0, d = 0 everywhere; the stochastic fields are placeholders
    /// (zero mean, unit σ) since no sample precedes the first step.
    pub fn initial(config: &NetworkConfig) -> Self {
        let layers = config
            .layers
            .iter()
            .map(|spec| {
                let unit = GaussianStats {
                    mu: DVector::zeros(spec.z_units),
                    log_sigma: DVector::zeros(spec.z_units),
                    sigma: DVector::from_element(spec.z_units, 1.0),
                };
                LayerState {
                    h: DVector::zeros(spec.d_units),
                    d: DVector::zeros(spec.d_units),
                    z: DVector::zeros(spec.z_units),
                    eps: DVector::zeros(spec.z_units),
                    prior: unit,
                    posterior: None,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn d(&self, k: usize) -> &DVector<f64> {
        &self.layers[k].d
    }

    pub fn top_d(&self) -> &DVector<f64> {
        &self.layers[self.layers.len() - 1].d
    }
}

/// Leaky-integrator update of every layer given the new z samples.
/// Returns (h, d) per layer.
pub fn context_step(
    prev: &LatentState,
    z: &[DVector<f64>],
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let k_max = config.layers.len();
    if prev.layers.len() != k_max || z.len() != k_max || params.layers.len() != k_max {
        return Err(CoreError::Shape(format!(
            "expected {k_max} layers in state, samples and parameters"
        )));
    }
    let mut out = Vec::with_capacity(k_max);
    for (k, spec) in config.layers.iter().enumerate() {
        let lp = &params.layers[k];
        let mut drive = &lp.w_rec * &prev.layers[k].d + &lp.w_zh * &z[k] + &lp.b_h;
        if let Some(w) = &lp.w_below {
            drive += w * &prev.layers[k - 1].d;
        }
        if let Some(w) = &lp.w_above {
            drive += w * &prev.layers[k + 1].d;
        }
        let inv = 1.0 / spec.timescale;
        let h = &prev.layers[k].h * (1.0 - inv) + drive * inv;
        let d = h.map(f64::tanh);
        out.push((h, d));
    }
    Ok(out)
}

/// Per-degree-of-freedom probability vectors, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxFrame {
    bins: usize,
    probs: Vec<f64>,
}

impl SoftmaxFrame {
    /// Builds a frame from probabilities laid out dof-major.
    pub fn new(bins: usize, probs: Vec<f64>) -> Result<Self> {
        if bins < 2 || probs.is_empty() || !probs.len().is_multiple_of(bins) {
            return Err(CoreError::Shape(format!(
                "{} probabilities do not split into groups of {bins}",
                probs.len()
            )));
        }
        for (i, group) in probs.chunks(bins).enumerate() {
            let sum: f64 = group.iter().sum();
            if group.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(CoreError::Domain(format!(
                    "dof {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(Self { bins, probs })
    }

    /// Softmax of each dof's logits.
    pub fn from_logits(bins: usize, logits: &[f64]) -> Self {
        let mut probs = Vec::with_capacity(logits.len());
        for group in logits.chunks(bins) {
            let max = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = probs.len();
            probs.extend(group.iter().map(|o| (o - max).exp()));
            let total: f64 = probs[start..].iter().sum();
            probs[start..].iter_mut().for_each(|p| *p /= total);
        }
        Self { bins, probs }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn dof(&self) -> usize {
        self.probs.len() / self.bins
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.probs[i * self.bins..(i + 1) * self.bins]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Output head applied to the lowest layer's d units.
pub fn decode_output(d1: &DVector<f64>, params: &NetworkParams, config: &NetworkConfig) -> SoftmaxFrame {
    let o = &params.w_out * d1 + &params.b_out;
    SoftmaxFrame::from_logits(config.softmax_bins, o.as_slice())
}

/// Closed-form KL[q || p] per unit for diagonal Gaussians.
pub fn kl_gaussian(
    mu_q: &[f64],
    sigma_q: &[f64],
    mu_p: &[f64],
    sigma_p: &[f64],
) -> Result<Vec<f64>> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(CoreError::Shape("KL arguments differ in length".into()));
    }
    (0..n)
        .map(|i| {
            let (sq, sp) = (sigma_q[i], sigma_p[i]);
            if !(sq > 0.0) || !(sp > 0.0) {
                return Err(CoreError::Domain(format!(
                    "σ must be positive (σq={sq}, σp={sp})"
                )));
            }
            let dm = mu_p[i] - mu_q[i];
            Ok((sp / sq).ln() + (dm * dm + sq * sq) / (2.0 * sp * sp) - 0.5)
        })
        .collect()
}

/// KL summed over a layer's units.
pub(crate) fn layer_kl(state: &LayerState) -> f64 {
    match &state.posterior {
        None => 0.0,
        Some(q) => {
            let p = &state.prior;
            (0..q.mu.len())
                .map(|i| {
                    let dm = p.mu[i] - q.mu[i];
                    let (sq, sp) = (q.sigma[i], p.sigma[i]);
                    p.log_sigma[i] - q.log_sigma[i] + (dm * dm + sq * sq) / (2.0 * sp * sp) - 0.5
                })
                .sum()
        }
    }
}

/// Components of the evidence lower bound over a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// Σ_t (1/n_x) Σ x̄ log x. Never positive.
    pub accuracy: f64,
    /// Σ_t Σ_k (w^k/n_z) Σ KL. Never negative.
    pub regulation: f64,
    /// accuracy − regulation.
    pub elbo: f64,
    /// Σ_t Σ_k Σ KL, unweighted.
    pub kl_sum: f64,
}

impl ElboTerms {
    /// Free energy, −elbo.
    pub fn nelbo(&self) -> f64 {
        -self.elbo
    }
}

/// Cross-entropy term of one step: (1/n_x) Σ_i Σ_j x̄ log x.
pub(crate) fn step_accuracy(target: &SoftmaxFrame, output: &SoftmaxFrame) -> f64 {
    let n_x = output.dof() as f64;
    target
        .as_slice()
        .iter()
        .zip(output.as_slice())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, x)| t * x.max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n_x
}

/// Single-sample ELBO of a posterior rollout against softmax-encoded targets.
pub fn elbo(targets: &[SoftmaxFrame], rollout: &Rollout, config: &NetworkConfig) -> Result<ElboTerms> {
    if targets.len() != rollout.len() {
        return Err(CoreError::Length {
            expected: rollout.len(),
            actual: targets.len(),
        });
    }
    let n_z = config.total_z() as f64;
    let mut accuracy = 0.0;
    let mut regulation = 0.0;
    let mut kl_sum = 0.0;
    for (t, target) in targets.iter().enumerate() {
        if target.as_slice().len() != rollout.outputs[t].as_slice().len() {
            return Err(CoreError::Shape(format!("target frame {t} has the wrong width")));
        }
        accuracy += step_accuracy(target, &rollout.outputs[t]);
        for (k, layer) in rollout.steps[t].layers.iter().enumerate() {
            let kl = layer_kl(layer);
            kl_sum += kl;
            regulation += config.layers[k].regulation / n_z * kl;
        }
    }
    Ok(ElboTerms {
        accuracy,
        regulation,
        elbo: accuracy - regulation,
        kl_sum,
    })
}

/// How z is drawn at a step.
#[derive(Clone, Copy)]
pub enum StepMode<'a> {
    Prior,
    /// Posterior with per-layer adaptation vectors (a_μ, a_σ).
    Posterior {
        a_mu: &'a [DVector<f64>],
        a_sigma: &'a [DVector<f64>],
    },
}

/// One full network step from `prev`. `step_index` addresses replayed noise.
pub fn step(
    prev: &LatentState,
    mode: StepMode<'_>,
    noise: &mut Noise<'_>,
    step_index: usize,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<(LatentState, SoftmaxFrame)> {
    let k_max = config.layers.len();
    let mut stats = Vec::with_capacity(k_max);
    let mut zs = Vec::with_capacity(k_max);
    let mut epss = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let d_prev = &prev.layers[k].d;
        let prior = prior_stats(params, k, d_prev)?;
        let posterior = match mode {
            StepMode::Prior => None,
            StepMode::Posterior { a_mu, a_sigma } => {
                let (am, asg) = a_mu.get(k).zip(a_sigma.get(k)).ok_or_else(|| {
                    CoreError::Window(format!("missing adaptation vector for layer {k}"))
                })?;
                Some(posterior_stats(params, k, d_prev, am, asg)?)
            }
        };
        let eps = noise.draw(step_index, k, config.layers[k].z_units)?;
        let z = sample_z(posterior.as_ref().unwrap_or(&prior), &eps);
        zs.push(z);
        epss.push(eps);
        stats.push((prior, posterior));
    }
    let hd = context_step(prev, &zs, params, config)?;
    let layers = hd
        .into_iter()
        .zip(zs)
        .zip(epss)
        .zip(stats)
        .map(|((((h, d), z), eps), (prior, posterior))| LayerState {
            h,
            d,
            z,
            eps,
            prior,
            posterior,
        })
        .collect::<Vec<_>>();
    let state = LatentState { layers };
    let output = decode_output(&state.layers[0].d, params, config);
    Ok((state, output))
}

/// A sequence of steps from a starting context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub initial: LatentState,
    pub steps: Vec<LatentState>,
    pub outputs: Vec<SoftmaxFrame>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State preceding step `t`.
    pub fn prev(&self, t: usize) -> &LatentState {
        if t == 0 {
            &self.initial
        } else {
            &self.steps[t - 1]
        }
    }

    pub fn last_state(&self) -> &LatentState {
        self.steps.last().unwrap_or(&self.initial)
    }

    /// Noise draws in replay layout.
    pub fn eps_record(&self) -> Vec<Vec<DVector<f64>>> {
        self.steps
            .iter()
            .map(|s| s.layers.iter().map(|l| l.eps.clone()).collect())
            .collect()
    }
}

/// Posterior rollout over `a_mu.len()` steps; `a_mu[t][k]` adapts layer k at step t.
pub fn rollout_posterior(
    initial: &LatentState,
    a_mu: &[Vec<DVector<f64>>],
    a_sigma: &[Vec<DVector<f64>>],
    noise: &mut Noise<'_>,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<Rollout> {
    if a_mu.len() != a_sigma.len() {
        return Err(CoreError::Window("a_mu and a_sigma cover different steps".into()));
    }
    let mut steps = Vec::with_capacity(a_mu.len());
    let mut outputs = Vec::with_capacity(a_mu.len());
    for t in 0..a_mu.len() {
        let prev = if t == 0 { initial } else { &steps[t - 1] };
        let mode = StepMode::Posterior {
            a_mu: &a_mu[t],
            a_sigma: &a_sigma[t],
        };
        let (state, out) = step(prev, mode, noise, t, params, config)?;
        steps.push(state);
        outputs.push(out);
    }
    Ok(Rollout {
        initial: initial.clone(),
        steps,
        outputs,
    })
}

/// ε choice for closed-loop prior generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsMode {
    Zeros,
    Sampled,
}

/// Closed-loop rollout driven by the prior at every step.
pub fn generate_prior(
    initial: &LatentState,
    steps: usize,
    eps_mode: EpsMode,
    rng: &mut ChaCha8Rng,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<Rollout> {
    if steps == 0 {
        return Err(CoreError::Config("generation needs at least one step".into()));
    }
    let mut noise = match eps_mode {
        EpsMode::Zeros => Noise::Zeros,
        EpsMode::Sampled => Noise::Sampled(rng),
    };
    let mut states = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let prev = if t == 0 { initial } else { &states[t - 1] };
        let (state, out) = step(prev, StepMode::Prior, &mut noise, t, params, config)?;
        states.push(state);
        outputs.push(out);
    }
    Ok(Rollout {
        initial: initial.clone(),
        steps: states,
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerSpec;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn scalar_config(timescale: f64) -> NetworkConfig {
        NetworkConfig {
            layers: vec![LayerSpec::new(1, 1, timescale)],
            dof: 1,
            softmax_bins: 2,
            softmax_sigma: 0.1,
            seed: 0,
        }
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn prior_zero_head_is_standard_normal() {
        let cfg = NetworkConfig::default();
        let p = NetworkParams::zeros(&cfg);
        let s = prior_stats(&p, 0, &DVector::from_element(40, 0.3)).unwrap();
        assert!(s.mu.iter().all(|m| *m == 0.0));
        assert!(s.sigma.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn prior_scalar_cases() {
        let cfg = scalar_config(1.0);
        let mut p = NetworkParams::zeros(&cfg);
        p.layers[0].prior.w_mu[(0, 0)] = 1.0;
        let s = prior_stats(&p, 0, &v(&[0.5])).unwrap();
        assert_abs_diff_eq!(s.mu[0], 0.462_117_157_260_009_8, epsilon = 1e-12);

        p.layers[0].prior.b_sigma[0] = -1.0;
        for d in [-0.9, 0.0, 0.7] {
            let s = prior_stats(&p, 0, &v(&[d])).unwrap();
            assert_abs_diff_eq!(s.sigma[0], 0.367_879_441_171_442_3, epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_rejects_wrong_shape() {
        let cfg = NetworkConfig::default();
        let p = NetworkParams::zeros(&cfg);
        assert!(matches!(
            prior_stats(&p, 0, &DVector::zeros(3)),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn posterior_matches_prior_without_adaptation() {
        let cfg = NetworkConfig::default();
        let mut p = NetworkParams::init(&cfg, 5);
        for layer in &mut p.layers {
            layer.posterior = layer.prior.clone();
        }
        let d = DVector::from_fn(40, |i, _| (i as f64 * 0.1).sin());
        let prior = prior_stats(&p, 0, &d).unwrap();
        let post = posterior_stats(&p, 0, &d, &DVector::zeros(4), &DVector::zeros(4)).unwrap();
        assert_eq!(prior, post);
    }

    #[test]
    fn posterior_scalar_cases() {
        let cfg = scalar_config(1.0);
        let p = NetworkParams::zeros(&cfg);
        let s = posterior_stats(&p, 0, &v(&[0.4]), &v(&[0.3]), &v(&[0.0])).unwrap();
        assert_abs_diff_eq!(s.mu[0], 0.291_312_612_451_590_7, epsilon = 1e-12);
        let s = posterior_stats(&p, 0, &v(&[0.0]), &v(&[0.0]), &v(&[0.7])).unwrap();
        assert_abs_diff_eq!(s.sigma[0], 2.013_752_707_470_476_6, epsilon = 1e-12);
        assert!(posterior_stats(&p, 0, &v(&[0.0]), &v(&[0.0, 1.0]), &v(&[0.7])).is_err());
    }

    #[test]
    fn log_sigma_is_clamped() {
        let cfg = scalar_config(1.0);
        let mut p = NetworkParams::zeros(&cfg);
        p.layers[0].prior.b_sigma[0] = 50.0;
        let s = prior_stats(&p, 0, &v(&[0.0])).unwrap();
        assert_eq!(s.log_sigma[0], LOG_SIGMA_BOUND);
        assert!(s.sigma[0].is_finite());
    }

    #[test]
    fn sample_z_cases() {
        let stats = |mu: f64, ls: f64| GaussianStats {
            mu: v(&[mu]),
            log_sigma: v(&[ls]),
            sigma: v(&[ls.exp()]),
        };
        assert_eq!(sample_z(&stats(0.3, 0.5), &v(&[0.0]))[0], 0.3);
        assert_eq!(sample_z(&stats(0.0, 0.0), &v(&[1.5]))[0], 1.5);
        assert_abs_diff_eq!(sample_z(&stats(0.2, 2f64.ln()), &v(&[-1.0]))[0], -1.8, epsilon = 1e-12);
    }

    #[test]
    fn context_step_scalar_oracle() {
        // h_t = 0.5·1 + 0.5·0.6 with the drive split over the recurrent and z terms.
        let cfg = scalar_config(2.0);
        let mut p = NetworkParams::zeros(&cfg);
        p.layers[0].w_rec[(0, 0)] = 0.4;
        p.layers[0].w_zh[(0, 0)] = 0.1;
        p.layers[0].b_h[0] = 0.1;
        let mut prev = LatentState::initial(&cfg);
        prev.layers[0].h[0] = 1.0;
        prev.layers[0].d[0] = 1.0;
        let out = context_step(&prev, &[v(&[1.0])], &p, &cfg).unwrap();
        assert_abs_diff_eq!(out[0].0[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].1[0], 0.664_036_770_267_848_9, epsilon = 1e-12);
    }

    #[test]
    fn context_step_zero_weights_decay_geometrically() {
        let cfg = NetworkConfig::default();
        let p = NetworkParams::zeros(&cfg);
        let mut prev = LatentState::initial(&cfg);
        prev.layers[1].h = DVector::from_element(10, 2.0);
        prev.layers[1].d = prev.layers[1].h.map(f64::tanh);
        let z = vec![DVector::zeros(4), DVector::zeros(1)];
        let out = context_step(&prev, &z, &p, &cfg).unwrap();
        assert!(out[1].0.iter().all(|h| (h - 1.8).abs() < 1e-12));
        assert!(out[0].0.iter().all(|h| *h == 0.0));
    }

    #[test]
    fn unit_timescale_has_no_leak() {
        let cfg = scalar_config(1.0);
        let mut p = NetworkParams::zeros(&cfg);
        p.layers[0].b_h[0] = 0.25;
        let mut prev = LatentState::initial(&cfg);
        prev.layers[0].h[0] = 5.0;
        let out = context_step(&prev, &[v(&[0.0])], &p, &cfg).unwrap();
        assert_abs_diff_eq!(out[0].0[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn decode_output_cases() {
        let cfg = scalar_config(1.0);
        let mut p = NetworkParams::zeros(&cfg);
        let f = decode_output(&v(&[0.3]), &p, &cfg);
        assert_eq!(f.get(0), &[0.5, 0.5]);
        p.b_out = v(&[1.0, 0.0]);
        let f = decode_output(&v(&[0.3]), &p, &cfg);
        assert_abs_diff_eq!(f.get(0)[0], 0.731_058_578_630_004_9, epsilon = 1e-12);
        assert_abs_diff_eq!(f.get(0)[1], 0.268_941_421_369_995_1, epsilon = 1e-12);
        p.b_out = v(&[800.0, -800.0]);
        let f = decode_output(&v(&[0.0]), &p, &cfg);
        assert!(f.get(0)[0] > 1.0 - 1e-12);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_gaussian(&[0.2], &[0.7], &[0.2], &[0.7]).unwrap(), vec![0.0]);
        assert_abs_diff_eq!(kl_gaussian(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap()[0], 0.5, epsilon = 1e-15);
        let expected = 0.5f64.ln() + 2.0 - 0.5;
        assert_abs_diff_eq!(kl_gaussian(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap()[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.806_852_819_440_054_7, epsilon = 1e-12);
        assert!(matches!(
            kl_gaussian(&[0.0], &[0.0], &[0.0], &[1.0]),
            Err(CoreError::Domain(_))
        ));
    }

    fn single_step_rollout(cfg: &NetworkConfig, p: &NetworkParams) -> Rollout {
        let init = LatentState::initial(cfg);
        let a = vec![vec![DVector::zeros(1)]];
        rollout_posterior(&init, &a, &a, &mut Noise::Zeros, p, cfg).unwrap()
    }

    #[test]
    fn elbo_scalar_oracle() {
        let mut cfg = scalar_config(1.0);
        cfg.set_regulation(0.0);
        let mut p = NetworkParams::zeros(&cfg);
        p.b_out = v(&[1.0, 0.0]);
        let r = single_step_rollout(&cfg, &p);
        let target = SoftmaxFrame::new(2, vec![1.0, 0.0]).unwrap();
        let e = elbo(&[target], &r, &cfg).unwrap();
        assert_abs_diff_eq!(e.elbo, -0.313_261_687_518_222_8, epsilon = 1e-12);
        assert_eq!(e.regulation, 0.0);
    }

    #[test]
    fn elbo_matching_output_is_negative_entropy() {
        let cfg = scalar_config(1.0);
        let mut p = NetworkParams::zeros(&cfg);
        p.b_out = v(&[0.4, -0.2]);
        // Posterior equal to prior: KL = 0.
        let r = single_step_rollout(&cfg, &p);
        let x = r.outputs[0].clone();
        let e = elbo(std::slice::from_ref(&x), &r, &cfg).unwrap();
        let entropy: f64 = -x.get(0).iter().map(|q| q * q.ln()).sum::<f64>();
        assert_abs_diff_eq!(e.accuracy, -entropy, epsilon = 1e-12);
        assert_eq!(e.regulation, 0.0);
    }

    #[test]
    fn elbo_ignores_kl_when_unregulated() {
        let mut cfg = scalar_config(1.0);
        let mut p = NetworkParams::zeros(&cfg);
        p.layers[0].posterior.b_mu[0] = 0.8;
        let target = SoftmaxFrame::new(2, vec![0.3, 0.7]).unwrap();
        let with_w = elbo(std::slice::from_ref(&target), &single_step_rollout(&cfg, &p), &cfg).unwrap();
        assert!(with_w.regulation > 0.0);
        cfg.set_regulation(0.0);
        let without = elbo(&[target], &single_step_rollout(&cfg, &p), &cfg).unwrap();
        assert_eq!(without.elbo, without.accuracy);
        assert_eq!(with_w.accuracy, without.accuracy);
    }

    #[test]
    fn elbo_rejects_length_mismatch() {
        let cfg = scalar_config(1.0);
        let p = NetworkParams::zeros(&cfg);
        let r = single_step_rollout(&cfg, &p);
        assert!(matches!(elbo(&[], &r, &cfg), Err(CoreError::Length { .. })));
    }

    #[test]
    fn generate_prior_is_deterministic_with_zero_noise() {
        let cfg = NetworkConfig::default();
        let p = NetworkParams::init(&cfg, 11);
        let init = LatentState::initial(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = generate_prior(&init, 30, EpsMode::Zeros, &mut rng, &p, &cfg).unwrap();
        let b = generate_prior(&init, 30, EpsMode::Zeros, &mut rng, &p, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(generate_prior(&init, 0, EpsMode::Zeros, &mut rng, &p, &cfg).is_err());
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let s1 = generate_prior(&init, 10, EpsMode::Sampled, &mut r1, &p, &cfg).unwrap();
        let s2 = generate_prior(&init, 10, EpsMode::Sampled, &mut r2, &p, &cfg).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, a.clone());
    }

    #[test]
    fn shared_heads_make_posterior_equal_prior_rollout() {
        let cfg = NetworkConfig::default();
        let mut p = NetworkParams::init(&cfg, 12);
        for layer in &mut p.layers {
            layer.posterior = layer.prior.clone();
        }
        let init = LatentState::initial(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = generate_prior(&init, 12, EpsMode::Sampled, &mut rng, &p, &cfg).unwrap();
        let eps = prior.eps_record();
        let zeros: Vec<Vec<DVector<f64>>> = (0..12)
            .map(|_| vec![DVector::zeros(4), DVector::zeros(1)])
            .collect();
        let post = rollout_posterior(&init, &zeros, &zeros, &mut Noise::Replay(&eps), &p, &cfg).unwrap();
        for (a, b) in prior.steps.iter().zip(&post.steps) {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                assert_eq!(la.d, lb.d);
                assert_eq!(la.z, lb.z);
            }
        }
        assert_eq!(prior.outputs, post.outputs);
    }

    #[test]
    fn replay_requires_record() {
        let cfg = scalar_config(1.0);
        let p = NetworkParams::zeros(&cfg);
        let init = LatentState::initial(&cfg);
        let a = vec![vec![DVector::zeros(1)]; 2];
        let record = vec![vec![v(&[0.1])]];
        let err = rollout_posterior(&init, &a, &a, &mut Noise::Replay(&record), &p, &cfg);
        assert!(matches!(err, Err(CoreError::Replay(_))));
    }

    #[test]
    fn softmax_frame_validation() {
        assert!(SoftmaxFrame::new(2, vec![0.5, 0.5, 1.0, 0.0]).is_ok());
        assert!(SoftmaxFrame::new(2, vec![0.5, 0.6]).is_err());
        assert!(SoftmaxFrame::new(2, vec![0.5, 0.5, 1.0]).is_err());
    }
}
