//! Offline stages shared by the command line and the tests: training,
//! observer fitting, generation and their summary statistics.

use vcbot_core::deliberation::Position;
use vcbot_core::io::{encode_primitives, PrimitiveSet, RunConfig};
use vcbot_core::observer::{fit_observer, prior_rollouts, ObserverCheckpoint, ObserverRun};
use vcbot_core::train::checkpoint::ModelCheckpoint;
use vcbot_core::train::{regenerate, train_from, ReportRow, TrainingReport};
use vcbot_core::SoftmaxEncoder;

use crate::error::{Result, ServiceError};

pub struct TrainOutput {
    pub checkpoint: ModelCheckpoint,
    pub report: TrainingReport,
    pub stopped_early: Option<String>,
}

/// Trains on `cycles` back-to-back repetitions of every primitive.
pub fn train_model<F: FnMut(&ReportRow)>(cfg: &RunConfig, prims: &PrimitiveSet, on_epoch: F) -> Result<TrainOutput> {
    let encoder = SoftmaxEncoder::from_config(&cfg.network)?;
    let set = encode_primitives(&prims.tiled(cfg.train.cycles), &encoder)?;
    let model = train_from(&set, &cfg.network, &cfg.train, None, on_epoch)?;
    Ok(TrainOutput {
        checkpoint: ModelCheckpoint {
            config: cfg.network.clone(),
            params: model.params,
            windows: model.windows,
            adam: model.adam,
        },
        report: model.report,
        stopped_early: model.stopped_early,
    })
}

/// Decoded prior rollouts of every trained primitive.
pub fn rollouts(model: &ModelCheckpoint, steps: usize) -> Result<Vec<Vec<Position>>> {
    Ok(prior_rollouts(&model.params, &model.windows, &model.config, steps)?)
}

pub fn fit_observer_for(cfg: &RunConfig, model: &ModelCheckpoint, labels: &[String]) -> Result<(ObserverCheckpoint, ObserverRun)> {
    if labels.len() != model.windows.len() {
        return Err(ServiceError::Mismatch(format!(
            "{} labels for a model trained on {} primitives",
            labels.len(),
            model.windows.len()
        )));
    }
    let rolls = rollouts(model, cfg.observer.rollout_steps)?;
    let run = fit_observer(&rolls, &cfg.observer)?;
    let ckpt = ObserverCheckpoint {
        config: cfg.observer.clone(),
        labels: labels.to_vec(),
        net: run.net.clone(),
    };
    Ok((ckpt, run))
}

/// `steps` decoded positions of the prior rollout of primitive `index`.
pub fn generate(model: &ModelCheckpoint, index: usize, steps: usize) -> Result<Vec<Position>> {
    let window = model.windows.get(index).ok_or_else(|| {
        ServiceError::Mismatch(format!("model has {} primitives, asked for #{index}", model.windows.len()))
    })?;
    let encoder = SoftmaxEncoder::from_config(&model.config)?;
    let roll = regenerate(window, steps, &model.params, &model.config)?;
    Ok(roll
        .outputs
        .iter()
        .map(|o| {
            let d = encoder.decode(o);
            [d[0], d[1]]
        })
        .collect())
}

/// Root mean squared Euclidean distance between paired positions.
pub fn rmse(a: &[Position], b: &[Position]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return f64::NAN;
    }
    let se: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum();
    (se / n as f64).sqrt()
}

/// Prior regeneration error of every primitive against its reference cycle.
pub fn regeneration_rmse(model: &ModelCheckpoint, prims: &PrimitiveSet) -> Result<Vec<f64>> {
    prims
        .primitives
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(rmse(&generate(model, i, p.rows.len())?, &p.rows)))
        .collect()
}

/// Least-squares slope of N-ELBO against epoch over the last `last` rows.
pub fn nelbo_slope(rows: &[ReportRow], last: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(last)..];
    let n = tail.len() as f64;
    if tail.len() < 2 {
        return f64::NAN;
    }
    let mx = tail.iter().map(|r| r.epoch as f64).sum::<f64>() / n;
    let my = tail.iter().map(|r| r.nelbo).sum::<f64>() / n;
    let sxy: f64 = tail.iter().map(|r| (r.epoch as f64 - mx) * (r.nelbo - my)).sum();
    let sxx: f64 = tail.iter().map(|r| (r.epoch as f64 - mx).powi(2)).sum();
    sxy / sxx
}

/// Relative fall of the posterior reconstruction error from the first row
/// to the last.
pub fn post_rec_drop(rows: &[ReportRow]) -> f64 {
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if a.post_rec > 0.0 => 1.0 - b.post_rec / a.post_rec,
        _ => f64::NAN,
    }
}
