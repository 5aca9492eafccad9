//! Online adaptation state machines.
//!
//! Three adapters share one interface: the Langevin-anchored adapter
//! (entropy gradient step, scaled Gaussian weight perturbation, EMA
//! anchor blend), a Tent-style baseline (entropy descent on the batch-norm
//! affine parameters only) and the non-adapting source model.
//!
//! Update order within one Langevin-anchored step is fixed: gradient,
//! noise, prediction with the perturbed weights, EMA update, then the
//! anchor blend consuming the freshly updated EMA. Noise and blend touch
//! only the masked (adapted) coordinates. Exact endpoints (`lambda == 0`,
//! `alpha` 0 or 1, `beta == 1`) short-circuit so the reductions to
//! plain entropy descent are bit-identical, not merely close.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Batch;
use crate::model::{
    forward_eval, forward_graph, param_subset_mask, BnRunningStats, ModelError, ModelSpec,
    ParameterVector,
};
pub use crate::model::SubsetSelector;
use crate::optim::{entropy_loss, sgd_step};
use crate::rng::Xoshiro256StarStar;
use crate::tensor::{BnMode, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("negative noise variance {0}")]
    NegativeVariance(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters of the Langevin-anchored adapter: learning rate,
/// noise temperature, anchor strength, EMA decay and the parameter
/// subset to adapt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LattaConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lambda")]
    pub lambda_temp: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_subset")]
    pub subset: SubsetSelector,
}

fn default_eta() -> f64 {
    1e-4
}
fn default_lambda() -> f64 {
    1e-3
}
fn default_alpha() -> f64 {
    0.9
}
fn default_beta() -> f64 {
    0.99
}
fn default_subset() -> SubsetSelector {
    SubsetSelector::All
}

impl Default for LattaConfig {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            lambda_temp: default_lambda(),
            alpha: default_alpha(),
            beta: default_beta(),
            subset: default_subset(),
        }
    }
}

impl LattaConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.eta > 0.0) {
            return Err(AdaptError::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.lambda_temp < 0.0 {
            return Err(AdaptError::InvalidConfig(format!(
                "lambda_temp must be non-negative, got {}",
                self.lambda_temp
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AdaptError::InvalidConfig(format!(
                    "{name} must lie in [0,1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Mutable state threaded through one online run: current weights, the
/// EMA anchor, the initial weights (for drift diagnostics), the run's RNG
/// stream and the step counter.
#[derive(Debug, Clone)]
pub struct AdapterState<S> {
    theta: ParameterVector<S>,
    theta_ema: ParameterVector<S>,
    theta_init: ParameterVector<S>,
    rng: Xoshiro256StarStar,
    t: u64,
}

impl<S: Scalar> AdapterState<S> {
    /// At initialization the current weights and the anchor both equal the
    /// pre-trained weights.
    pub fn init(theta0: ParameterVector<S>, seed: u64) -> Self {
        Self {
            theta: theta0.clone(),
            theta_ema: theta0.clone(),
            theta_init: theta0,
            rng: Xoshiro256StarStar::seeded(seed),
            t: 0,
        }
    }

    pub fn theta(&self) -> &ParameterVector<S> {
        &self.theta
    }

    pub fn theta_ema(&self) -> &ParameterVector<S> {
        &self.theta_ema
    }

    pub fn theta_init(&self) -> &ParameterVector<S> {
        &self.theta_init
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Snapshot of the RNG stream; lets tests replicate upcoming draws.
    pub fn rng_clone(&self) -> Xoshiro256StarStar {
        self.rng.clone()
    }
}

/// Per-batch adaptation output: predictions from the adapted weights plus
/// diagnostics (entropy of the pre-update weights, weight drift from the
/// initial model, injected noise norm).
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<S> {
    /// Arg-max class per sample, ties broken toward the lowest index.
    pub predictions: Vec<usize>,
    /// Softmax probabilities, `[n, classes]`.
    pub probabilities: Tensor<S>,
    pub entropy: f64,
    pub drift: f64,
    pub noise_norm: f64,
    /// Set when a non-finite loss or gradient made this batch a no-op.
    pub skipped: bool,
}

/// I.i.d. zero-mean Gaussian noise of the given variance via Box–Muller
/// over the run's PRNG stream. Variance 0 returns an exact zero vector
/// without consuming any draws.
pub fn gaussian_noise_sample<S: Scalar>(
    dimension: usize,
    variance: f64,
    rng: &mut Xoshiro256StarStar,
) -> Result<Vec<S>, AdaptError> {
    if variance < 0.0 {
        return Err(AdaptError::NegativeVariance(variance));
    }
    if variance == 0.0 {
        return Ok(vec![S::zero(); dimension]);
    }
    let mut buf = vec![0.0f64; dimension];
    rng.fill_gaussian(&mut buf, variance.sqrt());
    Ok(buf.into_iter().map(S::from_f64).collect())
}

/// Row-wise softmax of a `[n,C]` logits tensor, computed through the
/// shifted log-sum-exp.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    let data = logits.data();
    let mut out = vec![S::zero(); data.len()];
    for r in 0..n {
        let row = &data[r * c..(r + 1) * c];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = S::zero();
        for &v in row {
            denom = denom + (v - mx).exp();
        }
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mx).exp() / denom;
        }
    }
    Tensor::from_vec(vec![n, c], out).expect("softmax shape")
}

/// Per-row arg-max with ties broken toward the lowest class index.
pub fn argmax_rows<S: Scalar>(probs: &Tensor<S>) -> Vec<usize> {
    let shape = probs.shape();
    let (n, c) = (shape[0], shape[1]);
    let data = probs.data();
    (0..n)
        .map(|r| {
            let row = &data[r * c..(r + 1) * c];
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

enum GradOutcome<S> {
    Finite { loss: f64, grad: ParameterVector<S> },
    NonFinite { loss: f64 },
}

/// Entropy loss and parameter gradient at `params` with batch-statistic
/// normalization. Non-finite losses or masked gradient coordinates are
/// reported as an outcome, not an error: the caller skips the update.
fn entropy_grad<S: Scalar>(
    spec: &ModelSpec,
    params: &ParameterVector<S>,
    images: &Tensor<S>,
    mask: &[bool],
) -> Result<GradOutcome<S>, AdaptError> {
    let mut scratch = BnRunningStats::init(spec);
    let pass = forward_graph(spec, params, images, BnMode::Adapt, &mut scratch, true)?;
    let mut graph = pass.graph;
    let loss_node = match entropy_loss(&mut graph, pass.logits) {
        Ok(node) => node,
        Err(TensorError::NonFinite(_)) => {
            return Ok(GradOutcome::NonFinite { loss: f64::NAN });
        }
        Err(e) => return Err(e.into()),
    };
    let loss = graph.value(loss_node).data()[0].as_f64();
    if !loss.is_finite() {
        return Ok(GradOutcome::NonFinite { loss });
    }
    let grads = graph.backward(loss_node)?;
    let mut flat = params.zeros_like();
    for (entry, node) in params.layout().entries().iter().zip(&pass.param_nodes) {
        if let Some(g) = grads.get(*node) {
            flat.values_mut()[entry.offset..entry.offset + entry.len()].copy_from_slice(g.data());
        }
    }
    let masked_finite = flat
        .values()
        .iter()
        .zip(mask)
        .all(|(v, &m)| !m || v.is_finite());
    if !masked_finite {
        return Ok(GradOutcome::NonFinite { loss });
    }
    Ok(GradOutcome::Finite { loss, grad: flat })
}

fn predict<S: Scalar>(
    spec: &ModelSpec,
    params: &ParameterVector<S>,
    images: &Tensor<S>,
    mode: BnMode,
    stats: &BnRunningStats<S>,
) -> Result<(Vec<usize>, Tensor<S>), AdaptError> {
    let mut stats = stats.clone();
    let logits = forward_eval(spec, params, images, mode, &mut stats)?;
    let probs = softmax_rows(&logits);
    let preds = argmax_rows(&probs);
    Ok((preds, probs))
}

fn check_state<S: Scalar>(state: &AdapterState<S>, spec: &ModelSpec) -> Result<(), AdaptError> {
    let expected = spec.layout().total_len();
    if state.theta.len() != expected {
        return Err(AdaptError::Model(ModelError::Misaligned {
            expected,
            got: state.theta.len(),
        }));
    }
    Ok(())
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One Langevin-anchored step. In order: (a) entropy gradient at the
/// current weights with batch-statistic normalization, masked to the
/// configured subset; (b) gradient step plus N(0, 2*eta*lambda) noise on
/// the masked coordinates; (c) predictions from a fresh forward pass on
/// the perturbed weights; (d) EMA anchor update; (e) blend of the
/// perturbed weights toward the new anchor.
///
/// A non-finite loss or gradient skips the update: the weights and anchor
/// pass through unchanged, predictions come from the pre-step weights and
/// the output is flagged.
pub fn latta_step<S: Scalar>(
    state: &mut AdapterState<S>,
    spec: &ModelSpec,
    batch: &Batch<S>,
    config: &LattaConfig,
) -> Result<StepOutput<S>, AdaptError> {
    config.validate()?;
    check_state(state, spec)?;
    if batch.is_empty() {
        return Err(AdaptError::EmptyBatch);
    }
    let mask = param_subset_mask(spec, config.subset);

    let (loss, grad) = match entropy_grad(spec, &state.theta, &batch.images, &mask)? {
        GradOutcome::Finite { loss, grad } => (loss, grad),
        GradOutcome::NonFinite { loss } => return skip_step(state, spec, batch, loss),
    };

    // (b) exploratory step: theta* = theta - eta * g + eps
    let (theta_star, noise_norm) = if config.lambda_temp == 0.0 {
        // exact zero noise, no RNG draws; identical to the plain descent path
        (sgd_step(&state.theta, &grad, config.eta, &mask)?, 0.0)
    } else {
        let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let variance = 2.0 * config.eta * config.lambda_temp;
        let noise: Vec<S> = gaussian_noise_sample(masked.len(), variance, &mut state.rng)?;
        let eta = S::from_f64(config.eta);
        let mut out = state.theta.values().to_vec();
        for (k, &i) in masked.iter().enumerate() {
            out[i] = out[i] - eta * grad.values()[i] + noise[k];
        }
        let norm = l2_norm(&noise.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
        (state.theta.with_values(out)?, norm)
    };

    // (c) predictions with the post-Langevin weights
    let (predictions, probabilities) = predict(
        spec,
        &theta_star,
        &batch.images,
        BnMode::Adapt,
        &BnRunningStats::init(spec),
    )?;
    let drift = theta_star.l2_distance(&state.theta_init);

    // (d) anchor update, masked coordinates only
    if config.beta < 1.0 {
        let beta = S::from_f64(config.beta);
        let one_minus = S::from_f64(1.0 - config.beta);
        let ema = state.theta_ema.values_mut();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                ema[i] = beta * ema[i] + one_minus * theta_star.values()[i];
            }
        }
    }

    // (e) blend toward the new anchor
    let mut next = state.theta.values().to_vec();
    if config.alpha == 0.0 {
        next.copy_from_slice(theta_star.values());
    } else if config.alpha == 1.0 {
        for (i, &m) in mask.iter().enumerate() {
            if m {
                next[i] = state.theta_ema.values()[i];
            } else {
                next[i] = theta_star.values()[i];
            }
        }
    } else {
        let alpha = S::from_f64(config.alpha);
        let one_minus = S::from_f64(1.0 - config.alpha);
        for (i, &m) in mask.iter().enumerate() {
            next[i] = if m {
                one_minus * theta_star.values()[i] + alpha * state.theta_ema.values()[i]
            } else {
                theta_star.values()[i]
            };
        }
    }
    state.theta = state.theta.with_values(next)?;
    state.t += 1;

    Ok(StepOutput {
        predictions,
        probabilities,
        entropy: loss,
        drift,
        noise_norm,
        skipped: false,
    })
}

fn skip_step<S: Scalar>(
    state: &mut AdapterState<S>,
    spec: &ModelSpec,
    batch: &Batch<S>,
    loss: f64,
) -> Result<StepOutput<S>, AdaptError> {
    log::warn!(
        "non-finite loss/gradient at step {}; skipping the update",
        state.t
    );
    let (predictions, probabilities) = predict(
        spec,
        &state.theta,
        &batch.images,
        BnMode::Adapt,
        &BnRunningStats::init(spec),
    )?;
    let drift = state.theta.l2_distance(&state.theta_init);
    state.t += 1;
    Ok(StepOutput {
        predictions,
        probabilities,
        entropy: loss,
        drift,
        noise_norm: 0.0,
        skipped: true,
    })
}

/// One Tent-style step: entropy descent restricted to the batch-norm
/// affine parameters, predictions with the post-update weights, no noise
/// and no anchor. On a model without batch-norm the mask is empty and the
/// step degenerates to prediction with batch statistics.
pub fn tent_step<S: Scalar>(
    state: &mut AdapterState<S>,
    spec: &ModelSpec,
    batch: &Batch<S>,
    eta: f64,
) -> Result<StepOutput<S>, AdaptError> {
    check_state(state, spec)?;
    if batch.is_empty() {
        return Err(AdaptError::EmptyBatch);
    }
    let mask = param_subset_mask(spec, SubsetSelector::BnAffineOnly);
    let (loss, grad) = match entropy_grad(spec, &state.theta, &batch.images, &mask)? {
        GradOutcome::Finite { loss, grad } => (loss, grad),
        GradOutcome::NonFinite { loss } => return skip_step(state, spec, batch, loss),
    };
    let theta_next = sgd_step(&state.theta, &grad, eta, &mask)?;
    let (predictions, probabilities) = predict(
        spec,
        &theta_next,
        &batch.images,
        BnMode::Adapt,
        &BnRunningStats::init(spec),
    )?;
    let drift = theta_next.l2_distance(&state.theta_init);
    state.theta = theta_next;
    state.t += 1;
    Ok(StepOutput {
        predictions,
        probabilities,
        entropy: loss,
        drift,
        noise_norm: 0.0,
        skipped: false,
    })
}

/// Prediction with the pre-trained weights and running statistics; no
/// state change.
pub fn source_predict<S: Scalar>(
    spec: &ModelSpec,
    theta0: &ParameterVector<S>,
    bn_stats: &BnRunningStats<S>,
    batch: &Batch<S>,
) -> Result<StepOutput<S>, AdaptError> {
    let mut stats = bn_stats.clone();
    let logits = forward_eval(spec, theta0, &batch.images, BnMode::Eval, &mut stats)?;
    let probs = softmax_rows(&logits);
    let preds = argmax_rows(&probs);
    let entropy = crate::optim::entropy_value(&logits);
    Ok(StepOutput {
        predictions: preds,
        probabilities: probs,
        entropy,
        drift: 0.0,
        noise_norm: 0.0,
        skipped: false,
    })
}

/// The adapter choice as the harness sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "snake_case")]
pub enum AdapterKind {
    Source,
    Tent { eta: f64 },
    Latta(LattaConfig),
}

impl AdapterKind {
    pub fn name(&self) -> &'static str {
        match self {
            AdapterKind::Source => "source",
            AdapterKind::Tent { .. } => "tent",
            AdapterKind::Latta(_) => "latta",
        }
    }

    /// Single-interface step used by the online driver. The source adapter
    /// reads the checkpoint statistics and leaves the state untouched.
    pub fn step<S: Scalar>(
        &self,
        state: &mut AdapterState<S>,
        spec: &ModelSpec,
        bn_stats: &BnRunningStats<S>,
        batch: &Batch<S>,
    ) -> Result<StepOutput<S>, AdaptError> {
        match self {
            AdapterKind::Source => source_predict(spec, &state.theta_init, bn_stats, batch),
            AdapterKind::Tent { eta } => tent_step(state, spec, batch, *eta),
            AdapterKind::Latta(config) => latta_step(state, spec, batch, config),
        }
    }
}
