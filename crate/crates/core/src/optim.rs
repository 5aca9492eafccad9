//! Loss functions and optimizers.
//!
//! Entropy (the adaptation objective) and cross-entropy (source training)
//! are built on the graph so gradients come from the same backward pass the
//! rest of the stack uses. Plain SGD drives adaptation; Adam is reserved
//! for source pretraining.

use crate::model::ParameterVector;
use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};

/// A loss value paired with its parameter-aligned gradient.
#[derive(Debug, Clone)]
pub struct LossValue<S> {
    pub value: f64,
    pub grad: ParameterVector<S>,
}

/// Appends the mean prediction entropy of `logits` \[n,C\] to the graph:
/// `-(1/n) sum_i sum_c p(c|x_i) log p(c|x_i)` with `p = softmax(logits)`,
/// computed through log-softmax for stability. The result lies in
/// `[0, ln C]`.
pub fn entropy_loss<S: Scalar>(g: &mut Graph<S>, logits: NodeId) -> Result<NodeId, TensorError> {
    if !g.value(logits).all_finite() {
        return Err(TensorError::NonFinite("entropy_loss logits"));
    }
    let n = g.value(logits).shape()[0];
    let logp = g.log_softmax(logits)?;
    let p = g.exp(logp);
    let plogp = g.mul(p, logp)?;
    let total = g.sum(plogp);
    let neg = g.neg(total);
    let scale = g.constant(Tensor::scalar(S::from_f64(1.0 / n as f64)));
    g.mul(neg, scale)
}

/// Appends the mean negative log-likelihood of the labels:
/// `-(1/n) sum_i log p(y_i|x_i)`.
pub fn cross_entropy_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId, TensorError> {
    let shape = g.value(logits).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{n} logit rows vs {} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::Invalid(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let logp = g.log_softmax(logits)?;
    let mut onehot = vec![S::zero(); n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = S::one();
    }
    let mask = g.constant(Tensor::from_vec(vec![n, c], onehot)?);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    let neg = g.neg(total);
    let scale = g.constant(Tensor::scalar(S::from_f64(1.0 / n as f64)));
    g.mul(neg, scale)
}

/// Entropy of a logits tensor without touching any graph; used for metrics.
pub fn entropy_value<S: Scalar>(logits: &Tensor<S>) -> f64 {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    let data = logits.data();
    let mut acc = 0.0f64;
    for r in 0..n {
        let row: Vec<f64> = data[r * c..(r + 1) * c].iter().map(|v| v.as_f64()).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in row {
            let lp = v - lse;
            acc -= lp.exp() * lp;
        }
    }
    acc / n as f64
}

/// One plain gradient-descent step on the masked coordinates:
/// `theta' = theta - eta * grad` where the mask is set, unchanged elsewhere.
pub fn sgd_step<S: Scalar>(
    theta: &ParameterVector<S>,
    grad: &ParameterVector<S>,
    eta: f64,
    mask: &[bool],
) -> Result<ParameterVector<S>, crate::model::ModelError> {
    check_aligned(theta, grad, mask.len())?;
    let eta = S::from_f64(eta);
    let mut out = theta.values().to_vec();
    for ((o, &g), &m) in out.iter_mut().zip(grad.values()).zip(mask) {
        if m {
            *o = *o - eta * g;
        }
    }
    theta.with_values(out)
}

fn check_aligned<S: Scalar>(
    theta: &ParameterVector<S>,
    grad: &ParameterVector<S>,
    mask_len: usize,
) -> Result<(), crate::model::ModelError> {
    if !theta.aligned_with(grad) || mask_len != theta.len() {
        return Err(crate::model::ModelError::Misaligned {
            expected: theta.len(),
            got: if mask_len != theta.len() {
                mask_len
            } else {
                grad.len()
            },
        });
    }
    Ok(())
}

/// Adam moment state. beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> AdamState<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![S::zero(); dim],
            v: vec![S::zero(); dim],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[S], &[S]) {
        (&self.m, &self.v)
    }
}

/// Standard bias-corrected Adam update over the full vector.
pub fn adam_step<S: Scalar>(
    state: &mut AdamState<S>,
    theta: &ParameterVector<S>,
    grad: &ParameterVector<S>,
    lr: f64,
) -> Result<ParameterVector<S>, crate::model::ModelError> {
    check_aligned(theta, grad, state.m.len())?;
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let one = S::one();
    let corr1 = S::from_f64(1.0 - ADAM_BETA1.powi(t));
    let corr2 = S::from_f64(1.0 - ADAM_BETA2.powi(t));
    let eps = S::from_f64(ADAM_EPS);
    let lr = S::from_f64(lr);

    let mut out = theta.values().to_vec();
    for i in 0..out.len() {
        let g = grad.values()[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mhat = state.m[i] / corr1;
        let vhat = state.v[i] / corr2;
        out[i] = out[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    theta.with_values(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec, ParameterVector};
    use crate::rng::Xoshiro256StarStar;

    fn scalar_loss(g: &Graph<f64>, id: NodeId) -> f64 {
        g.value(id).data()[0]
    }

    fn entropy_of(logit_rows: Vec<Vec<f64>>) -> f64 {
        let n = logit_rows.len();
        let c = logit_rows[0].len();
        let flat: Vec<f64> = logit_rows.into_iter().flatten().collect();
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(vec![n, c], flat).unwrap());
        let loss = entropy_loss(&mut g, z).unwrap();
        scalar_loss(&g, loss)
    }

    #[test]
    fn uniform_logits_hit_max_entropy() {
        let v = entropy_of(vec![vec![0.0; 10]]);
        assert!((v - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_logits_have_zero_entropy() {
        let mut row = vec![0.0; 10];
        row[0] = 1000.0;
        let v = entropy_of(vec![row]);
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn two_row_batch_averages_row_entropies() {
        // Scalar oracle: row 1 uniform over 2 classes -> ln 2;
        // row 2 with p = [0.9, 0.1] -> -(0.9 ln 0.9 + 0.1 ln 0.1).
        let row2_entropy = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((row2_entropy - 0.325083).abs() < 1e-6);
        let expected = (2.0f64.ln() + row2_entropy) / 2.0;
        // logits realizing p = [0.9, 0.1]: log-odds split
        let v = entropy_of(vec![vec![0.0, 0.0], vec![0.9f64.ln(), 0.1f64.ln()]]);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn entropy_rejects_non_finite_logits() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            entropy_loss(&mut g, z),
            Err(TensorError::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_scalar_cases() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(vec![1, 10], vec![0.0; 10]).unwrap());
        let loss = cross_entropy_loss(&mut g, z, &[4]).unwrap();
        assert!((scalar_loss(&g, loss) - 10.0f64.ln()).abs() < 1e-12);

        // perfectly confident and correct
        let mut g = Graph::new();
        let mut row = vec![0.0; 10];
        row[7] = 1000.0;
        let z = g.leaf(Tensor::from_vec(vec![1, 10], row).unwrap());
        let loss = cross_entropy_loss(&mut g, z, &[7]).unwrap();
        assert!(scalar_loss(&g, loss) < 1e-6);

        // p = [0.7, 0.3], label 1 -> -ln 0.3
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(vec![1, 2], vec![0.7f64.ln(), 0.3f64.ln()]).unwrap());
        let loss = cross_entropy_loss(&mut g, z, &[1]).unwrap();
        assert!((scalar_loss(&g, loss) - 1.203973).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(vec![1, 3], vec![0.0; 3]).unwrap());
        assert!(cross_entropy_loss(&mut g, z, &[3]).is_err());
    }

    fn tiny_params(vals: Vec<f64>) -> ParameterVector<f64> {
        let spec = ModelSpec::mlp((1, 1, vals.len() / 2), vec![], 2).without_bias();
        ParameterVector::new(spec.layout(), vals).unwrap()
    }

    #[test]
    fn sgd_zero_rate_is_identity() {
        let theta = tiny_params(vec![1.0, 2.0]);
        let grad = theta.with_values(vec![3.0, -4.0]).unwrap();
        let out = sgd_step(&theta, &grad, 0.0, &[true, true]).unwrap();
        assert_eq!(out.values(), theta.values());
    }

    #[test]
    fn sgd_step_applies_masked_update() {
        let theta = tiny_params(vec![1.0, 1.0]);
        let grad = theta.with_values(vec![1.0, 2.0]).unwrap();
        let out = sgd_step(&theta, &grad, 0.5, &[true, true]).unwrap();
        assert_eq!(out.values(), &[0.5, 0.0]);
        let masked = sgd_step(&theta, &grad, 0.5, &[false, true]).unwrap();
        assert_eq!(masked.values(), &[1.0, 0.0]);
    }

    #[test]
    fn adam_zero_gradient_leaves_theta() {
        let theta = tiny_params(vec![0.3, -0.7]);
        let grad = theta.zeros_like();
        let mut state = AdamState::new(2);
        let out = adam_step(&mut state, &theta, &grad, 1e-3).unwrap();
        assert_eq!(out.values(), theta.values());
        let (m, v) = state.moments();
        assert!(m.iter().all(|&x| x == 0.0));
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With constant gradient 1 the bias-corrected first step is
        // lr / (1 + eps), i.e. lr to 8 digits.
        let theta = tiny_params(vec![0.0, 0.0]);
        let grad = theta.with_values(vec![1.0, 1.0]).unwrap();
        let mut state = AdamState::new(2);
        let lr = 1e-3;
        let out = adam_step(&mut state, &theta, &grad, lr).unwrap();
        for &v in out.values() {
            assert!((v + lr).abs() < 1e-10, "step {v}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let theta = tiny_params(vec![0.1, 0.2]);
        let grad = theta.with_values(vec![0.5, -0.25]).unwrap();
        let run = || {
            let mut state = AdamState::new(2);
            let a = adam_step(&mut state, &theta, &grad, 1e-2).unwrap();
            let b = adam_step(&mut state, &a, &grad, 1e-2).unwrap();
            b.values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn entropy_grad_matches_finite_differences_through_model() {
        use crate::model::{forward_graph, BnRunningStats};
        use crate::tensor::{finite_difference_grad, BnMode};

        let spec = ModelSpec::mlp((1, 1, 3), vec![4], 2);
        let params: ParameterVector<f64> =
            build_model(&spec, &mut Xoshiro256StarStar::seeded(31));
        let mut rng = Xoshiro256StarStar::seeded(33);
        let images =
            Tensor::from_vec(vec![5, 1, 1, 3], (0..15).map(|_| rng.next_f64()).collect())
                .unwrap();

        let mut stats = BnRunningStats::init(&spec);
        let pass =
            forward_graph(&spec, &params, &images, BnMode::Eval, &mut stats, true).unwrap();
        let mut g = pass.graph;
        let loss = entropy_loss(&mut g, pass.logits).unwrap();
        let grads = g.backward(loss).unwrap();
        let pass_nodes = pass.param_nodes;
        let mut analytic = params.zeros_like();
        for (entry, node) in params.layout().entries().iter().zip(&pass_nodes) {
            if let Some(gr) = grads.get(*node) {
                analytic.values_mut()[entry.offset..entry.offset + entry.len()]
                    .copy_from_slice(gr.data());
            }
        }

        let f = |theta: &[f64]| -> f64 {
            let p = params.with_values(theta.to_vec()).unwrap();
            let mut st = BnRunningStats::init(&spec);
            let logits =
                crate::model::forward_eval(&spec, &p, &images, BnMode::Eval, &mut st).unwrap();
            entropy_value(&logits)
        };
        let numeric = finite_difference_grad(f, params.values(), 1e-5);
        for (i, (&a, &n)) in analytic.values().iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!((a - n).abs() / denom < 1e-4, "coord {i}: {a} vs {n}");
        }
    }
}
