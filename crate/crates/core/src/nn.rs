//! Minimal MLP classifier on flat parameter vectors.
//!
//! Parameters are stored layer by layer: the `out x in` weight block in
//! row-major order followed by the `out` biases. Every function here is a
//! pure function of its arguments; optimizer state is passed in and returned.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{LogitsMatrix, Matrix, ProbMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArch {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
    activation: Activation,
}

/// Location of one dense layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidArch("all layer widths must be >= 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArch(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Width of the feature layer (last hidden layer), if any.
    pub fn feature_dim(&self) -> Option<usize> {
        self.hidden_dims.last().copied()
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let widths = self.widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let slot = LayerSlot {
                    weights: offset,
                    bias: offset + fan_in * fan_out,
                    fan_in,
                    fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flattened model parameters tied to an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    arch: Arc<MlpArch>,
}

impl ParamVector {
    pub fn zeros(arch: Arc<MlpArch>) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            arch,
        }
    }

    pub fn from_values(arch: Arc<MlpArch>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self { values, arch })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Arc<MlpArch>, rng: &mut R) -> Self {
        let mut values = vec![0.0; arch.param_count()];
        for slot in arch.slots() {
            let limit = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut values[slot.weights..slot.bias] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Self { values, arch }
    }

    pub fn arch(&self) -> &Arc<MlpArch> {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same architecture, new values. Values are not validated; callers
    /// producing values from arithmetic on valid vectors use this.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            arch: Arc::clone(&self.arch),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_arch(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.arch, &other.arch) || *self.arch == *other.arch
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> Self {
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &ParamVector) -> Self {
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Self {
        self.with_values(self.values.iter().map(|v| v * c).collect())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

fn check_inputs(arch: &MlpArch, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            context: "input columns",
            expected: arch.input_dim,
            actual: inputs.cols(),
        });
    }
    Ok(())
}

/// `x W^T + b` for one dense layer.
fn dense(params: &[f64], slot: LayerSlot, x: &Matrix) -> Matrix {
    let w = &params[slot.weights..slot.bias];
    let b = &params[slot.bias..slot.bias + slot.fan_out];
    let mut out = Matrix::zeros(x.rows(), slot.fan_out);
    for (n, xr) in x.row_iter().enumerate() {
        let orow = out.row_mut(n);
        for (o, dst) in orow.iter_mut().enumerate() {
            let wr = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
            *dst = b[o] + dot(xr, wr);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu_inplace(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Layer outputs of a forward pass: `acts[0]` is the input, `acts[l]` the
/// post-activation output of hidden layer `l`, the last entry the logits.
struct Trace {
    acts: Vec<Matrix>,
}

fn forward_trace(params: &ParamVector, inputs: &Matrix) -> Trace {
    let slots = params.arch.slots();
    let mut acts = Vec::with_capacity(slots.len() + 1);
    acts.push(inputs.clone());
    for (l, slot) in slots.iter().enumerate() {
        let mut z = dense(&params.values, *slot, &acts[l]);
        if l + 1 < slots.len() {
            relu_inplace(&mut z);
        }
        acts.push(z);
    }
    Trace { acts }
}

/// Logits `f(x; params)`, one row of C values per input row.
pub fn forward_logits(params: &ParamVector, inputs: &Matrix) -> Result<LogitsMatrix> {
    check_inputs(&params.arch, inputs)?;
    let mut trace = forward_trace(params, inputs);
    Ok(trace.acts.pop().expect("at least one layer"))
}

/// Post-activation output of the last hidden layer.
pub fn extract_features(params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    check_inputs(&params.arch, inputs)?;
    let slots = params.arch.slots();
    if slots.len() < 2 {
        return Err(Error::NoHiddenLayer);
    }
    let mut h = inputs.clone();
    for slot in &slots[..slots.len() - 1] {
        h = dense(&params.values, *slot, &h);
        relu_inplace(&mut h);
    }
    Ok(h)
}

/// Rowwise `softmax(temperature * z)`. The temperature multiplies the
/// logits, the same convention the logit normalization uses.
pub fn softmax(logits: &LogitsMatrix, temperature: f64) -> Result<ProbMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits"));
    }
    let mut out = logits.clone();
    for n in 0..out.rows() {
        softmax_row_inplace(out.row_mut(n), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_row_inplace(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) * temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Backpropagates `dlogits` (already scaled by the batch reduction) through
/// the network recorded in `trace`.
fn backprop(params: &ParamVector, trace: &Trace, dlogits: Matrix) -> Vec<f64> {
    let slots = params.arch.slots();
    let mut grad = vec![0.0; params.values.len()];
    let mut delta = dlogits;
    for (l, slot) in slots.iter().enumerate().rev() {
        let input = &trace.acts[l];
        let (gw, rest) = grad[slot.weights..].split_at_mut(slot.fan_in * slot.fan_out);
        let gb = &mut rest[..slot.fan_out];
        for (n, dr) in delta.row_iter().enumerate() {
            let xr = input.row(n);
            for (o, &d) in dr.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let gwr = &mut gw[o * slot.fan_in..(o + 1) * slot.fan_in];
                for (g, &x) in gwr.iter_mut().zip(xr) {
                    *g += d * x;
                }
            }
        }
        if l == 0 {
            break;
        }
        // delta for the previous layer, masked by its relu
        let w = &params.values[slot.weights..slot.bias];
        let mut prev = Matrix::zeros(delta.rows(), slot.fan_in);
        for (n, dr) in delta.row_iter().enumerate() {
            let pr = prev.row_mut(n);
            for (o, &d) in dr.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let wr = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                for (p, &wv) in pr.iter_mut().zip(wr) {
                    *p += d * wv;
                }
            }
            for (p, &a) in pr.iter_mut().zip(input.row(n)) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        delta = prev;
    }
    grad
}

/// Mean cross-entropy over the batch and its gradient.
pub fn cross_entropy_loss_grad(
    params: &ParamVector,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    check_inputs(&params.arch, inputs)?;
    if inputs.rows() == 0 {
        return Err(Error::EmptyBatch("cross_entropy_loss_grad"));
    }
    if labels.len() != inputs.rows() {
        return Err(Error::DimensionMismatch {
            context: "label count",
            expected: inputs.rows(),
            actual: labels.len(),
        });
    }
    let classes = params.arch.num_classes;
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let trace = forward_trace(params, inputs);
    let logits = trace.acts.last().expect("logits");
    let n = inputs.rows() as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(inputs.rows(), classes);
    let mut logp = vec![0.0; classes];
    for (i, &y) in labels.iter().enumerate() {
        log_softmax_row(logits.row(i), &mut logp);
        loss -= logp[y];
        let dr = dlogits.row_mut(i);
        dr.copy_from_slice(logits.row(i));
        softmax_row_inplace(dr, 1.0);
        dr[y] -= 1.0;
        dr.iter_mut().for_each(|d| *d /= n);
    }
    let grad = backprop(params, &trace, dlogits);
    Ok((loss / n, params.with_values(grad)))
}

/// Mean `KL(target || softmax(f(x; params)))` over the batch and its gradient.
pub fn kl_distill_loss_grad(
    params: &ParamVector,
    inputs: &Matrix,
    targets: &ProbMatrix,
) -> Result<(f64, ParamVector)> {
    check_inputs(&params.arch, inputs)?;
    if inputs.rows() == 0 {
        return Err(Error::EmptyBatch("kl_distill_loss_grad"));
    }
    if targets.rows() != inputs.rows() {
        return Err(Error::DimensionMismatch {
            context: "target rows",
            expected: inputs.rows(),
            actual: targets.rows(),
        });
    }
    let classes = params.arch.num_classes;
    if targets.cols() != classes {
        return Err(Error::DimensionMismatch {
            context: "target columns",
            expected: classes,
            actual: targets.cols(),
        });
    }
    for (row, t) in targets.row_iter().enumerate() {
        let sum: f64 = t.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || t.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::NotStochastic { row, sum });
        }
    }
    let trace = forward_trace(params, inputs);
    let logits = trace.acts.last().expect("logits");
    let n = inputs.rows() as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(inputs.rows(), classes);
    let mut logp = vec![0.0; classes];
    for (i, t) in targets.row_iter().enumerate() {
        log_softmax_row(logits.row(i), &mut logp);
        // probabilities go through the same softmax as `softmax`, so a model
        // distilled on its own predictions sees an exactly zero gradient
        let dr = dlogits.row_mut(i);
        dr.copy_from_slice(logits.row(i));
        softmax_row_inplace(dr, 1.0);
        for c in 0..classes {
            if t[c] > 0.0 {
                loss += t[c] * (t[c].ln() - logp[c]);
            }
            dr[c] = (dr[c] - t[c]) / n;
        }
    }
    let grad = backprop(params, &trace, dlogits);
    Ok((loss / n, params.with_values(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Slot buffers of an optimizer. For SGD only `first` (the momentum buffer)
/// is used; Adam uses both moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn sgd(len: usize) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            first: vec![0.0; len],
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn adam(len: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.first
    }
}

fn check_step(params: &ParamVector, grad: &ParamVector, state: &OptimizerState, kind: OptimizerKind) -> Result<()> {
    if grad.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "optimizer step",
            expected: params.len(),
            actual: if grad.len() != params.len() {
                grad.len()
            } else {
                state.first.len()
            },
        });
    }
    if state.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "optimizer state is {:?}, expected {kind:?}",
            state.kind
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

/// Heavy-ball momentum: `v <- momentum * v + g`, `params <- params - lr * v`.
pub fn sgd_momentum_step(
    mut params: ParamVector,
    grad: &ParamVector,
    mut state: OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<(ParamVector, OptimizerState)> {
    check_step(&params, grad, &state, OptimizerKind::SgdMomentum)?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    for ((p, v), &g) in params
        .values
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(&grad.values)
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    state.step += 1;
    Ok((params, state))
}

/// Bias-corrected Adam with the usual constants.
pub fn adam_step(
    mut params: ParamVector,
    grad: &ParamVector,
    mut state: OptimizerState,
    lr: f64,
) -> Result<(ParamVector, OptimizerState)> {
    check_step(&params, grad, &state, OptimizerKind::Adam)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, m), v), &g) in params
        .values
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
        .zip(&grad.values)
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(input: usize, hidden: &[usize], classes: usize) -> Arc<MlpArch> {
        Arc::new(MlpArch::new(input, hidden.to_vec(), classes).unwrap())
    }

    #[test]
    fn arch_validation() {
        assert!(MlpArch::new(0, vec![3], 2).is_err());
        assert!(MlpArch::new(2, vec![0], 2).is_err());
        assert!(MlpArch::new(2, vec![], 1).is_err());
        assert_eq!(MlpArch::new(3, vec![4], 2).unwrap().param_count(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ParamVector::zeros(arch(3, &[5, 4], 3));
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 3.0, 3.0]]);
        let z = forward_logits(&p, &x).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let h = extract_features(&p, &x).unwrap();
        assert_eq!(h.cols(), 4);
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let a = arch(2, &[], 2);
        let p = ParamVector::from_values(a, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let z = forward_logits(&p, &Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.0]);
        assert!(matches!(
            extract_features(&p, &Matrix::from_rows(&[[1.0, 0.0]])),
            Err(Error::NoHiddenLayer)
        ));
    }

    #[test]
    fn input_dimension_mismatch_is_named() {
        let p = ParamVector::zeros(arch(3, &[2], 2));
        match forward_logits(&p, &Matrix::zeros(1, 4)) {
            Err(Error::DimensionMismatch {
                expected, actual, ..
            }) => assert_eq!((expected, actual), (3, 4)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&Matrix::from_rows(&[[2.0_f64.ln(), 0.0]]), 1.0).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 1), 1.0 / 3.0, epsilon = 1e-15);
        let u = softmax(&Matrix::filled(1, 4, 3.3), 1.0).unwrap();
        assert!(u.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(softmax(&Matrix::from_rows(&[[f64::NAN, 0.0]]), 1.0).is_err());
        assert!(softmax(&Matrix::zeros(1, 2), 0.0).is_err());
    }

    #[test]
    fn uniform_model_cross_entropy_is_ln_c() {
        let p = ParamVector::zeros(arch(3, &[4], 7));
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, 0.0, -1.0]]);
        let (loss, _) = cross_entropy_loss_grad(&p, &x, &[0, 6]).unwrap();
        assert_abs_diff_eq!(loss, 7f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let p = ParamVector::zeros(arch(2, &[2], 2));
        assert!(matches!(
            cross_entropy_loss_grad(&p, &Matrix::zeros(0, 2), &[]),
            Err(Error::EmptyBatch(_))
        ));
        assert!(matches!(
            cross_entropy_loss_grad(&p, &Matrix::zeros(1, 2), &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn kl_rejects_non_stochastic_targets() {
        let p = ParamVector::zeros(arch(2, &[2], 2));
        let t = Matrix::from_rows(&[[0.5, 0.6]]);
        assert!(matches!(
            kl_distill_loss_grad(&p, &Matrix::zeros(1, 2), &t),
            Err(Error::NotStochastic { row: 0, .. })
        ));
    }

    #[test]
    fn kl_with_one_hot_targets_equals_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ParamVector::init(arch(3, &[5], 4), &mut rng);
        let x = Matrix::from_rows(&[[0.3, -1.0, 2.0], [1.5, 0.2, -0.7]]);
        let labels = [2, 0];
        let t = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]);
        let (ce, gce) = cross_entropy_loss_grad(&p, &x, &labels).unwrap();
        let (kl, gkl) = kl_distill_loss_grad(&p, &x, &t).unwrap();
        assert_abs_diff_eq!(ce, kl, epsilon = 1e-12);
        for (a, b) in gce.values().iter().zip(gkl.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sgd_steps() {
        let a = arch(1, &[], 2);
        let p = ParamVector::from_values(a.clone(), vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let zero = ParamVector::zeros(a.clone());
        let (q, _) = sgd_momentum_step(p.clone(), &zero, OptimizerState::sgd(4), 0.1, 0.9).unwrap();
        assert_eq!(q, p);

        let g = ParamVector::from_values(a.clone(), vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let (q, _) = sgd_momentum_step(p.clone(), &g, OptimizerState::sgd(4), 0.1, 0.0).unwrap();
        for ((qi, pi), gi) in q.values().iter().zip(p.values()).zip(g.values()) {
            assert_abs_diff_eq!(*qi, pi - 0.1 * gi, epsilon = 1e-15);
        }

        let mut bad = g.clone();
        bad.values[1] = f64::INFINITY;
        assert!(sgd_momentum_step(p, &bad, OptimizerState::sgd(4), 0.1, 0.9).is_err());
    }

    #[test]
    fn momentum_second_delta_is_one_point_nine_lr_g() {
        // v1 = g, v2 = 0.9 g + g = 1.9 g
        let a = arch(1, &[], 2);
        let p0 = ParamVector::from_values(a.clone(), vec![0.0; 4]).unwrap();
        let g = ParamVector::from_values(a, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let lr = 0.05;
        let (p1, s1) = sgd_momentum_step(p0, &g, OptimizerState::sgd(4), lr, 0.9).unwrap();
        let (p2, s2) = sgd_momentum_step(p1.clone(), &g, s1, lr, 0.9).unwrap();
        for ((a2, a1), gi) in p2.values().iter().zip(p1.values()).zip(g.values()) {
            assert_abs_diff_eq!(a2 - a1, -lr * 1.9 * gi, epsilon = 1e-14);
        }
        assert_eq!(s2.step(), 2);
    }

    #[test]
    fn adam_steps() {
        let a = arch(1, &[], 2);
        let p = ParamVector::from_values(a.clone(), vec![0.3, -0.2, 0.1, 0.0]).unwrap();
        let zero = ParamVector::zeros(a.clone());
        let (q, s) = adam_step(p.clone(), &zero, OptimizerState::adam(4), 1e-3).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.step(), 1);

        // first bias-corrected step: m_hat = g, v_hat = g^2, delta = -lr g/(|g| + eps)
        let g = ParamVector::from_values(a, vec![2.0, -0.5, 1e-3, -7.0]).unwrap();
        let lr = 3e-4;
        let (q, _) = adam_step(p.clone(), &g, OptimizerState::adam(4), lr).unwrap();
        for ((qi, pi), gi) in q.values().iter().zip(p.values()).zip(g.values()) {
            let expected = -lr * gi / (gi.abs() + ADAM_EPS);
            assert_abs_diff_eq!(qi - pi, expected, epsilon = 1e-15);
            assert_abs_diff_eq!(qi - pi, -lr * gi.signum(), epsilon = lr * 1e-4);
        }
    }

    #[test]
    fn optimizer_kind_mismatch_rejected() {
        let a = arch(1, &[], 2);
        let p = ParamVector::zeros(a.clone());
        let g = ParamVector::zeros(a);
        assert!(adam_step(p, &g, OptimizerState::sgd(4), 0.1).is_err());
    }
}
