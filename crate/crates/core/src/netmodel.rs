//! A restricted sequential network: linear (dense or low-rank) layers and
//! elementwise activations ending in a logit head.
//!
//! Provides forward evaluation, exact reverse-mode gradients of the mean
//! token cross-entropy, and vector-Jacobian products from (a subset of) the
//! logits back to any layer output. Tokens are processed one at a time in
//! batch order so gradients are bit-reproducible.

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    /// Derivative at `x`; relu uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + GELU_A * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `h = W x + b`, `W` is out×in.
    Linear {
        weight: Matrix,
        bias: Option<Vec<f64>>,
    },
    /// `h = A (Dᵀ x) + b`, `A` is out×r and `D` is in×r.
    LowRank {
        a: Matrix,
        d: Matrix,
        bias: Option<Vec<f64>>,
    },
    Activation(Activation),
}

impl Layer {
    pub fn linear(weight: Matrix, bias: Option<Vec<f64>>) -> Self {
        Layer::Linear { weight, bias }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Layer::Activation(_))
    }

    /// `(out, in)` for linear layers.
    pub fn linear_dims(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Linear { weight, .. } => Some(weight.shape()),
            Layer::LowRank { a, d, .. } => Some((a.rows(), d.rows())),
            Layer::Activation(_) => None,
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            Layer::Linear { bias, .. } | Layer::LowRank { bias, .. } => bias.as_deref(),
            Layer::Activation(_) => None,
        }
    }

    /// The dense matrix this layer applies (`A Dᵀ` for low-rank layers).
    pub fn effective_weight(&self) -> Option<Matrix> {
        match self {
            Layer::Linear { weight, .. } => Some(weight.clone()),
            Layer::LowRank { a, d, .. } => {
                Some(a.matmul(&d.transpose()).expect("factor ranks agree"))
            }
            Layer::Activation(_) => None,
        }
    }

    /// Number of stored weight parameters (biases excluded).
    pub fn weight_params(&self) -> usize {
        match self {
            Layer::Linear { weight, .. } => weight.rows() * weight.cols(),
            Layer::LowRank { a, d, .. } => a.cols() * (a.rows() + d.rows()),
            Layer::Activation(_) => 0,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = match self {
            Layer::Linear { weight, .. } => weight.matvec(x).expect("validated dims"),
            Layer::LowRank { a, d, .. } => {
                let z = d.t_matvec(x).expect("validated dims");
                a.matvec(&z).expect("validated dims")
            }
            Layer::Activation(act) => return x.iter().map(|&v| act.apply(v)).collect(),
        };
        if let Some(b) = self.bias() {
            axpy(1.0, b, &mut h);
        }
        h
    }

    /// Gradient with respect to the layer input given the gradient at its output.
    fn backward_input(&self, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
        match self {
            Layer::Linear { weight, .. } => weight.t_matvec(grad_out).expect("validated dims"),
            Layer::LowRank { a, d, .. } => {
                let z = a.t_matvec(grad_out).expect("validated dims");
                d.matvec(&z).expect("validated dims")
            }
            Layer::Activation(act) => input
                .iter()
                .zip(grad_out)
                .map(|(&x, &g)| g * act.derivative(x))
                .collect(),
        }
    }
}

/// Sequential network with a designated set of compressible layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
    vocab_size: usize,
    target_layers: Vec<usize>,
}

impl Network {
    pub fn new(
        layers: Vec<Layer>,
        input_dim: usize,
        vocab_size: usize,
        target_layers: Vec<usize>,
    ) -> Result<Self> {
        if vocab_size == 0 || input_dim == 0 {
            return Err(Error::InvalidNetwork("dimensions must be positive".into()));
        }
        let mut dim = input_dim;
        for (idx, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Linear { weight, bias } => {
                    if !weight.is_finite() {
                        return Err(Error::InvalidLayer {
                            layer: idx,
                            reason: "non-finite weight".into(),
                        });
                    }
                    check_chain(idx, dim, weight.cols())?;
                    check_bias(idx, weight.rows(), bias.as_deref())?;
                    dim = weight.rows();
                }
                Layer::LowRank { a, d, bias } => {
                    if a.cols() != d.cols() {
                        return Err(Error::InvalidLayer {
                            layer: idx,
                            reason: format!("factor ranks differ: {} vs {}", a.cols(), d.cols()),
                        });
                    }
                    check_chain(idx, dim, d.rows())?;
                    check_bias(idx, a.rows(), bias.as_deref())?;
                    dim = a.rows();
                }
                Layer::Activation(_) => {}
            }
        }
        if dim != vocab_size {
            return Err(Error::InvalidNetwork(format!(
                "final output dimension {dim} differs from vocab size {vocab_size}"
            )));
        }
        for &t in &target_layers {
            if !layers.get(t).is_some_and(Layer::is_linear) {
                return Err(Error::InvalidNetwork(format!(
                    "target {t} does not refer to a linear layer"
                )));
            }
        }
        let mut sorted = target_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != target_layers {
            return Err(Error::InvalidNetwork(
                "target layers must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            layers,
            input_dim,
            vocab_size,
            target_layers,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        &self.layers[idx]
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn target_layers(&self) -> &[usize] {
        &self.target_layers
    }

    /// Copy of the network with layer `idx` replaced; dimensions must match.
    pub fn with_layer(&self, idx: usize, layer: Layer) -> Result<Network> {
        let mut layers = self.layers.clone();
        if layers.get(idx).and_then(Layer::linear_dims) != layer.linear_dims() {
            return Err(Error::InvalidLayer {
                layer: idx,
                reason: "replacement changes layer dimensions".into(),
            });
        }
        layers[idx] = layer;
        Network::new(
            layers,
            self.input_dim,
            self.vocab_size,
            self.target_layers.clone(),
        )
    }

    /// Copy of the network with the given target layer using a dense weight.
    pub fn with_weight(&self, idx: usize, weight: Matrix) -> Result<Network> {
        let bias = self.layers[idx].bias().map(<[f64]>::to_vec);
        self.with_layer(idx, Layer::Linear { weight, bias })
    }

    /// Total stored weight parameters over the target layers.
    pub fn target_weight_params(&self) -> usize {
        self.target_layers
            .iter()
            .map(|&t| self.layers[t].weight_params())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "input to layer 0".into(),
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let next = layer.apply(&cur);
            inputs.push(cur);
            outputs.push(next.clone());
            cur = next;
        }
        Ok(ForwardTrace {
            logits: cur,
            layer_inputs: inputs,
            layer_outputs: outputs,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Gradients with respect to every layer output for an upstream gradient
    /// on the logits. Entry `k` is `∂/∂ output_k`.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Vec<Vec<f64>> {
        let n = self.layers.len();
        let mut out_grads = vec![Vec::new(); n];
        let mut g = grad_logits.to_vec();
        for k in (0..n).rev() {
            let next = self.layers[k].backward_input(&trace.layer_inputs[k], &g);
            out_grads[k] = std::mem::replace(&mut g, next);
        }
        out_grads
    }

    /// `(J^{(ℓ)})ᵀ v` where `J^{(ℓ)}` is the Jacobian of the selected logits
    /// `z[topk_indices]` with respect to the output of layer `layer`.
    pub fn vjp_from_logits(
        &self,
        x: &[f64],
        v: &[f64],
        topk_indices: &[usize],
        layer: usize,
    ) -> Result<Vec<f64>> {
        if layer >= self.layers.len() || !self.layers[layer].is_linear() {
            return Err(Error::InvalidLayer {
                layer,
                reason: "not a linear layer".into(),
            });
        }
        let trace = self.forward(x)?;
        let grad = self.scatter_logit_vector(v, topk_indices)?;
        Ok(self.backward(&trace, &grad).swap_remove(layer))
    }

    pub(crate) fn scatter_logit_vector(&self, v: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
        if v.len() != indices.len() {
            return Err(Error::DimensionMismatch {
                context: "probe vector vs support".into(),
                expected: indices.len(),
                got: v.len(),
            });
        }
        let mut grad = vec![0.0; self.vocab_size];
        for (&idx, &val) in indices.iter().zip(v) {
            if idx >= self.vocab_size {
                return Err(Error::InvalidTarget {
                    index: idx,
                    vocab: self.vocab_size,
                });
            }
            grad[idx] += val;
        }
        Ok(grad)
    }
}

fn check_chain(layer: usize, have: usize, want: usize) -> Result<()> {
    if have != want {
        return Err(Error::DimensionMismatch {
            context: format!("input to layer {layer}"),
            expected: want,
            got: have,
        });
    }
    Ok(())
}

fn check_bias(layer: usize, rows: usize, bias: Option<&[f64]>) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != rows {
            return Err(Error::DimensionMismatch {
                context: format!("bias of layer {layer}"),
                expected: rows,
                got: b.len(),
            });
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLayer {
                layer,
                reason: "non-finite bias".into(),
            });
        }
    }
    Ok(())
}

/// Per-layer activations recorded by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    /// `layer_inputs[k]` is exactly what layer `k` consumed.
    pub layer_inputs: Vec<Vec<f64>>,
    pub layer_outputs: Vec<Vec<f64>>,
}

/// Calibration tokens: one input row and one target index per token.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch {
    inputs: Matrix,
    targets: Vec<usize>,
}

impl CalibrationBatch {
    pub fn new(inputs: Matrix, targets: Vec<usize>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::DimensionMismatch {
                context: "calibration targets".into(),
                expected: inputs.rows(),
                got: targets.len(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn input(&self, t: usize) -> &[f64] {
        self.inputs.row(t)
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Checks the batch against a network: non-empty, matching input width
    /// and in-range targets.
    pub fn validate_for(&self, net: &Network) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if self.inputs.cols() != net.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "calibration input width".into(),
                expected: net.input_dim(),
                got: self.inputs.cols(),
            });
        }
        if let Some(&bad) = self.targets.iter().find(|&&t| t >= net.vocab_size()) {
            return Err(Error::InvalidTarget {
                index: bad,
                vocab: net.vocab_size(),
            });
        }
        Ok(())
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `KL(p ‖ softmax(z))` for a reference distribution given by its logits.
pub fn kl_from_logits(reference: &[f64], z: &[f64]) -> f64 {
    let lp = log_softmax(reference);
    let lq = log_softmax(z);
    lp.iter()
        .zip(&lq)
        .map(|(&a, &b)| {
            if a == f64::NEG_INFINITY {
                0.0
            } else {
                a.exp() * (a - b)
            }
        })
        .sum()
}

/// The K highest logits (ties toward the lower index) and their
/// probabilities renormalized on that support.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub indices: Vec<usize>,
    pub probs: Vec<f64>,
}

pub fn top_k_support(logits: &[f64], k: usize) -> Result<TopK> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidTopK {
            k,
            vocab: logits.len(),
        });
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]).then(i.cmp(&j)));
    order.truncate(k);
    let selected: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    Ok(TopK {
        indices: order,
        probs: softmax(&selected),
    })
}

/// Mean cross-entropy of the network on the batch (forward only).
pub fn calibration_loss(net: &Network, batch: &CalibrationBatch) -> Result<f64> {
    batch.validate_for(net)?;
    let mut total = 0.0;
    for t in 0..batch.len() {
        let logits = net.logits(batch.input(t))?;
        total -= log_softmax(&logits)[batch.targets()[t]];
    }
    Ok(total / batch.len() as f64)
}

/// Mean `KL(p_teacher ‖ p_student)` over the batch, on the full vocabulary.
pub fn mean_kl(teacher: &Network, student: &Network, batch: &CalibrationBatch) -> Result<f64> {
    batch.validate_for(teacher)?;
    batch.validate_for(student)?;
    let mut total = 0.0;
    for t in 0..batch.len() {
        let x = batch.input(t);
        total += kl_from_logits(&teacher.logits(x)?, &student.logits(x)?);
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and the gradient of that loss with respect to the effective
/// weight of every target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradients {
    pub loss: f64,
    pub grads: BTreeMap<usize, Matrix>,
}

/// Mean token cross-entropy and `∂L/∂W` for every target layer.
pub fn calibration_loss_and_gradients(
    net: &Network,
    batch: &CalibrationBatch,
) -> Result<LossAndGradients> {
    batch.validate_for(net)?;
    loss_and_gradients(net, batch, |t, _| {
        let mut target = vec![0.0; net.vocab_size()];
        target[batch.targets()[t]] = 1.0;
        target
    })
}

/// Mean `KL(p_teacher ‖ p_net)` and its weight gradients. At `net == teacher`
/// the gradient vanishes, which is why cross-entropy is the default
/// calibration loss.
pub fn kl_loss_and_gradients(
    net: &Network,
    teacher: &Network,
    batch: &CalibrationBatch,
) -> Result<LossAndGradients> {
    batch.validate_for(net)?;
    batch.validate_for(teacher)?;
    let mut teacher_probs = Vec::with_capacity(batch.len());
    for t in 0..batch.len() {
        teacher_probs.push(softmax(&teacher.logits(batch.input(t))?));
    }
    loss_and_gradients(net, batch, |t, _| teacher_probs[t].clone())
}

fn loss_and_gradients(
    net: &Network,
    batch: &CalibrationBatch,
    target_dist: impl Fn(usize, &[f64]) -> Vec<f64>,
) -> Result<LossAndGradients> {
    let mut grads: BTreeMap<usize, Matrix> = net
        .target_layers()
        .iter()
        .map(|&l| {
            let (out, inp) = net.layer(l).linear_dims().expect("targets are linear");
            (l, Matrix::zeros(out, inp))
        })
        .collect();
    let mut total = 0.0;
    for t in 0..batch.len() {
        let trace = net.forward(batch.input(t))?;
        let logp = log_softmax(&trace.logits);
        let target = target_dist(t, &logp);
        let mut dz = Vec::with_capacity(logp.len());
        for (&lp, &p) in logp.iter().zip(&target) {
            if p > 0.0 {
                total += p * (p.ln() - lp);
            }
            dz.push(lp.exp() - p);
        }
        let out_grads = net.backward(&trace, &dz);
        for (&l, g) in grads.iter_mut() {
            let delta = &out_grads[l];
            let input = &trace.layer_inputs[l];
            for (i, &di) in delta.iter().enumerate() {
                if di != 0.0 {
                    axpy(di, input, g.row_mut(i));
                }
            }
        }
    }
    let n = batch.len() as f64;
    for g in grads.values_mut() {
        *g = g.scale(1.0 / n);
    }
    Ok(LossAndGradients {
        loss: total / n,
        grads,
    })
}

/// Latent cache projection `z = Dᵀ x`; `A z` then reproduces `A Dᵀ x`.
pub fn latent_project(d: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    d.t_matvec(x)
}

/// Central-difference helper shared by tests: `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn two_layer(seed: u64, act: Activation) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = random_matrix(&mut rng, 6, 5, 0.8);
        let b1 = random_vec(&mut rng, 6);
        let w2 = random_matrix(&mut rng, 7, 6, 0.8);
        let b2 = random_vec(&mut rng, 7);
        Network::new(
            vec![
                Layer::linear(w1, Some(b1)),
                Layer::Activation(act),
                Layer::linear(w2, Some(b2)),
            ],
            5,
            7,
            vec![0, 2],
        )
        .unwrap()
    }

    fn random_batch(seed: u64, n: usize, dim: usize, vocab: usize) -> CalibrationBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = random_matrix(&mut rng, n, dim, 1.0);
        let targets = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        CalibrationBatch::new(inputs, targets).unwrap()
    }

    #[test]
    fn identity_forward() {
        let net = Network::new(
            vec![Layer::linear(Matrix::identity(2), None)],
            2,
            2,
            vec![0],
        )
        .unwrap();
        assert_eq!(net.logits(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_fixed_point() {
        let net = Network::new(
            vec![
                Layer::linear(Matrix::from_diag(&[2.0, 2.0]), None),
                Layer::Activation(Activation::Tanh),
                Layer::linear(Matrix::identity(2), None),
            ],
            2,
            2,
            vec![0, 2],
        )
        .unwrap();
        assert_eq!(net.logits(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        let net = two_layer(3, Activation::Tanh);
        let x = [0.3, -0.2, 0.9, 0.1, -0.5];
        let trace = net.forward(&x).unwrap();
        let (
            Layer::Linear {
                weight: w1,
                bias: Some(b1),
            },
            Layer::Linear {
                weight: w2,
                bias: Some(b2),
            },
        ) = (net.layer(0), net.layer(2))
        else {
            panic!("unexpected layers");
        };
        let mut hidden = [0.0; 6];
        for i in 0..6 {
            let mut s = b1[i];
            for j in 0..5 {
                s += w1[(i, j)] * x[j];
            }
            hidden[i] = s.tanh();
        }
        for i in 0..7 {
            let mut s = b2[i];
            for j in 0..6 {
                s += w2[(i, j)] * hidden[j];
            }
            assert!((trace.logits[i] - s).abs() < 1e-14);
        }
        for (a, b) in trace.layer_inputs[2].iter().zip(&hidden) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_errors_name_the_layer() {
        let err = Network::new(
            vec![
                Layer::linear(Matrix::zeros(3, 2), None),
                Layer::linear(Matrix::zeros(2, 4), None),
            ],
            2,
            2,
            vec![],
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
        let net = two_layer(1, Activation::Relu);
        assert!(net
            .forward(&[1.0])
            .unwrap_err()
            .to_string()
            .contains("layer 0"));
        assert!(Network::new(
            vec![Layer::linear(Matrix::zeros(2, 2), None)],
            2,
            2,
            vec![1]
        )
        .is_err());
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let net = Network::new(
            vec![Layer::linear(Matrix::zeros(4, 3), Some(vec![0.0; 4]))],
            3,
            4,
            vec![0],
        )
        .unwrap();
        let batch = random_batch(1, 5, 3, 4);
        let res = calibration_loss_and_gradients(&net, &batch).unwrap();
        assert!((res.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_fails() {
        let net = two_layer(1, Activation::Tanh);
        let batch = CalibrationBatch::new(Matrix::zeros(0, 5), vec![]).unwrap();
        assert_eq!(
            calibration_loss_and_gradients(&net, &batch).unwrap_err(),
            Error::EmptyCalibration
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Gelu, Activation::Relu] {
            let net = two_layer(7, act);
            let batch = random_batch(8, 8, 5, 7);
            let res = calibration_loss_and_gradients(&net, &batch).unwrap();
            for &l in net.target_layers() {
                let w = net.layer(l).effective_weight().unwrap();
                let g = &res.grads[&l];
                let mut worst: f64 = 0.0;
                for i in 0..w.rows() {
                    for j in 0..w.cols() {
                        let loss_at = |delta: f64| {
                            let mut wp = w.clone();
                            wp[(i, j)] += delta;
                            calibration_loss(&net.with_weight(l, wp).unwrap(), &batch).unwrap()
                        };
                        let fd = central_difference(loss_at, 0.0, 1e-5);
                        let err = (fd - g[(i, j)]).abs() / g[(i, j)].abs().max(1e-6);
                        worst = worst.max(err);
                    }
                }
                assert!(worst < 1e-4, "{act:?} layer {l}: {worst}");
            }
        }
    }

    #[test]
    fn vjp_identity_and_linearity() {
        let net = Network::new(
            vec![Layer::linear(Matrix::identity(3), None)],
            3,
            3,
            vec![0],
        )
        .unwrap();
        let g = net
            .vjp_from_logits(&[0.1, 0.2, 0.3], &[1.0, 0.0, 0.0], &[0, 1, 2], 0)
            .unwrap();
        assert_eq!(g, vec![1.0, 0.0, 0.0]);

        let net = two_layer(5, Activation::Tanh);
        let x = [0.2, 0.1, -0.3, 0.7, 0.0];
        let idx = [4, 0, 2];
        assert_eq!(
            net.vjp_from_logits(&x, &[0.0; 3], &idx, 0).unwrap(),
            vec![0.0; 6]
        );
        let v1 = [0.3, -1.0, 2.0];
        let v2 = [1.5, 0.25, -0.5];
        let combo: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let g1 = net.vjp_from_logits(&x, &v1, &idx, 0).unwrap();
        let g2 = net.vjp_from_logits(&x, &v2, &idx, 0).unwrap();
        let gc = net.vjp_from_logits(&x, &combo, &idx, 0).unwrap();
        for i in 0..6 {
            assert!((gc[i] - (2.0 * g1[i] - 3.0 * g2[i])).abs() < 1e-10);
        }
        assert!(net.vjp_from_logits(&x, &v1, &[0, 1, 9], 0).is_err());
        assert!(net.vjp_from_logits(&x, &v1, &idx, 1).is_err());
    }

    #[test]
    fn vjp_matches_finite_difference_jacobian() {
        let net = two_layer(11, Activation::Tanh);
        let x = [0.5, -0.4, 0.3, 0.2, -0.1];
        let idx = [3, 1, 6, 0];
        let v = [0.7, -0.2, 0.4, 1.1];
        let trace = net.forward(&x).unwrap();
        let h0 = trace.layer_outputs[0].clone();
        // Re-run the tail of the network from a perturbed layer-0 output.
        let tail = |h: &[f64]| -> Vec<f64> {
            let a: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
            net.layer(2).apply(&a)
        };
        let g = net.vjp_from_logits(&x, &v, &idx, 0).unwrap();
        for i in 0..h0.len() {
            let phi = |d: f64| {
                let mut h = h0.clone();
                h[i] += d;
                let z = tail(&h);
                idx.iter().zip(&v).map(|(&k, &vk)| vk * z[k]).sum::<f64>()
            };
            let fd = central_difference(phi, 0.0, 1e-5);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn top_k_examples() {
        let t = top_k_support(&[3.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(t.indices, vec![0, 2]);
        let expect = softmax(&[3.0, 2.0]);
        assert_eq!(t.probs, expect);

        let z = [0.4, -1.0, 2.0, 0.0];
        let full = top_k_support(&z, 4).unwrap();
        let sm = softmax(&z);
        for (pos, &i) in full.indices.iter().enumerate() {
            assert!((full.probs[pos] - sm[i]).abs() < 1e-15);
        }
        let ties = top_k_support(&[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(ties.indices, vec![0, 1]);
        assert!(top_k_support(&z, 0).is_err());
        assert!(top_k_support(&z, 5).is_err());
    }

    #[test]
    fn latent_projection() {
        assert_eq!(
            latent_project(&Matrix::identity(3), &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let u = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(latent_project(&u, &[1.0, -1.0]).unwrap(), vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 6, 3, 1.0);
        let d = random_matrix(&mut rng, 5, 3, 1.0);
        let x = random_vec(&mut rng, 5);
        let via_latent = a.matvec(&latent_project(&d, &x).unwrap()).unwrap();
        let direct = a.matmul(&d.transpose()).unwrap().matvec(&x).unwrap();
        for (p, q) in via_latent.iter().zip(&direct) {
            assert!((p - q).abs() <= 1e-10 * q.abs().max(1.0));
        }
        assert!(latent_project(&d, &[1.0]).is_err());
    }

    #[test]
    fn low_rank_layer_forward_equals_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 4, 2, 1.0);
        let d = random_matrix(&mut rng, 3, 2, 1.0);
        let dense = a.matmul(&d.transpose()).unwrap();
        let lr = Network::new(vec![Layer::LowRank { a, d, bias: None }], 3, 4, vec![0]).unwrap();
        let de = Network::new(vec![Layer::linear(dense, None)], 3, 4, vec![0]).unwrap();
        let x = [0.1, 0.2, -0.7];
        let p = lr.logits(&x).unwrap();
        let q = de.logits(&x).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(lr.target_weight_params(), 2 * (4 + 3));
    }

    #[test]
    fn kl_gradient_vanishes_at_teacher() {
        let net = two_layer(9, Activation::Gelu);
        let batch = random_batch(3, 6, 5, 7);
        let res = kl_loss_and_gradients(&net, &net, &batch).unwrap();
        assert!(res.loss.abs() < 1e-14);
        assert!(res.grads.values().all(|g| g.max_abs() < 1e-14));
        assert!(mean_kl(&net, &net, &batch).unwrap().abs() < 1e-15);
    }
}
