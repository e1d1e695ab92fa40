//! Dense feed-forward networks over a flat parameter vector.
//!
//! A network is a stack of affine layers `z = x·W + b`. Hidden layers apply
//! the configured activation; the last layer produces raw logits. All
//! parameters live in one [`ParamVector`] whose layout is a pure function of
//! the [`ModelSpec`]: for each layer in forward order, the weight matrix
//! (row-major, `fan_in x fan_out`) followed by the bias.
//!
//! Gradients are computed by a hand-written reverse pass that yields the
//! parameter gradient and the input gradient together, which is what PGD
//! needs on every attack step.

use std::ops::{Deref, DerefMut, Range};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre- and post-activation values.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    seed: u64,
}

impl ModelSpec {
    /// `layer_sizes` is `[input_dim, hidden..., class_count]`.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least an input and an output size, got {:?}",
                self.layer_sizes
            )));
        }
        if let Some(i) = self.layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidSpec(format!("layer size {i} is zero")));
        }
        if self.num_classes() < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    /// Number of affine layers (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let layers = self
            .layer_sizes
            .windows(2)
            .map(|w| {
                let slice = LayerSlice {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                slice
            })
            .collect();
        Layout {
            layers,
            total: offset,
        }
    }
}

/// Location of one layer's weights and bias inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSlice {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<LayerSlice>,
    pub total: usize,
}

/// Flat vector of all network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when both vectors have identical bit patterns.
    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Inputs with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Checks labels against `class_count` and inputs against `[lo, hi]`.
    pub fn validate(&self, class_count: usize, lo: f64, hi: f64) -> Result<()> {
        if let Some(&y) = self.labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        if let Some(v) = self
            .inputs
            .as_slice()
            .iter()
            .find(|v| !(lo..=hi).contains(*v))
        {
            return Err(Error::InvalidArgument(format!(
                "input value {v} outside [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Gradients of the mean loss with respect to parameters and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub param_grad: ParamVector,
    pub input_grad: Matrix,
}

/// Pre- and post-activation values of every layer for one batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `pre[l]` is `x·W + b` for layer `l`.
    pub pre: Vec<Matrix>,
    /// `post[l]` is the activation of `pre[l]`; for the output layer it is the logits.
    pub post: Vec<Matrix>,
}

impl Forward {
    pub fn logits(&self) -> &Matrix {
        self.post.last().expect("at least one layer")
    }

    /// Post-activation outputs of the hidden layers only.
    pub fn hidden(&self) -> &[Matrix] {
        &self.post[..self.post.len() - 1]
    }

    /// Output of layer `l` (hidden activation, or logits for the last layer).
    pub fn layer_output(&self, l: usize) -> Option<&Matrix> {
        self.post.get(l)
    }
}

/// Xavier-uniform weights, zero biases, drawn from a stream seeded by `spec.seed`.
pub fn init_params(spec: &ModelSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = spec.layout();
    let mut params = ParamVector::zeros(layout.total);
    for layer in &layout.layers {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut params[layer.weights()] {
            *w = rng.gen_range(-limit..limit);
        }
    }
    Ok(params)
}

fn check_params(params: &ParamVector, spec: &ModelSpec) -> Result<()> {
    let expected = spec.param_count();
    if params.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector has {} entries, spec needs {expected}",
            params.len()
        )));
    }
    Ok(())
}

fn dense(params: &[f64], layer: &LayerSlice, input: &Matrix) -> Matrix {
    let w = &params[layer.weights()];
    let b = &params[layer.biases()];
    let mut out = Matrix::zeros(input.rows(), layer.fan_out);
    for i in 0..input.rows() {
        let x = input.row(i);
        let o = out.row_mut(i);
        o.copy_from_slice(b);
        for (p, &xp) in x.iter().enumerate() {
            if xp == 0.0 {
                continue;
            }
            let wrow = &w[p * layer.fan_out..(p + 1) * layer.fan_out];
            for (oq, &wq) in o.iter_mut().zip(wrow) {
                *oq += xp * wq;
            }
        }
    }
    out
}

pub fn forward(params: &ParamVector, spec: &ModelSpec, inputs: &Matrix) -> Result<Forward> {
    check_params(params, spec)?;
    if inputs.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} features, spec expects {}",
            inputs.cols(),
            spec.input_dim()
        )));
    }
    let layout = spec.layout();
    let last = layout.layers.len() - 1;
    let mut pre = Vec::with_capacity(layout.layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(layout.layers.len());
    for (l, layer) in layout.layers.iter().enumerate() {
        let input = if l == 0 { inputs } else { &post[l - 1] };
        let z = dense(params, layer, input);
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("layer {l} forward pass")));
        }
        let a = if l == last {
            z.clone()
        } else {
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                *v = spec.activation.apply(*v);
            }
            a
        };
        pre.push(z);
        post.push(a);
    }
    Ok(Forward { pre, post })
}

/// Argmax class per row.
pub fn predict(params: &ParamVector, spec: &ModelSpec, inputs: &Matrix) -> Result<Vec<usize>> {
    let fwd = forward(params, spec, inputs)?;
    let logits = fwd.logits();
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-row cross-entropy and softmax probabilities, with max-subtraction.
fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (Vec<f64>, Matrix) {
    let mut losses = Vec::with_capacity(logits.rows());
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = probs.row_mut(i);
        let mut sum = 0.0;
        for (pq, &zq) in p.iter_mut().zip(z) {
            *pq = (zq - m).exp();
            sum += *pq;
        }
        for pq in p.iter_mut() {
            *pq /= sum;
        }
        losses.push(m + sum.ln() - z[y]);
    }
    (losses, probs)
}

fn check_labels(batch: &Batch, spec: &ModelSpec) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    if batch.inputs.rows() != batch.labels.len() {
        return Err(Error::ShapeMismatch(
            "inputs and labels differ in length".into(),
        ));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= spec.num_classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            spec.num_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the batch, forward pass only.
pub fn mean_loss(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<f64> {
    check_labels(batch, spec)?;
    let fwd = forward(params, spec, &batch.inputs)?;
    let (losses, _) = softmax_cross_entropy(fwd.logits(), &batch.labels);
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// Per-sample gradients of each sample's own loss with respect to every
/// layer's pre-activation, plus the mean loss.
struct Backprop {
    forward: Forward,
    deltas: Vec<Matrix>,
    loss: f64,
}

fn backprop(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<Backprop> {
    check_labels(batch, spec)?;
    let forward = forward(params, spec, &batch.inputs)?;
    let layout = spec.layout();
    let (losses, mut delta) = softmax_cross_entropy(forward.logits(), &batch.labels);
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    for (i, &y) in batch.labels.iter().enumerate() {
        let v = delta.get(i, y);
        delta.set(i, y, v - 1.0);
    }

    let n_layers = layout.layers.len();
    let mut deltas = vec![Matrix::zeros(0, 0); n_layers];
    for l in (0..n_layers).rev() {
        if l == 0 {
            deltas[0] = delta;
            break;
        }
        let layer = &layout.layers[l];
        let w = &params[layer.weights()];
        let pre = &forward.pre[l - 1];
        let post = &forward.post[l - 1];
        let mut below = Matrix::zeros(delta.rows(), layer.fan_in);
        for i in 0..delta.rows() {
            let d = delta.row(i);
            let out = below.row_mut(i);
            for (p, o) in out.iter_mut().enumerate() {
                let wrow = &w[p * layer.fan_out..(p + 1) * layer.fan_out];
                let s: f64 = wrow.iter().zip(d).map(|(a, b)| a * b).sum();
                *o = s * spec.activation.derivative(pre.get(i, p), post.get(i, p));
            }
        }
        if !below.is_finite() {
            return Err(Error::NonFinite(format!("layer {} backward pass", l - 1)));
        }
        deltas[l] = delta;
        delta = below;
    }
    Ok(Backprop {
        forward,
        deltas,
        loss,
    })
}

/// Mean cross-entropy loss with gradients for both parameters and inputs.
pub fn loss_and_grads(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(f64, GradPair)> {
    let bp = backprop(params, spec, batch)?;
    let layout = spec.layout();
    let n = batch.len() as f64;
    let mut grad = ParamVector::zeros(layout.total);
    for (l, layer) in layout.layers.iter().enumerate() {
        let a = if l == 0 {
            &batch.inputs
        } else {
            &bp.forward.post[l - 1]
        };
        let d = &bp.deltas[l];
        let (wr, br) = (layer.weights(), layer.biases());
        for i in 0..d.rows() {
            let di = d.row(i);
            let ai = a.row(i);
            let gw = &mut grad[wr.clone()];
            for (p, &ap) in ai.iter().enumerate() {
                if ap == 0.0 {
                    continue;
                }
                for (g, &dq) in gw[p * layer.fan_out..(p + 1) * layer.fan_out]
                    .iter_mut()
                    .zip(di)
                {
                    *g += ap * dq;
                }
            }
            for (g, &dq) in grad[br.clone()].iter_mut().zip(di) {
                *g += dq;
            }
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }

    let first = &layout.layers[0];
    let w0 = &params[first.weights()];
    let d0 = &bp.deltas[0];
    let mut input_grad = Matrix::zeros(batch.len(), first.fan_in);
    for i in 0..d0.rows() {
        let di = d0.row(i);
        for (p, g) in input_grad.row_mut(i).iter_mut().enumerate() {
            let wrow = &w0[p * first.fan_out..(p + 1) * first.fan_out];
            *g = wrow.iter().zip(di).map(|(a, b)| a * b).sum::<f64>() / n;
        }
    }

    if !grad.is_finite() || !input_grad.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok((
        bp.loss,
        GradPair {
            param_grad: grad,
            input_grad,
        },
    ))
}

/// Mean over samples of the elementwise-squared per-sample parameter
/// gradient. For a dense layer the per-sample weight gradient is the outer
/// product `a_i ⊗ δ_i`, so its square is `a_i² ⊗ δ_i²` and the mean can be
/// accumulated without materializing per-sample gradients.
pub(crate) fn mean_squared_sample_grads(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<ParamVector> {
    let bp = backprop(params, spec, batch)?;
    let layout = spec.layout();
    let n = batch.len() as f64;
    let mut out = ParamVector::zeros(layout.total);
    for (l, layer) in layout.layers.iter().enumerate() {
        let a = if l == 0 {
            &batch.inputs
        } else {
            &bp.forward.post[l - 1]
        };
        let d = &bp.deltas[l];
        let (wr, br) = (layer.weights(), layer.biases());
        for i in 0..d.rows() {
            let d2: Vec<f64> = d.row(i).iter().map(|v| v * v).collect();
            let gw = &mut out[wr.clone()];
            for (p, &ap) in a.row(i).iter().enumerate() {
                let a2 = ap * ap;
                for (g, &dq) in gw[p * layer.fan_out..(p + 1) * layer.fan_out]
                    .iter_mut()
                    .zip(&d2)
                {
                    *g += a2 * dq;
                }
            }
            for (g, &dq) in out[br.clone()].iter_mut().zip(&d2) {
                *g += dq;
            }
        }
    }
    for v in out.iter_mut() {
        *v /= n;
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("squared sample gradients".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize]) -> ModelSpec {
        ModelSpec::new(sizes.to_vec(), Activation::Relu, 7).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(&[2, 3, 2]);
        assert!(init_params(&s)
            .unwrap()
            .bitwise_eq(&init_params(&s).unwrap()));
        let other = init_params(&s.with_seed(8)).unwrap();
        assert!(!other.bitwise_eq(&init_params(&s).unwrap()));
    }

    #[test]
    fn layout_arithmetic() {
        let s = spec(&[2, 3, 2]);
        assert_eq!(s.param_count(), 17);
        assert_eq!(init_params(&s).unwrap().len(), 17);
        let layout = s.layout();
        assert_eq!(layout.layers[0].weights(), 0..6);
        assert_eq!(layout.layers[0].biases(), 6..9);
        assert_eq!(layout.layers[1].weights(), 9..15);
        assert_eq!(layout.layers[1].biases(), 15..17);
    }

    #[test]
    fn biases_start_at_zero() {
        let s = spec(&[4, 2]);
        let p = init_params(&s).unwrap();
        let b = s.layout().layers[0].biases();
        assert!(p[b].iter().all(|&v| v == 0.0));
        let limit = (6.0f64 / 6.0).sqrt();
        assert!(p[s.layout().layers[0].weights()]
            .iter()
            .all(|w| w.abs() <= limit));
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(ModelSpec::new(vec![3], Activation::Relu, 0).is_err());
        assert!(ModelSpec::new(vec![], Activation::Relu, 0).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2], Activation::Relu, 0).is_err());
        assert!(ModelSpec::new(vec![3, 1], Activation::Relu, 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let s = spec(&[3, 4, 2]);
        let p = ParamVector::zeros(s.param_count());
        let x = Matrix::from_rows(&[vec![0.1, 0.9, 0.4], vec![1.0, 0.0, 0.3]]).unwrap();
        let fwd = forward(&p, &s, &x).unwrap();
        assert!(fwd.logits().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(fwd.hidden().len(), 1);
        assert_eq!(fwd.hidden()[0].shape(), (2, 4));
    }

    #[test]
    fn single_layer_matches_matrix_multiply() {
        let s = spec(&[3, 2]);
        let p = init_params(&s).unwrap();
        let mut p = p;
        p[6] = 0.25;
        p[7] = -0.5;
        let x = Matrix::from_rows(&[vec![0.2, -0.7, 1.5], vec![0.0, 0.3, -0.1]]).unwrap();
        let fwd = forward(&p, &s, &x).unwrap();
        for i in 0..2 {
            for q in 0..2 {
                let mut want = p[6 + q];
                for k in 0..3 {
                    want += x.get(i, k) * p[k * 2 + q];
                }
                assert!((fwd.logits().get(i, q) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn relu_clamps_negative_preactivations() {
        let s = spec(&[1, 2, 2]);
        let mut p = ParamVector::zeros(s.param_count());
        p[0] = 1.0;
        p[1] = -1.0;
        let x = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let fwd = forward(&p, &s, &x).unwrap();
        assert_eq!(fwd.pre[0].row(0), &[0.5, -0.5]);
        assert_eq!(fwd.hidden()[0].row(0), &[0.5, 0.0]);
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        for c in [2usize, 3, 10] {
            let s = spec(&[2, c]);
            let p = ParamVector::zeros(s.param_count());
            let batch = Batch::new(
                Matrix::from_rows(&[vec![0.1, 0.2], vec![0.9, 0.4]]).unwrap(),
                vec![0, c - 1],
            )
            .unwrap();
            let (loss, _) = loss_and_grads(&p, &s, &batch).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_softmax_on_huge_logits() {
        let s = spec(&[1, 2]);
        let mut p = ParamVector::zeros(s.param_count());
        p[0] = 1e4;
        let batch = Batch::new(Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![1]).unwrap();
        let (loss, g) = loss_and_grads(&p, &s, &batch).unwrap();
        assert!((loss - 1e4).abs() < 1e-9);
        assert!(g.param_grad.is_finite());
    }

    #[test]
    fn shape_errors() {
        let s = spec(&[3, 2]);
        let p = ParamVector::zeros(5);
        let x = Matrix::zeros(1, 3);
        assert!(matches!(forward(&p, &s, &x), Err(Error::ShapeMismatch(_))));
        let p = ParamVector::zeros(s.param_count());
        let x = Matrix::zeros(1, 4);
        assert!(matches!(forward(&p, &s, &x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_input_names_layer() {
        let s = spec(&[1, 2]);
        let p = init_params(&s).unwrap();
        let batch = Batch::new(Matrix::from_rows(&[vec![f64::NAN]]).unwrap(), vec![0]).unwrap();
        match loss_and_grads(&p, &s, &batch) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("layer 0"), "{msg}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
