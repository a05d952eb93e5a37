//! Feedforward rectifier network with a hand-derived backward pass and SGD.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::rng::{Purpose, RngStream};

/// Rows evaluated per chunk in [`evaluate`] and feature extraction.
const EVAL_CHUNK: usize = 1024;

const CHECKPOINT_MAGIC: &[u8; 8] = b"PLABMLP1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64) -> Self {
        SgdConfig {
            learning_rate,
            momentum: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// `y = x W^T + b` with `weight` stored `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_transposed(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Per-layer gradients, shaped like the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LinearLayer>,
}

#[derive(Clone, Debug)]
struct ForwardCache {
    /// Input to each layer; the last entry is the feature matrix.
    inputs: Vec<Matrix>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<LinearLayer>,
    #[serde(skip)]
    velocity: Option<Vec<LinearLayer>>,
    #[serde(skip)]
    cache: Option<ForwardCache>,
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl MlpModel {
    /// He-initialized model: weights `N(0, 2/fan_in)`, biases zero.
    pub fn new(input_dim: usize, hidden_dims: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden_dims);
        dims.push(num_classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = RngStream::new(seed, Purpose::Init, k as u64);
                let data = (0..fan_in * fan_out)
                    .map(|_| std * rng.standard_normal())
                    .collect();
                LinearLayer {
                    weight: Matrix::new(fan_out, fan_in, data).expect("sized by construction"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        MlpModel {
            layers,
            velocity: None,
            cache: None,
        }
    }

    pub fn from_layers(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::InvalidArgument(format!(
                    "layer {k}: bias length {} != out dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidArgument(format!(
                    "layer {k} outputs {} units but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(MlpModel {
            layers,
            velocity: None,
            cache: None,
        })
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    /// Mutable access to parameters; drops any cached forward pass.
    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(LinearLayer::out_dim)
            .collect()
    }

    /// Width of the feature stage (input to the classifier head).
    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("nonempty").in_dim()
    }

    pub fn classifier_weight(&self) -> &Matrix {
        &self.layers.last().expect("nonempty").weight
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Hex SHA-256 over the parameter bit patterns.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weight.data().iter().chain(&l.bias) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checkpoint bytes: `PLABMLP1`, layer count, then per layer
    /// `out, in` (u32 LE) followed by weights and biases as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            for v in l.weight.data().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::InvalidArgument(format!("bad checkpoint: {detail}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let count = u32_at(take(4)?);
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let out_dim = u32_at(take(4)?);
            let in_dim = u32_at(take(4)?);
            let mut vals = take(8 * (out_dim * in_dim + out_dim))?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            let weight: Vec<f64> = vals.by_ref().take(out_dim * in_dim).collect();
            let bias: Vec<f64> = vals.collect();
            layers.push(LinearLayer {
                weight: Matrix::new(out_dim, in_dim, weight)?,
                bias,
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        MlpModel::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        MlpModel::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                left: batch.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        Ok(())
    }

    fn run(&self, batch: &Matrix, keep: bool) -> Result<(Matrix, Vec<Matrix>)> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut h = batch.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&h)?;
            if k < last {
                z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if keep || k == last {
                inputs.push(std::mem::replace(&mut h, z));
            } else {
                h = z;
            }
        }
        Ok((h, inputs))
    }

    /// Forward pass that caches intermediates for [`MlpModel::backward`].
    /// Returns `(logits N x C, features N x h_last)`.
    pub fn forward(&mut self, batch: &Matrix) -> Result<(Matrix, Matrix)> {
        let (logits, inputs) = self.run(batch, true)?;
        let features = inputs.last().expect("nonempty").clone();
        self.cache = Some(ForwardCache { inputs });
        Ok((logits, features))
    }

    /// Forward pass without touching the cache.
    pub fn infer(&self, batch: &Matrix) -> Result<(Matrix, Matrix)> {
        let (logits, mut inputs) = self.run(batch, false)?;
        Ok((logits, inputs.pop().expect("nonempty")))
    }

    /// Gradients of the loss whose logit gradient is `grad_logits`, plus an
    /// optional gradient injected directly at the features.
    pub fn backward(
        &self,
        grad_logits: &Matrix,
        extra_feature_grad: Option<&Matrix>,
    ) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForwardCache)?;
        let n = cache.inputs[0].rows();
        let last = self.layers.len() - 1;
        if grad_logits.shape() != (n, self.num_classes()) {
            return Err(Error::Shape {
                op: "backward",
                left: grad_logits.shape(),
                right: (n, self.num_classes()),
            });
        }
        if let Some(extra) = extra_feature_grad {
            if extra.shape() != cache.inputs[last].shape() {
                return Err(Error::Shape {
                    op: "backward(extra_feature_grad)",
                    left: extra.shape(),
                    right: cache.inputs[last].shape(),
                });
            }
        }

        let mut grads: Vec<LinearLayer> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.clone();
        for k in (0..self.layers.len()).rev() {
            let input = &cache.inputs[k];
            let weight = delta.transposed_matmul(input)?;
            let mut bias = vec![0.0; delta.cols()];
            for r in 0..delta.rows() {
                axpy(1.0, delta.row(r), &mut bias);
            }
            grads.push(LinearLayer { weight, bias });
            if k == 0 {
                break;
            }
            let mut g = delta.matmul(&self.layers[k].weight)?;
            if k == last {
                if let Some(extra) = extra_feature_grad {
                    g = g.add(extra)?;
                }
            }
            // Rectifier mask: the cached input is zero exactly where the unit was off.
            for (gv, &hv) in g.data_mut().iter_mut().zip(input.data()) {
                if hv <= 0.0 {
                    *gv = 0.0;
                }
            }
            delta = g;
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn apply_gradients(&mut self, grads: &Gradients, cfg: &SgdConfig) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::InvalidArgument("gradient layer count mismatch".into()));
        }
        let lr = cfg.learning_rate;
        if cfg.momentum == 0.0 {
            for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
                axpy(-lr, g.weight.data(), l.weight.data_mut());
                axpy(-lr, &g.bias, &mut l.bias);
            }
        } else {
            let vel = self.velocity.get_or_insert_with(|| {
                grads
                    .layers
                    .iter()
                    .map(|g| LinearLayer::zeros(g.in_dim(), g.out_dim()))
                    .collect()
            });
            for ((l, g), v) in self.layers.iter_mut().zip(&grads.layers).zip(vel.iter_mut()) {
                v.weight.scale(cfg.momentum);
                axpy(1.0, g.weight.data(), v.weight.data_mut());
                v.bias.iter_mut().for_each(|b| *b *= cfg.momentum);
                axpy(1.0, &g.bias, &mut v.bias);
                axpy(-lr, v.weight.data(), l.weight.data_mut());
                axpy(-lr, &v.bias, &mut l.bias);
            }
        }
        self.cache = None;
        Ok(())
    }

    /// One SGD step using the cached forward pass.
    pub fn backward_and_step(
        &mut self,
        grad_logits: &Matrix,
        extra_feature_grad: Option<&Matrix>,
        cfg: &SgdConfig,
    ) -> Result<()> {
        let grads = self.backward(grad_logits, extra_feature_grad)?;
        self.apply_gradients(&grads, cfg)
    }

    /// Features and logits for every row of `images`, computed in chunks.
    pub fn features_and_logits(&self, images: &Matrix) -> Result<(Matrix, Matrix)> {
        let n = images.rows();
        let mut feats = Vec::with_capacity(n * self.feature_dim());
        let mut logits = Vec::with_capacity(n * self.num_classes());
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (z, f) = self.infer(&images.select_rows(&idx))?;
            logits.extend_from_slice(z.data());
            feats.extend_from_slice(f.data());
            start = end;
        }
        Ok((
            Matrix::new(n, self.feature_dim(), feats)?,
            Matrix::new(n, self.num_classes(), logits)?,
        ))
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: c,
        });
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(r);
        let mut sum = 0.0;
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp();
            sum += *gj;
        }
        loss += sum.ln() - (row[y] - max);
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn evaluate(model: &MlpModel, images: &Matrix, labels: &[usize]) -> Result<f64> {
    if images.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != images.rows() {
        return Err(Error::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    let (_, logits) = model.features_and_logits(images)?;
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(weight: Matrix, bias: Vec<f64>) -> MlpModel {
        MlpModel::from_layers(vec![LinearLayer { weight, bias }]).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = MlpModel::new(4, &[3], 2, 0);
        for l in m.layers_mut() {
            l.weight.scale(0.0);
        }
        let x = Matrix::new(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 9.0]).unwrap();
        let (z, f) = m.forward(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.shape(), (2, 3));
    }

    #[test]
    fn identity_network_passes_input_through() {
        let mut m = single_layer(Matrix::identity(3), vec![0.0; 3]);
        let x = Matrix::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).unwrap();
        let (z, f) = m.forward(&x).unwrap();
        assert_eq!(z, x);
        assert_eq!(f, x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut m = MlpModel::new(4, &[3], 2, 0);
        assert!(matches!(
            m.forward(&Matrix::zeros(1, 5)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let (loss, _) = cross_entropy(&Matrix::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_loss_vanishes() {
        let mut z = Matrix::zeros(2, 3);
        z.set(0, 1, 50.0);
        z.set(1, 2, 50.0);
        let (loss, _) = cross_entropy(&z, &[1, 2]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy(&Matrix::zeros(1, 3), &[3]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn backward_needs_forward() {
        let m = MlpModel::new(2, &[], 2, 0);
        assert!(matches!(
            m.backward(&Matrix::zeros(1, 2), None),
            Err(Error::MissingForwardCache)
        ));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut m = MlpModel::new(5, &[4, 3], 2, 11);
        let before = m.clone();
        let x = Matrix::new(1, 5, vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        m.forward(&x).unwrap();
        m.backward_and_step(&Matrix::zeros(1, 2), None, &SgdConfig::new(0.1))
            .unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn single_layer_step_is_exact() {
        // dL/dW = g^T x, dL/db = g; with lr = 1, theta' = theta - grad.
        let w = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut m = single_layer(w, vec![0.5, -0.5]);
        let x = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        m.forward(&x).unwrap();
        let g = Matrix::new(1, 2, vec![0.25, -1.0]).unwrap();
        m.backward_and_step(&g, None, &SgdConfig::new(1.0)).unwrap();
        let l = &m.layers()[0];
        assert_eq!(l.weight.data(), &[0.75, 1.5, 4.0, 6.0]);
        assert_eq!(l.bias, vec![0.25, 0.5]);
    }

    #[test]
    fn constant_predictor_accuracy() {
        let mut m = single_layer(Matrix::zeros(10, 4), vec![0.0; 10]);
        m.layers_mut()[0].bias[3] = 1.0;
        let x = Matrix::zeros(20, 4);
        assert_eq!(evaluate(&m, &x, &[3; 20]).unwrap(), 1.0);
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        assert_eq!(evaluate(&m, &x, &labels).unwrap(), 0.1);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let m = MlpModel::new(4, &[], 2, 0);
        assert!(matches!(
            evaluate(&m, &Matrix::zeros(0, 4), &[]),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn param_count_from_dims() {
        let m = MlpModel::new(784, &[100, 100], 10, 0);
        assert_eq!(m.num_params(), 784 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10);
        assert_eq!(m.hidden_dims(), vec![100, 100]);
        assert_eq!(m.feature_dim(), 100);
    }

    #[test]
    fn from_layers_rejects_broken_chain() {
        let r = MlpModel::from_layers(vec![LinearLayer::zeros(3, 4), LinearLayer::zeros(5, 2)]);
        assert!(r.is_err());
    }

    #[test]
    fn momentum_config_validation() {
        assert!(SgdConfig::new(0.0).validate().is_err());
        let mut c = SgdConfig::new(0.1);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c.momentum = 0.9;
        assert!(c.validate().is_ok());
    }
}
