//! Fully-connected classifier: a stack of feature layers plus a linear head.
//!
//! The live student exposes a traced forward pass that records onto a
//! [`Graph`]; frozen teacher copies only evaluate tensor-side and refuse both
//! tracing and mutation.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One dense layer: weight is `input x output`, bias is `output`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl LayerParams {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = tensor::matmul(x, &self.weight)?;
        let n = h.cols();
        for i in 0..h.rows() {
            let row = &mut h.data_mut()[i * n..(i + 1) * n];
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(match self.activation {
            Activation::Relu => h.map(|v| v.max(0.0)),
            Activation::Identity => h,
        })
    }
}

/// Feature layers plus linear head. `frozen` models reject every mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<LayerParams>,
    head: LayerParams,
    frozen: bool,
}

/// Graph handles for one traced (differentiable) copy of the parameters.
pub struct TracedModel {
    pub layers: Vec<(NodeId, NodeId)>,
    pub head: (NodeId, NodeId),
    activations: Vec<Activation>,
}

impl ModelParams {
    /// Random init: every entry uniform on (-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidSpec("need at least one feature layer".into()));
        }
        if input_dim == 0 || num_classes == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec("layer widths must be positive".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        let mut layers = Vec::with_capacity(hidden.len());
        for win in dims.windows(2) {
            layers.push(random_layer(win[0], win[1], Activation::Relu, rng));
        }
        let head = random_layer(*hidden.last().unwrap(), num_classes, Activation::Identity, rng);
        Ok(Self {
            layers,
            head,
            frozen: false,
        })
    }

    /// Assemble from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<LayerParams>, head: LayerParams) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("need at least one feature layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        if layers.last().unwrap().output_dim() != head.input_dim() {
            return Err(Error::DimensionMismatch(
                "head input does not match last feature layer".into(),
            ));
        }
        if head.activation != Activation::Identity {
            return Err(Error::InvalidSpec("head activation must be identity".into()));
        }
        for l in layers.iter().chain(std::iter::once(&head)) {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch("bias width mismatch".into()));
            }
        }
        Ok(Self {
            layers,
            head,
            frozen: false,
        })
    }

    pub fn num_feature_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn head(&self) -> &LayerParams {
        &self.head
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Deep copy with `frozen = true`. Later student updates never touch it;
    /// snapshotting a snapshot is the identity.
    pub fn snapshot(&self) -> ModelParams {
        let mut copy = self.clone();
        copy.frozen = true;
        copy
    }

    /// Per-layer cumulative features Z^1..Z^K for a batch (pure evaluation,
    /// allowed on frozen models).
    pub fn forward_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut features = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
            features.push(cur.clone());
        }
        Ok(features)
    }

    /// Head output on the last feature layer; no softmax applied.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let features = self.forward_features(x)?;
        self.head.forward(features.last().unwrap())
    }

    /// Softmax of the logits, computed with max-subtraction. Rows sum to 1.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Register the parameters as differentiable graph leaves. Frozen models
    /// cannot be traced.
    pub fn trace(&self, g: &mut Graph) -> Result<TracedModel> {
        if self.frozen {
            return Err(Error::FrozenViolation);
        }
        let layers = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
            .collect();
        let head = (g.leaf(self.head.weight.clone()), g.leaf(self.head.bias.clone()));
        Ok(TracedModel {
            layers,
            head,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        })
    }

    /// SGD step over every weight and bias: p -= eta * grad. Gradient tensors
    /// come from the traced graph in `trace` order.
    pub fn apply_gradient_step(
        &mut self,
        layer_grads: &[(Tensor, Tensor)],
        head_grad: &(Tensor, Tensor),
        eta: f64,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenViolation);
        }
        if layer_grads.len() != self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} layer gradients, got {}",
                self.layers.len(),
                layer_grads.len()
            )));
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(layer_grads) {
            layer.weight.axpy(-eta, gw)?;
            layer.bias.axpy(-eta, gb)?;
        }
        self.head.weight.axpy(-eta, &head_grad.0)?;
        self.head.bias.axpy(-eta, &head_grad.1)?;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input shape {:?}, model expects [b x {}]",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

impl TracedModel {
    fn layer_forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: (NodeId, NodeId),
        activation: Activation,
    ) -> Result<NodeId> {
        let p = g.matmul(x, params.0)?;
        let h = g.bias_add(p, params.1)?;
        match activation {
            Activation::Relu => g.relu(h),
            Activation::Identity => Ok(h),
        }
    }

    /// Traced Z^1..Z^K for an input node.
    pub fn features(&self, g: &mut Graph, x: NodeId) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for (&params, &act) in self.layers.iter().zip(&self.activations) {
            cur = self.layer_forward(g, cur, params, act)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Traced logits for an input node.
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let features = self.features(g, x)?;
        self.layer_forward(g, *features.last().unwrap(), self.head, Activation::Identity)
    }
}

fn random_layer(
    input: usize,
    output: usize,
    activation: Activation,
    rng: &mut impl Rng,
) -> LayerParams {
    let bound = 1.0 / (input as f64).sqrt();
    let weight = Tensor::from_parts(
        vec![input, output],
        (0..input * output)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    );
    let bias = Tensor::from_parts(
        vec![output],
        (0..output).map(|_| rng.gen_range(-bound..bound)).collect(),
    );
    LayerParams {
        weight,
        bias,
        activation,
    }
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (m, n) = (logits.rows(), logits.cols());
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = logits.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
        let s: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / s));
    }
    Tensor::from_parts(vec![m, n], data)
}

/// Traced softmax: yhat = exp(z - logsumexp(z)), with the row max treated as
/// a constant shift. The log-sum-exp column is broadcast back over the row
/// via a matmul with a ones row.
pub fn softmax_node(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let z = g.value(logits).clone();
    if z.rank() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "softmax expects [b x C] logits, got {:?}",
            z.shape()
        )));
    }
    let (m, n) = (z.rows(), z.cols());
    let row_max: Vec<f64> = (0..m)
        .map(|i| z.row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect();
    let mut max_full = Vec::with_capacity(m * n);
    for &v in &row_max {
        max_full.extend(std::iter::repeat(v).take(n));
    }
    let max_full = g.constant(Tensor::from_parts(vec![m, n], max_full));
    let max_col = g.constant(Tensor::from_parts(vec![m, 1], row_max));

    let shifted = g.sub(logits, max_full)?;
    let e = g.exp(shifted)?;
    let rowsum = g.sum_axis(e, 1)?;
    let rowsum_col = g.reshape(rowsum, &[m, 1])?;
    let log_sum = g.log(rowsum_col)?;
    let lse = g.add(log_sum, max_col)?;
    let ones_row = g.constant(Tensor::filled(&[1, n], 1.0));
    let lse_full = g.matmul(lse, ones_row)?;
    let log_probs = g.sub(logits, lse_full)?;
    g.exp(log_probs)
}

/// Batch-mean negative log-likelihood: -(1/b) sum_rows sum_t y[t] log(yhat[t]).
/// `y` rows must be one-hot; errors if the probability selected by any row is
/// zero. Entries with y[t] = 0 contribute neither value nor gradient.
pub fn cross_entropy(g: &mut Graph, y: &Tensor, yhat: NodeId) -> Result<NodeId> {
    let p = g.value(yhat).clone();
    if y.shape() != p.shape() || y.rank() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "cross entropy shapes {:?} vs {:?}",
            y.shape(),
            p.shape()
        )));
    }
    for i in 0..y.rows() {
        let row = y.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(format!("label row {i} is not one-hot")));
        }
        let target = row.iter().position(|&v| v == 1.0).unwrap();
        if p.get2(i, target) <= 0.0 {
            return Err(Error::Domain(format!(
                "predicted probability for the target class of row {i} is zero"
            )));
        }
    }
    // Replace unused entries with exactly 1 so the log is safe; the mask keeps
    // both their value and gradient contribution at zero.
    let y_const = g.constant(y.clone());
    let complement = g.constant(y.map(|v| 1.0 - v));
    let masked = g.mul(y_const, yhat)?;
    let masked = g.add(masked, complement)?;
    let logs = g.log(masked)?;
    let per_row = g.sum_axis(logs, 1)?;
    let mean = g.mean(per_row)?;
    let neg = g.constant(Tensor::scalar(-1.0));
    g.mul(mean, neg)
}

/// One-hot encode integer labels into [b x classes].
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Domain(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::from_parts(vec![labels.len(), classes], data))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"OWNC";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a bit-exact binary checkpoint: shapes plus row-major f64 data.
pub fn save_model(model: &ModelParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(model.frozen as u8);
    buf.extend_from_slice(&(model.layers.len() as u64).to_le_bytes());
    for layer in model.layers.iter().chain(std::iter::once(&model.head)) {
        buf.push(match layer.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
        buf.extend_from_slice(&(layer.weight.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(layer.weight.cols() as u64).to_le_bytes());
        for v in layer.weight.data().iter().chain(layer.bias.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC.as_slice() {
        return Err(Error::Config("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    let frozen = cur.take(1)?[0] != 0;
    let num_layers = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let mut all = Vec::with_capacity(num_layers + 1);
    for _ in 0..=num_layers {
        let activation = match cur.take(1)?[0] {
            0 => Activation::Relu,
            1 => Activation::Identity,
            other => return Err(Error::Config(format!("unknown activation tag {other}"))),
        };
        let rows = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let raw = cur.take(8 * n)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weight = Tensor::new(vec![rows, cols], read_f64s(rows * cols)?)?;
        let bias = Tensor::new(vec![cols], read_f64s(cols)?)?;
        all.push(LayerParams {
            weight,
            bias,
            activation,
        });
    }
    let head = all.pop().unwrap();
    let mut model = ModelParams::from_layers(all, head)?;
    model.frozen = frozen;
    Ok(model)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Config("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
