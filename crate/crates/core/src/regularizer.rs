//! Multi-level feature matching: per-layer teacher/student distances combined
//! under softmax-normalized adaptive layer weights.
//!
//! When `adaptive` is on, the raw weight vector is a graph leaf and the
//! softmax is taken over the masked layers only, so excluded layers receive
//! exactly zero weight and zero gradient. With `adaptive` off every masked
//! layer gets the fixed weight 1/|mask|.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernel::{self, AblationDistance, KernelSpec};
use crate::network::{ModelParams, TracedModel};
use crate::tensor::Tensor;

/// Trainable per-layer weight vector w and its softmax normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    raw: Tensor,
}

impl AdaptiveWeights {
    /// Raw weights drawn i.i.d. uniform on [0, 1).
    pub fn init_uniform(k: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::EmptyInput);
        }
        let raw = Tensor::from_parts(vec![k], (0..k).map(|_| rng.gen_range(0.0..1.0)).collect());
        Ok(Self { raw })
    }

    pub fn from_raw(raw: Tensor) -> Result<Self> {
        if raw.rank() != 1 || raw.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "adaptive weights must be a nonempty vector, got {:?}",
                raw.shape()
            )));
        }
        Ok(Self { raw })
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Softmax-normalized view over all K layers.
    pub fn normalized(&self) -> Tensor {
        normalize_weights(&self.raw).expect("raw weights are finite and nonempty")
    }
}

/// Softmax with max-subtraction: w_j -> e^{w_j} / sum_k e^{w_k}.
pub fn normalize_weights(raw: &Tensor) -> Result<Tensor> {
    if raw.rank() != 1 || raw.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "normalize_weights expects a nonempty vector, got {:?}",
            raw.shape()
        )));
    }
    let mx = raw.max_value();
    let exps: Vec<f64> = raw.data().iter().map(|v| (v - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Tensor::from_parts(
        raw.shape().to_vec(),
        exps.iter().map(|e| e / total).collect(),
    ))
}

/// Distance applied between teacher and student feature batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Mmd,
    L2,
    Cosine,
}

/// Regularizer settings: the distance, its kernel (MMD only), whether the
/// layer weights adapt, and which layers participate (1-based indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub distance: DistanceKind,
    pub kernel: KernelSpec,
    pub adaptive: bool,
    pub layer_mask: Vec<usize>,
}

impl RegularizerConfig {
    /// MMD over every layer with adaptive weights on.
    pub fn default_for(k: usize) -> Self {
        Self {
            distance: DistanceKind::Mmd,
            kernel: KernelSpec::rbf_median_mixture(),
            adaptive: true,
            layer_mask: (1..=k).collect(),
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.layer_mask.is_empty() {
            return Err(Error::InvalidSpec("layer_mask must be nonempty".into()));
        }
        let mut seen = vec![false; k + 1];
        for &layer in &self.layer_mask {
            if layer == 0 || layer > k {
                return Err(Error::InvalidSpec(format!(
                    "layer_mask entry {layer} outside 1..={k}"
                )));
            }
            if seen[layer] {
                return Err(Error::InvalidSpec(format!(
                    "layer_mask entry {layer} repeated"
                )));
            }
            seen[layer] = true;
        }
        self.kernel.validate()
    }

    /// Mask as sorted 0-based layer indices.
    fn zero_based_mask(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.layer_mask.iter().map(|&l| l - 1).collect();
        m.sort_unstable();
        m
    }
}

/// The regularizer term with its adaptive-weight leaf (present only when the
/// run adapts the weights).
pub struct RegLoss {
    pub node: NodeId,
    pub weight_leaf: Option<NodeId>,
}

/// Weighted multi-level distance between the frozen teacher and the traced
/// student on one replay batch. Teacher features are constants; the result is
/// differentiable in the student parameters and, when adaptive, in the raw
/// layer weights.
pub fn reg_loss(
    g: &mut Graph,
    teacher: Option<&ModelParams>,
    student: &TracedModel,
    weights: &AdaptiveWeights,
    xbatch: &Tensor,
    cfg: &RegularizerConfig,
) -> Result<RegLoss> {
    let weight_leaf = cfg.adaptive.then(|| g.leaf(weights.raw().clone()));
    let node = reg_loss_node(g, teacher, student, weight_leaf, xbatch, cfg)?;
    Ok(RegLoss { node, weight_leaf })
}

/// Same computation with the raw-weight vector supplied as an existing graph
/// node, so callers (the trainer, gradient oracles) control the leaf.
pub fn reg_loss_node(
    g: &mut Graph,
    teacher: Option<&ModelParams>,
    student: &TracedModel,
    raw_weights: Option<NodeId>,
    xbatch: &Tensor,
    cfg: &RegularizerConfig,
) -> Result<NodeId> {
    let teacher = teacher.ok_or(Error::NoTeacher)?;
    if !teacher.is_frozen() {
        return Err(Error::FrozenViolation);
    }
    let k = teacher.num_feature_layers();
    if student.layers.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "layer counts disagree: teacher {k}, student {}",
            student.layers.len()
        )));
    }
    if cfg.adaptive {
        let raw = raw_weights.ok_or(Error::MissingGradient)?;
        if g.value(raw).len() != k {
            return Err(Error::DimensionMismatch(format!(
                "adaptive weights hold {} entries for {k} layers",
                g.value(raw).len()
            )));
        }
    }
    cfg.validate(k)?;
    if cfg.distance == DistanceKind::Mmd && xbatch.rows() < 2 {
        return Err(Error::BatchTooSmall {
            need: 2,
            got: xbatch.rows(),
        });
    }

    let teacher_features = teacher.forward_features(xbatch)?;
    let x = g.constant(xbatch.clone());
    let student_features = student.features(g, x)?;

    let mask = cfg.zero_based_mask();
    let mut distances = Vec::with_capacity(mask.len());
    for &layer in &mask {
        let d = match cfg.distance {
            DistanceKind::Mmd => kernel::mmd_unbiased_node(
                g,
                &cfg.kernel,
                &teacher_features[layer],
                student_features[layer],
            )?,
            DistanceKind::L2 => kernel::ablation_distance_node(
                g,
                AblationDistance::L2,
                &teacher_features[layer],
                student_features[layer],
            )?,
            DistanceKind::Cosine => kernel::ablation_distance_node(
                g,
                AblationDistance::Cosine,
                &teacher_features[layer],
                student_features[layer],
            )?,
        };
        distances.push(d);
    }
    let d_vec = g.concat(&distances)?;

    if cfg.adaptive {
        let leaf = raw_weights.expect("checked above");
        masked_softmax_combine(g, leaf, &mask, d_vec)
    } else {
        let total = g.sum(d_vec)?;
        let scale = g.constant(Tensor::scalar(1.0 / mask.len() as f64));
        g.mul(total, scale)
    }
}

/// sum_k softmax(raw[mask])_k * d_k, built from graph primitives. The
/// normalizing reciprocal is exp(-log sum) so the whole path stays inside the
/// differentiable op set.
fn masked_softmax_combine(
    g: &mut Graph,
    raw: NodeId,
    mask: &[usize],
    d_vec: NodeId,
) -> Result<NodeId> {
    let m = mask.len();
    let picked = g.select(raw, mask)?;
    let mx = g.value(picked).max_value();
    let shift = g.constant(Tensor::filled(&[m], mx));
    let shifted = g.sub(picked, shift)?;
    let e = g.exp(shifted)?;
    let total = g.sum(e)?;
    let log_total = g.log(total)?;
    let neg = g.constant(Tensor::scalar(-1.0));
    let neg_log = g.mul(log_total, neg)?;
    let inv_total = g.exp(neg_log)?;
    let weighted = g.mul(e, d_vec)?;
    let numerator = g.sum(weighted)?;
    g.mul(numerator, inv_total)
}

/// One SGD step on the raw weights: raw -= eta * d(loss)/d(raw). Requires
/// backward to have run on the graph holding `leaf`.
pub fn weight_gradient_step(
    weights: &mut AdaptiveWeights,
    g: &Graph,
    leaf: NodeId,
    eta: f64,
) -> Result<()> {
    let grad = g.grad(leaf)?;
    weights.raw.axpy(-eta, &grad)?;
    Ok(())
}
