//! The training loop: per-step composite loss over the current batch and
//! three independent replay draws, SGD on both the network parameters and the
//! adaptive layer weights, teacher snapshots at task boundaries, and
//! reservoir population.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::network::{cross_entropy, one_hot, softmax_node, ModelParams, TracedModel};
use crate::regularizer::{reg_loss_node, weight_gradient_step, AdaptiveWeights, RegularizerConfig};
use crate::replay::{MemoryItem, ReservoirBuffer};
use crate::taskstream::{evaluate, EvalMode, TaskDataset};
use crate::tensor::Tensor;

/// Loss coefficients and optimization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Weight of the logit-matching replay term.
    pub alpha: f64,
    /// Weight of the label replay cross-entropy term.
    pub beta: f64,
    /// Weight of the multi-level feature regularizer.
    pub gamma: f64,
    /// Learning rate shared by the parameters and the adaptive weights.
    pub eta: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub epochs_per_task: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.5,
            gamma: 1.0,
            eta: 0.03,
            batch_size: 32,
            buffer_capacity: 200,
            epochs_per_task: 50,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// Field-by-field constraint violations, for config validation.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("hyper.{name}: must be >= 0, got {v}"));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            out.push(format!("hyper.eta: must be > 0, got {}", self.eta));
        }
        if self.batch_size < 2 {
            out.push(format!(
                "hyper.batch_size: must be >= 2, got {}",
                self.batch_size
            ));
        }
        if self.buffer_capacity < 1 {
            out.push("hyper.buffer_capacity: must be >= 1".into());
        }
        if self.epochs_per_task < 1 {
            out.push("hyper.epochs_per_task: must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(v) => Err(Error::InvalidHyperParams(v)),
            None => Ok(()),
        }
    }
}

/// Everything that evolves while the stream is consumed. The teacher is
/// present exactly from the second task on.
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: Option<ModelParams>,
    pub weights: AdaptiveWeights,
    pub buffer: ReservoirBuffer,
    pub task_index: usize,
    shuffle_rng: ChaCha8Rng,
}

/// Seed the student, adaptive weights, buffer, and shuffle order from one
/// master seed.
pub fn init_state(
    input_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    hp: &HyperParams,
) -> Result<TrainState> {
    hp.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(hp.seed);
    let student = ModelParams::init(input_dim, hidden, num_classes, &mut master)?;
    let weights = AdaptiveWeights::init_uniform(hidden.len(), &mut master)?;
    let buffer = ReservoirBuffer::new(hp.buffer_capacity, master.gen())?;
    let shuffle_rng = ChaCha8Rng::seed_from_u64(master.gen());
    Ok(TrainState {
        student,
        teacher: None,
        weights,
        buffer,
        task_index: 0,
        shuffle_rng,
    })
}

/// The three independent buffer draws used by one step: (x', z') for the
/// logit-matching term, (x'', y'') for the label replay term, and x''' for
/// the regularizer. All are empty while the buffer is empty; the regularizer
/// draw happens only from the second task on.
#[derive(Debug, Clone, Default)]
pub struct ReplayDraws {
    pub logit_batch: Option<(Tensor, Tensor)>,
    pub label_batch: Option<(Tensor, Vec<usize>)>,
    pub reg_batch: Option<Tensor>,
}

fn items_into_matrices(items: &[MemoryItem]) -> (Tensor, Tensor, Vec<usize>) {
    let x_rows: Vec<&[f64]> = items.iter().map(|it| it.x.data()).collect();
    let z_rows: Vec<&[f64]> = items.iter().map(|it| it.z.data()).collect();
    let labels = items.iter().map(|it| it.y).collect();
    (
        Tensor::from_rows(&x_rows).expect("buffer items share one width"),
        Tensor::from_rows(&z_rows).expect("buffer items share one width"),
        labels,
    )
}

/// Make the per-step draws in a fixed order so identical seeds walk the
/// buffer generator identically across method variants.
pub fn draw_replay(
    buffer: &mut ReservoirBuffer,
    hp: &HyperParams,
    task_index: usize,
) -> Result<ReplayDraws> {
    if buffer.is_empty() {
        return Ok(ReplayDraws::default());
    }
    let (ax, az, _) = items_into_matrices(&buffer.sample(hp.batch_size)?);
    let (bx, _, by) = items_into_matrices(&buffer.sample(hp.batch_size)?);
    let reg_batch = if task_index > 1 {
        let (rx, _, _) = items_into_matrices(&buffer.sample(hp.batch_size)?);
        Some(rx)
    } else {
        None
    };
    Ok(ReplayDraws {
        logit_batch: Some((ax, az)),
        label_batch: Some((bx, by)),
        reg_batch,
    })
}

/// Handles into the step graph needed after backward.
pub struct StepGraph {
    pub loss: NodeId,
    pub traced: TracedModel,
    pub weight_leaf: Option<NodeId>,
    pub current_logits: NodeId,
}

/// Build the composite loss from already-drawn batches. Pure in the traced
/// parameters and (optional) raw-weight leaf, which is what the gradient
/// oracles differentiate.
#[allow(clippy::too_many_arguments)]
pub fn compose_step_loss(
    g: &mut Graph,
    traced: &TracedModel,
    raw_weights: Option<NodeId>,
    teacher: Option<&ModelParams>,
    x: &Tensor,
    y_onehot: &Tensor,
    draws: &ReplayDraws,
    hp: &HyperParams,
    cfg: &RegularizerConfig,
    task_index: usize,
) -> Result<(NodeId, NodeId)> {
    let x_const = g.constant(x.clone());
    let current_logits = traced.logits(g, x_const)?;
    let probs = softmax_node(g, current_logits)?;
    let mut loss = cross_entropy(g, y_onehot, probs)?;

    if let Some((ax, az)) = &draws.logit_batch {
        let axc = g.constant(ax.clone());
        let replay_logits = traced.logits(g, axc)?;
        let azc = g.constant(az.clone());
        let diff = g.sub(azc, replay_logits)?;
        let sq = g.square(diff)?;
        let per_row = g.sum_axis(sq, 1)?;
        let mse = g.mean(per_row)?;
        let coeff = g.constant(Tensor::scalar(hp.alpha));
        let term = g.mul(mse, coeff)?;
        loss = g.add(loss, term)?;
    }

    if let Some((bx, by)) = &draws.label_batch {
        let classes = y_onehot.cols();
        let bxc = g.constant(bx.clone());
        let replay_logits = traced.logits(g, bxc)?;
        let replay_probs = softmax_node(g, replay_logits)?;
        let by_onehot = one_hot(by, classes)?;
        let ce = cross_entropy(g, &by_onehot, replay_probs)?;
        let coeff = g.constant(Tensor::scalar(hp.beta));
        let term = g.mul(ce, coeff)?;
        loss = g.add(loss, term)?;
    }

    // The regularizer draw is consumed even when gamma is zero so the data
    // path is identical across variants; only the term itself is skipped.
    if task_index > 1 && hp.gamma != 0.0 {
        if let Some(rx) = &draws.reg_batch {
            let reg = reg_loss_node(g, teacher, traced, raw_weights, rx, cfg)?;
            let coeff = g.constant(Tensor::scalar(hp.gamma));
            let term = g.mul(reg, coeff)?;
            loss = g.add(loss, term)?;
        }
    }

    Ok((loss, current_logits))
}

/// Draw the replay batches and assemble the step loss for the live state.
pub fn step_loss(
    g: &mut Graph,
    state: &mut TrainState,
    x: &Tensor,
    labels: &[usize],
    hp: &HyperParams,
    cfg: &RegularizerConfig,
) -> Result<StepGraph> {
    hp.validate()?;
    let traced = state.student.trace(g)?;
    let needs_weight_leaf = cfg.adaptive && state.task_index > 1 && hp.gamma != 0.0;
    let weight_leaf = needs_weight_leaf.then(|| g.leaf(state.weights.raw().clone()));
    let y_onehot = one_hot(labels, state.student.num_classes())?;
    let draws = draw_replay(&mut state.buffer, hp, state.task_index)?;
    let (loss, current_logits) = compose_step_loss(
        g,
        &traced,
        weight_leaf,
        state.teacher.as_ref(),
        x,
        &y_onehot,
        &draws,
        hp,
        cfg,
        state.task_index,
    )?;
    Ok(StepGraph {
        loss,
        traced,
        weight_leaf,
        current_logits,
    })
}

/// One gradient step: backward, SGD on the parameters (and the adaptive
/// weights from the second task on), then offer the visited batch.
fn run_step(
    state: &mut TrainState,
    x: &Tensor,
    labels: &[usize],
    hp: &HyperParams,
    cfg: &RegularizerConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let step = step_loss(&mut g, state, x, labels, hp, cfg)?;
    let loss_value = g.value(step.loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Domain(format!(
            "training diverged: non-finite loss {loss_value}"
        )));
    }
    g.backward(step.loss)?;

    let layer_grads: Vec<(Tensor, Tensor)> = step
        .traced
        .layers
        .iter()
        .map(|&(w, b)| Ok((g.grad(w)?, g.grad(b)?)))
        .collect::<Result<_>>()?;
    let head_grad = (g.grad(step.traced.head.0)?, g.grad(step.traced.head.1)?);
    state
        .student
        .apply_gradient_step(&layer_grads, &head_grad, hp.eta)?;
    if let Some(leaf) = step.weight_leaf {
        weight_gradient_step(&mut state.weights, &g, leaf, hp.eta)?;
    }

    // Stored logits are the pre-update values for this batch.
    let logits_value = g.value(step.current_logits).clone();
    for (i, &label) in labels.iter().enumerate() {
        let item = MemoryItem::new(
            Tensor::new(vec![x.cols()], x.row(i).to_vec())?,
            label,
            Tensor::new(vec![logits_value.cols()], logits_value.row(i).to_vec())?,
        )?;
        state.buffer.offer(item);
    }
    Ok(loss_value)
}

/// Per-epoch record of the softmax-normalized layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightLogRow {
    pub task: usize,
    pub epoch: usize,
    pub weights: Vec<f64>,
}

/// Run every epoch of one task, offering each visited sample to the buffer
/// once per epoch. The observer fires after every step.
pub fn train_task_observed(
    state: &mut TrainState,
    data: &TaskDataset,
    hp: &HyperParams,
    cfg: &RegularizerConfig,
    observer: &mut dyn FnMut(&TrainState),
) -> Result<Vec<WeightLogRow>> {
    if data.train.is_empty() {
        return Err(Error::EmptyInput);
    }
    if state.task_index == 0 {
        return Err(Error::InvalidTask(0));
    }
    let mut rows = Vec::with_capacity(hp.epochs_per_task);
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=hp.epochs_per_task {
        order.shuffle(&mut state.shuffle_rng);
        for chunk in order.chunks(hp.batch_size) {
            let x_rows: Vec<&[f64]> = chunk.iter().map(|&i| data.train[i].0.data()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train[i].1).collect();
            let x = Tensor::from_rows(&x_rows)?;
            run_step(state, &x, &labels, hp, cfg)?;
            observer(state);
        }
        rows.push(WeightLogRow {
            task: state.task_index,
            epoch,
            weights: state.weights.normalized().data().to_vec(),
        });
    }
    Ok(rows)
}

pub fn train_task(
    state: &mut TrainState,
    data: &TaskDataset,
    hp: &HyperParams,
    cfg: &RegularizerConfig,
) -> Result<Vec<WeightLogRow>> {
    train_task_observed(state, data, hp, cfg, &mut |_| {})
}

/// Result of consuming a whole stream: the final state, accuracy matrices
/// for both protocols, and the weight trajectory.
pub struct StreamOutcome {
    pub state: TrainState,
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    pub weight_log: Vec<WeightLogRow>,
}

pub fn train_stream(
    tasks: &[TaskDataset],
    hidden: &[usize],
    hp: &HyperParams,
    cfg: &RegularizerConfig,
) -> Result<StreamOutcome> {
    train_stream_observed(tasks, hidden, hp, cfg, &mut |_| {})
}

/// Outer loop: train each task, snapshot the finished student as the next
/// teacher, and evaluate both protocols on every test set seen so far.
pub fn train_stream_observed(
    tasks: &[TaskDataset],
    hidden: &[usize],
    hp: &HyperParams,
    cfg: &RegularizerConfig,
    observer: &mut dyn FnMut(&TrainState),
) -> Result<StreamOutcome> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput);
    }
    hp.validate()?;
    cfg.validate(hidden.len())?;
    let input_dim = tasks[0].train[0].0.len();
    for t in tasks {
        if t.train.iter().chain(&t.test).any(|(x, _)| x.len() != input_dim) {
            return Err(Error::DimensionMismatch(
                "tasks disagree on the input dimension".into(),
            ));
        }
    }
    let num_classes = tasks
        .iter()
        .flat_map(|t| t.class_set.iter().copied())
        .max()
        .map(|c| c + 1)
        .ok_or_else(|| Error::InvalidSpec("tasks own no classes".into()))?;

    let mut state = init_state(input_dim, hidden, num_classes, hp)?;
    let mut class_il = AccuracyMatrix::new();
    let mut task_il = AccuracyMatrix::new();
    let mut weight_log = Vec::new();

    for (t, task) in tasks.iter().enumerate() {
        state.task_index = t + 1;
        if t > 0 {
            state.teacher = Some(state.student.snapshot());
        }
        weight_log.extend(train_task_observed(&mut state, task, hp, cfg, observer)?);
        class_il.push_row(evaluate(&state.student, &tasks[..=t], EvalMode::ClassIl)?)?;
        task_il.push_row(evaluate(&state.student, &tasks[..=t], EvalMode::TaskIl)?)?;
    }
    Ok(StreamOutcome {
        state,
        class_il,
        task_il,
        weight_log,
    })
}
