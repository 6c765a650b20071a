//! Synthetic class-incremental task streams and the Class-IL / Task-IL
//! evaluation protocols.
//!
//! Generators are deterministic under a fixed seed and place class centers at
//! least 4 x noise_scale apart, so a jointly trained model separates them
//! comfortably.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::Tensor;

/// Train/test split for one task plus the global class indices it owns.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub train: Vec<(Tensor, usize)>,
    pub test: Vec<(Tensor, usize)>,
    pub class_set: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    GaussianBlobs,
    TwoMoonsRotations,
    GridPatterns,
}

/// Recipe for a synthetic stream of `num_tasks` disjoint-class tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub generator: GeneratorKind,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl StreamSpec {
    /// Desk-scale default: 5 tasks x 2 classes in 16 dimensions,
    /// 200 train / 100 test samples per class.
    pub fn default_blobs() -> Self {
        Self {
            generator: GeneratorKind::GaussianBlobs,
            num_tasks: 5,
            classes_per_task: 2,
            train_per_class: 200,
            test_per_class: 100,
            input_dim: 16,
            noise_scale: 1.0,
            seed: 7,
        }
    }

    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::InvalidSpec("num_tasks must be >= 1".into()));
        }
        if self.classes_per_task == 0 {
            return Err(Error::InvalidSpec("classes_per_task must be >= 1".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidSpec("need at least one sample per class".into()));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidSpec("noise_scale must be positive".into()));
        }
        match self.generator {
            GeneratorKind::GaussianBlobs => {
                if self.input_dim < 2 {
                    return Err(Error::InvalidSpec("gaussian_blobs needs input_dim >= 2".into()));
                }
            }
            GeneratorKind::TwoMoonsRotations => {
                if self.classes_per_task != 2 {
                    return Err(Error::InvalidSpec(
                        "two_moons_rotations requires exactly 2 classes per task".into(),
                    ));
                }
                if self.input_dim < 2 {
                    return Err(Error::InvalidSpec(
                        "two_moons_rotations needs input_dim >= 2".into(),
                    ));
                }
            }
            GeneratorKind::GridPatterns => {
                if self.input_dim < 2 {
                    return Err(Error::InvalidSpec("grid_patterns needs input_dim >= 2".into()));
                }
            }
        }
        Ok(())
    }
}

/// Produce the task list for a spec. Identical specs yield bitwise-identical
/// datasets; class sets of distinct tasks never overlap.
pub fn generate(spec: &StreamSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.generator {
        GeneratorKind::GaussianBlobs => generate_blobs(spec, &mut rng),
        GeneratorKind::TwoMoonsRotations => generate_moons(spec, &mut rng),
        GeneratorKind::GridPatterns => generate_grid(spec, &mut rng),
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Class centers packed greedily into a ball inside a shared low-dimensional
/// random subspace, every pair at least 4 x noise apart and many pairs close
/// to that floor. Crowding the centers into few directions makes later tasks
/// compete with earlier ones for feature space, which is the failure mode a
/// continual learner has to survive.
fn generate_blobs(spec: &StreamSpec, rng: &mut ChaCha8Rng) -> Result<Vec<TaskDataset>> {
    let d = spec.input_dim;
    let classes = spec.total_classes();
    let subspace = classes.div_ceil(3).clamp(2, d);
    let basis = random_rotation(rng, d);
    let min_dist = 4.0 * spec.noise_scale;

    // Greedy packing in units of the separation floor: candidates drawn
    // uniformly from a ball whose radius grows whenever packing stalls.
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut ball_radius = (classes as f64).powf(1.0 / subspace as f64);
    let mut stalls = 0usize;
    while coeffs.len() < classes {
        let mut cand = gaussian_vec(rng, subspace);
        let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let r = ball_radius * rng.gen_range(0.0f64..1.0).powf(1.0 / subspace as f64);
        for v in &mut cand {
            *v *= r / norm;
        }
        let clear = coeffs
            .iter()
            .all(|c| squared_distance_slice(c, &cand) >= 1.0);
        if clear {
            coeffs.push(cand);
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= 200 {
                ball_radius *= 1.1;
                stalls = 0;
            }
        }
    }
    let mut centers = Vec::with_capacity(classes);
    for c in &coeffs {
        let mut center = vec![0.0; d];
        for (k, &coef) in c.iter().enumerate() {
            for (ci, bi) in center.iter_mut().zip(&basis[k]) {
                *ci += min_dist * coef * bi;
            }
        }
        centers.push(center);
    }
    let sample = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f64> {
        centers[class]
            .iter()
            .map(|&m| m + spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    assemble(spec, rng, sample)
}

fn squared_distance_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Per task, the classic interleaved moons rotated by a task-specific angle
/// in the first two coordinates; other coordinates are pure noise.
fn generate_moons(spec: &StreamSpec, rng: &mut ChaCha8Rng) -> Result<Vec<TaskDataset>> {
    let radius = 8.0 * spec.noise_scale;
    let sample = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f64> {
        let task = class / 2;
        let angle = task as f64 * std::f64::consts::PI / spec.num_tasks as f64;
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (mut px, mut py) = if class % 2 == 0 {
            (phi.cos(), phi.sin())
        } else {
            (1.0 - phi.cos(), 0.5 - phi.sin())
        };
        px *= radius;
        py *= radius;
        let (sin_a, cos_a) = angle.sin_cos();
        let (rx, ry) = (px * cos_a - py * sin_a, px * sin_a + py * cos_a);
        let mut point = vec![0.0; spec.input_dim];
        point[0] = rx;
        point[1] = ry;
        for p in point.iter_mut() {
            *p += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        point
    };
    assemble(spec, rng, sample)
}

/// Class centers on a planar lattice with 6 x noise spacing.
fn generate_grid(spec: &StreamSpec, rng: &mut ChaCha8Rng) -> Result<Vec<TaskDataset>> {
    let side = (spec.total_classes() as f64).sqrt().ceil() as usize;
    let spacing = 6.0 * spec.noise_scale;
    let sample = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f64> {
        let mut point = vec![0.0; spec.input_dim];
        point[0] = (class % side) as f64 * spacing;
        point[1] = (class / side) as f64 * spacing;
        for p in point.iter_mut() {
            *p += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        point
    };
    assemble(spec, rng, sample)
}

fn assemble(
    spec: &StreamSpec,
    rng: &mut ChaCha8Rng,
    sample: impl Fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
) -> Result<Vec<TaskDataset>> {
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let class_set: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut train = Vec::with_capacity(spec.classes_per_task * spec.train_per_class);
        let mut test = Vec::with_capacity(spec.classes_per_task * spec.test_per_class);
        for &class in &class_set {
            for _ in 0..spec.train_per_class {
                train.push((
                    Tensor::new(vec![spec.input_dim], sample(rng, class))?,
                    class,
                ));
            }
            for _ in 0..spec.test_per_class {
                test.push((
                    Tensor::new(vec![spec.input_dim], sample(rng, class))?,
                    class,
                ));
            }
        }
        tasks.push(TaskDataset {
            train,
            test,
            class_set,
        });
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Argmax over every class seen so far; task identity hidden.
    ClassIl,
    /// Argmax restricted to the queried task's own classes.
    TaskIl,
}

impl EvalMode {
    pub fn label(&self) -> &'static str {
        match self {
            EvalMode::ClassIl => "class_il",
            EvalMode::TaskIl => "task_il",
        }
    }
}

/// Accuracy of the model on each seen task's test set under the given
/// protocol. The single shared head is masked at evaluation time only.
pub fn evaluate(
    model: &ModelParams,
    tasks_seen: &[TaskDataset],
    mode: EvalMode,
) -> Result<Vec<f64>> {
    if tasks_seen.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut seen_classes: Vec<usize> = tasks_seen
        .iter()
        .flat_map(|t| t.class_set.iter().copied())
        .collect();
    seen_classes.sort_unstable();
    seen_classes.dedup();
    if let Some(&max_class) = seen_classes.last() {
        if max_class >= model.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "model head covers {} classes but class {max_class} was seen",
                model.num_classes()
            )));
        }
    }

    let mut out = Vec::with_capacity(tasks_seen.len());
    for task in tasks_seen {
        let candidates: &[usize] = match mode {
            EvalMode::ClassIl => &seen_classes,
            EvalMode::TaskIl => &task.class_set,
        };
        let rows: Vec<&[f64]> = task.test.iter().map(|(x, _)| x.data()).collect();
        let x = Tensor::from_rows(&rows)?;
        let logits = model.logits(&x)?;
        let mut correct = 0usize;
        for (i, (_, label)) in task.test.iter().enumerate() {
            let row = logits.row(i);
            let best = candidates
                .iter()
                .copied()
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            if best == *label {
                correct += 1;
            }
        }
        out.push(correct as f64 / task.test.len() as f64);
    }
    Ok(out)
}

/// Externally prepared dataset loaded from the documented columnar file:
/// a `d,C` header line, then one `f1,...,fd,label` row per sample.
#[derive(Debug, Clone)]
pub struct ImportedDataset {
    pub input_dim: usize,
    pub num_classes: usize,
    pub samples: Vec<(Tensor, usize)>,
}

pub fn import_columnar(path: &std::path::Path) -> Result<ImportedDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty dataset file".into()))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.len() != 2 {
        return Err(Error::Config("dataset header must be `d,C`".into()));
    }
    let parse_usize = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Config(format!("invalid {what} `{s}` in dataset file")))
    };
    let input_dim = parse_usize(fields[0], "feature count")?;
    let num_classes = parse_usize(fields[1], "class count")?;
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::Config("dataset header values must be positive".into()));
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != input_dim + 1 {
            return Err(Error::Config(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                cols.len(),
                input_dim + 1
            )));
        }
        let mut features = Vec::with_capacity(input_dim);
        for c in &cols[..input_dim] {
            features.push(c.parse::<f64>().map_err(|_| {
                Error::Config(format!("invalid feature `{c}` on row {}", lineno + 2))
            })?);
        }
        let label = parse_usize(cols[input_dim], "label")?;
        if label >= num_classes {
            return Err(Error::Config(format!(
                "label {label} on row {} exceeds C = {num_classes}",
                lineno + 2
            )));
        }
        samples.push((Tensor::new(vec![input_dim], features)?, label));
    }
    if samples.is_empty() {
        return Err(Error::Config("dataset file has no sample rows".into()));
    }
    Ok(ImportedDataset {
        input_dim,
        num_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerParams;
    use crate::tensor::squared_distance;
    use rand::SeedableRng;

    #[test]
    fn single_task_stream_is_an_ordinary_dataset() {
        let spec = StreamSpec {
            num_tasks: 1,
            classes_per_task: 3,
            train_per_class: 10,
            test_per_class: 5,
            input_dim: 4,
            ..StreamSpec::default_blobs()
        };
        let tasks = generate(&spec).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].class_set, vec![0, 1, 2]);
        assert_eq!(tasks[0].train.len(), 30);
        assert_eq!(tasks[0].test.len(), 15);
    }

    #[test]
    fn class_sets_are_disjoint_and_labels_members() {
        for generator in [
            GeneratorKind::GaussianBlobs,
            GeneratorKind::TwoMoonsRotations,
            GeneratorKind::GridPatterns,
        ] {
            let spec = StreamSpec {
                generator,
                num_tasks: 4,
                classes_per_task: 2,
                train_per_class: 5,
                test_per_class: 5,
                input_dim: 8,
                noise_scale: 0.5,
                seed: 3,
            };
            let tasks = generate(&spec).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            for task in &tasks {
                for &c in &task.class_set {
                    assert!(seen.insert(c), "class {c} appears twice");
                }
                for (_, y) in task.train.iter().chain(&task.test) {
                    assert!(task.class_set.contains(y));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = StreamSpec {
            train_per_class: 8,
            test_per_class: 4,
            ..StreamSpec::default_blobs()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.train, tb.train);
            assert_eq!(ta.test, tb.test);
        }
        let other = generate(&StreamSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a[0].train, other[0].train);
    }

    #[test]
    fn blob_class_means_are_well_separated() {
        let spec = StreamSpec {
            train_per_class: 50,
            test_per_class: 10,
            ..StreamSpec::default_blobs()
        };
        let tasks = generate(&spec).unwrap();
        let mut means: Vec<Vec<f64>> = Vec::new();
        for task in &tasks {
            for &class in &task.class_set {
                let rows: Vec<&(Tensor, usize)> =
                    task.train.iter().filter(|(_, y)| *y == class).collect();
                let mut mean = vec![0.0; spec.input_dim];
                for (x, _) in &rows {
                    for (m, v) in mean.iter_mut().zip(x.data()) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= rows.len() as f64;
                }
                means.push(mean);
            }
        }
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let dist = squared_distance(&means[i], &means[j]).sqrt();
                assert!(
                    dist >= 4.0 * spec.noise_scale,
                    "classes {i},{j} only {dist} apart"
                );
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = StreamSpec::default_blobs();
        spec.num_tasks = 0;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));

        let mut spec = StreamSpec::default_blobs();
        spec.noise_scale = 0.0;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));

        let mut spec = StreamSpec::default_blobs();
        spec.generator = GeneratorKind::TwoMoonsRotations;
        spec.classes_per_task = 3;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));

        let mut spec = StreamSpec::default_blobs();
        spec.input_dim = 1;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
    }

    fn oracle_model(spec: &StreamSpec, tasks: &[TaskDataset]) -> ModelParams {
        // Nearest-center classifier expressed as a linear head: feature layer
        // is the identity, head weight column c is 2*mu_c with bias -|mu_c|^2.
        let d = spec.input_dim;
        let classes = spec.total_classes();
        let mut centers = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for task in tasks {
            for (x, y) in &task.train {
                counts[*y] += 1;
                for (m, v) in centers[*y].iter_mut().zip(x.data()) {
                    *m += v;
                }
            }
        }
        for (c, count) in centers.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= (*count).max(1) as f64;
            }
        }
        let mut weight = vec![0.0; d * classes];
        let mut bias = vec![0.0; classes];
        for (c, center) in centers.iter().enumerate() {
            for (row, v) in center.iter().enumerate() {
                weight[row * classes + c] = 2.0 * v;
            }
            bias[c] = -squared_distance(center, &vec![0.0; d]);
        }
        ModelParams::from_layers(
            vec![LayerParams {
                weight: Tensor::eye(d),
                bias: Tensor::zeros(&[d]),
                activation: crate::network::Activation::Identity,
            }],
            LayerParams {
                weight: Tensor::new(vec![d, classes], weight).unwrap(),
                bias: Tensor::new(vec![classes], bias).unwrap(),
                activation: crate::network::Activation::Identity,
            },
        )
        .unwrap()
    }

    #[test]
    fn task_il_dominates_class_il_and_oracle_hits_ceiling() {
        let spec = StreamSpec {
            train_per_class: 40,
            test_per_class: 25,
            ..StreamSpec::default_blobs()
        };
        let tasks = generate(&spec).unwrap();
        let model = oracle_model(&spec, &tasks);
        let class_il = evaluate(&model, &tasks, EvalMode::ClassIl).unwrap();
        let task_il = evaluate(&model, &tasks, EvalMode::TaskIl).unwrap();
        for (t, (c, ti)) in class_il.iter().zip(&task_il).enumerate() {
            assert!(ti >= c, "task {t}: task-il {ti} < class-il {c}");
            assert!(*ti > 0.99, "oracle should be nearly perfect, got {ti}");
            assert!(*c > 0.99, "oracle should be nearly perfect, got {c}");
        }
    }

    #[test]
    fn random_model_accuracy_matches_chance_rates() {
        let spec = StreamSpec {
            num_tasks: 5,
            classes_per_task: 2,
            train_per_class: 2,
            test_per_class: 200,
            ..StreamSpec::default_blobs()
        };
        let tasks = generate(&spec).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let model = ModelParams::init(spec.input_dim, &[8], spec.total_classes(), &mut rng).unwrap();
        let class_il = evaluate(&model, &tasks, EvalMode::ClassIl).unwrap();
        let task_il = evaluate(&model, &tasks, EvalMode::TaskIl).unwrap();
        let class_mean: f64 = class_il.iter().sum::<f64>() / class_il.len() as f64;
        let task_mean: f64 = task_il.iter().sum::<f64>() / task_il.len() as f64;
        // A freshly initialized net is label-agnostic: near 1/10 for
        // Class-IL and 1/2 for Task-IL, loosely checked.
        assert!((class_mean - 0.1).abs() < 0.12, "class-il mean {class_mean}");
        assert!((task_mean - 0.5).abs() < 0.2, "task-il mean {task_mean}");
        for (c, t) in class_il.iter().zip(&task_il) {
            assert!(t >= c);
        }
    }

    #[test]
    fn evaluate_rejects_narrow_heads() {
        let spec = StreamSpec {
            train_per_class: 2,
            test_per_class: 2,
            ..StreamSpec::default_blobs()
        };
        let tasks = generate(&spec).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let model = ModelParams::init(spec.input_dim, &[4], 3, &mut rng).unwrap();
        assert!(matches!(
            evaluate(&model, &tasks, EvalMode::ClassIl),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn columnar_import_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "3,2\n0.5,-1.25,2.0,0\n1.5,0.0,0.25,1\n").unwrap();
        let ds = import_columnar(&path).unwrap();
        assert_eq!(ds.input_dim, 3);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.samples[0].0.data(), &[0.5, -1.25, 2.0]);
        assert_eq!(ds.samples[1].1, 1);

        std::fs::write(&path, "3,2\n0.5,-1.25,0\n").unwrap();
        assert!(matches!(import_columnar(&path), Err(Error::Config(_))));
        std::fs::write(&path, "3,2\n0.5,-1.25,2.0,9\n").unwrap();
        assert!(matches!(import_columnar(&path), Err(Error::Config(_))));
    }
}
