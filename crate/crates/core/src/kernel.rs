//! Kernel functions and MMD estimators between feature batches, plus the
//! plain L2 / cosine distances used by the ablation runs.
//!
//! The unbiased estimator is built onto a [`Graph`] so its gradient flows to
//! the student rows; the teacher side always enters as constants. Bandwidths
//! resolved by the median heuristic are computed from the pooled batch values
//! and frozen, so no gradient flows through the bandwidth choice.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Fixed,
    MedianHeuristic,
}

/// Multipliers applied to the median-heuristic scale when no explicit list is
/// configured: a mixture spanning two octaves around the median.
pub const DEFAULT_BANDWIDTH_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Kernel choice. For `Rbf` + `Fixed`, `bandwidths` are absolute sigmas; for
/// `Rbf` + `MedianHeuristic` they are multipliers of the median pairwise
/// distance (defaulting to [`DEFAULT_BANDWIDTH_MULTIPLIERS`] when empty).
/// `Linear` ignores both fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    #[serde(default)]
    pub bandwidths: Vec<f64>,
    pub bandwidth_mode: BandwidthMode,
}

impl KernelSpec {
    /// Default kernel: a mixture of 5 RBF kernels around the median heuristic.
    pub fn rbf_median_mixture() -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidths: Vec::new(),
            bandwidth_mode: BandwidthMode::MedianHeuristic,
        }
    }

    pub fn rbf_fixed(bandwidths: Vec<f64>) -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidths,
            bandwidth_mode: BandwidthMode::Fixed,
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            bandwidths: Vec::new(),
            bandwidth_mode: BandwidthMode::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Rbf {
            if self.bandwidth_mode == BandwidthMode::Fixed && self.bandwidths.is_empty() {
                return Err(Error::InvalidSpec(
                    "fixed rbf kernel needs at least one bandwidth".into(),
                ));
            }
            if let Some(&bad) = self.bandwidths.iter().find(|&&b| !(b > 0.0)) {
                return Err(Error::NonPositiveBandwidth(bad));
            }
        }
        Ok(())
    }

    /// Absolute bandwidths for one (pooled) sample set.
    fn resolve(&self, pooled: &[&Tensor]) -> Result<Vec<f64>> {
        self.validate()?;
        match (self.kind, self.bandwidth_mode) {
            (KernelKind::Linear, _) => Ok(Vec::new()),
            (KernelKind::Rbf, BandwidthMode::Fixed) => Ok(self.bandwidths.clone()),
            (KernelKind::Rbf, BandwidthMode::MedianHeuristic) => {
                let sigma = median_pairwise_distance(pooled);
                let multipliers: &[f64] = if self.bandwidths.is_empty() {
                    &DEFAULT_BANDWIDTH_MULTIPLIERS
                } else {
                    &self.bandwidths
                };
                Ok(multipliers.iter().map(|m| m * sigma).collect())
            }
        }
    }
}

/// Median of the pairwise Euclidean distances over the pooled rows of all
/// given matrices, falling back to 1.0 when every point coincides.
pub fn median_pairwise_distance(parts: &[&Tensor]) -> f64 {
    let mut rows: Vec<&[f64]> = Vec::new();
    for t in parts {
        for i in 0..t.rows() {
            rows.push(t.row(i));
        }
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(squared_distance(rows[i], rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn kernel_scalar(kind: KernelKind, bandwidths: &[f64], a: &[f64], b: &[f64]) -> f64 {
    match kind {
        KernelKind::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        KernelKind::Rbf => {
            let d2 = squared_distance(a, b);
            bandwidths
                .iter()
                .map(|s| (-d2 / (2.0 * s * s)).exp())
                .sum()
        }
    }
}

/// Gram matrix K[i][j] = k(a_i, b_j). In median-heuristic mode the bandwidth
/// is resolved from the pooled rows of a and b.
pub fn gram(kernel: &KernelSpec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_widths(a, b)?;
    let bandwidths = kernel.resolve(&[a, b])?;
    let (n, m) = (a.rows(), b.rows());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.push(kernel_scalar(kernel.kind, &bandwidths, a.row(i), b.row(j)));
        }
    }
    Ok(Tensor::from_parts(vec![n, m], data))
}

/// Biased squared MMD: mean(K_aa) - 2 mean(K_ab) + mean(K_bb), with one
/// bandwidth resolution shared by all three blocks.
pub fn mmd2_biased(kernel: &KernelSpec, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_widths(a, b)?;
    let bandwidths = kernel.resolve(&[a, b])?;
    let fixed = KernelSpec {
        kind: kernel.kind,
        bandwidths,
        bandwidth_mode: BandwidthMode::Fixed,
    };
    let mean = |t: &Tensor| t.sum() / t.len() as f64;
    let kaa = gram(&fixed, a, a)?;
    let kab = gram(&fixed, a, b)?;
    let kbb = gram(&fixed, b, b)?;
    Ok(mean(&kaa) - 2.0 * mean(&kab) + mean(&kbb))
}

/// Teacher/student feature batches with matching row count and width.
#[derive(Debug, Clone)]
pub struct FeatureBatchPair {
    pub teacher: Tensor,
    pub student: Tensor,
}

impl FeatureBatchPair {
    pub fn new(teacher: Tensor, student: Tensor) -> Result<Self> {
        if teacher.rank() != 2 || student.rank() != 2 {
            return Err(Error::DimensionMismatch(
                "feature batches must be matrices".into(),
            ));
        }
        if teacher.shape() != student.shape() {
            return Err(Error::DimensionMismatch(format!(
                "teacher {:?} vs student {:?}",
                teacher.shape(),
                student.shape()
            )));
        }
        if teacher.rows() < 2 {
            return Err(Error::BatchTooSmall {
                need: 2,
                got: teacher.rows(),
            });
        }
        Ok(Self { teacher, student })
    }

    pub fn batch_size(&self) -> usize {
        self.teacher.rows()
    }
}

/// Unbiased MMD estimate between the batches:
/// (1/(N(N-1))) sum_{i != j} [k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(a_j,b_i)].
/// May be negative. Differentiable with respect to the student node only.
pub fn mmd_unbiased_node(
    g: &mut Graph,
    kernel: &KernelSpec,
    teacher: &Tensor,
    student: NodeId,
) -> Result<NodeId> {
    let student_value = g.value(student).clone();
    let pair = FeatureBatchPair::new(teacher.clone(), student_value)?;
    let n = pair.batch_size();
    let bandwidths = kernel.resolve(&[&pair.teacher, &pair.student])?;

    let a = g.constant(pair.teacher.clone());
    // Off-diagonal sums of the four Gram blocks; K_ab and K_ba share entries
    // through symmetry of the kernel, so the cross block is counted twice.
    let off_aa = gram_offdiag_sum(g, kernel.kind, &bandwidths, a, a, n)?;
    let off_bb = gram_offdiag_sum(g, kernel.kind, &bandwidths, student, student, n)?;
    let off_ab = gram_offdiag_sum(g, kernel.kind, &bandwidths, a, student, n)?;

    let two = g.constant(Tensor::scalar(2.0));
    let cross = g.mul(off_ab, two)?;
    let same = g.add(off_aa, off_bb)?;
    let total = g.sub(same, cross)?;
    let scale = g.constant(Tensor::scalar(1.0 / (n as f64 * (n as f64 - 1.0))));
    g.mul(total, scale)
}

/// Value-level form of the estimator (builds a throwaway graph so the value
/// path and the gradient path are one and the same).
pub fn mmd_unbiased(kernel: &KernelSpec, pair: &FeatureBatchPair) -> Result<f64> {
    let mut g = Graph::new();
    let student = g.constant(pair.student.clone());
    let node = mmd_unbiased_node(&mut g, kernel, &pair.teacher, student)?;
    Ok(g.value(node).data()[0])
}

/// Sum of the off-diagonal entries of the Gram block between two row sets.
fn gram_offdiag_sum(
    g: &mut Graph,
    kind: KernelKind,
    bandwidths: &[f64],
    left: NodeId,
    right: NodeId,
    n: usize,
) -> Result<NodeId> {
    let k = match kind {
        KernelKind::Linear => {
            let rt = g.transpose(right)?;
            g.matmul(left, rt)?
        }
        KernelKind::Rbf => {
            // ||l_i - r_j||^2 = ||l_i||^2 + ||r_j||^2 - 2 l_i . r_j, assembled
            // identically for every block so equal inputs cancel exactly.
            let d2 = pairwise_sq_dists(g, left, right, n)?;
            let mut mix: Option<NodeId> = None;
            for sigma in bandwidths {
                let c = g.constant(Tensor::filled(&[n, n], -1.0 / (2.0 * sigma * sigma)));
                let scaled = g.mul(d2, c)?;
                let e = g.exp(scaled)?;
                mix = Some(match mix {
                    Some(acc) => g.add(acc, e)?,
                    None => e,
                });
            }
            mix.expect("rbf kernel resolved to at least one bandwidth")
        }
    };
    let total = g.sum(k)?;
    let eye = g.constant(Tensor::eye(n));
    let diag = g.mul(k, eye)?;
    let trace = g.sum(diag)?;
    g.sub(total, trace)
}

fn pairwise_sq_dists(g: &mut Graph, left: NodeId, right: NodeId, n: usize) -> Result<NodeId> {
    let lsq = g.square(left)?;
    let lnorm = g.sum_axis(lsq, 1)?;
    let lcol = g.reshape(lnorm, &[n, 1])?;
    let ones_row = g.constant(Tensor::filled(&[1, n], 1.0));
    let l_bcast = g.matmul(lcol, ones_row)?;

    let rsq = g.square(right)?;
    let rnorm = g.sum_axis(rsq, 1)?;
    let rrow = g.reshape(rnorm, &[1, n])?;
    let ones_col = g.constant(Tensor::filled(&[n, 1], 1.0));
    let r_bcast = g.matmul(ones_col, rrow)?;

    let rt = g.transpose(right)?;
    let dots = g.matmul(left, rt)?;
    let two = g.constant(Tensor::filled(&[n, n], 2.0));
    let twice = g.mul(dots, two)?;
    let sums = g.add(l_bcast, r_bcast)?;
    g.sub(sums, twice)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationDistance {
    Cosine,
    L2,
}

/// Row-aligned distances for the ablation runs: mean squared L2 distance, or
/// mean (1 - cosine similarity). Differentiable with respect to the student.
pub fn ablation_distance_node(
    g: &mut Graph,
    kind: AblationDistance,
    teacher: &Tensor,
    student: NodeId,
) -> Result<NodeId> {
    let sv = g.value(student).clone();
    if teacher.rank() != 2 || teacher.shape() != sv.shape() {
        return Err(Error::DimensionMismatch(format!(
            "teacher {:?} vs student {:?}",
            teacher.shape(),
            sv.shape()
        )));
    }
    let b = teacher.rows();
    match kind {
        AblationDistance::L2 => {
            let t = g.constant(teacher.clone());
            let diff = g.sub(t, student)?;
            let sq = g.square(diff)?;
            let per_row = g.sum_axis(sq, 1)?;
            g.mean(per_row)
        }
        AblationDistance::Cosine => {
            let t_norms: Vec<f64> = teacher.row_sq_norms().iter().map(|v| v.sqrt()).collect();
            for (i, norm) in t_norms.iter().enumerate() {
                if *norm == 0.0 {
                    return Err(Error::ZeroVector(i));
                }
            }
            for (i, norm) in sv.row_sq_norms().iter().enumerate() {
                if *norm == 0.0 {
                    return Err(Error::ZeroVector(i));
                }
            }
            let t = g.constant(teacher.clone());
            let prod = g.mul(t, student)?;
            let dots = g.sum_axis(prod, 1)?;
            // 1/||s_i|| = exp(-0.5 log ||s_i||^2), keeping the whole path
            // inside the differentiable op set.
            let ssq = g.square(student)?;
            let s_sq_norm = g.sum_axis(ssq, 1)?;
            let logs = g.log(s_sq_norm)?;
            let neg_half = g.constant(Tensor::filled(&[b], -0.5));
            let scaled = g.mul(logs, neg_half)?;
            let inv_s = g.exp(scaled)?;
            let inv_t = g.constant(Tensor::from_parts(
                vec![b],
                t_norms.iter().map(|v| 1.0 / v).collect(),
            ));
            let cos = g.mul(dots, inv_s)?;
            let cos = g.mul(cos, inv_t)?;
            let ones = g.constant(Tensor::filled(&[b], 1.0));
            let dist = g.sub(ones, cos)?;
            g.mean(dist)
        }
    }
}

/// Value-level ablation distance.
pub fn ablation_distance(kind: AblationDistance, pair: &FeatureBatchPair) -> Result<f64> {
    let mut g = Graph::new();
    let student = g.constant(pair.student.clone());
    let node = ablation_distance_node(&mut g, kind, &pair.teacher, student)?;
    Ok(g.value(node).data()[0])
}

fn check_widths(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "sample sets {:?} and {:?} must share a width",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
        Tensor::from_parts(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
    }

    /// Brute-force Eq.-by-the-book oracle: double loop over i != j.
    pub(crate) fn mmd_unbiased_oracle(
        kind: KernelKind,
        bandwidths: &[f64],
        a: &Tensor,
        b: &Tensor,
    ) -> f64 {
        let n = a.rows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                total += kernel_scalar(kind, bandwidths, a.row(i), a.row(j))
                    + kernel_scalar(kind, bandwidths, b.row(i), b.row(j))
                    - kernel_scalar(kind, bandwidths, a.row(i), b.row(j))
                    - kernel_scalar(kind, bandwidths, a.row(j), b.row(i));
            }
        }
        total / (n as f64 * (n as f64 - 1.0))
    }

    #[test]
    fn rbf_gram_unit_diagonal_and_analytic_entry() {
        let spec = KernelSpec::rbf_fixed(vec![1.0]);
        let a = Tensor::new(vec![2, 2], vec![0.3, 0.4, -1.0, 2.0]).unwrap();
        let k = gram(&spec, &a, &a).unwrap();
        assert_eq!(k.get2(0, 0), 1.0);
        assert_eq!(k.get2(1, 1), 1.0);

        // ||x - y||^2 = 2 sigma^2 gives exp(-1).
        let sigma = 1.5f64;
        let spec = KernelSpec::rbf_fixed(vec![sigma]);
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![(2.0 * sigma * sigma).sqrt()]).unwrap();
        let k = gram(&spec, &x, &y).unwrap();
        assert!((k.data()[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn linear_gram_is_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 4, 3, 2.0);
        let b = rand_matrix(&mut rng, 5, 3, 2.0);
        let k = gram(&KernelSpec::linear(), &a, &b).unwrap();
        let expect = crate::tensor::matmul(&a, &crate::tensor::transpose(&b).unwrap()).unwrap();
        assert_eq!(k, expect);
    }

    #[test]
    fn gram_rejects_width_mismatch_and_bad_bandwidths() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            gram(&KernelSpec::linear(), &a, &b),
            Err(Error::DimensionMismatch(_))
        ));
        let bad = KernelSpec::rbf_fixed(vec![1.0, -0.5]);
        assert!(matches!(
            gram(&bad, &a, &a),
            Err(Error::NonPositiveBandwidth(_))
        ));
    }

    #[test]
    fn biased_mmd_zero_on_identical_sets_and_single_sample_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_matrix(&mut rng, 5, 3, 1.0);
        let spec = KernelSpec::rbf_fixed(vec![0.7, 1.3]);
        let v = mmd2_biased(&spec, &a, &a).unwrap();
        assert!(v.abs() < 1e-12);

        let x = Tensor::new(vec![1, 2], vec![0.5, -0.25]).unwrap();
        let y = Tensor::new(vec![1, 2], vec![1.5, 2.0]).unwrap();
        let v = mmd2_biased(&spec, &x, &y).unwrap();
        let bw = &[0.7, 1.3];
        let expect = kernel_scalar(KernelKind::Rbf, bw, x.row(0), x.row(0))
            - 2.0 * kernel_scalar(KernelKind::Rbf, bw, x.row(0), y.row(0))
            + kernel_scalar(KernelKind::Rbf, bw, y.row(0), y.row(0));
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn biased_linear_mmd_matches_mean_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..10);
            let m = rng.gen_range(1..10);
            let d = rng.gen_range(1..6);
            let a = rand_matrix(&mut rng, n, d, 3.0);
            let b = rand_matrix(&mut rng, m, d, 3.0);
            let v = mmd2_biased(&KernelSpec::linear(), &a, &b).unwrap();
            let mean = |t: &Tensor| -> Vec<f64> {
                let mut acc = vec![0.0; t.cols()];
                for i in 0..t.rows() {
                    for (s, x) in acc.iter_mut().zip(t.row(i)) {
                        *s += x;
                    }
                }
                acc.iter().map(|s| s / t.rows() as f64).collect()
            };
            let ma = mean(&a);
            let mb = mean(&b);
            let expect = squared_distance(&ma, &mb);
            assert!((v - expect).abs() < 1e-10, "{v} vs {expect}");
        }
    }

    #[test]
    fn unbiased_mmd_identical_batches_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_matrix(&mut rng, 6, 4, 2.0);
        for spec in [KernelSpec::rbf_median_mixture(), KernelSpec::linear()] {
            let pair = FeatureBatchPair::new(a.clone(), a.clone()).unwrap();
            let v = mmd_unbiased(&spec, &pair).unwrap();
            assert_eq!(v, 0.0, "kernel {spec:?}");
        }
    }

    #[test]
    fn unbiased_mmd_linear_worked_example() {
        // a = {0, 2}, b = {1, 1} as scalars: the estimator is exactly -1.
        let a = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let pair = FeatureBatchPair::new(a, b).unwrap();
        let v = mmd_unbiased(&KernelSpec::linear(), &pair).unwrap();
        assert_eq!(v, -1.0);
    }

    #[test]
    fn unbiased_mmd_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..40 {
            let n = rng.gen_range(2..=16);
            let d = rng.gen_range(1..=6);
            let a = rand_matrix(&mut rng, n, d, 1.5);
            let b = rand_matrix(&mut rng, n, d, 1.5);
            for spec in [KernelSpec::rbf_median_mixture(), KernelSpec::linear()] {
                let resolved = spec.resolve(&[&a, &b]).unwrap();
                let oracle = mmd_unbiased_oracle(spec.kind, &resolved, &a, &b);
                let pair = FeatureBatchPair::new(a.clone(), b.clone()).unwrap();
                let v = mmd_unbiased(&spec, &pair).unwrap();
                assert!(
                    (v - oracle).abs() < 1e-12,
                    "trial {trial}: {v} vs {oracle} for {spec:?}"
                );
            }
        }
    }

    #[test]
    fn unbiased_mmd_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let a = rand_matrix(&mut rng, 5, 3, 1.0);
            let b = rand_matrix(&mut rng, 5, 3, 1.0);
            let spec = KernelSpec::rbf_median_mixture();
            let ab = mmd_unbiased(&spec, &FeatureBatchPair::new(a.clone(), b.clone()).unwrap())
                .unwrap();
            let ba = mmd_unbiased(&spec, &FeatureBatchPair::new(b, a).unwrap()).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn unbiased_mmd_rejects_tiny_batches() {
        let a = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            FeatureBatchPair::new(a.clone(), a),
            Err(Error::BatchTooSmall { need: 2, got: 1 })
        ));
    }

    #[test]
    fn unbiased_mmd_is_unbiased_under_resampling() {
        // Same distribution on both sides: the estimator should average to 0
        // within 3 standard errors over many resampled pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = KernelSpec::rbf_fixed(vec![1.0]);
        let mut values = Vec::with_capacity(2500);
        for _ in 0..2500 {
            let a = rand_matrix(&mut rng, 8, 2, 1.0);
            let b = rand_matrix(&mut rng, 8, 2, 1.0);
            let pair = FeatureBatchPair::new(a, b).unwrap();
            values.push(mmd_unbiased(&spec, &pair).unwrap());
        }
        let n = values.len() as f64;
        let mean: f64 = values.iter().sum::<f64>() / n;
        let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn unbiased_mmd_student_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let teacher = rand_matrix(&mut rng, 5, 3, 1.0);
        let student = rand_matrix(&mut rng, 5, 3, 1.0);
        // Fixed bandwidths keep the loss smooth in the student coordinates.
        for spec in [
            KernelSpec::rbf_fixed(vec![0.5, 1.0, 2.0]),
            KernelSpec::linear(),
        ] {
            let teacher = teacher.clone();
            let err = finite_diff_check(
                |g, ids| mmd_unbiased_node(g, &spec, &teacher, ids[0]),
                std::slice::from_ref(&student),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "rel err {err} for {spec:?}");
        }
    }

    #[test]
    fn ablation_distances_zero_on_identical_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_matrix(&mut rng, 4, 3, 1.0);
        let pair = FeatureBatchPair::new(a.clone(), a).unwrap();
        assert_eq!(ablation_distance(AblationDistance::L2, &pair).unwrap(), 0.0);
        let c = ablation_distance(AblationDistance::Cosine, &pair).unwrap();
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn ablation_distance_analytic_values() {
        let teacher = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let student = Tensor::new(vec![2, 2], vec![3.0, 4.0, 3.0, 4.0]).unwrap();
        let pair = FeatureBatchPair::new(teacher, student).unwrap();
        assert_eq!(ablation_distance(AblationDistance::L2, &pair).unwrap(), 25.0);

        let teacher = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let student = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let pair = FeatureBatchPair::new(teacher, student).unwrap();
        let v = ablation_distance(AblationDistance::Cosine, &pair).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let teacher = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let student = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let pair = FeatureBatchPair::new(teacher, student).unwrap();
        assert!(matches!(
            ablation_distance(AblationDistance::Cosine, &pair),
            Err(Error::ZeroVector(0))
        ));
    }

    #[test]
    fn ablation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let teacher = rand_matrix(&mut rng, 4, 3, 1.0);
        let student = rand_matrix(&mut rng, 4, 3, 1.0);
        for kind in [AblationDistance::L2, AblationDistance::Cosine] {
            let teacher = teacher.clone();
            let err = finite_diff_check(
                |g, ids| ablation_distance_node(g, kind, &teacher, ids[0]),
                std::slice::from_ref(&student),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "rel err {err} for {kind:?}");
        }
    }
}
