//! Continual-learning metrics over the lower-triangular accuracy matrix
//! a[i][j] = accuracy on task j's test set after finishing task i.

use crate::error::{Error, Result};

/// Lower-triangular accuracy record; row i holds i+1 entries (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Append the evaluation row recorded after finishing the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::IncompleteMatrix(format!(
                "row {} must hold {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(&bad) = row.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of tasks recorded so far.
    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    /// a[i][j] with 0-based indices, j <= i.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn final_row(&self) -> Result<&[f64]> {
        if self.rows.is_empty() {
            return Err(Error::IncompleteMatrix("no evaluations recorded".into()));
        }
        Ok(self.rows.last().unwrap())
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean of the final row: accuracy over every task after all training.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Backward transfer: (1/(N-1)) sum_{j<N} (a[N][j] - a[j][j]). Negative
/// values quantify forgetting.
pub fn backward_transfer(m: &AccuracyMatrix) -> Result<f64> {
    let n = m.num_tasks();
    if n < 2 {
        return Err(Error::SingleTask);
    }
    let last = m.final_row()?;
    let mut total = 0.0;
    for j in 0..n - 1 {
        total += last[j] - m.get(j, j);
    }
    Ok(total / (n - 1) as f64)
}

/// Trajectory of task j's accuracy as later tasks arrive: [(i, a[i][j])] for
/// i >= j, 0-based.
pub fn forgetting_curve(m: &AccuracyMatrix, j: usize) -> Result<Vec<(usize, f64)>> {
    if j >= m.num_tasks() {
        return Err(Error::InvalidTask(j));
    }
    Ok((j..m.num_tasks()).map(|i| (i, m.get(i, j))).collect())
}

/// Sample mean and sample standard deviation (n-1 denominator; 0 for n = 1).
pub fn aggregate(runs: &[f64]) -> Result<(f64, f64)> {
    if runs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let std = if runs.len() == 1 {
        0.0
    } else {
        (runs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, std))
}
