//! Class weights from averaged target predictions.
//!
//! Classes the classifier rarely predicts on target data are unlikely to
//! exist in the target domain; averaging the softmax rows over all target
//! samples exposes them as small entries. Dividing by the largest entry
//! keeps the best-supported class at full weight.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tolerance on row sums accepted as a probability distribution.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    gamma: Vec<f64>,
    normalized: bool,
}

impl ClassWeights {
    /// All-ones, already normalized. Used before any estimate exists.
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            gamma: vec![1.0; num_classes],
            normalized: true,
        }
    }

    /// Wraps a caller-supplied vector, checking the invariant that matches
    /// `normalized`.
    pub fn from_vec(gamma: Vec<f64>, normalized: bool) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::Parameter("class weight vector is empty".into()));
        }
        if gamma.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return Err(Error::Parameter(
                "class weights must be finite and >= 0".into(),
            ));
        }
        if normalized {
            let max = gamma.iter().copied().fold(0.0, f64::max);
            if max != 1.0 {
                return Err(Error::State(format!(
                    "normalized weights must peak at 1, got {max}"
                )));
            }
        }
        Ok(Self { gamma, normalized })
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Column means of the target probability matrix.
pub fn estimate_class_weights(target_probs: &Matrix) -> Result<ClassWeights> {
    let n = target_probs.rows();
    if n == 0 {
        return Err(Error::Parameter("no target predictions".into()));
    }
    let mut gamma = vec![0.0; target_probs.cols()];
    for i in 0..n {
        let row = target_probs.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Distribution { row: i, sum });
        }
        for (g, &p) in gamma.iter_mut().zip(row) {
            *g += p;
        }
    }
    let inv = 1.0 / n as f64;
    for g in &mut gamma {
        *g *= inv;
    }
    Ok(ClassWeights {
        gamma,
        normalized: false,
    })
}

/// Divides every entry by the largest one.
pub fn normalize_weights(w: &ClassWeights) -> Result<ClassWeights> {
    let max = w.gamma.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    // x / x == 1 exactly in IEEE arithmetic, so the peak lands on 1.0.
    Ok(ClassWeights {
        gamma: w.gamma.iter().map(|&g| g / max).collect(),
        normalized: true,
    })
}

pub fn weight_for_sample(w: &ClassWeights, label: usize) -> Result<f64> {
    if !w.normalized {
        return Err(Error::State(
            "class weights must be normalized before lookup".into(),
        ));
    }
    w.gamma.get(label).copied().ok_or(Error::Index {
        what: "label",
        index: label,
        bound: w.gamma.len(),
    })
}

/// Per-sample weights for a batch of labels.
pub fn weights_for_labels(w: &ClassWeights, labels: &[usize]) -> Result<Vec<f64>> {
    labels.iter().map(|&y| weight_for_sample(w, y)).collect()
}
