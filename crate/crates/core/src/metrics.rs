//! Average precision and macro mAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scores and binary targets, `[n × S]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch<T> {
    scores: Tensor<T>,
    targets: Tensor<T>,
}

impl<T: Scalar> EvalBatch<T> {
    pub fn new(scores: Tensor<T>, targets: Tensor<T>) -> Result<Self> {
        if scores.shape() != targets.shape() {
            return Err(Error::Dimension {
                op: "eval batch",
                left: scores.shape(),
                right: targets.shape(),
            });
        }
        if targets.data().iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::Data("targets must be 0 or 1".into()));
        }
        if !scores.all_finite() {
            return Err(Error::Numeric("non-finite score".into()));
        }
        Ok(EvalBatch { scores, targets })
    }

    pub fn from_rows(scores: &[Vec<T>], targets: &[Vec<T>]) -> Result<Self> {
        let to = |rows: &[Vec<T>]| -> Result<Tensor<T>> {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Shape("ragged rows".into()));
            }
            Tensor::from_vec(rows.len(), cols, rows.concat())
        };
        Self::new(to(scores)?, to(targets)?)
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.scores.cols()
    }

    fn column(t: &Tensor<T>, c: usize) -> Vec<T> {
        (0..t.rows()).map(|r| t.get(r, c)).collect()
    }
}

/// AP of one class, or `None` when there are no positives.
///
/// Ranks by descending score with ties broken by original index.
pub fn average_precision<T: Scalar>(scores: &[T], targets: &[T]) -> Result<Option<f64>> {
    if scores.len() != targets.len() {
        return Err(Error::Dimension {
            op: "average_precision",
            left: (scores.len(), 1),
            right: (targets.len(), 1),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] > T::zero() {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| total / hits as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `null` for skipped classes.
    pub per_class_ap: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

pub fn evaluate<T: Scalar>(batch: &EvalBatch<T>) -> Result<EvalReport> {
    let per_class_ap = (0..batch.classes())
        .map(|c| {
            average_precision(
                &EvalBatch::column(&batch.scores, c),
                &EvalBatch::column(&batch.targets, c),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped: Vec<usize> = (0..per_class_ap.len()).filter(|&c| per_class_ap[c].is_none()).collect();
    let kept: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Data("no class has a positive target".into()));
    }
    Ok(EvalReport {
        map: kept.iter().sum::<f64>() / kept.len() as f64,
        per_class_ap,
        skipped,
    })
}

pub fn mean_average_precision<T: Scalar>(batch: &EvalBatch<T>) -> Result<f64> {
    evaluate(batch).map(|r| r.map)
}
