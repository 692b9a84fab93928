//! Patch and label readouts fused into per-class probabilities.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, ValueId};

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
    /// `[S × C]`, row `i` reads out label `i` only.
    pub readout: ValueId,
}

/// Global average pool over nodes followed by two 1×1 convolutions (dense
/// layers on the pooled vector) with GELU between: `[N × D] → [1 × S]`.
pub fn patch_logits<T: Scalar>(tape: &mut Tape<T>, patches: ValueId, p: &HeadParams) -> Result<ValueId> {
    let pooled = tape.mean_rows(patches)?;
    let h = tape.matmul(pooled, p.w1)?;
    let h = tape.add_row_vector(h, p.b1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, p.w2)?;
    tape.add_row_vector(y, p.b2)
}

/// `ŷ_i = ⟨readout_i, l_i⟩`, returned as `[1 × S]`.
pub fn label_logits<T: Scalar>(tape: &mut Tape<T>, labels: ValueId, readout: ValueId) -> Result<ValueId> {
    let scores = tape.row_dot(readout, labels)?;
    Ok(tape.transpose(scores))
}

/// Sum of both logit paths, `[1 × S]`.
pub fn fused_logits<T: Scalar>(tape: &mut Tape<T>, patch: ValueId, label: ValueId) -> Result<ValueId> {
    tape.add(patch, label)
}

/// `sigmoid(y_patch + ŷ)` on plain values.
pub fn fuse<T: Scalar>(patch: &[T], label: &[T]) -> Result<Vec<T>> {
    if patch.len() != label.len() {
        return Err(Error::Dimension {
            op: "fuse",
            left: (1, patch.len()),
            right: (1, label.len()),
        });
    }
    Ok(patch.iter().zip(label).map(|(&a, &b)| (a + b).sigmoid()).collect())
}

pub fn fuse_tensors<T: Scalar>(patch: &Tensor<T>, label: &Tensor<T>) -> Result<Tensor<T>> {
    if patch.shape() != label.shape() {
        return Err(Error::Dimension {
            op: "fuse",
            left: patch.shape(),
            right: label.shape(),
        });
    }
    Ok(patch.zip_map(label, |a, b| (a + b).sigmoid()))
}
