//! Patch→label and label↔label message passing.

use crate::config::PlgDifference;
use crate::error::{Error, Result};
use crate::graph::cross_knn;
use crate::scalar::Scalar;
use crate::tensor::{Tape, ValueId};

/// Label update from the `k_plg` nearest patches of each label:
/// `l' = l + [l, max_j (l − x_j)]·W`.
///
/// Returns the refined labels and the label→patch neighbor lists.
pub fn plg_block<T: Scalar>(
    tape: &mut Tape<T>,
    labels: ValueId,
    patches: ValueId,
    w_update: ValueId,
    k_plg: usize,
    difference: PlgDifference,
) -> Result<(ValueId, Vec<Vec<usize>>)> {
    let (sl, sp) = (tape.shape(labels), tape.shape(patches));
    if sl.1 != sp.1 {
        return Err(Error::Dimension {
            op: "plg_block",
            left: sl,
            right: sp,
        });
    }
    if k_plg == 0 || k_plg > sp.0 {
        return Err(Error::Shape(format!("k_plg = {k_plg} with {} patches", sp.0)));
    }
    let nbrs = cross_knn(tape.data(labels), tape.data(patches), k_plg);
    let out = plg_update(tape, labels, patches, w_update, &nbrs, difference)?;
    Ok((out, nbrs))
}

/// PLG update over given label→patch neighbor lists.
pub fn plg_update<T: Scalar>(
    tape: &mut Tape<T>,
    labels: ValueId,
    patches: ValueId,
    w_update: ValueId,
    neighbors: &[Vec<usize>],
    difference: PlgDifference,
) -> Result<ValueId> {
    let negate = difference == PlgDifference::LabelMinusPatch;
    let rel = tape.max_diff(labels, patches, neighbors, negate)?;
    let cat = tape.concat_cols(labels, rel)?;
    let upd = tape.matmul(cat, w_update)?;
    tape.add(labels, upd)
}

/// `L̂ = A·L' + L'`
pub fn llg_block<T: Scalar>(tape: &mut Tape<T>, labels: ValueId, adjacency: ValueId) -> Result<ValueId> {
    let s = tape.shape(labels).0;
    if tape.shape(adjacency) != (s, s) {
        return Err(Error::Dimension {
            op: "llg_block",
            left: tape.shape(adjacency),
            right: tape.shape(labels),
        });
    }
    let mixed = tape.matmul(adjacency, labels)?;
    tape.add(mixed, labels)
}
