//! Hard (non-differentiable) top-k selection and binary masks.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Indices of the `k` largest scores, returned in ascending index order.
///
/// Ties are broken in favour of the smaller index. Selection is a value-level
/// decision and never participates in gradient propagation.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::arg(alloc::format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Binary mask of length `len` with ones at `indices`.
pub fn index_mask(indices: &[usize], len: usize) -> Vec<f64> {
    let mut mask = vec![0.0; len];
    for &i in indices {
        mask[i] = 1.0;
    }
    mask
}
