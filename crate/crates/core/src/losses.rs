//! Identity supervision and the combined training objective.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_CE_EPSILON: f64 = 0.1;
pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.3;
/// Floor on squared distances before the square root.
const DIST_FLOOR: f64 = 1e-12;

/// Cross-entropy against label-smoothed targets, averaged over the batch.
///
/// The true class gets `1 - epsilon`; the remaining `epsilon` is spread evenly
/// over the other `C - 1` classes.
pub fn label_smooth_ce(tape: &mut Tape, logits: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
    let (b, c) = tape.value(logits).dims2()?;
    if labels.len() != b {
        return Err(Error::shape("label_smooth_ce", &[b, c], &[labels.len()]));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::arg(format!("smoothing {epsilon} outside [0, 1)")));
    }
    if c < 2 && epsilon > 0.0 {
        return Err(Error::arg("label smoothing needs at least two classes"));
    }
    let off = if c > 1 { epsilon / (c - 1) as f64 } else { 0.0 };
    let mut target = alloc::vec![off; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::arg(format!("label {y} outside [0, {c})")));
        }
        target[i * c + y] = 1.0 - epsilon;
    }
    let target = tape.constant(Tensor::new(&[b, c], target)?);
    let logp = tape.log_softmax_lastdim(logits);
    let weighted = tape.mul(logp, target)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / b as f64))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hardest positive and hardest negative index for every anchor.
pub fn mine_batch_hard(emb: &Tensor, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let (b, _) = emb.dims2()?;
    if labels.len() != b {
        return Err(Error::shape("batch_hard_triplet", emb.shape(), &[labels.len()]));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&n| n < 2) {
        return Err(Error::arg(
            "batch-hard mining needs at least two identities with at least two samples each",
        ));
    }
    if emb.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("batch-hard mining on non-finite embeddings".into()));
    }
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos = (f64::NEG_INFINITY, usize::MAX);
        let mut neg = (f64::INFINITY, usize::MAX);
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = squared_distance(emb.row(a), emb.row(j));
            if labels[j] == labels[a] {
                if d > pos.0 {
                    pos = (d, j);
                }
            } else if d < neg.0 {
                neg = (d, j);
            }
        }
        out.push((pos.1, neg.1));
    }
    Ok(out)
}

fn distance(tape: &mut Tape, emb: Var, i: usize, j: usize) -> Result<Var> {
    let a = tape.slice_rows(emb, i, 1)?;
    let b = tape.slice_rows(emb, j, 1)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let ss = tape.sum(sq);
    let ss = tape.clamp_min(ss, DIST_FLOOR);
    Ok(tape.sqrt(ss))
}

/// Batch-hard triplet loss on Euclidean distances.
///
/// Mining picks indices from forward values; the loss is differentiable with
/// respect to the embeddings of the chosen pairs.
pub fn batch_hard_triplet(tape: &mut Tape, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let pairs = mine_batch_hard(tape.value(emb), labels)?;
    let mut hinges = Vec::with_capacity(pairs.len());
    for (a, &(p, n)) in pairs.iter().enumerate() {
        let dap = distance(tape, emb, a, p)?;
        let dan = distance(tape, emb, a, n)?;
        let gap = tape.sub(dap, dan)?;
        let margin_c = tape.constant(Tensor::scalar(margin));
        let z = tape.add(gap, margin_c)?;
        let hinge = tape.relu(z);
        hinges.push(tape.reshape(hinge, &[1, 1])?);
    }
    let all = tape.concat_rows(&hinges)?;
    Ok(tape.mean(all))
}

/// Per-term losses of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub ce: Var,
    pub triplet: Var,
    pub d2a: Var,
    pub a2d: Var,
    pub mse: Var,
}

/// Scalar values of every loss term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub triplet: f64,
    pub d2a: f64,
    pub a2d: f64,
    pub mse: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossReport {
    /// `ce + triplet + alpha (d2a + a2d) + beta mse` recomputed from the parts.
    pub fn reassembled(&self) -> f64 {
        self.ce + self.triplet + self.alpha * (self.d2a + self.a2d) + self.beta * self.mse
    }
}

/// `L = (L_ce + L_tri) + alpha (L_d2a + L_a2d) + beta L_mse`.
pub fn total_loss(tape: &mut Tape, c: &LossComponents, alpha: f64, beta: f64) -> Result<(Var, LossReport)> {
    let global = tape.add(c.ce, c.triplet)?;
    let gram = tape.add(c.d2a, c.a2d)?;
    let gram = tape.scale(gram, alpha);
    let local = tape.scale(c.mse, beta);
    let total = tape.add(global, gram)?;
    let total = tape.add(total, local)?;
    let report = LossReport {
        ce: tape.item(c.ce),
        triplet: tape.item(c.triplet),
        d2a: tape.item(c.d2a),
        a2d: tape.item(c.a2d),
        mse: tape.item(c.mse),
        total: tape.item(total),
        alpha,
        beta,
    };
    Ok((total, report))
}
