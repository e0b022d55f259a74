//! Global alignment in the gramian space.
//!
//! Each modality is summarized by the unit-normalized mean of its patch tokens.
//! The three unit vectors span a parallelotope whose volume,
//! `sqrt(det(A^T A))`, is small when the modalities agree.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Determinant floor used inside training so the square root stays differentiable.
pub const TRAIN_DET_FLOOR: f64 = 1e-12;

/// Default temperature; stored as its logarithm.
pub const DEFAULT_TAU: f64 = 0.07;

/// A unit-norm summary vector of one modality.
#[derive(Debug, Clone, Copy)]
pub struct ModalEmbedding {
    pub modality: Modality,
    /// `[D]`, unit L2 norm.
    pub vector: Var,
}

/// How the square root treats tiny or negative determinants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeMode {
    /// `sqrt(max(det, TRAIN_DET_FLOOR))`.
    Training,
    /// `sqrt(max(det, 0))`.
    Exact,
}

/// Gram matrix and the volume derived from it.
#[derive(Debug, Clone, Copy)]
pub struct GramVolume {
    /// `[3 x 3]`
    pub gram: Var,
    /// `[1]`
    pub volume: Var,
}

/// Mean over the `L` rows of `patches`, then L2 normalization: `[D]`.
pub fn pool_normalize(tape: &mut Tape, patches: Var) -> Result<Var> {
    let mean = tape.mean_rows(patches)?;
    let sq = tape.mul(mean, mean)?;
    let ss = tape.sum(sq);
    if tape.item(ss) == 0.0 {
        return Err(Error::Degenerate("mean patch feature is the zero vector".into()));
    }
    let norm = tape.sqrt(ss);
    let inv = tape.recip(norm);
    tape.mul_scalar(mean, inv)
}

/// `G = A^T A` with `A = (r, n, t)` as columns.
pub fn gram_matrix(tape: &mut Tape, r: Var, n: Var, t: Var) -> Result<Var> {
    let a = tape.stack(&[r, n, t])?;
    let at = tape.transpose(a)?;
    tape.matmul(a, at)
}

/// Volume spanned by three vectors.
pub fn gram_volume(tape: &mut Tape, r: Var, n: Var, t: Var, mode: VolumeMode) -> Result<GramVolume> {
    let gram = gram_matrix(tape, r, n, t)?;
    let det = tape.det3(gram)?;
    let floor = match mode {
        VolumeMode::Training => TRAIN_DET_FLOOR,
        VolumeMode::Exact => 0.0,
    };
    let clamped = tape.clamp_min(det, floor);
    let volume = tape.sqrt(clamped);
    Ok(GramVolume { gram, volume })
}

/// Plain-value volume of three vectors, without recording anything.
pub fn volume_of(r: &[f64], n: &[f64], t: &[f64]) -> f64 {
    let vs = [r, n, t];
    let mut g = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            g[i * 3 + j] = vs[i].iter().zip(vs[j]).map(|(a, b)| a * b).sum();
        }
    }
    libm::sqrt(libm::fmax(crate::tape::det3_raw(&g), 0.0))
}

/// The two gram contrastive terms, data-to-anchor and anchor-to-data.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveTerms {
    pub d2a: Var,
    pub a2d: Var,
    /// `[B x B]` matrix with entry `(i, j) = Vol(a_j, m2_i, m3_i)`.
    pub volumes: Var,
}

/// Gram contrastive losses over a batch of per-sample `(R, N, T)` embeddings.
///
/// With `V[i][j] = Vol(a_j, m2_i, m3_i)` and logits `-V / tau`, data-to-anchor
/// is the mean over `i` of `-log softmax_j(row i)[i]`, and anchor-to-data uses
/// columns instead (`V[j][i] = Vol(a_i, m2_j, m3_j)`). The softmax runs over
/// the batch.
pub fn gram_contrastive_loss(
    tape: &mut Tape,
    batch: &[[Var; 3]],
    anchor: Modality,
    log_tau: Var,
    mode: VolumeMode,
) -> Result<ContrastiveTerms> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::arg("gram contrastive loss needs a non-empty batch"));
    }
    if tape.value(log_tau).len() != 1 {
        return Err(Error::shape("gram_contrastive_loss", tape.shape(log_tau), &[1]));
    }
    let [o2, o3] = anchor.others();
    let mut vols = Vec::with_capacity(b * b);
    for sample_i in batch {
        for sample_j in batch {
            let g = gram_volume(
                tape,
                sample_j[anchor.index()],
                sample_i[o2.index()],
                sample_i[o3.index()],
                mode,
            )?;
            vols.push(g.volume);
        }
    }
    let cells = reshape_all(tape, &vols)?;
    let flat = tape.concat_rows(&cells)?;
    let volumes = tape.reshape(flat, &[b, b])?;
    let neg_log_tau = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg_log_tau);
    let scaled = tape.mul_scalar(volumes, inv_tau)?;
    let logits = tape.scale(scaled, -1.0);

    let d2a = diagonal_nll(tape, logits, b)?;
    let logits_t = tape.transpose(logits)?;
    let a2d = diagonal_nll(tape, logits_t, b)?;
    Ok(ContrastiveTerms { d2a, a2d, volumes })
}

fn reshape_all(tape: &mut Tape, vs: &[Var]) -> Result<Vec<Var>> {
    vs.iter().map(|&v| tape.reshape(v, &[1, 1])).collect()
}

/// Mean over rows of `-log_softmax(row)[row index]`.
fn diagonal_nll(tape: &mut Tape, logits: Var, b: usize) -> Result<Var> {
    let ls = tape.log_softmax_lastdim(logits);
    let diag = (0..b).map(|i| tape.index(ls, i * b + i)).collect::<Result<Vec<_>>>()?;
    let cells = reshape_all(tape, &diag)?;
    let col = tape.concat_rows(&cells)?;
    let m = tape.mean(col);
    Ok(tape.scale(m, -1.0))
}

/// `[1]` tensor holding `ln(tau)`.
pub fn log_tau_tensor(tau: f64) -> Tensor {
    Tensor::scalar(libm::log(tau))
}
