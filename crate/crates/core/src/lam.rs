//! Local alignment through learned sampling offsets.
//!
//! Patch tokens are laid back out on their spatial grid. A small conv net
//! predicts a bounded 2D displacement for every reference point, features are
//! resampled bilinearly at `reference + offset`, and the three resampled maps
//! are pulled together with an MSE.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::params::{Bound, Init, ParamSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Uniform normalized reference points, `(row, col)` per point.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    /// `(H_g, W_g)`
    pub dims: (usize, usize),
    /// `[H_g x W_g x 2]`
    pub points: Tensor,
}

impl ReferenceGrid {
    pub fn len(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn linspace_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Reference grid for an `H_p x W_p` patch grid down-sampled by `r`.
pub fn make_reference_grid(h_p: usize, w_p: usize, r: usize) -> Result<ReferenceGrid> {
    if r == 0 || h_p == 0 || w_p == 0 || !h_p.is_multiple_of(r) || !w_p.is_multiple_of(r) {
        return Err(Error::arg(format!("down-sample factor {r} must divide the {h_p}x{w_p} grid")));
    }
    let (hg, wg) = (h_p / r, w_p / r);
    let mut pts = Vec::with_capacity(hg * wg * 2);
    for i in 0..hg {
        for j in 0..wg {
            pts.push(linspace_coord(i, hg));
            pts.push(linspace_coord(j, wg));
        }
    }
    Ok(ReferenceGrid {
        dims: (hg, wg),
        points: Tensor::new(&[hg, wg, 2], pts)?,
    })
}

/// One cell of the coarser grid axis in normalized units.
pub fn default_delta_max(hg: usize, wg: usize) -> f64 {
    match (hg.min(wg), hg.max(wg)) {
        (lo, _) if lo > 1 => 2.0 / (lo - 1) as f64,
        (_, hi) if hi > 1 => 2.0 / (hi - 1) as f64,
        _ => 1.0,
    }
}

/// Bound weights of one offset-prediction net.
#[derive(Debug, Clone, Copy)]
pub struct OffsetNetParams {
    /// `[D x D]`
    pub proj: Var,
    /// `[9D x D/2]`, a 3x3 conv in im2col layout.
    pub conv1: Var,
    pub conv1_bias: Var,
    /// `[9(D/2) x 2]`
    pub conv2: Var,
    pub conv2_bias: Var,
    /// Output bound: `|offset| <= delta_max` per coordinate.
    pub delta_max: f64,
}

impl OffsetNetParams {
    pub fn hidden(dim: usize) -> usize {
        (dim / 2).max(1)
    }

    pub fn specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
        let h = Self::hidden(dim);
        alloc::vec![
            ParamSpec::new(format!("{prefix}.proj"), &[dim, dim], Init::Normal(1.0 / libm::sqrt(dim as f64))),
            ParamSpec::new(format!("{prefix}.conv1"), &[9 * dim, h], Init::Normal(1.0 / libm::sqrt(9.0 * dim as f64))),
            ParamSpec::new(format!("{prefix}.conv1_bias"), &[h], Init::Zeros),
            ParamSpec::new(format!("{prefix}.conv2"), &[9 * h, 2], Init::Normal(0.01)),
            ParamSpec::new(format!("{prefix}.conv2_bias"), &[2], Init::Zeros),
        ]
    }

    pub fn bind(bound: &Bound, prefix: &str, delta_max: f64) -> Result<Self> {
        let p = |name: &str| bound.get(&format!("{prefix}.{name}"));
        Ok(Self {
            proj: p("proj")?,
            conv1: p("conv1")?,
            conv1_bias: p("conv1_bias")?,
            conv2: p("conv2")?,
            conv2_bias: p("conv2_bias")?,
            delta_max,
        })
    }
}

/// Parameter-name prefix of a modality's offset net.
pub fn offset_prefix(base: &str, m: Modality, shared: bool) -> alloc::string::String {
    if shared {
        format!("{base}.shared")
    } else {
        format!("{base}.{m}")
    }
}

/// Predicted displacement field of one modality.
#[derive(Debug, Clone, Copy)]
pub struct OffsetField {
    pub modality: Modality,
    /// `[H_g x W_g x 2]`
    pub deltas: Var,
}

/// Runs the offset net on `[L x D]` patches laid out as `grid`.
pub fn predict_offsets(
    tape: &mut Tape,
    modality: Modality,
    patches: Var,
    grid: (usize, usize),
    r: usize,
    params: &OffsetNetParams,
) -> Result<OffsetField> {
    let (l, d) = tape.value(patches).dims2()?;
    let (hp, wp) = grid;
    if hp * wp != l {
        return Err(Error::shape("predict_offsets", &[l, d], &[hp, wp]));
    }
    if r == 0 || hp % r != 0 || wp % r != 0 {
        return Err(Error::arg(format!("down-sample factor {r} must divide the {hp}x{wp} grid")));
    }
    let (hg, wg) = (hp / r, wp / r);
    let hidden = tape.value(params.conv1).last_dim();
    let x = tape.matmul(patches, params.proj)?;
    let x = tape.reshape(x, &[hp, wp, d])?;
    let cols = tape.im2col3x3(x, r)?;
    let h = tape.matmul(cols, params.conv1)?;
    let h = tape.add_row(h, params.conv1_bias)?;
    let h = tape.gelu(h);
    let h = tape.reshape(h, &[hg, wg, hidden])?;
    let cols = tape.im2col3x3(h, 1)?;
    let o = tape.matmul(cols, params.conv2)?;
    let o = tape.add_row(o, params.conv2_bias)?;
    let o = tape.tanh(o);
    let o = tape.scale(o, params.delta_max);
    let deltas = tape.reshape(o, &[hg, wg, 2])?;
    Ok(OffsetField { modality, deltas })
}

/// Bilinear resampling of `[L x D]` patches at `reference + offsets`: `[G x D]`.
pub fn deform_sample(
    tape: &mut Tape,
    patches: Var,
    grid: (usize, usize),
    reference: &ReferenceGrid,
    offsets: Var,
) -> Result<Var> {
    let (l, d) = tape.value(patches).dims2()?;
    if grid.0 * grid.1 != l {
        return Err(Error::shape("deform_sample", &[l, d], &[grid.0, grid.1]));
    }
    let g = reference.len();
    if tape.value(offsets).len() != 2 * g {
        return Err(Error::shape("deform_sample", reference.points.shape(), tape.shape(offsets)));
    }
    let feat = tape.reshape(patches, &[grid.0, grid.1, d])?;
    let refs = tape.constant(reference.points.reshape(&[g, 2])?);
    let offs = tape.reshape(offsets, &[g, 2])?;
    let pts = tape.add(refs, offs)?;
    tape.bilinear_sample(feat, pts)
}

/// Which modality pairs the alignment MSE compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LamPairs {
    /// All three unordered pairs.
    #[default]
    All,
    /// Each non-anchor modality against the anchor.
    ToAnchor(Modality),
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean of the pairwise elementwise MSEs between the sampled `(R, N, T)` maps.
pub fn local_align_loss(tape: &mut Tape, sampled: [Var; 3], pairs: LamPairs) -> Result<Var> {
    let pair_list: Vec<(usize, usize)> = match pairs {
        LamPairs::All => alloc::vec![(0, 1), (0, 2), (1, 2)],
        LamPairs::ToAnchor(m) => m.others().iter().map(|o| (m.index(), o.index())).collect(),
    };
    let mut terms = Vec::with_capacity(pair_list.len());
    for (i, j) in pair_list {
        terms.push(mse(tape, sampled[i], sampled[j])?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}
