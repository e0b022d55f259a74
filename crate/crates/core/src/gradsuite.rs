//! Registry of differentiable operations for finite-difference checking.
//!
//! Each [`GradCase`] wraps one operation (or one short composite) as a
//! tensor-to-scalar function of a single input. Non-input operands are fixed
//! deterministic tensors, and non-scalar outputs are reduced with a fixed
//! weighting so every output element contributes a distinct gradient.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::gam::{self, VolumeMode};
use crate::gradcheck::finite_diff_check;
use crate::lam::{self, LamPairs, OffsetNetParams};
use crate::losses::{self, LossComponents};
use crate::modality::Modality;
use crate::sim::{self, HeadProj, InteractionParams, ModalityFeatures};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type CaseFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One registered operation.
pub struct GradCase {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs are drawn uniformly from `[lo, hi)`.
    pub lo: f64,
    pub hi: f64,
    pub f: CaseFn,
}

impl GradCase {
    pub fn new(name: &str, shape: &[usize], lo: f64, hi: f64, f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            lo,
            hi,
            f: Box::new(f),
        }
    }

    /// Draws a point using `uniform` (values in `[0, 1)`).
    pub fn sample(&self, uniform: &mut dyn FnMut() -> f64) -> Tensor {
        let n = self.shape.iter().product();
        let data = (0..n).map(|_| self.lo + (self.hi - self.lo) * uniform()).collect();
        Tensor::new(&self.shape, data).expect("case shapes are non-empty")
    }

    /// Worst relative error over `points` random inputs.
    pub fn run(&self, uniform: &mut dyn FnMut() -> f64, points: usize, h: f64) -> Result<f64> {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let x = self.sample(uniform);
            let err = finite_diff_check(&self.f, &x, h)?;
            // NaN must not hide behind max.
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
            if worst.is_nan() {
                break;
            }
        }
        Ok(worst)
    }
}

/// Deterministic, irregular filler values in roughly `[-scale, scale]`.
pub fn fixed(shape: &[usize], salt: u32, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let h = libm::sin(12.9898 * i as f64 + 78.233 * salt as f64) * 43758.5453;
            scale * (2.0 * (h - libm::floor(h)) - 1.0)
        })
        .collect();
    Tensor::new(shape, data).expect("non-empty shape")
}

/// Reduces any tensor to a scalar with a fixed, non-uniform weighting.
pub fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = tape.constant(fixed(tape.shape(y), 97, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn c(tape: &mut Tape, shape: &[usize], salt: u32) -> Var {
    tape.constant(fixed(shape, salt, 1.0))
}

fn unit_rows(tape: &mut Tape, x: Var, rows: usize) -> Result<Vec<Var>> {
    (0..rows)
        .map(|i| {
            let r = tape.slice_rows(x, i, 1)?;
            gam::pool_normalize(tape, r)
        })
        .collect()
}

/// Interaction weights built from fixed tensors.
pub fn fixed_interaction(tape: &mut Tape, d: usize, heads: usize) -> InteractionParams {
    let dh = d / heads;
    let mut salt = 200;
    let mut next = |tape: &mut Tape, shape: &[usize], scale: f64| {
        salt += 1;
        tape.constant(fixed(shape, salt, scale))
    };
    let head_list = (0..heads)
        .map(|_| HeadProj {
            query: next(tape, &[d, dh], 0.6),
            key: next(tape, &[d, dh], 0.6),
            value: next(tape, &[d, dh], 0.6),
        })
        .collect();
    InteractionParams {
        stack_proj: next(tape, &[d, d], 0.6),
        concat_proj: next(tape, &[d, d], 0.6),
        heads: head_list,
        out_proj: next(tape, &[d, d], 0.5),
        ffn_in: next(tape, &[d, 4 * d], 0.5),
        ffn_in_bias: next(tape, &[4 * d], 0.2),
        ffn_out: next(tape, &[4 * d, d], 0.3),
        ffn_out_bias: next(tape, &[d], 0.2),
        ln1_gain: next(tape, &[d], 1.0),
        ln1_bias: next(tape, &[d], 0.2),
        ln2_gain: next(tape, &[d], 1.0),
        ln2_bias: next(tape, &[d], 0.2),
    }
}

fn fixed_offset_net(tape: &mut Tape, d: usize, delta_max: f64) -> OffsetNetParams {
    let h = OffsetNetParams::hidden(d);
    OffsetNetParams {
        proj: tape.constant(fixed(&[d, d], 301, 0.5)),
        conv1: tape.constant(fixed(&[9 * d, h], 302, 0.3)),
        conv1_bias: tape.constant(fixed(&[h], 303, 0.1)),
        conv2: tape.constant(fixed(&[9 * h, 2], 304, 0.3)),
        conv2_bias: tape.constant(fixed(&[2], 305, 0.1)),
        delta_max,
    }
}

fn triple(tape: &mut Tape, x: Var, d: usize, l: usize, grid: (usize, usize)) -> Result<[ModalityFeatures; 3]> {
    // Rows 0..3 are class tokens, then three blocks of L patch rows.
    let mut out = Vec::with_capacity(3);
    for (i, m) in Modality::ALL.into_iter().enumerate() {
        let cls = tape.slice_rows(x, i, 1)?;
        let cls = tape.reshape(cls, &[d])?;
        let patches = tape.slice_rows(x, 3 + i * l, l)?;
        out.push(ModalityFeatures::new(tape, m, cls, patches, grid)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Every registered differentiable operation and composite path.
pub fn standard_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("matmul", &[3, 4], -1.0, 1.0, |t, x| {
            let b = c(t, &[4, 2], 1);
            let y = t.matmul(x, b)?;
            let a = c(t, &[2, 3], 2);
            let y2 = t.matmul(a, x)?;
            let p = probe(t, y)?;
            let q = probe(t, y2)?;
            t.add(p, q)
        }),
        GradCase::new("transpose", &[3, 2], -1.0, 1.0, |t, x| {
            let y = t.transpose(x)?;
            probe(t, y)
        }),
        GradCase::new("add_sub_mul", &[2, 3], -1.0, 1.0, |t, x| {
            let k = c(t, &[2, 3], 3);
            let a = t.add(x, k)?;
            let s = t.sub(k, x)?;
            let m = t.mul(a, s)?;
            let m = t.mul(m, x)?;
            probe(t, m)
        }),
        GradCase::new("add_row", &[3, 4], -1.0, 1.0, |t, x| {
            let row = t.slice_rows(x, 1, 1)?;
            let row = t.reshape(row, &[4])?;
            let y = t.add_row(x, row)?;
            probe(t, y)
        }),
        GradCase::new("mul_scalar", &[2, 3], -1.0, 1.0, |t, x| {
            let s = t.index(x, 4)?;
            let y = t.mul_scalar(x, s)?;
            let y = t.scale(y, -1.7);
            probe(t, y)
        }),
        GradCase::new("exp", &[2, 3], -1.0, 1.0, |t, x| {
            let y = t.exp(x);
            probe(t, y)
        }),
        GradCase::new("log", &[2, 3], 0.5, 2.0, |t, x| {
            let y = t.log(x);
            probe(t, y)
        }),
        GradCase::new("recip", &[2, 3], 0.5, 2.0, |t, x| {
            let y = t.recip(x);
            probe(t, y)
        }),
        GradCase::new("sqrt", &[2, 3], 0.5, 2.0, |t, x| {
            let y = t.sqrt(x);
            probe(t, y)
        }),
        GradCase::new("tanh", &[2, 3], -2.0, 2.0, |t, x| {
            let y = t.tanh(x);
            probe(t, y)
        }),
        GradCase::new("gelu", &[2, 3], -3.0, 3.0, |t, x| {
            let y = t.gelu(x);
            probe(t, y)
        }),
        GradCase::new("relu", &[2, 3], -1.0, 1.0, |t, x| {
            let y = t.relu(x);
            probe(t, y)
        }),
        GradCase::new("clamp_min", &[2, 3], -1.0, 1.0, |t, x| {
            let y = t.clamp_min(x, 0.1);
            probe(t, y)
        }),
        GradCase::new("sum_mean", &[3, 4], -1.0, 1.0, |t, x| {
            let sq = t.mul(x, x)?;
            let s = t.sum(sq);
            let m = t.mean(x);
            let mr = t.mean_rows(x)?;
            let p = probe(t, mr)?;
            let a = t.add(s, m)?;
            t.add(a, p)
        }),
        GradCase::new("reshape_concat_slice", &[4, 3], -1.0, 1.0, |t, x| {
            let r = t.reshape(x, &[2, 6])?;
            let top = t.slice_rows(x, 1, 2)?;
            let left = t.slice_cols(x, 0, 2)?;
            let rows = t.concat_rows(&[x, top])?;
            let cols = t.concat_cols(&[x, left])?;
            let g = t.gather_rows(x, &[3, 0, 3, 1])?;
            let i0 = t.index(x, 5)?;
            let i1 = t.index(x, 7)?;
            let st = t.stack(&[i0, i1])?;
            let mut total = probe(t, r)?;
            for y in [rows, cols, g, st] {
                let p = probe(t, y)?;
                total = t.add(total, p)?;
            }
            Ok(total)
        }),
        GradCase::new("softmax", &[2, 5], -3.0, 3.0, |t, x| {
            let y = t.softmax_lastdim(x);
            probe(t, y)
        }),
        GradCase::new("log_softmax", &[2, 5], -3.0, 3.0, |t, x| {
            let y = t.log_softmax_lastdim(x);
            probe(t, y)
        }),
        GradCase::new("layer_norm", &[3, 4], -2.0, 2.0, |t, x| {
            let g = c(t, &[4], 4);
            let b = c(t, &[4], 5);
            let y = t.layer_norm(x, g, b)?;
            probe(t, y)
        }),
        GradCase::new("layer_norm_affine", &[2, 4], -2.0, 2.0, |t, x| {
            let g = t.slice_rows(x, 0, 1)?;
            let g = t.reshape(g, &[4])?;
            let b = t.slice_rows(x, 1, 1)?;
            let b = t.reshape(b, &[4])?;
            let inp = c(t, &[3, 4], 6);
            let y = t.layer_norm(inp, g, b)?;
            probe(t, y)
        }),
        GradCase::new("det3", &[3, 3], -1.0, 1.0, |t, x| t.det3(x)),
        GradCase::new("pool_normalize", &[4, 3], -1.0, 1.0, |t, x| {
            let y = gam::pool_normalize(t, x)?;
            probe(t, y)
        }),
        GradCase::new("gram_volume", &[3, 6], -1.0, 1.0, |t, x| {
            let u = unit_rows(t, x, 3)?;
            Ok(gam::gram_volume(t, u[0], u[1], u[2], VolumeMode::Training)?.volume)
        }),
        GradCase::new("bilinear_feat", &[3, 4, 2], -1.0, 1.0, |t, x| {
            let pts = Tensor::from_rows(&[&[-0.3, 0.4], &[0.8, -0.9], &[0.1, 0.05], &[-0.95, 0.95]])?;
            let p = t.constant(pts);
            let y = t.bilinear_sample(x, p)?;
            probe(t, y)
        }),
        GradCase::new("bilinear_points", &[5, 2], -0.95, 0.95, |t, x| {
            let f = c(t, &[3, 4, 2], 7);
            let y = t.bilinear_sample(f, x)?;
            probe(t, y)
        }),
        GradCase::new("im2col3x3", &[4, 4, 2], -1.0, 1.0, |t, x| {
            let a = t.im2col3x3(x, 1)?;
            let b = t.im2col3x3(x, 2)?;
            let p = probe(t, a)?;
            let q = probe(t, b)?;
            t.add(p, q)
        }),
        GradCase::new("deform_offsets", &[2, 1, 2], -0.4, 0.4, |t, x| {
            let reference = lam::make_reference_grid(4, 2, 2)?;
            let patches = c(t, &[8, 3], 8);
            let y = lam::deform_sample(t, patches, (4, 2), &reference, x)?;
            probe(t, y)
        }),
        GradCase::new("offset_net_sample", &[8, 4], -1.0, 1.0, |t, x| {
            let reference = lam::make_reference_grid(4, 2, 1)?;
            let net = fixed_offset_net(t, 4, lam::default_delta_max(4, 2));
            let field = lam::predict_offsets(t, Modality::N, x, (4, 2), 1, &net)?;
            let y = lam::deform_sample(t, x, (4, 2), &reference, field.deltas)?;
            probe(t, y)
        }),
        GradCase::new("intra_inter_scores", &[3 + 3 * 4, 4], -1.0, 1.0, |t, x| {
            let feats = triple(t, x, 4, 4, (2, 2))?;
            let params = fixed_interaction(t, 4, 2);
            let s = sim::inter_modal_scores(t, &feats, &params)?;
            let mut total = probe(t, s)?;
            for f in &feats {
                let a = sim::intra_modal_scores(t, f)?;
                let p = probe(t, a)?;
                total = t.add(total, p)?;
            }
            Ok(total)
        }),
        GradCase::new("mhca", &[3 + 5, 4], -1.0, 1.0, |t, x| {
            let q = t.slice_rows(x, 0, 3)?;
            let k = t.slice_rows(x, 3, 5)?;
            let params = fixed_interaction(t, 4, 2);
            let (y, _) = sim::multi_head_cross_attention(t, q, k, &params.heads, params.out_proj)?;
            probe(t, y)
        }),
        GradCase::new("ffn", &[3, 4], -1.0, 1.0, |t, x| {
            let params = fixed_interaction(t, 4, 2);
            let y = sim::feed_forward(t, x, &params)?;
            probe(t, y)
        }),
        GradCase::new("modal_interaction", &[3 + 3 * 4, 4], -1.0, 1.0, |t, x| {
            let feats = triple(t, x, 4, 4, (2, 2))?;
            let params = fixed_interaction(t, 4, 2);
            let y = sim::modal_interaction(t, &feats, &[feats[0].patches, feats[1].patches, feats[2].patches], &params)?;
            probe(t, y)
        }),
        GradCase::new("label_smooth_ce", &[4, 3], -2.0, 2.0, |t, x| {
            losses::label_smooth_ce(t, x, &[0, 2, 1, 2], losses::DEFAULT_CE_EPSILON)
        }),
        GradCase::new("batch_hard_triplet", &[4, 3], -1.0, 1.0, |t, x| {
            losses::batch_hard_triplet(t, x, &[0, 0, 1, 1], losses::DEFAULT_TRIPLET_MARGIN)
        }),
        GradCase::new("gram_d2a", &[9, 5], -1.0, 1.0, |t, x| {
            let terms = contrastive(t, x)?;
            Ok(terms.d2a)
        }),
        GradCase::new("gram_a2d", &[9, 5], -1.0, 1.0, |t, x| {
            let terms = contrastive(t, x)?;
            Ok(terms.a2d)
        }),
        GradCase::new("gram_tau", &[1], -3.0, -1.5, |t, x| {
            let e = t.constant(fixed(&[9, 5], 9, 1.0));
            let rows = unit_rows(t, e, 9)?;
            let batch = batch_of(&rows);
            let terms = gam::gram_contrastive_loss(t, &batch, Modality::R, x, VolumeMode::Training)?;
            t.add(terms.d2a, terms.a2d)
        }),
        GradCase::new("local_align_mse", &[3 * 4, 3], -1.0, 1.0, |t, x| {
            let s: Vec<Var> = (0..3).map(|i| t.slice_rows(x, 4 * i, 4)).collect::<Result<_>>()?;
            let a = lam::local_align_loss(t, [s[0], s[1], s[2]], LamPairs::All)?;
            let b = lam::local_align_loss(t, [s[0], s[1], s[2]], LamPairs::ToAnchor(Modality::N))?;
            let b = t.scale(b, 0.5);
            t.add(a, b)
        }),
        GradCase::new("total_loss", &[4, 3], -1.0, 1.0, |t, x| {
            let w = c(t, &[3, 3], 10);
            let logits = t.matmul(x, w)?;
            let ce = losses::label_smooth_ce(t, logits, &[0, 0, 1, 1], losses::DEFAULT_CE_EPSILON)?;
            let triplet = losses::batch_hard_triplet(t, x, &[0, 0, 1, 1], losses::DEFAULT_TRIPLET_MARGIN)?;
            let sq = t.mul(x, x)?;
            let d2a = t.mean(sq);
            let a2d = t.sum(x);
            let e = t.exp(x);
            let mse = t.mean(e);
            let parts = LossComponents { ce, triplet, d2a, a2d, mse };
            Ok(losses::total_loss(t, &parts, 0.2, 0.2)?.0)
        }),
    ]
}

fn batch_of(rows: &[Var]) -> Vec<[Var; 3]> {
    rows.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn contrastive(tape: &mut Tape, x: Var) -> Result<gam::ContrastiveTerms> {
    let rows = unit_rows(tape, x, 9)?;
    let batch = batch_of(&rows);
    let log_tau = tape.constant(gam::log_tau_tensor(gam::DEFAULT_TAU));
    gam::gram_contrastive_loss(tape, &batch, Modality::R, log_tau, VolumeMode::Training)
}

/// A deliberately broken gradient: one factor of `x * x` is detached, so the
/// tape reports half the true derivative.
pub fn corrupted_case() -> GradCase {
    GradCase::new("corrupted_square", &[4], 0.5, 2.0, |t, x| {
        let d = t.detach(x);
        let y = t.mul(x, d)?;
        Ok(t.sum(y))
    })
}
