//! Selective interaction: intra- and inter-modal token selection followed by
//! cross-attention fusion of class tokens with the surviving patch tokens.

use alloc::format;
use alloc::vec::Vec;

use libm::sqrt;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::params::{Bound, Init, ParamSpec};
use crate::select::{index_mask, top_k_indices};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One modality's encoder output: a class token and `L` patch tokens.
#[derive(Debug, Clone, Copy)]
pub struct ModalityFeatures {
    pub modality: Modality,
    /// `[D]`
    pub cls: Var,
    /// `[L x D]`
    pub patches: Var,
    /// Patch grid `(H_p, W_p)` with `H_p * W_p = L`.
    pub grid: (usize, usize),
}

impl ModalityFeatures {
    pub fn new(tape: &Tape, modality: Modality, cls: Var, patches: Var, grid: (usize, usize)) -> Result<Self> {
        let (l, d) = tape.value(patches).dims2()?;
        if tape.shape(cls) != [d] {
            return Err(Error::shape("ModalityFeatures", tape.shape(cls), tape.shape(patches)));
        }
        if grid.0 * grid.1 != l {
            return Err(Error::arg(format!("grid {grid:?} does not tile {l} patches")));
        }
        Ok(Self {
            modality,
            cls,
            patches,
            grid,
        })
    }

    /// `(L, D)`
    pub fn dims(&self, tape: &Tape) -> (usize, usize) {
        tape.value(self.patches).dims2().expect("validated at construction")
    }
}

/// How intra- and inter-modal masks are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Union,
    Intersection,
}

/// What happens to masked-out patch rows before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropMode {
    /// Rows are multiplied by zero and stay in the key set.
    #[default]
    Zero,
    /// Rows are physically removed from the key set.
    Gather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub k1: usize,
    pub k2: usize,
    pub mask_mode: MaskMode,
    pub drop_mode: DropMode,
    pub heads: usize,
}

/// Selected index sets and masks for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub intra_indices: Vec<usize>,
    pub inter_indices: Vec<usize>,
    pub intra_mask: Vec<f64>,
    pub inter_mask: Vec<f64>,
    pub fused_mask: Vec<f64>,
}

impl SelectionMask {
    pub fn popcount(&self) -> usize {
        self.fused_mask.iter().filter(|&&m| m != 0.0).count()
    }

    pub fn fused_indices(&self) -> Vec<usize> {
        (0..self.fused_mask.len()).filter(|&i| self.fused_mask[i] != 0.0).collect()
    }
}

/// Per-head attention projections.
#[derive(Debug, Clone, Copy)]
pub struct HeadProj {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Learned weights of the interaction stage.
#[derive(Debug, Clone)]
pub struct InteractionParams {
    /// Linear map applied after stacking the three class tokens.
    pub stack_proj: Var,
    /// Linear map applied after concatenating the three patch sets.
    pub concat_proj: Var,
    pub heads: Vec<HeadProj>,
    pub out_proj: Var,
    pub ffn_in: Var,
    pub ffn_in_bias: Var,
    pub ffn_out: Var,
    pub ffn_out_bias: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl InteractionParams {
    pub fn specs(prefix: &str, dim: usize, heads: usize) -> Result<Vec<ParamSpec>> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::arg(format!("{heads} heads do not divide D = {dim}")));
        }
        let dh = dim / heads;
        let s = 1.0 / sqrt(dim as f64);
        let mut out = alloc::vec![
            ParamSpec::new(format!("{prefix}.stack_proj"), &[dim, dim], Init::Eye),
            ParamSpec::new(format!("{prefix}.concat_proj"), &[dim, dim], Init::Eye),
            ParamSpec::new(format!("{prefix}.out_proj"), &[dim, dim], Init::Normal(s)),
            ParamSpec::new(format!("{prefix}.ffn.in"), &[dim, 4 * dim], Init::Normal(s)),
            ParamSpec::new(format!("{prefix}.ffn.in_bias"), &[4 * dim], Init::Zeros),
            ParamSpec::new(format!("{prefix}.ffn.out"), &[4 * dim, dim], Init::Normal(0.5 * s)),
            ParamSpec::new(format!("{prefix}.ffn.out_bias"), &[dim], Init::Zeros),
            ParamSpec::new(format!("{prefix}.ln1.gain"), &[dim], Init::Ones),
            ParamSpec::new(format!("{prefix}.ln1.bias"), &[dim], Init::Zeros),
            ParamSpec::new(format!("{prefix}.ln2.gain"), &[dim], Init::Ones),
            ParamSpec::new(format!("{prefix}.ln2.bias"), &[dim], Init::Zeros),
        ];
        for h in 0..heads {
            for part in ["query", "key", "value"] {
                out.push(ParamSpec::new(format!("{prefix}.head{h}.{part}"), &[dim, dh], Init::Normal(s)));
            }
        }
        Ok(out)
    }

    pub fn bind(bound: &Bound, prefix: &str, heads: usize) -> Result<Self> {
        let p = |name: &str| bound.get(&format!("{prefix}.{name}"));
        let heads = (0..heads)
            .map(|h| {
                Ok(HeadProj {
                    query: p(&format!("head{h}.query"))?,
                    key: p(&format!("head{h}.key"))?,
                    value: p(&format!("head{h}.value"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stack_proj: p("stack_proj")?,
            concat_proj: p("concat_proj")?,
            heads,
            out_proj: p("out_proj")?,
            ffn_in: p("ffn.in")?,
            ffn_in_bias: p("ffn.in_bias")?,
            ffn_out: p("ffn.out")?,
            ffn_out_bias: p("ffn.out_bias")?,
            ln1_gain: p("ln1.gain")?,
            ln1_bias: p("ln1.bias")?,
            ln2_gain: p("ln2.gain")?,
            ln2_bias: p("ln2.bias")?,
        })
    }
}

/// Intra-modal attention of the class token over its own patches, `[1 x L]`.
///
/// Query and key projections are fixed identities, so the scores are
/// `softmax(cls . patches^T / sqrt(D))` with nothing learned.
pub fn intra_modal_scores(tape: &mut Tape, feat: &ModalityFeatures) -> Result<Var> {
    let (_, d) = feat.dims(tape);
    let q = tape.reshape(feat.cls, &[1, d])?;
    let kt = tape.transpose(feat.patches)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / sqrt(d as f64));
    Ok(tape.softmax_lastdim(scaled))
}

/// Top-`k1` patches by intra-modal score: `(indices, binary mask)`.
pub fn intra_select(scores: &[f64], k1: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let idx = top_k_indices(scores, k1)?;
    let mask = index_mask(&idx, scores.len());
    Ok((idx, mask))
}

fn check_triplet(tape: &Tape, feats: &[ModalityFeatures; 3]) -> Result<(usize, usize)> {
    let dims = feats[0].dims(tape);
    for (f, m) in feats.iter().zip(Modality::ALL) {
        if f.modality != m {
            return Err(Error::arg("modalities must be ordered (R, N, T)"));
        }
        if f.dims(tape) != dims {
            return Err(Error::shape("modality features", tape.shape(feats[0].patches), tape.shape(f.patches)));
        }
    }
    Ok(dims)
}

/// Stacks the three class tokens and projects them: `[3 x D]`.
pub fn stack_project(tape: &mut Tape, feats: &[ModalityFeatures; 3], proj: Var) -> Result<Var> {
    let stacked = tape.stack(&[feats[0].cls, feats[1].cls, feats[2].cls])?;
    tape.matmul(stacked, proj)
}

/// Concatenates patch sets along the token axis and projects them.
pub fn concat_project(tape: &mut Tape, patches: &[Var], proj: Var) -> Result<Var> {
    let cat = tape.concat_rows(patches)?;
    tape.matmul(cat, proj)
}

/// Cross-modal attention of the three class tokens over all `3L` patches.
///
/// Rows are ordered `(R, N, T)`, column blocks `(R patches, N patches, T patches)`.
pub fn inter_modal_scores(tape: &mut Tape, feats: &[ModalityFeatures; 3], params: &InteractionParams) -> Result<Var> {
    let (_, d) = check_triplet(tape, feats)?;
    let q = stack_project(tape, feats, params.stack_proj)?;
    let k = concat_project(tape, &[feats[0].patches, feats[1].patches, feats[2].patches], params.concat_proj)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / sqrt(d as f64));
    Ok(tape.softmax_lastdim(scaled))
}

/// Cross-modal relevance of modality `m`'s patches: the sum of the attention
/// the two *other* class tokens pay to each patch of `m`.
pub fn cross_modal_relevance(scores: &Tensor, m: Modality) -> Result<Vec<f64>> {
    let (rows, cols) = scores.dims2()?;
    if rows != 3 || cols % 3 != 0 {
        return Err(Error::shape("cross_modal_relevance", scores.shape(), &[3, 3]));
    }
    let l = cols / 3;
    let block = m.index() * l;
    // Reads the score block of modality m from the rows of the other two
    // modalities. An alternative reading takes all 2L off-modality columns,
    // which would rank the other modalities' patches instead of m's own.
    let mut rel = alloc::vec![0.0; l];
    for u in m.others() {
        let row = scores.row(u.index());
        for (r, s) in rel.iter_mut().zip(&row[block..block + l]) {
            *r += s;
        }
    }
    Ok(rel)
}

/// Top-`k2` patches of modality `m` by cross-modal relevance.
pub fn inter_select(scores: &Tensor, m: Modality, k2: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let rel = cross_modal_relevance(scores, m)?;
    let idx = top_k_indices(&rel, k2)?;
    let mask = index_mask(&idx, rel.len());
    Ok((idx, mask))
}

pub fn fuse_masks(intra: &[f64], inter: &[f64], mode: MaskMode) -> Result<Vec<f64>> {
    if intra.len() != inter.len() {
        return Err(Error::shape("fuse_masks", &[intra.len()], &[inter.len()]));
    }
    Ok(intra
        .iter()
        .zip(inter)
        .map(|(&s, &c)| {
            let keep = match mode {
                MaskMode::Union => s != 0.0 || c != 0.0,
                MaskMode::Intersection => s != 0.0 && c != 0.0,
            };
            if keep {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// `mask (.) patches`: zeroes the rows whose mask entry is 0.
pub fn apply_mask(tape: &mut Tape, patches: Var, mask: &[f64]) -> Result<Var> {
    let (l, d) = tape.value(patches).dims2()?;
    if mask.len() != l {
        return Err(Error::shape("apply_mask", &[l, d], &[mask.len()]));
    }
    let full: Vec<f64> = mask.iter().flat_map(|&m| core::iter::repeat_n(m, d)).collect();
    let m = tape.constant(Tensor::new(&[l, d], full)?);
    tape.mul(patches, m)
}

/// Outcome of the selection stage.
#[derive(Debug, Clone)]
pub struct Selection {
    pub masks: [SelectionMask; 3],
    /// Selected patch tokens per modality, `(R, N, T)`.
    pub selected: [Var; 3],
    /// Inter-modal score matrix `[3 x 3L]`.
    pub inter_scores: Var,
}

/// Runs intra- and inter-modal selection for all three modalities.
pub fn select_tokens(
    tape: &mut Tape,
    feats: &[ModalityFeatures; 3],
    params: &InteractionParams,
    cfg: &SimConfig,
) -> Result<Selection> {
    let (l, _) = check_triplet(tape, feats)?;
    if cfg.k1 == 0 || cfg.k1 > l || cfg.k2 == 0 || cfg.k2 > l {
        return Err(Error::arg(format!("k1 = {} and k2 = {} must lie in 1..={l}", cfg.k1, cfg.k2)));
    }
    let inter_scores = inter_modal_scores(tape, feats, params)?;
    let inter_value = tape.value(inter_scores).clone();
    let mut masks = Vec::with_capacity(3);
    let mut selected = Vec::with_capacity(3);
    for f in feats {
        let scores = intra_modal_scores(tape, f)?;
        let (intra_indices, intra_mask) = intra_select(tape.data(scores), cfg.k1)?;
        let (inter_indices, inter_mask) = inter_select(&inter_value, f.modality, cfg.k2)?;
        let fused_mask = fuse_masks(&intra_mask, &inter_mask, cfg.mask_mode)?;
        let mask = SelectionMask {
            intra_indices,
            inter_indices,
            intra_mask,
            inter_mask,
            fused_mask,
        };
        let sel = match cfg.drop_mode {
            DropMode::Zero => apply_mask(tape, f.patches, &mask.fused_mask)?,
            DropMode::Gather => {
                let idx = mask.fused_indices();
                if idx.is_empty() {
                    // An empty intersection keeps the key set well-defined.
                    apply_mask(tape, f.patches, &mask.fused_mask)?
                } else {
                    tape.gather_rows(f.patches, &idx)?
                }
            }
        };
        masks.push(mask);
        selected.push(sel);
    }
    let masks: [SelectionMask; 3] = masks.try_into().expect("three modalities");
    Ok(Selection {
        masks,
        selected: [selected[0], selected[1], selected[2]],
        inter_scores,
    })
}

/// Multi-head cross-attention of `query` rows over `keys` (used as keys and values).
///
/// Returns the projected output and each head's attention matrix.
pub fn multi_head_cross_attention(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    heads: &[HeadProj],
    out_proj: Var,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(heads.len());
    let mut attns = Vec::with_capacity(heads.len());
    for h in heads {
        let dh = tape.value(h.query).last_dim();
        let q = tape.matmul(query, h.query)?;
        let k = tape.matmul(keys, h.key)?;
        let v = tape.matmul(keys, h.value)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.scale(logits, 1.0 / sqrt(dh as f64));
        let attn = tape.softmax_lastdim(scaled);
        outs.push(tape.matmul(attn, v)?);
        attns.push(attn);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok((tape.matmul(cat, out_proj)?, attns))
}

/// Position-wise feed-forward block with a GELU hidden layer.
pub fn feed_forward(tape: &mut Tape, x: Var, params: &InteractionParams) -> Result<Var> {
    let h = tape.matmul(x, params.ffn_in)?;
    let h = tape.add_row(h, params.ffn_in_bias)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, params.ffn_out)?;
    tape.add_row(o, params.ffn_out_bias)
}

/// Fuses class tokens with selected patches into the `[3D]` interaction feature.
pub fn modal_interaction(
    tape: &mut Tape,
    feats: &[ModalityFeatures; 3],
    selected: &[Var; 3],
    params: &InteractionParams,
) -> Result<Var> {
    let (_, d) = check_triplet(tape, feats)?;
    let q = stack_project(tape, feats, params.stack_proj)?;
    let k = concat_project(tape, selected, params.concat_proj)?;
    let (attn_out, _) = multi_head_cross_attention(tape, q, k, &params.heads, params.out_proj)?;
    let res1 = tape.add(q, attn_out)?;
    let q1 = tape.layer_norm(res1, params.ln1_gain, params.ln1_bias)?;
    let ff = feed_forward(tape, q1, params)?;
    let res2 = tape.add(q1, ff)?;
    let out = tape.layer_norm(res2, params.ln2_gain, params.ln2_bias)?;
    tape.reshape(out, &[3 * d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn feats_from(tape: &mut Tape, cls: &[&[f64]], patches: &[Tensor], grid: (usize, usize)) -> [ModalityFeatures; 3] {
        let mut out = Vec::new();
        for (i, m) in Modality::ALL.into_iter().enumerate() {
            let c = tape.constant(Tensor::new(&[cls[i].len()], cls[i].to_vec()).unwrap());
            let p = tape.constant(patches[i].clone());
            out.push(ModalityFeatures::new(tape, m, c, p, grid).unwrap());
        }
        out.try_into().unwrap()
    }

    #[test]
    fn orthogonal_cls_gives_uniform_scores() {
        let mut tape = Tape::new();
        let cls = tape.constant(Tensor::new(&[3], vec![0.0, 0.0, 1.0]).unwrap());
        let p = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[3.0, -1.0, 0.0], &[0.5, 0.5, 0.0]]).unwrap());
        let f = ModalityFeatures::new(&tape, Modality::R, cls, p, (2, 2)).unwrap();
        let s = intra_modal_scores(&mut tape, &f).unwrap();
        assert_eq!(tape.shape(s), &[1, 4]);
        for &v in tape.data(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matching_patch_dominates() {
        let d = 64;
        let mut tape = Tape::new();
        let mut cls = vec![0.0; d];
        cls[0] = 10.0;
        let mut rows = vec![0.0; 4 * d];
        rows[2 * d] = 10.0;
        rows[1] = 1.0;
        rows[d + 3] = 1.0;
        rows[3 * d + 5] = 1.0;
        let c = tape.constant(Tensor::new(&[d], cls).unwrap());
        let p = tape.constant(Tensor::new(&[4, d], rows).unwrap());
        let f = ModalityFeatures::new(&tape, Modality::N, c, p, (4, 1)).unwrap();
        let s = intra_modal_scores(&mut tape, &f).unwrap();
        let (idx, _) = intra_select(tape.data(s), 1).unwrap();
        assert_eq!(idx, vec![2]);
        assert!(tape.data(s)[2] > 0.99);
    }

    #[test]
    fn intra_select_examples() {
        let (idx, mask) = intra_select(&[0.4, 0.1, 0.3, 0.2], 2).unwrap();
        assert_eq!(idx, vec![0, 2]);
        assert_eq!(mask, vec![1.0, 0.0, 1.0, 0.0]);
        let (_, mask) = intra_select(&[0.4, 0.1, 0.3, 0.2], 4).unwrap();
        assert_eq!(mask, vec![1.0; 4]);
        assert!(intra_select(&[0.4, 0.1], 3).is_err());
    }

    #[test]
    fn identical_tokens_give_uniform_inter_scores() {
        let mut tape = Tape::new();
        let d = 4;
        let l = 3;
        let row = [0.3, -0.2, 0.1, 0.5];
        let patches: Vec<Tensor> = (0..3).map(|_| Tensor::new(&[l, d], row.repeat(l)).unwrap()).collect();
        let feats = feats_from(&mut tape, &[&row, &row, &row], &patches, (l, 1));
        let eye = tape.constant(Tensor::eye(d));
        let params = identity_params(&mut tape, d);
        let params = InteractionParams {
            stack_proj: eye,
            concat_proj: eye,
            ..params
        };
        let s = inter_modal_scores(&mut tape, &feats, &params).unwrap();
        assert_eq!(tape.shape(s), &[3, 3 * l]);
        for &v in tape.data(s) {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn inter_select_prefers_attended_patch() {
        // Two other rows both attend to patch 1 of N.
        let l = 3;
        let mut s = Tensor::zeros(&[3, 3 * l]);
        for u in [0usize, 2] {
            s.data_mut()[u * 3 * l + l + 1] = 0.9;
        }
        s.data_mut()[l + 2] = 0.05;
        let (idx, mask) = inter_select(&s, Modality::N, 1).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(mask, vec![0.0, 1.0, 0.0]);
        let (_, all) = inter_select(&s, Modality::N, l).unwrap();
        assert_eq!(all, vec![1.0; l]);
        assert!(inter_select(&s, Modality::N, l + 1).is_err());
    }

    #[test]
    fn self_modality_row_is_ignored() {
        let l = 2;
        let mut s = Tensor::zeros(&[3, 3 * l]);
        // R's own row strongly prefers R patch 0; others prefer patch 1.
        s.data_mut()[0] = 1.0;
        s.data_mut()[3 * l + 1] = 0.2;
        let (idx, _) = inter_select(&s, Modality::R, 1).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn fuse_mask_modes() {
        let s = [1.0, 0.0, 1.0, 0.0];
        let c = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(fuse_masks(&s, &c, MaskMode::Union).unwrap(), vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(fuse_masks(&s, &c, MaskMode::Intersection).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(fuse_masks(&s, &c[..3], MaskMode::Union).is_err());
    }

    #[test]
    fn masked_rows_are_exact_zeros() {
        let mut tape = Tape::new();
        let p = Tensor::from_rows(&[&[1.5, -2.0], &[3.25, 4.0], &[0.1, 0.2]]).unwrap();
        let pv = tape.param(p.clone());
        let out = apply_mask(&mut tape, pv, &[1.0, 0.0, 1.0]).unwrap();
        let o = tape.value(out);
        assert_eq!(o.row(0), p.row(0));
        assert_eq!(o.row(1), &[0.0, 0.0]);
        assert_eq!(o.row(2), p.row(2));
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        assert_eq!(&tape.grad(pv).unwrap()[2..4], &[0.0, 0.0]);
    }

    fn identity_params(tape: &mut Tape, d: usize) -> InteractionParams {
        let z = |tape: &mut Tape, s: &[usize]| tape.constant(Tensor::zeros(s));
        let eye = tape.constant(Tensor::eye(d));
        InteractionParams {
            stack_proj: eye,
            concat_proj: eye,
            heads: vec![HeadProj {
                query: z(tape, &[d, d]),
                key: z(tape, &[d, d]),
                value: z(tape, &[d, d]),
            }],
            out_proj: z(tape, &[d, d]),
            ffn_in: z(tape, &[d, 4 * d]),
            ffn_in_bias: z(tape, &[4 * d]),
            ffn_out: z(tape, &[4 * d, d]),
            ffn_out_bias: z(tape, &[d]),
            ln1_gain: tape.constant(Tensor::ones(&[d])),
            ln1_bias: z(tape, &[d]),
            ln2_gain: tape.constant(Tensor::ones(&[d])),
            ln2_bias: z(tape, &[d]),
        }
    }

    #[test]
    fn residual_only_path_is_double_layer_norm() {
        let d = 4;
        let mut tape = Tape::new();
        let cls: [&[f64]; 3] = [&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.5, 0.0, 2.0], &[0.3, 0.3, -0.7, 0.1]];
        let patches: Vec<Tensor> = (0..3).map(|i| Tensor::full(&[2, d], i as f64)).collect();
        let feats = feats_from(&mut tape, &cls, &patches, (2, 1));
        let params = identity_params(&mut tape, d);
        let sel = [feats[0].patches, feats[1].patches, feats[2].patches];
        let out = modal_interaction(&mut tape, &feats, &sel, &params).unwrap();
        assert_eq!(tape.shape(out), &[3 * d]);
        let ln = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / x.len() as f64;
            x.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect()
        };
        for (i, c) in cls.iter().enumerate() {
            let expect = ln(&ln(c));
            for j in 0..d {
                assert!((tape.data(out)[i * d + j] - expect[j]).abs() < 1e-12);
            }
        }
    }
}
