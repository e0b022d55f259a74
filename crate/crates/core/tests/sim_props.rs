use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signal_core::gradsuite::fixed_interaction;
use signal_core::sim::{
    self, cross_modal_relevance, fuse_masks, inter_select, intra_select, DropMode, MaskMode, ModalityFeatures, SimConfig,
};
use signal_core::{Modality, Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn features(tape: &mut Tape, rng: &mut ChaCha8Rng, l: usize, d: usize) -> [ModalityFeatures; 3] {
    let mut out = Vec::new();
    for m in Modality::ALL {
        let cls = tape.constant(random(rng, &[d]));
        let p = tape.constant(random(rng, &[l, d]));
        out.push(ModalityFeatures::new(tape, m, cls, p, (l, 1)).unwrap());
    }
    out.try_into().unwrap()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn examples() {
    let (idx, mask) = intra_select(&[0.4, 0.1, 0.3, 0.2], 2).unwrap();
    assert_eq!(idx, vec![0, 2]);
    assert_eq!(mask, vec![1.0, 0.0, 1.0, 0.0]);
    assert_eq!(intra_select(&[0.4, 0.1, 0.3, 0.2], 4).unwrap().1, vec![1.0; 4]);
    assert!(intra_select(&[0.4, 0.1], 3).is_err());

    let s = [1.0, 0.0, 1.0, 0.0];
    let c = [0.0, 0.0, 1.0, 1.0];
    assert_eq!(fuse_masks(&s, &c, MaskMode::Union).unwrap(), vec![1.0, 0.0, 1.0, 1.0]);
    assert_eq!(fuse_masks(&s, &c, MaskMode::Intersection).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn intra_select_on_128_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(128);
    let scores: Vec<f64> = (0..128).map(|_| rng.random()).collect();
    let (idx, mask) = intra_select(&scores, 80).unwrap();
    assert_eq!(mask.iter().filter(|&&m| m == 1.0).count(), 80);
    let mut order: Vec<usize> = (0..128).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut expect = order[..80].to_vec();
    expect.sort();
    assert_eq!(idx, expect);
}

#[test]
fn intra_scores_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let feats = features(&mut tape, &mut rng, 6, 5);
    for f in &feats {
        let s = sim::intra_modal_scores(&mut tape, f).unwrap();
        let cls = tape.value(f.cls).clone();
        let p = tape.value(f.patches).clone();
        let logits: Vec<f64> = (0..6)
            .map(|j| (0..5).map(|k| cls.data()[k] * p.at2(j, k)).sum::<f64>() / 5f64.sqrt())
            .collect();
        let expect = softmax(&logits);
        for (a, b) in tape.data(s).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn inter_scores_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (l, d) = (4, 4);
    let mut tape = Tape::new();
    let feats = features(&mut tape, &mut rng, l, d);
    let params = fixed_interaction(&mut tape, d, 2);
    let s = sim::inter_modal_scores(&mut tape, &feats, &params).unwrap();
    assert_eq!(tape.shape(s), &[3, 3 * l]);
    let wt = tape.value(params.stack_proj).clone();
    let wc = tape.value(params.concat_proj).clone();
    let proj = |v: &[f64], w: &Tensor| -> Vec<f64> { (0..d).map(|o| (0..d).map(|i| v[i] * w.at2(i, o)).sum()).collect() };
    let q: Vec<Vec<f64>> = feats.iter().map(|f| proj(tape.data(f.cls), &wt)).collect();
    let mut k = Vec::new();
    for f in &feats {
        let p = tape.value(f.patches);
        for j in 0..l {
            k.push(proj(p.row(j), &wc));
        }
    }
    for r in 0..3 {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| q[r].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let expect = softmax(&logits);
        let row = tape.value(s).row(r);
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        for (a, b) in row.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_tokens_give_uniform_inter_scores() {
    let (l, d) = (3, 4);
    let mut tape = Tape::new();
    let tok = Tensor::new(&[d], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
    let rows: Vec<f64> = (0..l).flat_map(|_| tok.data().to_vec()).collect();
    let feats: Vec<ModalityFeatures> = Modality::ALL
        .into_iter()
        .map(|m| {
            let c = tape.constant(tok.clone());
            let p = tape.constant(Tensor::new(&[l, d], rows.clone()).unwrap());
            ModalityFeatures::new(&tape, m, c, p, (l, 1)).unwrap()
        })
        .collect();
    let feats: [ModalityFeatures; 3] = feats.try_into().unwrap();
    let mut params = fixed_interaction(&mut tape, d, 2);
    params.stack_proj = tape.constant(Tensor::eye(d));
    params.concat_proj = tape.constant(Tensor::eye(d));
    let s = sim::inter_modal_scores(&mut tape, &feats, &params).unwrap();
    for &v in tape.data(s) {
        assert!((v - 1.0 / (3 * l) as f64).abs() < 1e-15);
    }
}

#[test]
fn inter_select_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let l = 8;
    for _ in 0..50 {
        let raw = random(&mut rng, &[3, 3 * l]);
        let rows: Vec<Vec<f64>> = (0..3).map(|r| softmax(raw.row(r))).collect();
        let s = Tensor::new(&[3, 3 * l], rows.concat()).unwrap();
        for m in Modality::ALL {
            let (idx, _) = inter_select(&s, m, 3).unwrap();
            let others: Vec<usize> = (0..3).filter(|&u| u != m.index()).collect();
            let sums: Vec<f64> = (0..l)
                .map(|j| others.iter().map(|&u| rows[u][m.index() * l + j]).sum())
                .collect();
            let mut order: Vec<usize> = (0..l).collect();
            order.sort_by(|&a, &b| sums[b].partial_cmp(&sums[a]).unwrap());
            let mut expect = order[..3].to_vec();
            expect.sort();
            assert_eq!(idx, expect);
        }
    }
}

#[test]
fn concentrated_cross_attention_is_selected_first() {
    let l = 4;
    let mut data = vec![0.0; 3 * 3 * l];
    // Rows R and T put all their mass on N's patch 2.
    data[l + 2] = 1.0;
    data[2 * 3 * l + l + 2] = 1.0;
    data[3 * l] = 1.0;
    let s = Tensor::new(&[3, 3 * l], data).unwrap();
    let (idx, _) = inter_select(&s, Modality::N, 1).unwrap();
    assert_eq!(idx, vec![2]);
    assert_eq!(inter_select(&s, Modality::N, l).unwrap().1, vec![1.0; l]);
    assert!(inter_select(&s, Modality::N, l + 1).is_err());
    assert_eq!(cross_modal_relevance(&s, Modality::N).unwrap(), vec![0.0, 0.0, 2.0, 0.0]);
}

#[test]
fn masked_rows_are_zero_and_kept_rows_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let p = random(&mut rng, &[4, 3]);
    let pv = tape.constant(p.clone());
    let out = sim::apply_mask(&mut tape, pv, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let o = tape.value(out);
    assert_eq!(o.row(0), p.row(0));
    assert_eq!(o.row(2), p.row(2));
    assert!(o.row(1).iter().chain(o.row(3)).all(|&v| v == 0.0));
}

#[test]
fn union_popcount_bounds_over_1000_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let l = rng.random_range(2..=12);
        let d = 4;
        let k1 = rng.random_range(1..=l);
        let k2 = rng.random_range(1..=l);
        let mut tape = Tape::new();
        let feats = features(&mut tape, &mut rng, l, d);
        let params = fixed_interaction(&mut tape, d, 2);
        for (mode, drop) in [(MaskMode::Union, DropMode::Zero), (MaskMode::Intersection, DropMode::Gather)] {
            let cfg = SimConfig { k1, k2, mask_mode: mode, drop_mode: drop, heads: 2 };
            let sel = sim::select_tokens(&mut tape, &feats, &params, &cfg).unwrap();
            for mask in &sel.masks {
                assert_eq!(mask.intra_indices.len(), k1);
                assert_eq!(mask.inter_indices.len(), k2);
                let pc = mask.popcount();
                match mode {
                    MaskMode::Union => {
                        assert!(pc >= k1.max(k2) && pc <= l.min(k1 + k2), "{pc} {k1} {k2} {l}");
                        for i in 0..l {
                            let member = mask.intra_indices.contains(&i) || mask.inter_indices.contains(&i);
                            assert_eq!(mask.fused_mask[i] == 1.0, member);
                        }
                    }
                    MaskMode::Intersection => assert!(pc <= k1.min(k2)),
                }
            }
        }
    }
}

#[test]
fn residual_only_interaction() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (l, d) = (2, 4);
    let mut tape = Tape::new();
    let feats = features(&mut tape, &mut rng, l, d);
    let mut params = fixed_interaction(&mut tape, d, 2);
    let zero = |tape: &mut Tape, shape: &[usize]| tape.constant(Tensor::zeros(shape));
    params.out_proj = zero(&mut tape, &[d, d]);
    params.ffn_in = zero(&mut tape, &[d, 4 * d]);
    params.ffn_in_bias = zero(&mut tape, &[4 * d]);
    params.ffn_out = zero(&mut tape, &[4 * d, d]);
    params.ffn_out_bias = zero(&mut tape, &[d]);
    for g in [&mut params.ln1_gain, &mut params.ln2_gain] {
        *g = tape.constant(Tensor::ones(&[d]));
    }
    for b in [&mut params.ln1_bias, &mut params.ln2_bias] {
        *b = tape.constant(Tensor::zeros(&[d]));
    }
    let selected = [feats[0].patches, feats[1].patches, feats[2].patches];
    let out = sim::modal_interaction(&mut tape, &feats, &selected, &params).unwrap();
    assert_eq!(tape.shape(out), &[3 * d]);
    let q = sim::stack_project(&mut tape, &feats, params.stack_proj).unwrap();
    let ln1 = tape.layer_norm(q, params.ln1_gain, params.ln1_bias).unwrap();
    let ln2 = tape.layer_norm(ln1, params.ln2_gain, params.ln2_bias).unwrap();
    assert!(tape.data(out).iter().zip(tape.data(ln2)).all(|(a, b)| (a - b).abs() < 1e-15));
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

fn matvec(v: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = w.dims2().unwrap();
    (0..cols).map(|o| (0..rows).map(|i| v[i] * w.at2(i, o)).sum()).collect()
}

#[test]
fn interaction_matches_per_head_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (l, d, h) = (4, 8, 2);
    let dh = d / h;
    let mut tape = Tape::new();
    let feats = features(&mut tape, &mut rng, l, d);
    let params = fixed_interaction(&mut tape, d, h);
    let selected = [feats[0].patches, feats[1].patches, feats[2].patches];
    let out = sim::modal_interaction(&mut tape, &feats, &selected, &params).unwrap();

    let v = |var| tape.value(var).clone();
    let q: Vec<Vec<f64>> = feats.iter().map(|f| matvec(tape.data(f.cls), &v(params.stack_proj))).collect();
    let mut k = Vec::new();
    for f in &feats {
        for j in 0..l {
            k.push(matvec(tape.value(f.patches).row(j), &v(params.concat_proj)));
        }
    }
    let mut expect = Vec::new();
    for qi in &q {
        let mut cat = Vec::new();
        for head in &params.heads {
            let qh = matvec(qi, &v(head.query));
            let kh: Vec<Vec<f64>> = k.iter().map(|kj| matvec(kj, &v(head.key))).collect();
            let vh: Vec<Vec<f64>> = k.iter().map(|kj| matvec(kj, &v(head.value))).collect();
            let logits: Vec<f64> = kh
                .iter()
                .map(|kj| qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&logits);
            for c in 0..dh {
                cat.push(a.iter().zip(&vh).map(|(w, row)| w * row[c]).sum());
            }
        }
        let attn = matvec(&cat, &v(params.out_proj));
        let res: Vec<f64> = qi.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let q1 = layer_norm(&res, tape.data(params.ln1_gain), tape.data(params.ln1_bias));
        let mut hid = matvec(&q1, &v(params.ffn_in));
        for (x, b) in hid.iter_mut().zip(tape.data(params.ffn_in_bias)) {
            let z = *x + b;
            *x = 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh());
        }
        let ff = matvec(&hid, &v(params.ffn_out));
        let res2: Vec<f64> = q1
            .iter()
            .zip(&ff)
            .zip(tape.data(params.ffn_out_bias))
            .map(|((a, b), c)| a + b + c)
            .collect();
        expect.extend(layer_norm(&res2, tape.data(params.ln2_gain), tape.data(params.ln2_bias)));
    }
    assert_eq!(tape.shape(out), &[3 * d]);
    for (a, b) in tape.data(out).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let params = fixed_interaction(&mut tape, 8, 4);
    let q = tape.constant(random(&mut rng, &[3, 8]));
    let k = tape.constant(random(&mut rng, &[12, 8]));
    let (_, attns) = sim::multi_head_cross_attention(&mut tape, q, k, &params.heads, params.out_proj).unwrap();
    assert_eq!(attns.len(), 4);
    for a in attns {
        for r in 0..3 {
            assert!((tape.value(a).row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn masked_rows_receive_zero_gradient_through_values() {
    // With zero-mode dropping, a masked row is multiplied by zero before it
    // reaches attention, so its gradient is exactly zero.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (l, d) = (4, 4);
    let mut tape = Tape::new();
    let mut feats = Vec::new();
    let mut patch_vars = Vec::new();
    for m in Modality::ALL {
        let c = tape.param(random(&mut rng, &[d]));
        let p = tape.param(random(&mut rng, &[l, d]));
        patch_vars.push(p);
        feats.push(ModalityFeatures::new(&tape, m, c, p, (2, 2)).unwrap());
    }
    let feats: [ModalityFeatures; 3] = feats.try_into().unwrap();
    let params = fixed_interaction(&mut tape, d, 2);
    let cfg = SimConfig { k1: 1, k2: 1, mask_mode: MaskMode::Intersection, drop_mode: DropMode::Zero, heads: 2 };
    let sel = sim::select_tokens(&mut tape, &feats, &params, &cfg).unwrap();
    let out = sim::modal_interaction(&mut tape, &feats, &sel.selected, &params).unwrap();
    let s = signal_core::gradsuite::probe(&mut tape, out).unwrap();
    tape.backward(s).unwrap();
    for (mask, &p) in sel.masks.iter().zip(&patch_vars) {
        let g = tape.grad(p).unwrap();
        for i in 0..l {
            let row = &g[i * d..(i + 1) * d];
            if mask.fused_mask[i] == 0.0 {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }
    // Class tokens still receive gradient.
    assert!(tape.grad(feats[0].cls).unwrap().iter().any(|&v| v != 0.0));
}

proptest! {
    #[test]
    fn selection_is_invariant_to_logit_shifts(seed in any::<u64>(), shift in -50.0f64..50.0, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = 8;
        let logits: Vec<f64> = (0..l).map(|_| rng.random_range(-4.0..4.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert_eq!(intra_select(&softmax(&logits), k).unwrap().0, intra_select(&softmax(&shifted), k).unwrap().0);

        let raw = random(&mut rng, &[3, 3 * l]);
        let s = |delta: f64| {
            let rows: Vec<f64> = (0..3).flat_map(|r| softmax(&raw.row(r).iter().map(|v| 3.0 * v + delta * (r + 1) as f64).collect::<Vec<_>>())).collect();
            Tensor::new(&[3, 3 * l], rows).unwrap()
        };
        for m in Modality::ALL {
            prop_assert_eq!(inter_select(&s(0.0), m, k).unwrap().0, inter_select(&s(shift), m, k).unwrap().0);
        }
    }

    #[test]
    fn selection_is_permutation_equivariant(seed in any::<u64>(), k1 in 1usize..6, k2 in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d) = (6, 4);
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut tape = Tape::new();
        let feats = features(&mut tape, &mut rng, l, d);
        let params = fixed_interaction(&mut tape, d, 2);
        // Permuted copy: new row i holds old row perm[i].
        let permuted: Vec<ModalityFeatures> = feats
            .iter()
            .map(|f| {
                let p = tape.gather_rows(f.patches, &perm).unwrap();
                ModalityFeatures::new(&tape, f.modality, f.cls, p, (l, 1)).unwrap()
            })
            .collect();
        let permuted: [ModalityFeatures; 3] = permuted.try_into().unwrap();
        let cfg = SimConfig { k1, k2, mask_mode: MaskMode::Union, drop_mode: DropMode::Zero, heads: 2 };
        let a = sim::select_tokens(&mut tape, &feats, &params, &cfg).unwrap();
        let b = sim::select_tokens(&mut tape, &permuted, &params, &cfg).unwrap();
        for (ma, mb) in a.masks.iter().zip(&b.masks) {
            let mut intra: Vec<usize> = mb.intra_indices.iter().map(|&i| perm[i]).collect();
            let mut inter: Vec<usize> = mb.inter_indices.iter().map(|&i| perm[i]).collect();
            intra.sort();
            inter.sort();
            prop_assert_eq!(&intra, &ma.intra_indices);
            prop_assert_eq!(&inter, &ma.inter_indices);
        }
    }
}
