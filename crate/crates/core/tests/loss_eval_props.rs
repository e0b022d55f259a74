use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signal_core::eval::oracle::{average_precisions, map_oracle};
use signal_core::eval::{distance_matrix, evaluate, Metric};
use signal_core::losses::{self, LossComponents};
use signal_core::{Error, Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Random labels where every query label occurs in the gallery.
fn labels(rng: &mut ChaCha8Rng, q: usize, g: usize) -> (Vec<usize>, Vec<usize>) {
    let classes = rng.random_range(1..=4usize);
    let gl: Vec<usize> = (0..g).map(|_| rng.random_range(0..classes)).collect();
    let ql: Vec<usize> = (0..q).map(|_| gl[rng.random_range(0..g)]).collect();
    (ql, gl)
}

#[test]
fn evaluate_equals_oracle_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for case in 0..200 {
        let q = rng.random_range(1..=8);
        let g = rng.random_range(1..=16);
        let (ql, gl) = labels(&mut rng, q, g);
        // Every third instance uses coarse distances to force ties.
        let d: Vec<f64> = (0..q * g)
            .map(|_| if case % 3 == 0 { rng.random_range(0..3) as f64 } else { rng.random() })
            .collect();
        let dist = Tensor::new(&[q, g], d).unwrap();
        let report = evaluate(&dist, &ql, &gl, &[1, 5, 10]).unwrap();
        assert_eq!(report.map, map_oracle(&dist, &ql, &gl).unwrap());
        assert_eq!(report.per_query_ap, average_precisions(&dist, &ql, &gl).unwrap());
        assert_eq!(*report.cmc.last().unwrap(), 1.0);
        assert!(report.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!(report.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}

#[test]
fn tied_distances_follow_gallery_order() {
    // All-equal distances: the ranking is the gallery order, so matches at
    // positions 1 and 3 give AP = (1/2 + 2/4) / 2.
    let dist = Tensor::full(&[1, 4], 0.5);
    let r = evaluate(&dist, &[1], &[0, 1, 0, 1], &[1]).unwrap();
    assert_eq!(r.map, 0.5);
    assert_eq!(r.map, map_oracle(&dist, &[1], &[0, 1, 0, 1]).unwrap());
    assert_eq!(r.cmc, vec![0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn missing_match_names_query() {
    let dist = Tensor::zeros(&[2, 2]);
    match evaluate(&dist, &[0, 5], &[0, 1], &[1]) {
        Err(Error::Evaluation(msg)) => assert!(msg.contains("query 1"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(map_oracle(&dist, &[0, 5], &[0, 1]).is_err());
}

#[test]
fn distances_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let q = random(&mut rng, &[3, 4], 1.0);
    let g = random(&mut rng, &[5, 4], 1.0);
    let d = distance_matrix(&q, &g, Metric::Euclidean).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..4 {
                s += (q.at2(i, k) - g.at2(j, k)).powi(2);
            }
            assert!((d.at2(i, j) - s.sqrt()).abs() < 1e-10);
        }
    }
    let self_d = distance_matrix(&q, &q, Metric::Euclidean).unwrap();
    assert!((0..3).all(|i| self_d.at2(i, i) == 0.0));
}

#[test]
fn total_gradient_is_weighted_sum_of_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = random(&mut rng, &[4, 3], 1.0);
    let w = random(&mut rng, &[3, 3], 1.0);
    let labels = [0, 1, 0, 1];
    let (alpha, beta) = (0.2, 0.2);
    // Builds the five components on a fresh tape; `pick` selects what to differentiate.
    let grad = |pick: Option<usize>| {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.constant(w.clone());
        let logits = tape.matmul(xv, wv).unwrap();
        let ce = losses::label_smooth_ce(&mut tape, logits, &labels, 0.1).unwrap();
        let triplet = losses::batch_hard_triplet(&mut tape, xv, &labels, 0.3).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let d2a = tape.mean(sq);
        let e = tape.exp(xv);
        let a2d = tape.mean(e);
        let t = tape.tanh(xv);
        let mse = tape.sum(t);
        let parts = LossComponents { ce, triplet, d2a, a2d, mse };
        let (total, report) = losses::total_loss(&mut tape, &parts, alpha, beta).unwrap();
        assert!((report.reassembled() - report.total).abs() <= 1e-12);
        let target = match pick {
            None => total,
            Some(i) => [ce, triplet, d2a, a2d, mse][i],
        };
        tape.backward(target).unwrap();
        tape.grad(xv).unwrap().to_vec()
    };
    let total = grad(None);
    let weights = [1.0, 1.0, alpha, alpha, beta];
    let parts: Vec<Vec<f64>> = (0..5).map(|i| grad(Some(i))).collect();
    for k in 0..total.len() {
        let combined: f64 = (0..5).map(|i| weights[i] * parts[i][k]).sum();
        assert!((total[k] - combined).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn ce_is_row_shift_invariant(seed in any::<u64>(), shifts in prop::collection::vec(-20.0f64..20.0, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, &[3, 5], 3.0);
        let mut shifted = logits.clone();
        for (i, s) in shifts.iter().enumerate() {
            shifted.data_mut()[i * 5..(i + 1) * 5].iter_mut().for_each(|v| *v += s);
        }
        let mut tape = Tape::new();
        let a = tape.constant(logits);
        let b = tape.constant(shifted);
        let la = losses::label_smooth_ce(&mut tape, a, &[4, 0, 2], 0.1).unwrap();
        let lb = losses::label_smooth_ce(&mut tape, b, &[4, 0, 2], 0.1).unwrap();
        prop_assert!((tape.item(la) - tape.item(lb)).abs() <= 1e-10);
    }

    #[test]
    fn triplet_is_rigid_invariant(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random(&mut rng, &[6, 2], 1.0);
        let (c, s) = (angle.cos(), angle.sin());
        let moved: Vec<f64> = (0..6)
            .flat_map(|i| {
                let (x, y) = (pts.at2(i, 0), pts.at2(i, 1));
                [c * x - s * y + tx, s * x + c * y + ty]
            })
            .collect();
        let labels = [0, 1, 2, 0, 1, 2];
        let mut tape = Tape::new();
        let a = tape.constant(pts);
        let b = tape.constant(Tensor::new(&[6, 2], moved).unwrap());
        let la = losses::batch_hard_triplet(&mut tape, a, &labels, 0.3).unwrap();
        let lb = losses::batch_hard_triplet(&mut tape, b, &labels, 0.3).unwrap();
        prop_assert!((tape.item(la) - tape.item(lb)).abs() <= 1e-9);
    }

    #[test]
    fn shrinking_a_correct_distance_never_lowers_ap(seed in any::<u64>(), factor in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = rng.random_range(2..=12);
        let (ql, gl) = labels(&mut rng, 1, g);
        let d: Vec<f64> = (0..g).map(|_| rng.random()).collect();
        let dist = Tensor::new(&[1, g], d.clone()).unwrap();
        let before = evaluate(&dist, &ql, &gl, &[1]).unwrap().map;
        let hits: Vec<usize> = (0..g).filter(|&j| gl[j] == ql[0]).collect();
        let j = hits[rng.random_range(0..hits.len())];
        let mut closer = d;
        closer[j] *= factor;
        let after = evaluate(&Tensor::new(&[1, g], closer).unwrap(), &ql, &gl, &[1]).unwrap().map;
        prop_assert!(after >= before);
    }

    #[test]
    fn gallery_permutation_leaves_map_unchanged(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, g) = (rng.random_range(1..=6), rng.random_range(2..=12));
        let (ql, gl) = labels(&mut rng, q, g);
        let dist = random(&mut rng, &[q, g], 1.0);
        let mut perm: Vec<usize> = (0..g).collect();
        for i in (1..g).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pd: Vec<f64> = (0..q).flat_map(|i| perm.iter().map(|&j| dist.at2(i, j)).collect::<Vec<_>>()).collect();
        let pl: Vec<usize> = perm.iter().map(|&j| gl[j]).collect();
        let a = evaluate(&dist, &ql, &gl, &[1]).unwrap().map;
        let b = map_oracle(&Tensor::new(&[q, g], pd).unwrap(), &ql, &pl).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mining_rejects_non_finite_embeddings() {
    let mut e = Tensor::new(&[4, 2], vec![0.0, 1.0, 0.5, 1.0, 3.0, 0.0, 2.0, 1.0]).unwrap();
    assert_eq!(losses::mine_batch_hard(&e, &[0, 0, 1, 1]).unwrap(), [(1, 3), (0, 3), (3, 1), (2, 1)]);
    e.data_mut()[3] = f64::NAN;
    assert!(matches!(losses::mine_batch_hard(&e, &[0, 0, 1, 1]), Err(Error::Degenerate(_))));
}
