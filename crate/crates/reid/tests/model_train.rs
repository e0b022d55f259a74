use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use signal_core::eval::oracle::map_oracle;
use signal_core::{Modality, Tape, Tensor};
use signal_reid::checkpoint::Checkpoint;
use signal_reid::config::EvalFeature;
use signal_reid::error::Error;
use signal_reid::eval::{evaluate_model, report_json};
use signal_reid::model::{encode_modality, EncoderParams, Model};
use signal_reid::run::{self, Output};
use signal_reid::synth::{self, Dataset, Split, SynthConfig};
use signal_reid::train::{pk_batches, EpochLog, Trainer};
use signal_reid::RunConfig;

fn tiny_data(seed: u64) -> Dataset {
    synth::generate(&SynthConfig {
        num_ids: 4,
        samples_per_id: 4,
        query_per_id: 1,
        gallery_per_id: 2,
        grid: [4, 2],
        d_raw: 4,
        id_dims: 2,
        seed,
        ..SynthConfig::easy()
    })
    .unwrap()
}

fn tiny_config() -> RunConfig {
    RunConfig {
        d: 8,
        heads: 2,
        batch_size: 4,
        samples_per_id: 2,
        epochs: 3,
        seed: 7,
        ..RunConfig::default()
    }
}

/// Two training samples each of the first two identities.
fn two_by_two(data: &Dataset) -> Vec<&synth::SampleRecord> {
    let train = data.split(Split::Train);
    let mut out: Vec<_> = train.iter().filter(|r| r.id == train[0].id).take(2).copied().collect();
    out.extend(train.iter().filter(|r| r.id != train[0].id).take(2).copied());
    out
}

fn fixed(shape: &[usize], salt: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| 0.3 * ((i as f64 + 1.0) * salt).sin()).collect()).unwrap()
}

#[test]
fn encoder_matches_loop_oracle() {
    let (l, dr, d) = (3, 2, 4);
    let raw = fixed(&[l, dr], 0.7);
    let w = fixed(&[dr, d], 1.3);
    let b = fixed(&[d], 2.1);
    let seed = fixed(&[d], 0.4);
    let [wq, wk, wv, wo] = [0.5, 0.9, 1.7, 2.3].map(|s| fixed(&[d, d], s));
    let gain = fixed(&[d], 3.1);
    let bias = fixed(&[d], 0.2);

    let mut tape = Tape::new();
    let mut c = |t: &Tensor| tape.constant(t.clone());
    let p = EncoderParams {
        proj: c(&w),
        proj_bias: c(&b),
        cls: c(&seed),
        query: c(&wq),
        key: c(&wk),
        value: c(&wv),
        out: c(&wo),
        ln_gain: c(&gain),
        ln_bias: c(&bias),
    };
    let x = tape.constant(raw.clone());
    let f = encode_modality(&mut tape, x, Modality::N, (3, 1), &p).unwrap();

    let vecmat = |v: &[f64], m: &Tensor| -> Vec<f64> { (0..d).map(|j| (0..v.len()).map(|i| v[i] * m.at2(i, j)).sum()).collect() };
    let patches: Vec<Vec<f64>> = (0..l)
        .map(|i| vecmat(raw.row(i), &w).iter().zip(b.data()).map(|(a, b)| a + b).collect())
        .collect();
    for i in 0..l {
        for j in 0..d {
            assert!((tape.value(f.patches).at2(i, j) - patches[i][j]).abs() < 1e-10);
        }
    }
    let q = vecmat(seed.data(), &wq);
    let logits: Vec<f64> = patches
        .iter()
        .map(|p| vecmat(p, &wk).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    let mut pooled = vec![0.0; d];
    for (i, p) in patches.iter().enumerate() {
        let a = (logits[i] - mx).exp() / z;
        for (acc, v) in pooled.iter_mut().zip(vecmat(p, &wv)) {
            *acc += a * v;
        }
    }
    let res: Vec<f64> = vecmat(&pooled, &wo).iter().zip(seed.data()).map(|(a, b)| a + b).collect();
    let mean = res.iter().sum::<f64>() / d as f64;
    let var = res.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let ln_eps = 1e-5;
    for j in 0..d {
        let expect = (res[j] - mean) / (var + ln_eps).sqrt() * gain.data()[j] + bias.data()[j];
        assert!((tape.data(f.cls)[j] - expect).abs() < 1e-10, "{j}");
    }
}

#[test]
fn zero_input_gives_zero_patches_and_shapes_hold() {
    let cfg = tiny_config();
    let data = tiny_data(1);
    let mut model = Model::init(&cfg, data.grid, data.d_raw, 4).unwrap();
    for m in Modality::ALL {
        *model.params.get_mut(&format!("enc.{m}.proj_bias")).unwrap() = Tensor::zeros(&[8]);
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let p = EncoderParams::bind(&bound, Modality::T).unwrap();
    let x = tape.constant(Tensor::zeros(&[8, 4]));
    let f = encode_modality(&mut tape, x, Modality::T, (4, 2), &p).unwrap();
    assert!(tape.data(f.patches).iter().all(|&v| v == 0.0));
    assert_eq!(tape.shape(f.cls), [8]);
    assert_eq!(tape.shape(f.patches), [8, 8]);
    let bad = tape.constant(Tensor::zeros(&[8, 5]));
    assert!(encode_modality(&mut tape, bad, Modality::T, (4, 2), &p).is_err());
}

#[test]
fn forward_gives_3d_features_for_every_preset() {
    let data = tiny_data(2);
    let batch = two_by_two(&data);
    let labels: Vec<usize> = batch.iter().map(|r| r.id).collect();
    for preset in ["baseline", "sim", "sim_gam", "full"] {
        let cfg = RunConfig {
            use_sim: RunConfig::preset(preset).unwrap().use_sim,
            use_gam: RunConfig::preset(preset).unwrap().use_gam,
            use_lam: RunConfig::preset(preset).unwrap().use_lam,
            ..tiny_config()
        };
        let model = Model::init(&cfg, data.grid, data.d_raw, 4).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &batch, &labels).unwrap();
        assert_eq!(tape.shape(fwd.features), [4, 24]);
        assert!((fwd.report.reassembled() - fwd.report.total).abs() <= 1e-12);
        let e = model.embed(&batch, EvalFeature::FrntCls).unwrap();
        assert_eq!(e.shape(), [4, 48]);
    }
}

#[test]
fn zero_weights_silence_alignment_gradients() {
    let data = tiny_data(3);
    let batch = two_by_two(&data);
    let labels: Vec<usize> = batch.iter().map(|r| r.id).collect();
    let cfg = RunConfig {
        alpha: 0.0,
        beta: 0.0,
        ..tiny_config()
    };
    let model = Model::init(&cfg, data.grid, data.d_raw, 4).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let fwd = model.forward(&mut tape, &bound, &batch, &labels).unwrap();
    // Both alignment terms were computed ...
    assert!(fwd.report.d2a > 0.0 && fwd.report.mse > 0.0);
    assert_eq!(fwd.report.total, fwd.report.ce + fwd.report.triplet);
    tape.backward(fwd.total).unwrap();
    // ... but contribute nothing to the gradient.
    let grads = bound.grads(&tape);
    for (name, g) in &grads {
        if name.starts_with("lam.") || name.starts_with("gam.") {
            assert!(g.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(grads["sim.ffn.in"].iter().any(|&v| v != 0.0));
}

#[test]
fn sampler_builds_disjoint_pk_batches() {
    let by_id: BTreeMap<usize, Vec<usize>> = (0..5).map(|id| (id, (id * 10..id * 10 + 6 + id % 2).collect())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batches = pk_batches(&mut rng, &by_id, 2, 3);
    assert_eq!(batches.len(), 5);
    let mut seen = BTreeSet::new();
    for b in &batches {
        assert_eq!(b.len(), 6);
        let ids: BTreeSet<usize> = b.iter().map(|i| i / 10).collect();
        assert_eq!(ids.len(), 2);
        for i in b {
            assert!(seen.insert(*i), "index {i} drawn twice");
        }
    }
    let mut again = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(pk_batches(&mut again, &by_id, 2, 3), batches);
}

fn losses(trainer: &mut Trainer, data: &Dataset, epochs: usize) -> Vec<EpochLog> {
    (0..epochs).map(|_| trainer.run_epoch(data).unwrap()).collect()
}

#[test]
fn fixed_seed_reruns_are_bit_identical() {
    let data = tiny_data(4);
    let cfg = tiny_config();
    let a = losses(&mut Trainer::new(&cfg, &data).unwrap(), &data, 3);
    let b = losses(&mut Trainer::new(&cfg, &data).unwrap(), &data, 3);
    assert_eq!(a, b);
    let c = losses(&mut Trainer::new(&RunConfig { seed: 8, ..cfg }, &data).unwrap(), &data, 3);
    assert_ne!(a, c);
}

#[test]
fn resume_reproduces_later_epochs() {
    let data = tiny_data(5);
    let cfg = RunConfig { epochs: 4, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    let out = Output::new(dir.path()).unwrap();
    let mut straight = Vec::new();
    run::train(&cfg, &data, None, None, &mut |l| straight.push(*l)).unwrap();

    let mut first = Vec::new();
    run::train(&RunConfig { epochs: 2, ..cfg.clone() }, &data, Some(&out), None, &mut |l| first.push(*l)).unwrap();
    let mut rest = Vec::new();
    let resumed = run::train(&cfg, &data, Some(&out), Some(&out.checkpoint()), &mut |l| rest.push(*l)).unwrap();
    first.extend(rest);
    assert_eq!(first, straight);
    let lines = std::fs::read_to_string(out.metrics()).unwrap();
    assert_eq!(lines.lines().count(), 4);
    assert_eq!(Checkpoint::load(&out.checkpoint()).unwrap().epoch, 4);
    assert_eq!(resumed.epoch, 4);

    let other = RunConfig { beta: 0.3, ..cfg };
    let err = run::train(&other, &data, None, Some(&out.checkpoint()), &mut |_| {}).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn loaded_checkpoint_reproduces_embeddings() {
    let data = tiny_data(6);
    let cfg = tiny_config();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.run_epoch(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.sgck");
    t.checkpoint().save(&p).unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    let recs = data.split(Split::Query);
    assert_eq!(
        loaded.model.embed(&recs, EvalFeature::Frnt).unwrap(),
        t.model.embed(&recs, EvalFeature::Frnt).unwrap()
    );
}

#[test]
fn training_lowers_loss_and_lifts_map() {
    let data = synth::generate(&SynthConfig::easy()).unwrap();
    let cfg = RunConfig { epochs: 10, ..RunConfig::default() };
    let mut logs = Vec::new();
    let trainer = run::train(&cfg, &data, None, None, &mut |l| logs.push(*l)).unwrap();
    assert!(logs[9].total < logs[0].total);
    let untrained = Model::init(&cfg, data.grid, data.d_raw, 10).unwrap();
    let before = evaluate_model(&untrained, &data, EvalFeature::Frnt).unwrap().map;
    let after = evaluate_model(&trainer.model, &data, EvalFeature::Frnt).unwrap().map;
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn report_json_follows_schema() {
    let data = tiny_data(7);
    let model = Model::init(&tiny_config(), data.grid, data.d_raw, 4).unwrap();
    let r = evaluate_model(&model, &data, EvalFeature::Frnt).unwrap();
    let json = report_json(&r);
    let obj = json.as_object().unwrap();
    assert_eq!(obj.keys().collect::<Vec<_>>(), ["cmc", "mAP", "per_query_ap"]);
    let cmc = json["cmc"].as_object().unwrap();
    assert_eq!(cmc.keys().collect::<Vec<_>>(), ["1", "10", "5"]);
    assert!(cmc.values().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    assert_eq!(json["per_query_ap"].as_array().unwrap().len(), 4);
    let map = json["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let ql: Vec<usize> = data.split(Split::Query).iter().map(|r| r.id).collect();
    let gl: Vec<usize> = data.split(Split::Gallery).iter().map(|r| r.id).collect();
    assert_eq!(map, map_oracle(&r.distances, &ql, &gl).unwrap());
}

#[test]
fn missing_splits_are_argument_errors() {
    let mut data = tiny_data(8);
    let model = Model::init(&tiny_config(), data.grid, data.d_raw, 4).unwrap();
    data.records.retain(|r| r.split != Split::Gallery);
    let err = evaluate_model(&model, &data, EvalFeature::Frnt).unwrap_err();
    assert!(matches!(err, Error::Core(signal_core::Error::Argument(_))), "{err}");
}

#[test]
fn non_finite_input_is_a_numeric_failure() {
    let mut data = tiny_data(9);
    for r in data.records.iter_mut() {
        r.modalities[1].data_mut()[0] = f64::NAN;
    }
    let err = run::train(&tiny_config(), &data, None, None, &mut |_| {}).err().unwrap();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn config_validation() {
    assert!(RunConfig::from_json(r#"{"batch_size": 10, "samples_per_id": 4}"#).is_err());
    assert!(RunConfig::from_json(r#"{"heads": 5}"#).is_err());
    assert!(RunConfig::from_json(r#"{"unknown_key": 1}"#).is_err());
    assert!(RunConfig::from_json(r#"{"mask_mode": "xor"}"#).is_err());
    let c = RunConfig::from_json(r#"{"preset": "sim_gam", "eval_feature": "frnt+cls", "lam_pairs": "to_anchor"}"#).unwrap();
    assert!(c.use_sim && c.use_gam && !c.use_lam);
    assert_eq!(c.eval_feature, EvalFeature::FrntCls);
    let d = RunConfig::default();
    assert_eq!((d.alpha, d.beta, d.epochs, d.lr, d.encoder_lr), (0.2, 0.2, 50, 3.5e-4, 5e-6));
    assert_eq!(d.k1_for(128), 80);
    assert_eq!(d.k1_for(32), 20);
    assert_eq!(d.encoder_rate(), 5e-4);
}
