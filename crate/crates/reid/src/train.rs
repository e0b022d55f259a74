//! P x K sampling, two-group Adam and the epoch loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use signal_core::{adam_step, AdamConfig, AdamState, Tape, Tensor};

use crate::checkpoint::{Checkpoint, Group};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ENCODER_PREFIX};
use crate::synth::{Dataset, SampleRecord, Split};

/// Per-identity record indices are shuffled and cut into chunks of `k`
/// (a short tail is dropped). Each batch takes one chunk from each of the `p`
/// identities with the most chunks left, ties broken at random, until fewer
/// than `p` identities remain.
pub fn pk_batches(rng: &mut ChaCha8Rng, by_id: &BTreeMap<usize, Vec<usize>>, p: usize, k: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = by_id
        .iter()
        .map(|(&id, idx)| {
            let mut idx = idx.clone();
            idx.shuffle(rng);
            let c: Vec<Vec<usize>> = idx.chunks_exact(k).map(<[usize]>::to_vec).collect();
            (id, c)
        })
        .collect();
    let mut batches = Vec::new();
    loop {
        let mut ready: Vec<(usize, u64, usize)> = chunks
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| !c.is_empty())
            .map(|(slot, (_, c))| (c.len(), 0, slot))
            .collect();
        if ready.len() < p {
            break;
        }
        for r in ready.iter_mut() {
            r.1 = rng.random();
        }
        ready.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut batch = Vec::with_capacity(p * k);
        for &(_, _, slot) in &ready[..p] {
            batch.extend(chunks[slot].1.pop().expect("non-empty"));
        }
        batches.push(batch);
    }
    batches
}

/// Mean loss terms of one epoch, one JSON line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub d2a: f64,
    pub a2d: f64,
    pub mse: f64,
}

pub struct Trainer {
    pub model: Model,
    pub groups: Vec<Group>,
    pub epoch: usize,
    rng: ChaCha8Rng,
    /// Train record indices per identity.
    by_id: BTreeMap<usize, Vec<usize>>,
    /// Identity to class index.
    classes: BTreeMap<usize, usize>,
}

fn train_index(data: &Dataset) -> (BTreeMap<usize, Vec<usize>>, BTreeMap<usize, usize>) {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.records.iter().enumerate() {
        if r.split == Split::Train {
            by_id.entry(r.id).or_default().push(i);
        }
    }
    let classes = by_id.keys().enumerate().map(|(c, &id)| (id, c)).collect();
    (by_id, classes)
}

fn sampler_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl Trainer {
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let (by_id, classes) = train_index(data);
        let model = Model::init(cfg, data.grid, data.d_raw, classes.len())?;
        let mut groups = Vec::new();
        for (name, encoder, lr) in [("encoder", true, cfg.encoder_rate()), ("modules", false, cfg.lr)] {
            let names: Vec<String> = model
                .params
                .names()
                .filter(|n| n.starts_with(ENCODER_PREFIX) == encoder)
                .map(str::to_string)
                .collect();
            let shapes: Vec<&[usize]> = names.iter().map(|n| model.params.get(n).expect("listed").shape()).collect();
            groups.push(Group {
                name: name.to_string(),
                state: AdamState::new(AdamConfig::with_lr(lr), &shapes),
                params: names,
            });
        }
        let t = Self {
            model,
            groups,
            epoch: 0,
            rng: sampler_rng(cfg.seed),
            by_id,
            classes,
        };
        t.check_data()?;
        Ok(t)
    }

    /// Continues from `ck`; `cfg` may change only the epoch budget and paths.
    pub fn resume(ck: Checkpoint, cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        cfg.check_compatible(&ck.model.config)?;
        let (by_id, classes) = train_index(data);
        if classes.len() != ck.model.num_classes || data.grid != ck.model.grid || data.d_raw != ck.model.d_raw {
            return Err(Error::Config("dataset does not match the checkpoint".into()));
        }
        let mut rng = sampler_rng(ck.model.config.seed);
        rng.set_word_pos(ck.rng_word_pos);
        let mut model = ck.model;
        model.config = cfg.clone();
        let t = Self {
            model,
            groups: ck.groups,
            epoch: ck.epoch,
            rng,
            by_id,
            classes,
        };
        t.check_data()?;
        Ok(t)
    }

    fn check_data(&self) -> Result<()> {
        let cfg = &self.model.config;
        let full = self.by_id.values().filter(|v| v.len() >= cfg.samples_per_id).count();
        if full < cfg.ids_per_batch() {
            return Err(Error::Config(format!(
                "{} identities have at least {} training samples; a batch needs {}",
                full,
                cfg.samples_per_id,
                cfg.ids_per_batch()
            )));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            groups: self.groups.clone(),
            epoch: self.epoch,
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// One optimization step on the given records.
    pub fn step(&mut self, batch: &[&SampleRecord]) -> Result<signal_core::losses::LossReport> {
        let labels: Vec<usize> = batch
            .iter()
            .map(|r| {
                self.classes
                    .get(&r.id)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("identity {} is not in the training split", r.id)))
            })
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let fwd = self.model.forward(&mut tape, &bound, batch, &labels).map_err(|e| match e {
            Error::Core(signal_core::Error::Degenerate(m)) => Error::Numeric(format!("epoch {}: {m}", self.epoch + 1)),
            e => e,
        })?;
        let report = fwd.report;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at epoch {}: {report:?}", self.epoch + 1)));
        }
        tape.backward(fwd.total)?;
        let grads = bound.grads(&tape);
        for g in &mut self.groups {
            let owned: Vec<Vec<f64>> = g
                .params
                .iter()
                .map(|n| match grads.get(n.as_str()) {
                    Some(v) => v.to_vec(),
                    None => vec![0.0; self.model.params.get(n).map_or(0, Tensor::len)],
                })
                .collect();
            if owned.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in group {}", g.name)));
            }
            let names: Vec<&str> = g.params.iter().map(String::as_str).collect();
            let mut tensors: Vec<&mut Tensor> = self
                .model
                .params
                .iter_mut()
                .filter(|(n, _)| names.contains(n))
                .map(|(_, t)| t)
                .collect();
            let refs: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
            adam_step(&mut tensors, &refs, &mut g.state)?;
        }
        Ok(report)
    }

    /// Runs one epoch and returns its mean loss terms.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochLog> {
        let cfg = &self.model.config;
        let batches = pk_batches(&mut self.rng, &self.by_id, cfg.ids_per_batch(), cfg.samples_per_id);
        let mut sums = [0.0; 6];
        for idx in &batches {
            let batch: Vec<&SampleRecord> = idx.iter().map(|&i| &data.records[i]).collect();
            let r = self.step(&batch)?;
            for (s, v) in sums.iter_mut().zip([r.total, r.ce, r.triplet, r.d2a, r.a2d, r.mse]) {
                *s += v;
            }
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            steps: batches.len(),
            total: sums[0] / n,
            ce: sums[1] / n,
            triplet: sums[2] / n,
            d2a: sums[3] / n,
            a2d: sums[4] / n,
            mse: sums[5] / n,
        })
    }
}
