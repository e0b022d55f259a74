//! Finite-difference table over every differentiable operation plus the
//! assembled model.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signal_core::gradcheck::DEFAULT_STEP;
use signal_core::gradsuite::{self, GradCase};

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::Model;
use crate::synth::{self, SynthConfig};

pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub max_error: f64,
}

impl Row {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

/// Parameters probed through the full model forward and total loss.
pub const MODEL_PROBES: [&str; 8] = [
    "enc.R.proj",
    "enc.N.cls",
    "enc.T.pool.key",
    "sim.head0.query",
    "sim.ffn.in",
    "lam.N.conv1",
    "gam.log_tau",
    "head.classifier",
];

/// Gradient cases that run the whole model on a tiny synthetic batch with
/// one parameter replaced by the probe input.
pub fn model_cases() -> Result<Vec<GradCase>> {
    let data = synth::generate(&SynthConfig {
        num_ids: 2,
        samples_per_id: 2,
        query_per_id: 0,
        gallery_per_id: 0,
        grid: [4, 2],
        d_raw: 4,
        id_dims: 2,
        shifts: [[0, 0], [1, 0], [0, 1]],
        seed: 5,
        ..SynthConfig::easy()
    })?;
    let cfg = RunConfig {
        d: 8,
        heads: 2,
        batch_size: 4,
        samples_per_id: 2,
        seed: 5,
        ..RunConfig::default()
    };
    let model = Rc::new(Model::init(&cfg, data.grid, data.d_raw, 2)?);
    let records = Rc::new(data.records);
    let labels = Rc::new(records.iter().map(|r| r.id).collect::<Vec<_>>());
    let mut cases = Vec::new();
    for name in MODEL_PROBES {
        let shape = model.params.get(name).expect("probe exists").shape().to_vec();
        let (lo, hi) = if name == "gam.log_tau" { (-3.0, -1.5) } else { (-0.5, 0.5) };
        let (model, records, labels) = (Rc::clone(&model), Rc::clone(&records), Rc::clone(&labels));
        cases.push(GradCase::new(&format!("model/{name}"), &shape, lo, hi, move |tape, x| {
            let mut bound = model.params.bind(tape);
            bound.replace(name, x)?;
            let batch: Vec<_> = records.iter().collect();
            let fwd = model
                .forward(tape, &bound, &batch, &labels)
                .map_err(|e| signal_core::Error::Argument(e.to_string()))?;
            Ok(fwd.total)
        }));
    }
    Ok(cases)
}

/// Runs every case at [`POINTS`] seeded points; `corrupt` adds the fixture
/// whose backward pass is deliberately wrong.
pub fn run(seed: u64, corrupt: bool) -> Result<Vec<Row>> {
    let mut cases = gradsuite::standard_cases();
    cases.extend(model_cases()?);
    if corrupt {
        cases.push(gradsuite::corrupted_case());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = move || rng.random::<f64>();
    cases
        .iter()
        .map(|c| {
            let max_error = c.run(&mut uniform, POINTS, DEFAULT_STEP)?;
            Ok(Row {
                name: c.name.clone(),
                max_error,
            })
        })
        .collect()
}

pub fn table(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(2).max(2);
    let mut out = format!("{:<width$}  {:>12}  status\n", "op", "max_rel_err");
    for r in rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        out.push_str(&format!("{:<width$}  {:>12.3e}  {status}\n", r.name, r.max_error));
    }
    out
}
