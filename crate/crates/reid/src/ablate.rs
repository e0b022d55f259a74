//! Module-addition ablation: every preset trained on several seeds.

use serde::Serialize;

use crate::config::{EvalFeature, RunConfig, PRESETS};
use crate::error::Result;
use crate::eval::evaluate_model;
use crate::run;
use crate::synth::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub preset: String,
    pub seed: u64,
    pub map_frnt: f64,
    pub map_frnt_cls: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    /// Seeds where `full >= sim_gam >= sim >= baseline` on the f_rnt feature.
    pub ordered_seeds: usize,
    pub seeds: usize,
}

/// The preset's module switches applied on top of `base`.
pub fn preset_config(base: &RunConfig, preset: &str, seed: u64) -> Result<RunConfig> {
    let p = RunConfig::preset(preset)?;
    Ok(RunConfig {
        use_sim: p.use_sim,
        use_gam: p.use_gam,
        use_lam: p.use_lam,
        seed,
        ..base.clone()
    })
}

pub fn run(base: &RunConfig, data: &Dataset, seeds: &[u64], progress: &mut dyn FnMut(&AblationRun)) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for preset in PRESETS {
            let cfg = preset_config(base, preset, seed)?;
            let mut last = f64::NAN;
            let trainer = run::train(&cfg, data, None, None, &mut |log| last = log.total)?;
            let r = AblationRun {
                preset: preset.to_string(),
                seed,
                map_frnt: evaluate_model(&trainer.model, data, EvalFeature::Frnt)?.map,
                map_frnt_cls: evaluate_model(&trainer.model, data, EvalFeature::FrntCls)?.map,
                final_loss: last,
            };
            progress(&r);
            runs.push(r);
        }
    }
    let ordered_seeds = seeds
        .iter()
        .filter(|&&s| {
            let maps: Vec<f64> = PRESETS
                .iter()
                .map(|p| runs.iter().find(|r| r.seed == s && r.preset == *p).map_or(f64::NAN, |r| r.map_frnt))
                .collect();
            maps.windows(2).all(|w| w[1] >= w[0])
        })
        .count();
    Ok(AblationReport {
        runs,
        ordered_seeds,
        seeds: seeds.len(),
    })
}

/// Mean mAP per preset and feature, then the per-seed grid.
pub fn table(report: &AblationReport) -> String {
    let mut out = format!("{:<10} {:>10} {:>10}\n", "preset", "frnt", "frnt+cls");
    for p in PRESETS {
        let rows: Vec<&AblationRun> = report.runs.iter().filter(|r| r.preset == p).collect();
        let n = rows.len().max(1) as f64;
        let a: f64 = rows.iter().map(|r| r.map_frnt).sum::<f64>() / n;
        let b: f64 = rows.iter().map(|r| r.map_frnt_cls).sum::<f64>() / n;
        out.push_str(&format!("{p:<10} {a:>10.4} {b:>10.4}\n"));
    }
    out.push_str(&format!(
        "ordering full >= sim_gam >= sim >= baseline held in {} of {} seeds\n",
        report.ordered_seeds, report.seeds
    ));
    out
}
