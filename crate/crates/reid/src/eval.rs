//! Model-level retrieval evaluation and the report JSON.

use serde_json::{json, Value};
use signal_core::eval::{distance_matrix, evaluate, RetrievalReport};

use crate::config::EvalFeature;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{Dataset, Split};

pub const REPORT_RANKS: [usize; 3] = [1, 5, 10];

/// Embeds the query and gallery splits and ranks the gallery for every query.
pub fn evaluate_model(model: &Model, data: &Dataset, feature: EvalFeature) -> Result<RetrievalReport> {
    let query = data.split(Split::Query);
    let gallery = data.split(Split::Gallery);
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Core(signal_core::Error::Argument(format!(
            "dataset has {} query and {} gallery samples; both splits are required",
            query.len(),
            gallery.len()
        ))));
    }
    let q = model.embed(&query, feature)?;
    let g = model.embed(&gallery, feature)?;
    let dist = distance_matrix(&q, &g, model.config.metric())?;
    let ql: Vec<usize> = query.iter().map(|r| r.id).collect();
    let gl: Vec<usize> = gallery.iter().map(|r| r.id).collect();
    Ok(evaluate(&dist, &ql, &gl, &REPORT_RANKS)?)
}

/// `{"mAP", "cmc": {"1", "5", "10"}, "per_query_ap"}`
pub fn report_json(r: &RetrievalReport) -> Value {
    let cmc: serde_json::Map<String, Value> = REPORT_RANKS.iter().map(|&k| (k.to_string(), json!(r.cmc_at(k)))).collect();
    json!({
        "mAP": r.map,
        "cmc": cmc,
        "per_query_ap": r.per_query_ap,
    })
}
