//! Run configuration: one JSON object, every key optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use signal_core::eval::Metric;
use signal_core::lam::LamPairs;
use signal_core::sim::{DropMode, MaskMode};
use signal_core::Modality;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskChoice {
    Union,
    Intersection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropChoice {
    Zero,
    Gather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorChoice {
    R,
    N,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSource {
    Original,
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairsChoice {
    All,
    ToAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalFeature {
    #[serde(rename = "frnt")]
    Frnt,
    #[serde(rename = "frnt+cls")]
    FrntCls,
}

impl EvalFeature {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalFeature::Frnt => "frnt",
            EvalFeature::FrntCls => "frnt+cls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricChoice {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Token width D.
    pub d: usize,
    pub heads: usize,
    /// Intra-modal keep count; `round(80/128 L)` when absent.
    pub k1: Option<usize>,
    /// Inter-modal keep count; same default as `k1`.
    pub k2: Option<usize>,
    pub mask_mode: MaskChoice,
    pub drop_mode: DropChoice,
    pub use_sim: bool,
    pub use_gam: bool,
    pub use_lam: bool,
    pub gam_anchor: AnchorChoice,
    pub gam_tau_init: f64,
    pub gam_pool_source: PoolSource,
    pub lam_r: usize,
    /// Offset bound; one cell of the coarser grid axis when absent.
    pub lam_delta_max: Option<f64>,
    pub offset_sharing: bool,
    pub lam_pairs: PairsChoice,
    pub alpha: f64,
    pub beta: f64,
    pub ce_epsilon: f64,
    pub tri_margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// K of the P x K sampler.
    pub samples_per_id: usize,
    /// Learning rate of every non-encoder parameter.
    pub lr: f64,
    pub encoder_lr: f64,
    /// Multiplier on `encoder_lr`; the toy encoder starts from scratch.
    pub encoder_lr_scale: f64,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub eval_feature: EvalFeature,
    pub metric: MetricChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            k1: None,
            k2: None,
            mask_mode: MaskChoice::Union,
            drop_mode: DropChoice::Zero,
            use_sim: true,
            use_gam: true,
            use_lam: true,
            gam_anchor: AnchorChoice::R,
            gam_tau_init: signal_core::gam::DEFAULT_TAU,
            gam_pool_source: PoolSource::Original,
            lam_r: 1,
            lam_delta_max: None,
            offset_sharing: false,
            lam_pairs: PairsChoice::All,
            alpha: 0.2,
            beta: 0.2,
            ce_epsilon: signal_core::losses::DEFAULT_CE_EPSILON,
            tri_margin: signal_core::losses::DEFAULT_TRIPLET_MARGIN,
            epochs: 50,
            batch_size: 16,
            samples_per_id: 4,
            lr: 3.5e-4,
            encoder_lr: 5e-6,
            encoder_lr_scale: 100.0,
            seed: 0,
            data: None,
            out: None,
            eval_feature: EvalFeature::Frnt,
            metric: MetricChoice::Euclidean,
        }
    }
}

/// Ablation presets in order of added modules.
pub const PRESETS: [&str; 4] = ["baseline", "sim", "sim_gam", "full"];

/// Keys that may differ between a checkpoint and the config resuming it.
const RESUME_FREE_KEYS: [&str; 3] = ["epochs", "data", "out"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (sim, gam, lam) = match name {
            "baseline" => (false, false, false),
            "sim" => (true, false, false),
            "sim_gam" => (true, true, false),
            "full" => (true, true, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            use_sim: sim,
            use_gam: gam,
            use_lam: lam,
            ..Self::default()
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = with_preset(text, Self::preset)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn default_k(l: usize) -> usize {
        ((80.0 / 128.0 * l as f64).round() as usize).clamp(1, l.max(1))
    }

    pub fn k1_for(&self, l: usize) -> usize {
        self.k1.unwrap_or_else(|| Self::default_k(l))
    }

    pub fn k2_for(&self, l: usize) -> usize {
        self.k2.unwrap_or_else(|| Self::default_k(l))
    }

    pub fn mask_mode(&self) -> MaskMode {
        match self.mask_mode {
            MaskChoice::Union => MaskMode::Union,
            MaskChoice::Intersection => MaskMode::Intersection,
        }
    }

    pub fn drop_mode(&self) -> DropMode {
        match self.drop_mode {
            DropChoice::Zero => DropMode::Zero,
            DropChoice::Gather => DropMode::Gather,
        }
    }

    pub fn anchor(&self) -> Modality {
        match self.gam_anchor {
            AnchorChoice::R => Modality::R,
            AnchorChoice::N => Modality::N,
            AnchorChoice::T => Modality::T,
        }
    }

    pub fn lam_pairs(&self) -> LamPairs {
        match self.lam_pairs {
            PairsChoice::All => LamPairs::All,
            PairsChoice::ToAnchor => LamPairs::ToAnchor(self.anchor()),
        }
    }

    pub fn metric(&self) -> Metric {
        match self.metric {
            MetricChoice::Euclidean => Metric::Euclidean,
            MetricChoice::Cosine => Metric::Cosine,
        }
    }

    pub fn encoder_rate(&self) -> f64 {
        self.encoder_lr * self.encoder_lr_scale
    }

    /// Identities per batch.
    pub fn ids_per_batch(&self) -> usize {
        self.batch_size / self.samples_per_id
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads = {} must divide d = {}", self.heads, self.d));
        }
        if self.samples_per_id == 0 || !self.batch_size.is_multiple_of(self.samples_per_id) {
            return bad(format!(
                "batch_size = {} must be a multiple of samples_per_id = {}",
                self.batch_size, self.samples_per_id
            ));
        }
        if self.ids_per_batch() < 2 {
            return bad("a batch needs at least two identities for triplet mining".into());
        }
        if self.k1 == Some(0) || self.k2 == Some(0) {
            return bad("k1 and k2 must be positive".into());
        }
        if self.gam_tau_init.is_nan() || self.gam_tau_init <= 0.0 {
            return bad(format!("gam_tau_init = {} must be positive", self.gam_tau_init));
        }
        if self.lam_r == 0 {
            return bad("lam_r must be positive".into());
        }
        if let Some(dm) = self.lam_delta_max {
            if dm.is_nan() || dm <= 0.0 {
                return bad(format!("lam_delta_max = {dm} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.ce_epsilon) {
            return bad(format!("ce_epsilon = {} must lie in [0, 1)", self.ce_epsilon));
        }
        for (key, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("tri_margin", self.tri_margin),
            ("lr", self.lr),
            ("encoder_lr", self.encoder_lr),
            ("encoder_lr_scale", self.encoder_lr_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{key} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Rejects a config whose keys differ from `saved` outside the resume-free set.
    pub fn check_compatible(&self, saved: &RunConfig) -> Result<()> {
        let a = to_map(self)?;
        let b = to_map(saved)?;
        let diff: Vec<&str> = a
            .keys()
            .filter(|k| !RESUME_FREE_KEYS.contains(&k.as_str()) && a.get(*k) != b.get(*k))
            .map(String::as_str)
            .collect();
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("config does not match the checkpoint in: {}", diff.join(", "))))
        }
    }
}

fn to_map<T: Serialize>(v: &T) -> Result<Map<String, Value>> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config("expected a JSON object".into())),
        Err(e) => Err(Error::Config(e.to_string())),
    }
}

/// Parses a JSON object whose optional `"preset"` key selects the base values
/// that the remaining keys override.
pub fn with_preset<T>(text: &str, preset: fn(&str) -> Result<T>) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut user = match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(Error::Config("configuration must be a JSON object".into())),
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let base = match user.remove("preset") {
        None => T::default(),
        Some(Value::String(name)) => preset(&name)?,
        Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
    };
    let mut merged = to_map(&base)?;
    merged.extend(user);
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))
}
