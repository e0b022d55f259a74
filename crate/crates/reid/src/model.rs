//! Model assembly: toy encoders, selective interaction, gram alignment,
//! offset alignment and the identity head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use signal_core::gam::{self, VolumeMode};
use signal_core::lam::{self, OffsetNetParams, ReferenceGrid};
use signal_core::losses::{self, LossComponents, LossReport};
use signal_core::sim::{self, InteractionParams, ModalityFeatures, SimConfig};
use signal_core::{Bound, Init, Modality, ParamSpec, ParamStore, Tape, Tensor, Var};

use crate::config::{EvalFeature, PoolSource, RunConfig};
use crate::error::{Error, Result};
use crate::synth::SampleRecord;

/// RNG stream that draws initial weights; the sampler uses stream 0.
pub const INIT_STREAM: u64 = 1;

pub const ENCODER_PREFIX: &str = "enc.";

/// Bound weights of one modality's toy encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    /// `[D_raw x D]`
    pub proj: Var,
    pub proj_bias: Var,
    /// Learnable class-token seed, `[D]`.
    pub cls: Var,
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub out: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl EncoderParams {
    pub fn prefix(m: Modality) -> String {
        format!("enc.{m}")
    }

    pub fn specs(m: Modality, d_raw: usize, d: usize) -> Vec<ParamSpec> {
        let p = Self::prefix(m);
        let s = 1.0 / (d as f64).sqrt();
        let mut out = vec![
            ParamSpec::new(format!("{p}.proj"), &[d_raw, d], Init::Normal(1.0 / (d_raw as f64).sqrt())),
            ParamSpec::new(format!("{p}.proj_bias"), &[d], Init::Zeros),
            ParamSpec::new(format!("{p}.cls"), &[d], Init::Normal(1.0)),
            ParamSpec::new(format!("{p}.ln.gain"), &[d], Init::Ones),
            ParamSpec::new(format!("{p}.ln.bias"), &[d], Init::Zeros),
        ];
        for part in ["query", "key", "value", "out"] {
            out.push(ParamSpec::new(format!("{p}.pool.{part}"), &[d, d], Init::Normal(s)));
        }
        out
    }

    pub fn bind(bound: &Bound, m: Modality) -> Result<Self> {
        let p = Self::prefix(m);
        let g = |name: &str| bound.get(&format!("{p}.{name}"));
        Ok(Self {
            proj: g("proj")?,
            proj_bias: g("proj_bias")?,
            cls: g("cls")?,
            query: g("pool.query")?,
            key: g("pool.key")?,
            value: g("pool.value")?,
            out: g("pool.out")?,
            ln_gain: g("ln.gain")?,
            ln_bias: g("ln.bias")?,
        })
    }
}

/// Projects `[L x D_raw]` raw tokens to patch tokens and pools a class token:
/// `cls = LN(seed + softmax(seed Wq (P Wk)^T / sqrt(D)) P Wv Wo)`.
pub fn encode_modality(tape: &mut Tape, raw: Var, modality: Modality, grid: (usize, usize), p: &EncoderParams) -> Result<ModalityFeatures> {
    let (_, d_raw) = tape.value(raw).dims2()?;
    let (rows, d) = tape.value(p.proj).dims2()?;
    if rows != d_raw {
        return Err(Error::Core(signal_core::Error::Argument(format!(
            "encoder for {modality} expects D_raw = {rows}, got {d_raw}"
        ))));
    }
    let patches = tape.matmul(raw, p.proj)?;
    let patches = tape.add_row(patches, p.proj_bias)?;
    let seed = tape.reshape(p.cls, &[1, d])?;
    let q = tape.matmul(seed, p.query)?;
    let k = tape.matmul(patches, p.key)?;
    let v = tape.matmul(patches, p.value)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_lastdim(logits);
    let pooled = tape.matmul(attn, v)?;
    let pooled = tape.matmul(pooled, p.out)?;
    let res = tape.add(seed, pooled)?;
    let cls = tape.layer_norm(res, p.ln_gain, p.ln_bias)?;
    let cls = tape.reshape(cls, &[d])?;
    Ok(ModalityFeatures::new(tape, modality, cls, patches, grid)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    /// `(H_p, W_p)`
    pub grid: [usize; 2],
    pub d_raw: usize,
    pub num_classes: usize,
    pub params: ParamStore,
}

/// Everything one batch forward produces.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B x 3D]`
    pub features: Var,
    /// `[B x 3D]`, the concatenated class tokens.
    pub cls: Var,
    pub total: Var,
    pub report: LossReport,
}

impl Model {
    pub fn specs(cfg: &RunConfig, d_raw: usize, num_classes: usize) -> Result<Vec<ParamSpec>> {
        let d = cfg.d;
        let mut specs = Vec::new();
        for m in Modality::ALL {
            specs.extend(EncoderParams::specs(m, d_raw, d));
        }
        if cfg.use_sim {
            specs.extend(InteractionParams::specs("sim", d, cfg.heads)?);
        }
        if cfg.use_gam {
            specs.push(ParamSpec::new("gam.log_tau", &[1], Init::Zeros));
        }
        if cfg.use_lam {
            if cfg.offset_sharing {
                specs.extend(OffsetNetParams::specs("lam.shared", d));
            } else {
                for m in Modality::ALL {
                    specs.extend(OffsetNetParams::specs(&lam::offset_prefix("lam", m, false), d));
                }
            }
        }
        specs.push(ParamSpec::new(
            "head.classifier",
            &[3 * d, num_classes],
            Init::Normal(1.0 / ((3 * d) as f64).sqrt()),
        ));
        Ok(specs)
    }

    /// Fresh weights drawn from the config seed.
    pub fn init(cfg: &RunConfig, grid: [usize; 2], d_raw: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!("training needs at least two identities, found {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let specs = Self::specs(cfg, d_raw, num_classes)?;
        let mut params = ParamStore::from_specs(&specs, || rng.sample(StandardNormal))?;
        if cfg.use_gam {
            if let Some(t) = params.get_mut("gam.log_tau") {
                *t = gam::log_tau_tensor(cfg.gam_tau_init);
            }
        }
        let model = Self {
            config: cfg.clone(),
            grid,
            d_raw,
            num_classes,
            params,
        };
        model.check_geometry()?;
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn grid_pair(&self) -> (usize, usize) {
        (self.grid[0], self.grid[1])
    }

    /// Fails early on settings that only the data shape can rule out.
    pub fn check_geometry(&self) -> Result<()> {
        let l = self.len();
        let cfg = &self.config;
        if cfg.use_sim && (cfg.k1_for(l) > l || cfg.k2_for(l) > l) {
            return Err(Error::Config(format!("k1 and k2 must not exceed L = {l}")));
        }
        if cfg.use_lam {
            lam::make_reference_grid(self.grid[0], self.grid[1], cfg.lam_r)?;
        }
        Ok(())
    }

    fn sim_config(&self) -> SimConfig {
        let l = self.len();
        SimConfig {
            k1: self.config.k1_for(l),
            k2: self.config.k2_for(l),
            mask_mode: self.config.mask_mode(),
            drop_mode: self.config.drop_mode(),
            heads: self.config.heads,
        }
    }

    fn reference(&self) -> Result<(ReferenceGrid, f64)> {
        let grid = lam::make_reference_grid(self.grid[0], self.grid[1], self.config.lam_r)?;
        let (hg, wg) = grid.dims;
        let delta = self.config.lam_delta_max.unwrap_or_else(|| lam::default_delta_max(hg, wg));
        Ok((grid, delta))
    }

    fn raw_tokens(&self, tape: &mut Tape, rec: &SampleRecord, m: Modality) -> Result<Var> {
        let t = &rec.modalities[m.index()];
        if t.shape() != [self.grid[0], self.grid[1], self.d_raw] {
            return Err(Error::Core(signal_core::Error::Argument(format!(
                "sample of identity {} has shape {:?}, model expects {:?}",
                rec.id,
                t.shape(),
                [self.grid[0], self.grid[1], self.d_raw]
            ))));
        }
        Ok(tape.constant(t.reshape(&[self.len(), self.d_raw])?))
    }

    fn encode(&self, tape: &mut Tape, bound: &Bound, rec: &SampleRecord) -> Result<[ModalityFeatures; 3]> {
        let mut out = Vec::with_capacity(3);
        for m in Modality::ALL {
            let raw = self.raw_tokens(tape, rec, m)?;
            let p = EncoderParams::bind(bound, m)?;
            out.push(encode_modality(tape, raw, m, self.grid_pair(), &p)?);
        }
        Ok(out.try_into().expect("three modalities"))
    }

    fn concat_cls(tape: &mut Tape, feats: &[ModalityFeatures; 3]) -> Result<Var> {
        let d = tape.value(feats[0].cls).len();
        let rows = feats
            .iter()
            .map(|f| tape.reshape(f.cls, &[1, d]))
            .collect::<signal_core::Result<Vec<_>>>()?;
        let cat = tape.concat_cols(&rows)?;
        Ok(tape.reshape(cat, &[3 * d])?)
    }

    /// `f_rnt` (or the class-token concatenation without SIM) and the patch sets
    /// GAM pools from.
    fn fuse(&self, tape: &mut Tape, feats: &[ModalityFeatures; 3], sim_params: Option<&InteractionParams>) -> Result<(Var, [Var; 3])> {
        let original = [feats[0].patches, feats[1].patches, feats[2].patches];
        match sim_params {
            Some(p) => {
                let sel = sim::select_tokens(tape, feats, p, &self.sim_config())?;
                let f = sim::modal_interaction(tape, feats, &sel.selected, p)?;
                let pool = match self.config.gam_pool_source {
                    PoolSource::Original => original,
                    PoolSource::Selected => sel.selected,
                };
                Ok((f, pool))
            }
            None => Ok((Self::concat_cls(tape, feats)?, original)),
        }
    }

    /// Batch forward with every loss term; `labels` are class indices.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &[&SampleRecord], labels: &[usize]) -> Result<Forward> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::Core(signal_core::Error::Argument(format!(
                "batch of {} samples with {} labels",
                batch.len(),
                labels.len()
            ))));
        }
        let cfg = &self.config;
        let sim_params = if cfg.use_sim {
            Some(InteractionParams::bind(bound, "sim", cfg.heads)?)
        } else {
            None
        };
        let lam_setup = if cfg.use_lam {
            let (grid, delta) = self.reference()?;
            let nets = Modality::ALL
                .iter()
                .map(|&m| OffsetNetParams::bind(bound, &lam::offset_prefix("lam", m, cfg.offset_sharing), delta))
                .collect::<signal_core::Result<Vec<_>>>()?;
            Some((grid, nets))
        } else {
            None
        };

        let mut features = Vec::with_capacity(batch.len());
        let mut cls = Vec::with_capacity(batch.len());
        let mut gam_batch = Vec::with_capacity(batch.len());
        let mut lam_terms = Vec::with_capacity(batch.len());
        for rec in batch {
            let feats = self.encode(tape, bound, rec)?;
            let (f, pool) = self.fuse(tape, &feats, sim_params.as_ref())?;
            features.push(f);
            cls.push(Self::concat_cls(tape, &feats)?);
            if cfg.use_gam {
                let mut v = [f; 3];
                for (slot, &p) in v.iter_mut().zip(&pool) {
                    *slot = gam::pool_normalize(tape, p)?;
                }
                gam_batch.push(v);
            }
            if let Some((grid, nets)) = &lam_setup {
                let mut sampled = [f; 3];
                for m in Modality::ALL {
                    let ff = &feats[m.index()];
                    let field = lam::predict_offsets(tape, m, ff.patches, ff.grid, cfg.lam_r, &nets[m.index()])?;
                    sampled[m.index()] = lam::deform_sample(tape, ff.patches, ff.grid, grid, field.deltas)?;
                }
                lam_terms.push(lam::local_align_loss(tape, sampled, cfg.lam_pairs())?);
            }
        }
        let features = tape.stack(&features)?;
        let cls = tape.stack(&cls)?;
        let head = bound.get("head.classifier")?;
        let logits = tape.matmul(features, head)?;
        let ce = losses::label_smooth_ce(tape, logits, labels, cfg.ce_epsilon)?;
        let triplet = losses::batch_hard_triplet(tape, features, labels, cfg.tri_margin)?;
        let (d2a, a2d) = if cfg.use_gam {
            let log_tau = bound.get("gam.log_tau")?;
            let terms = gam::gram_contrastive_loss(tape, &gam_batch, cfg.anchor(), log_tau, VolumeMode::Training)?;
            (terms.d2a, terms.a2d)
        } else {
            (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
        };
        let mse = if lam_terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let stacked = tape.stack(&lam_terms)?;
            tape.mean(stacked)
        };
        let parts = LossComponents { ce, triplet, d2a, a2d, mse };
        let (total, report) = losses::total_loss(tape, &parts, cfg.alpha, cfg.beta)?;
        Ok(Forward {
            features,
            cls,
            total,
            report,
        })
    }

    /// Retrieval features, one row per record.
    pub fn embed(&self, records: &[&SampleRecord], feature: EvalFeature) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(records.len());
        let mut width = 0;
        for rec in records {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let sim_params = if self.config.use_sim {
                Some(InteractionParams::bind(&bound, "sim", self.config.heads)?)
            } else {
                None
            };
            let feats = self.encode(&mut tape, &bound, rec)?;
            let (f, _) = self.fuse(&mut tape, &feats, sim_params.as_ref())?;
            let mut row = tape.data(f).to_vec();
            if feature == EvalFeature::FrntCls {
                let c = Self::concat_cls(&mut tape, &feats)?;
                row.extend_from_slice(tape.data(c));
            }
            width = row.len();
            rows.extend(row);
        }
        Ok(Tensor::new(&[records.len(), width.max(1)], rows)?)
    }
}
