//! Tri-modal synthetic data with background clutter and cross-modal shift.
//!
//! Every identity owns one latent vector per foreground position. A sample
//! places those latents in a contiguous run of patches (raster order), pushes
//! them through a per-modality mixing map, fills the rest with noise and then
//! rolls each modality by its own shift on the torus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use signal_core::{Modality, Tensor};

use crate::error::{Error, Result};
use crate::sgt1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_ids: usize,
    /// Training samples per identity.
    pub samples_per_id: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    /// `(H_p, W_p)`
    pub grid: [usize; 2],
    pub d_raw: usize,
    /// Foreground fraction rho.
    pub fg_fraction: f64,
    pub sigma_bg: f64,
    /// Additive noise on foreground patches.
    pub fg_noise: f64,
    /// Latent coordinates that carry identity; the remaining `d_raw - id_dims`
    /// are redrawn per sample.
    pub id_dims: usize,
    pub nuisance_scale: f64,
    /// Random start of the foreground run per sample; centred when false.
    pub block_jitter: bool,
    /// `(rows, cols)` shift per modality in `(R, N, T)` order.
    pub shifts: [[i64; 2]; 3],
    /// Explicit `d_raw x d_raw` mixing maps; drawn from the seed when absent.
    pub mixing: Option<[Vec<Vec<f64>>; 3]>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::easy()
    }
}

impl SynthConfig {
    /// Light clutter and one-cell shifts. The per-sample nuisance is strong
    /// enough that random features do not already separate identities.
    pub fn easy() -> Self {
        Self {
            num_ids: 10,
            samples_per_id: 8,
            query_per_id: 2,
            gallery_per_id: 4,
            grid: [8, 4],
            d_raw: 16,
            fg_fraction: 0.5,
            sigma_bg: 0.2,
            fg_noise: 0.05,
            id_dims: 8,
            nuisance_scale: 1.15,
            block_jitter: true,
            shifts: [[0, 0], [1, 0], [0, 1]],
            mixing: None,
            seed: 0,
        }
    }

    /// Heavy clutter and two-cell shifts.
    pub fn hard() -> Self {
        Self {
            sigma_bg: 1.0,
            fg_noise: 0.1,
            shifts: [[0, 0], [2, 0], [0, 2]],
            ..Self::easy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "easy" => Ok(Self::easy()),
            "hard" => Ok(Self::hard()),
            other => Err(Error::Config(format!("unknown data preset {other:?} (expected easy or hard)"))),
        }
    }

    /// Parses JSON text; an optional `"preset"` key picks the base values.
    pub fn from_json(text: &str) -> Result<Self> {
        crate::config::with_preset(text, Self::preset)
    }

    pub fn len(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fg_count(&self) -> usize {
        (self.fg_fraction * self.len() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(Error::Core(signal_core::Error::Argument(m)));
        if self.num_ids < 2 {
            return arg(format!("num_ids = {} must be at least 2", self.num_ids));
        }
        if self.grid[0] == 0 || self.grid[1] == 0 || self.d_raw == 0 {
            return arg(format!("grid {:?} and d_raw {} must be positive", self.grid, self.d_raw));
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction <= 1.0) || self.fg_count() == 0 {
            return arg(format!(
                "foreground fraction {} leaves no foreground patch on a {}x{} grid",
                self.fg_fraction, self.grid[0], self.grid[1]
            ));
        }
        if self.id_dims == 0 || self.id_dims > self.d_raw {
            return arg(format!("id_dims {} must lie in 1..={}", self.id_dims, self.d_raw));
        }
        if self.sigma_bg < 0.0 || self.fg_noise < 0.0 || self.nuisance_scale < 0.0 {
            return arg("noise scales must be non-negative".into());
        }
        if let Some(maps) = &self.mixing {
            for m in maps {
                if m.len() != self.d_raw || m.iter().any(|r| r.len() != self.d_raw) {
                    return arg(format!("mixing maps must be {0}x{0}", self.d_raw));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub split: Split,
    /// `[H_p x W_p x D_raw]` per modality, `(R, N, T)`.
    pub modalities: [Tensor; 3],
    /// Unshifted foreground mask, `[L]`.
    pub mask: Tensor,
    /// Applied `(rows, cols)` roll per modality.
    pub shifts: [[i64; 2]; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub grid: [usize; 2],
    pub d_raw: usize,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Patches per image, `L`.
    pub fn patch_count(&self) -> usize {
        self.grid[0] * self.grid[1]
    }
}

// Independent streams so that, e.g., background draws never depend on identity draws.
const STREAM_MIXING: u64 = 1;
const STREAM_IDENTITY: u64 = 2;
const STREAM_NUISANCE: u64 = 3;
const STREAM_BACKGROUND: u64 = 4;
const STREAM_PLACEMENT: u64 = 5;
const STREAM_FG_NOISE: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Rounds through f32 so that SGT1 storage is exact.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// Rolls an `[H x W x D]` map so that cell `(r, c)` moves to `(r + dr, c + dc)` mod the grid.
pub fn roll(map: &Tensor, shift: [i64; 2]) -> Result<Tensor> {
    let &[h, w, d] = map.shape() else {
        return Err(Error::Core(signal_core::Error::Argument(format!(
            "roll expects a rank-3 map, got {:?}",
            map.shape()
        ))));
    };
    let mut out = vec![0.0; map.len()];
    for r in 0..h {
        for c in 0..w {
            let rr = (r as i64 + shift[0]).rem_euclid(h as i64) as usize;
            let cc = (c as i64 + shift[1]).rem_euclid(w as i64) as usize;
            out[(rr * w + cc) * d..(rr * w + cc + 1) * d].copy_from_slice(&map.data()[(r * w + c) * d..(r * w + c + 1) * d]);
        }
    }
    Ok(Tensor::new(map.shape(), out)?)
}

/// The three mixing maps in use, drawn as `N(0, 1/d_raw)` when not configured.
pub fn mixing_maps(cfg: &SynthConfig) -> [Vec<Vec<f64>>; 3] {
    if let Some(m) = &cfg.mixing {
        return m.clone();
    }
    let mut rng = stream(cfg.seed, STREAM_MIXING);
    let s = 1.0 / (cfg.d_raw as f64).sqrt();
    std::array::from_fn(|_| {
        (0..cfg.d_raw)
            .map(|_| (0..cfg.d_raw).map(|_| s * normal(&mut rng)).collect())
            .collect()
    })
}

/// Builds the train, query and gallery splits. Record order: identity, then
/// train, query and gallery samples of that identity.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let [h, w] = cfg.grid;
    let (l, d, n_fg) = (cfg.len(), cfg.d_raw, cfg.fg_count());
    let maps = mixing_maps(cfg);
    let mut id_rng = stream(cfg.seed, STREAM_IDENTITY);
    let mut nuisance_rng = stream(cfg.seed, STREAM_NUISANCE);
    let mut bg_rng = stream(cfg.seed, STREAM_BACKGROUND);
    let mut place_rng = stream(cfg.seed, STREAM_PLACEMENT);
    let mut noise_rng = stream(cfg.seed, STREAM_FG_NOISE);

    let splits = [
        (Split::Train, cfg.samples_per_id),
        (Split::Query, cfg.query_per_id),
        (Split::Gallery, cfg.gallery_per_id),
    ];
    let mut records = Vec::new();
    for id in 0..cfg.num_ids {
        let identity: Vec<Vec<f64>> = (0..n_fg)
            .map(|_| (0..cfg.id_dims).map(|_| normal(&mut id_rng)).collect())
            .collect();
        for &(split, count) in &splits {
            for _ in 0..count {
                let start = if cfg.block_jitter {
                    place_rng.random_range(0..=l - n_fg)
                } else {
                    (l - n_fg) / 2
                };
                let latents: Vec<Vec<f64>> = identity
                    .iter()
                    .map(|z| {
                        let mut v = z.clone();
                        v.extend((cfg.id_dims..d).map(|_| cfg.nuisance_scale * normal(&mut nuisance_rng)));
                        v
                    })
                    .collect();
                let mut mask = vec![0.0; l];
                mask[start..start + n_fg].iter_mut().for_each(|m| *m = 1.0);
                let mut modalities = Vec::with_capacity(3);
                for (mi, map) in maps.iter().enumerate() {
                    let mut base = Vec::with_capacity(l * d);
                    for q in 0..l {
                        if mask[q] == 1.0 {
                            let z = &latents[q - start];
                            for row in map {
                                let v: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                                base.push(f32_exact(v + cfg.fg_noise * normal(&mut noise_rng)));
                            }
                        } else {
                            base.extend((0..d).map(|_| f32_exact(cfg.sigma_bg * normal(&mut bg_rng))));
                        }
                    }
                    let base = Tensor::new(&[h, w, d], base)?;
                    modalities.push(roll(&base, cfg.shifts[mi])?);
                }
                records.push(SampleRecord {
                    id,
                    split,
                    modalities: modalities.try_into().expect("three modalities"),
                    mask: Tensor::new(&[l], mask)?,
                    shifts: cfg.shifts,
                });
            }
        }
    }
    Ok(Dataset {
        grid: cfg.grid,
        d_raw: d,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub grid: [usize; 2],
    pub d_raw: usize,
    pub samples: Vec<ManifestSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: usize,
    pub split: Split,
    /// Paths relative to the manifest, keyed by modality name.
    pub paths: BTreeMap<String, String>,
    pub shift: BTreeMap<String, [i64; 2]>,
    pub mask: String,
}

pub const MANIFEST: &str = "manifest.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes one SGT1 file per tensor plus `manifest.json`; returns the manifest path.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    create_dir(&dir.join("tensors"))?;
    let mut samples = Vec::with_capacity(data.records.len());
    for (i, rec) in data.records.iter().enumerate() {
        let mut paths = BTreeMap::new();
        let mut shift = BTreeMap::new();
        for m in Modality::ALL {
            let rel = format!("tensors/{i:05}_{}.sgt", m.as_str());
            sgt1::write(&dir.join(&rel), &rec.modalities[m.index()])?;
            paths.insert(m.as_str().to_string(), rel);
            shift.insert(m.as_str().to_string(), rec.shifts[m.index()]);
        }
        let mask = format!("tensors/{i:05}_mask.sgt");
        sgt1::write(&dir.join(&mask), &rec.mask)?;
        samples.push(ManifestSample {
            id: rec.id,
            split: rec.split,
            paths,
            shift,
            mask,
        });
    }
    let manifest = Manifest {
        grid: data.grid,
        d_raw: data.d_raw,
        samples,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a dataset from a manifest file or the directory holding one.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    let [h, w] = manifest.grid;
    let d = manifest.d_raw;
    let mut records = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let mut modalities = Vec::with_capacity(3);
        let mut shifts = [[0; 2]; 3];
        for m in Modality::ALL {
            let rel = s.paths.get(m.as_str()).ok_or_else(|| {
                Error::Config(format!("{}: sample {} has no {m} path", manifest_path.display(), s.id))
            })?;
            let file = root.join(rel);
            let t = sgt1::read(&file)?;
            if t.shape() != [h, w, d] {
                return Err(Error::format(&file, 5, format!("shape {:?}, manifest expects {:?}", t.shape(), [h, w, d])));
            }
            modalities.push(t);
            shifts[m.index()] = s.shift.get(m.as_str()).copied().unwrap_or([0, 0]);
        }
        let mask_file = root.join(&s.mask);
        let mask = sgt1::read(&mask_file)?;
        if mask.shape() != [h * w] {
            return Err(Error::format(&mask_file, 5, format!("mask shape {:?}, expected [{}]", mask.shape(), h * w)));
        }
        records.push(SampleRecord {
            id: s.id,
            split: s.split,
            modalities: modalities.try_into().expect("three modalities"),
            mask,
            shifts,
        });
    }
    Ok(Dataset {
        grid: manifest.grid,
        d_raw: d,
        records,
    })
}
