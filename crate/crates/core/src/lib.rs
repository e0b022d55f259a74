//! Numeric core for tri-modal object re-identification.
//!
//! Everything here is allocation-only `no_std` code: a reverse-mode tape over
//! dense `f64` tensors, Adam, a central-difference gradient oracle, and the
//! three alignment/selection stages built on top of them:
//!
//! * [`sim`] scores patch tokens within and across modalities, keeps the top-k,
//!   and fuses class tokens with the survivors through multi-head cross-attention.
//! * [`gam`] aligns pooled modality embeddings by shrinking the volume spanned
//!   by the three unit vectors (square root of the Gram determinant).
//! * [`lam`] predicts per-modality sampling offsets, resamples patch features
//!   bilinearly, and aligns them with a cross-modal MSE.
//!
//! [`losses`] holds the identity losses and the total objective, and [`eval`]
//! computes mAP/CMC retrieval metrics.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod error;
pub mod eval;
pub mod gam;
pub mod gradcheck;
pub mod gradsuite;
pub mod lam;
pub mod losses;
pub mod modality;
pub mod params;
pub mod select;
pub mod sim;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Error, Result};
pub use gradcheck::finite_diff_check;
pub use modality::Modality;
pub use params::{Bound, Init, ParamSpec, ParamStore};
pub use select::top_k_indices;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
