//! Synthetic tri-modal data, model assembly, training, checkpoints and
//! evaluation on top of `signal-core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod run;
pub mod sgt1;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use synth::{Dataset, SampleRecord, Split, SynthConfig};
