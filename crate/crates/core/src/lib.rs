//! Storing many fine-tuned models as one base checkpoint plus a single
//! superposed delta.
//!
//! Each model's delta `Δ_i = Θ_i − Θ0` is passed through a seeded, mostly
//! orthogonal layer-wise transform `O_i` (block shuffles, column sign flips)
//! and summed into `λ Σ O_i Δ_i`. Retrieval applies `O_i⁻¹`, which restores
//! `Δ_i` and leaves the other deltas as decorrelated noise.
//!
//! ```no_run
//! use randes::superposition::{ModelInput, StoreConfig, SuperpositionStore};
//! use randes::transforms::TransformMode;
//! # fn main() -> randes::Result<()> {
//! let base = randes::checkpoint::read("base.rdck")?;
//! let models = ["math", "code"].map(|t| {
//!     ModelInput::full(t, randes::checkpoint::read(format!("{t}.rdck")).unwrap())
//! });
//! let store = SuperpositionStore::compress(base, models, StoreConfig::new(TransformMode::Srsf).lambda(0.6))?;
//! let math = store.retrieve("math")?;
//! # Ok(()) }
//! ```

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod harness;
pub mod rng;
pub mod schema;
pub mod superposition;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
