//! Preference optimization for a bilinear low-rank recommendation policy:
//! data construction, offline sample hardness, analytic losses with adaptive
//! per-sample temperatures and noise smoothing, training, and evaluation.

pub mod corpus;
pub mod embed_store;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod hardness;
pub mod io;
pub mod linalg;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use corpus::{InteractionSequence, PreferenceSample, SampleMode, SftSample, Split, SplitManifest};
pub use embed_store::{EmbeddingRecord, EmbeddingTable, Neighbor, NeighborSet};
pub use error::{Error, Result};
pub use hardness::HardnessStats;
pub use objective::{BatchSignals, LossValue, Responsiveness};
pub use optim::OptimizerState;
pub use policy::{AdapterState, NoiseMode};
pub use rng::SeedStream;
pub use trainer::{Checkpoint, TrainConfig, TrainState, Variant};
