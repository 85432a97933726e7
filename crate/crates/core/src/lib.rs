//! A desk-scale interactive world model.
//!
//! A chunk-wise autoregressive flow-matching transformer generates a
//! procedurally built grid world one 4-frame chunk at a time. Navigation keys
//! and camera poses condition every chunk, a reconstituted context memory
//! recalls geometrically relevant past chunks with reframed positional
//! indices, and context-forcing distillation turns the causal model into a
//! 4-step sampler fit for streaming.

pub mod action;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod memory;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod world;

pub use world::DiscreteAction;
pub use memory::{ChunkRecord, ContextSet, MemoryBank};
pub use model::{Model, ModelConfig};
pub use params::ParamStore;
pub use tape::{AttnMask, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
pub use world::{CameraPose, Episode, GridWorld, Intrinsics, TrajectoryKind};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("attention row {0} has no allowed key")]
    MaskedRow(usize),
    #[error("rotary encoding needs an even head dim, got {0}")]
    OddPairDim(usize),
    #[error("loss is not connected to any trainable input")]
    Detached,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pose lies inside a wall at ({0:.3}, {1:.3})")]
    PoseInWall(f64, f64),
    #[error("singular camera intrinsics")]
    SingularIntrinsics,
    #[error("trajectory of length {0} cannot be built: {1}")]
    Trajectory(usize, String),
    #[error("empty denoise schedule")]
    EmptySchedule,
    #[error("invalid denoise schedule: {0}")]
    BadSchedule(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
