//! Compress-to-Explore (C2E): a masked autoencoder whose encoder takes explicit
//! entropy-compression steps and whose decoder explores with Langevin updates
//! driven by a learned energy.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod info;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use config::{Arch, C2eConfig, ChannelSchedule, LossKind, Pooling};
pub use error::{C2eError, Result};
pub use gradcheck::grad_check;
pub use model::{C2eModel, LatentState};
pub use patch::{MaskPlan, PatchBatch};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;
