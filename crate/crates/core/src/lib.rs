mod binio;
pub mod concept_space;
pub mod config;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod synth_world;
pub mod trainer;

pub use error::{LssError, Result};
