//! Multi-State Tracker: a single-object visual tracker built on attention
//! backbone taps refined by adaptive state-space-duality blocks.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used for verification (`f64`) and for
//! compact storage (`f32`).

pub mod audit;
pub mod backbone;
pub mod boxes;
pub mod checks;
pub mod config;
pub mod counter;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grid;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod ssd;
pub mod tape;
pub mod tensor;

pub use boxes::BoxXYWH;
pub use config::TrackerConfig;
pub use counter::{Component, MacKind, OpCounter};
pub use error::{Error, Result};
pub use grid::Grid;
pub use model::Tracker;
pub use params::{Ctx, Mode, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tracker64 = Tracker<f64>;
pub type Tracker32 = Tracker<f32>;
pub type Box64 = BoxXYWH<f64>;
