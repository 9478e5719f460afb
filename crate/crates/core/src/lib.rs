//! Self-supervised pre-training for heterogeneous graphs.
//!
//! Initial pseudo-labels come from classic label propagation over the whole
//! graph. An attention-based heterogeneous encoder is then trained to predict
//! them, while an attention-weighted label propagation that reuses the
//! encoder's relation attention refines the pseudo-labels every epoch.

pub mod attlpa;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod lpa;
pub mod optim;
pub mod par;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
