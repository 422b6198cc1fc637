//! Minimal reverse-mode differentiation over `(C, H, W)` feature maps.
//!
//! Networks here are small enough that every computation runs per image
//! in `f64`. A [`Tape`] records one forward pass; `backward` returns the
//! gradients of every node and every parameter. Batches are handled by
//! running one tape per image and summing [`ParamGrads`] in a fixed order,
//! which keeps training bitwise reproducible regardless of thread count.

pub mod arch;
pub mod checkpoint;
pub mod init;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use optim::{Adam, AdamConfig, PolyDecay, Sgd};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, NodeId, Tape};

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
