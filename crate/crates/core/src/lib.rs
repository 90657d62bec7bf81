//! Dual recurrent neural network: a gate-free recurrent layer that keeps a
//! short-term state in a singular-value-clipped fully recurrent sublayer and a
//! long-term state in an independently recurrent sublayer, joined by a
//! channel selection vector.
//!
//! The crate provides the forward pass ([`cell`]), hand-written truncated
//! backpropagation through time ([`grad`]), projected Adam ([`optim`]),
//! benchmark data ([`tasks`]) and independent gradient oracles ([`oracle`]).

pub mod cell;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod optim;
pub mod oracle;
pub mod tasks;

pub use cell::{
    ConstraintSpec, Head, Layer, LayerParams, LayerSpec, Network, ParamKind, Targets, Variant,
};
pub use error::{Error, Result};
pub use grad::{GradOptions, LayerGrads, NetworkGrads};
pub use linalg::{Mat, SeededRng};
