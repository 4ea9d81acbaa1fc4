//! Certified robustness and parameter sensitivity of ReLU networks through
//! sparse local Lipschitz bounds.
//!
//! Input certificates ([`certify`]) exploit neurons that provably stay
//! inactive under a perturbation budget; the parameter side ([`param`])
//! bounds how far weights can move before predictions degrade. Both sides
//! rest on the linear algebra in [`linalg`] and the reduced babel function in
//! [`babel`].

pub mod attack;
pub mod babel;
pub mod certify;
pub mod data;
pub mod error;
pub mod linalg;
pub mod network;
pub mod param;
pub mod registry;
pub mod train;

pub use error::{Error, Result};
