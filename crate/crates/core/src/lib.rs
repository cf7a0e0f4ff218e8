//! Post-hoc ensembles from a single trained network: random low-rank hidden
//! layer perturbations repaired by closed-form ridge refits of the next layer,
//! together with the diagnostics and brute-force checks that go with them.

pub mod bench_data;
pub mod conv_pnc;
pub mod diagnostics;
pub mod ensemble_eval;
pub mod error;
pub mod net;
pub mod numerics;
pub mod pnc;
pub mod serial;
pub mod verify;

pub use error::{Error, Result};
