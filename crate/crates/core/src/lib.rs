//! Reconstruction of multi-time quantum correlation functions and
//! Kirkwood–Dirac quasi-probability distributions from ancilla-assisted
//! sequential measurements.
//!
//! The crate is layered bottom-up:
//!
//! * [`qcore`] small dense complex linear algebra,
//! * [`qmodel`] states, observables, channels and named gates,
//! * [`povm`] ancilla measurement sets and the diagonal POVMs they induce,
//! * [`weights`] complex weights `γ` with `BρA = Σ γ_m M_m ρ M_m†`,
//!   including the minimax (`min ‖γ‖∞`) solver,
//! * [`protocol`] exact trajectory distributions, Monte Carlo sampling,
//!   the explicit system⊗ancilla circuit and readout noise,
//! * [`estimate`] exact oracles, ensemble estimators, marginals and the
//!   Leggett–Garg functional,
//! * [`scenario`] the two-qubit rotation experiment used for the reference
//!   reproduction (`ρ = |+⟩⟨+|`, `R_x(θ)` then `R_y(θ²)`).

pub mod error;
pub mod estimate;
pub mod povm;
pub mod protocol;
pub mod qcore;
pub mod qmodel;
pub mod scenario;
pub mod serde_complex;
pub mod weights;

pub use error::{Error, Result};
pub use qcore::{CMatrix, CVector, C64};
