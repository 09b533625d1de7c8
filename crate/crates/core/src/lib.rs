//! Ontic-state dynamics on the Schmidt frames of a bipartite pure state.
//!
//! A subsystem A occupies one eigenvector of its reduced density matrix at a
//! time. The eigenvalues move under unitary evolution of the joint state, and
//! the occupied label hops between eigenvectors with one-step conditional
//! probabilities built from the interaction Hamiltonian.
//!
//! [`hilbert`], [`schmidt`] and [`ontic`] are generic over the real scalar
//! ([`Real`], implemented for `f32` and `f64`); the aliases below fix the
//! precision. Scenario construction, ensembles and reports work in `f64`.

pub mod assignment;
pub mod ensemble;
pub mod error;
pub mod hilbert;
pub mod ontic;
pub mod rng;
pub mod scalar;
pub mod scenarios;
pub mod schmidt;

pub use error::{Error, Result};
pub use scalar::Real;

pub type StateVector = hilbert::StateVector<f64>;
pub type JointState = hilbert::JointState<f64>;
pub type HermitianOperator = hilbert::HermitianOperator<f64>;
pub type DensityMatrix = hilbert::DensityMatrix<f64>;
pub type Propagator = hilbert::Propagator<f64>;
pub type SchmidtFrame = schmidt::SchmidtFrame<f64>;
pub type TransitionMatrix = ontic::TransitionMatrix<f64>;

pub type StateVector32 = hilbert::StateVector<f32>;
pub type JointState32 = hilbert::JointState<f32>;
pub type HermitianOperator32 = hilbert::HermitianOperator<f32>;
pub type DensityMatrix32 = hilbert::DensityMatrix<f32>;
pub type Propagator32 = hilbert::Propagator<f32>;
pub type SchmidtFrame32 = schmidt::SchmidtFrame<f32>;
pub type TransitionMatrix32 = ontic::TransitionMatrix<f32>;
