//! Channel estimation workbench for beyond-diagonal RIS aided multi-user MIMO.
//!
//! The crate simulates a group-connected reciprocal BD-RIS uplink: synthetic
//! correlated channels, the two-phase pilot protocol, classical LS/LMMSE
//! estimators over the reduced-coefficient cascaded channel, and a jointly
//! trained pipeline that learns the training scattering matrix (through a
//! susceptance parameterization) together with a dual-attention channel
//! estimator on a built-in reverse-mode autodiff engine.

pub mod autodiff;
pub mod cx;
pub mod rng;
pub mod suites;
pub mod sweep;
pub mod tensor;
pub mod train;

pub mod channel;
pub mod config;
pub mod estimators;
pub mod io;
pub mod models;
pub mod physics;
pub mod protocol;
