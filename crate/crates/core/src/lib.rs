//! Detector tomography and photon-number state reconstruction for nonlinear
//! single-photon detectors.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`tomography`] fits a linear efficiency and five nonlinear click
//!    probabilities to the coherent-state response of every tuning setting and
//!    assembles a POVM ([`povm`]).
//! 2. [`reconstruction`] recovers the photon-number distribution of an unknown
//!    state from its click rates by expectation-maximization.
//! 3. [`fisher`] bounds the achievable reconstruction errors via the Fisher
//!    information and compares detectors.
//!
//! [`simulator`] provides a synthetic superconducting detector and noisy data
//! generation so every stage can be exercised without hardware; [`io`] holds
//! the file formats.

mod boxls;
pub mod error;
pub mod fisher;
pub mod io;
pub mod math;
pub mod povm;
pub mod reconstruction;
pub mod simulator;
pub mod states;
pub mod tomography;

pub use error::{Error, Result};
pub use povm::{DetectorSetting, NonlinearResponse, Povm, Tuning};
pub use states::{Family, FockDistribution};
pub use tomography::{CountRateSurface, TomographyFit};
