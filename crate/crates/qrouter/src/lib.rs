//! Pulse-level simulator of a four-transmon quantum router and the full
//! characterization toolchain around it: device fitting, sideband and
//! single-qubit gate calibration, subspace randomized benchmarking with
//! leakage analysis, state tomography with MLE and ZZ-corrected measurement
//! bases, routing-protocol benchmarking, and a small bucket-brigade QRAM.
//!
//! The physical model is a set of fixed-frequency transmons with all-to-all
//! capacitive couplings, driven through per-qubit charge lines. Simulations
//! run in the dressed eigenbasis of the static Hamiltonian; drives enter via
//! a per-channel rotating-wave approximation, and decoherence through a
//! Lindblad master equation built from measured coherence times.
//!
//! Frequencies are stored internally as angular values in rad/ns
//! (numerically `2π × f_GHz`); times are in ns. File formats use linear
//! GHz/MHz/µs as labeled.

pub mod calib;
pub mod device;
pub mod dynamics;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod protocol;
pub mod pulse;
pub mod qram;
pub mod rb;
pub mod readout;
pub mod rng;
pub mod robust;
pub mod tomo;

pub use error::{Error, Result};

/// Convert a linear frequency in GHz to angular rad/ns.
pub fn ghz(f: f64) -> f64 {
    2.0 * std::f64::consts::PI * f
}

/// Convert a linear frequency in MHz to angular rad/ns.
pub fn mhz(f: f64) -> f64 {
    2.0 * std::f64::consts::PI * f * 1e-3
}

/// Convert an angular rad/ns value back to linear GHz.
pub fn to_ghz(w: f64) -> f64 {
    w / (2.0 * std::f64::consts::PI)
}

/// Convert an angular rad/ns value back to linear MHz.
pub fn to_mhz(w: f64) -> f64 {
    w / (2.0 * std::f64::consts::PI) * 1e3
}
