//! Unsupervised cross-modal hashing with coupled outer/inner cycle GANs.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndcore`]: dense matrices and a whole-matrix reverse-mode tape.
//! - [`networks`]: the nine fully-connected networks and their checkpoint format.
//! - [`losses`]: adversarial, cycle-reconstruction and similarity terms.
//! - [`trainer`]: four-phase alternating optimisation and code extraction.
//! - [`retrieval`]: packed codes, Hamming ranking, MAP / PR / Precision@N.
//! - [`data`]: feature/label files, synthetic paired data, query splits.
//! - [`gradcheck`]: finite-difference verification of every loss term.

mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod ndcore;
pub mod networks;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
