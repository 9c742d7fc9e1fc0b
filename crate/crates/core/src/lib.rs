//! Free-fermion circuits dual to the surface code under bit-flip and coherent
//! errors.
//!
//! The random-bond Ising transfer matrix is compiled into a circuit of
//! two-Majorana gates ([`circuit`]), evolved as a fermionic Gaussian state
//! ([`gaussian`]), analysed through its entanglement ([`entanglement`]) and,
//! read as a class-D scattering network, through its transport
//! ([`network`]). [`ensemble`] runs disorder ensembles and [`scaling`] fits
//! and collapses the resulting curves.

pub mod circuit;
pub mod disorder;
pub mod ensemble;
pub mod entanglement;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod network;
pub mod oracle;
pub mod pfaffian;
pub mod scaling;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
