//! Simulation and inference for flavour entanglement in neutral-B pairs.
//!
//! The crate covers the full chain: asymmetry models ([`models`]), toy event
//! generation with detector effects ([`toygen`]), binned asymmetry estimation
//! ([`analysis`]), SVD unfolding ([`unfold`]), and constrained least-squares
//! fits ([`fitkit`]). [`study`] ties these together into pseudo-experiment
//! ensembles.

pub mod analysis;
pub mod error;
pub mod fitkit;
pub mod models;
pub mod quad;
pub mod reproduce;
pub mod rng;
pub mod study;
pub mod toygen;
pub mod unfold;

pub use error::{Error, Result};
pub use models::{AsymmetryBand, FlavourClass, Model, ModelParams};
