//! Homogeneous two-layer ReLU classifiers and the implicit-bias view of
//! training-data reconstruction.
//!
//! The crate covers training to near-KKT points ([`trainer`]), (ε, δ)-KKT
//! certification ([`kkt`]), the prior-free reconstruction attack
//! ([`attack`]), constructions of alternative KKT sets that the attack cannot
//! tell apart from the training set ([`forge`]), and the experiment harness
//! with its file formats ([`lab`], [`formats`]).

pub mod attack;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod forge;
pub mod formats;
pub mod kkt;
pub mod lab;
pub mod net;
pub mod nnls;
pub mod trainer;

pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use kkt::{KktCertificate, KktLossWeights, Multipliers};
pub use net::{ActivationPattern, NetworkParams, ParamVector};
