//! Excess-risk certificates for black-box predictors under Bregman losses,
//! built by refitting on sign-symmetrised residues.

pub mod bregman;
pub mod certify;
pub mod complexity;
pub mod design;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod trainer;
pub mod wildfit;

pub use bregman::{BregmanLoss, Domain, Potential, PotentialKind};
pub use design::{CompactSet, FixedDesignDataset, PredictionMatrix, SignMatrix};
pub use error::{Error, FitStage, Result};
pub use matrix::Matrix;
pub use trainer::{Trainer, TrainerSpec};
