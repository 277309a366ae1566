//! Non-parametric estimation for Markov multi-state models in which death
//! transitions are split into population and excess parts using external
//! mortality tables.

pub mod cli;
pub mod data;
pub mod hazards;
pub mod inference;
pub mod model;
pub mod probtrans;
pub mod ratetable;
pub mod simulate;

pub use data::{Demographics, EventDataset, Sex, Subject, Visit};
pub use model::{StateId, TransId, TransitionKind, TransitionModel};
pub use ratetable::RateTable;
