//! Exact constrained sampling from variable-order context models.
//!
//! A corpus is counted into a suffix-closed [`CountTable`]; a [`ContextGraph`]
//! turns the table into a deterministic automaton over canonical contexts;
//! constraints compile to an [`Acceptor`] plus a [`PositionalMask`]; and
//! [`BackwardTable`] computes backward messages on their product so that
//! ancestral sampling draws from the exact conditional distribution.

pub mod augmentation;
pub mod constraints;
pub mod context;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod oracle;
pub mod orderstack;

/// Alphabet symbols are non-negative integers.
pub type Symbol = u32;

pub use constraints::{Acceptor, ConstraintSpec, Constraints, PositionalMask};
pub use context::{ContextGraph, SourcePolicy};
pub use corpus::{Corpus, CountSource, CountTable};
pub use error::{Error, Result};
pub use inference::{BackwardTable, ProductState};
