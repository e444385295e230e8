use thiserror::Error;

use crate::Symbol;

/// Errors produced by model construction, constraint compilation and inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("maximum order must be at least 1")]
    ZeroOrder,

    #[error("no distribution available: the model has empty root support")]
    NoDistribution,

    #[error("row for context {context:?} is not normalized (sum = {sum})")]
    NotNormalized { context: Vec<Symbol>, sum: f64 },

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("empty forbidden pattern")]
    EmptyPattern,

    #[error("invalid acceptor: {0}")]
    InvalidAcceptor(String),

    #[error("infeasible constraint specification: {0}")]
    InfeasibleSpec(String),

    #[error("constraints are infeasible: Z = 0")]
    Infeasible,

    #[error("policy run failed at position {position}")]
    PolicyFailure { position: usize },

    #[error("start state {0:?} is not part of the graph or table")]
    UnknownStart(Vec<Symbol>),

    #[error("enumeration budget exceeded: {needed} > {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("invalid transform group: {0}")]
    InvalidGroup(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
