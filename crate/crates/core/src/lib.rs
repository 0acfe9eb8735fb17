//! Exact optimal filtering for measure-valued signal processes.
//!
//! The library implements closed-form filters for hidden Markov models whose
//! latent state is a Fleming-Viot (FV) or Dawson-Watanabe (DW) measure-valued
//! diffusion. Posterior laws are finite mixtures of Dirichlet or gamma random
//! measures indexed by multiplicity vectors on a countable atom registry, so
//! the filter recursion stays exact: updates move the mixture up the lattice
//! of multiplicities, predictions redistribute mass down it through a pure
//! death process.
//!
//! Modules mirror that structure: [`lattice`] holds the combinatorics,
//! [`dual`] the death-process kernels, [`measures`] the mixture states,
//! [`fv`]/[`dw`] the measure-valued filters, [`parametric`] the projected
//! Wright-Fisher and CIR filters, [`sim`] exact simulators and Monte Carlo
//! oracles, and [`validate`] self-contained verification suites.

pub mod dd;
pub mod dual;
pub mod dw;
pub mod fv;
pub mod lattice;
pub mod measures;
pub mod oracle;
pub mod parametric;
pub mod sim;
pub mod validate;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A lattice enumeration would exceed the configured cardinality cap.
    #[error("support size {needed} exceeds cap {cap}")]
    SupportCap { needed: u128, cap: u64 },

    /// An atom index is not covered by the supplied partition.
    #[error("atom index {0} is not mapped by the partition")]
    UnmappedAtom(u32),

    /// The death-block coefficient lost all precision even on the extended path.
    #[error("unstable death coefficient at total={total} dead={dead} t={t}: {value}")]
    Instability {
        total: u64,
        dead: u64,
        t: f64,
        value: f64,
    },

    #[error("observation times must be strictly increasing: {next} after {prev}")]
    NonMonotoneTimes { prev: f64, next: f64 },

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidInput(msg.into())
    }
}
