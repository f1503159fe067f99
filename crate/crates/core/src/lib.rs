//! Revenue-risk laboratory for auctions.
//!
//! Builds BIC payment rules for a fixed efficient allocation, checks their
//! revenue-equivalence and participation constraints numerically, and
//! measures the resulting revenue distribution.

pub mod asym_fixed_point;
pub mod cli;
pub mod distributions;
pub mod environment;
pub mod error;
pub mod expectation;
pub mod expost_qp;
pub mod multi_unit;
pub mod par;
pub mod payment_rules;
pub mod quadrature;
pub mod risk;

pub use distributions::{DistSpec, FamilyTag, ValueDistribution};
pub use environment::{AuctionEnvironment, EnvSpec, Outcome};
pub use error::{Error, Result};
pub use payment_rules::{PaymentRule, RuleFlags, RuleKind};
