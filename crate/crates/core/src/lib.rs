//! Densely connected search spaces for differentiable architecture search.
//!
//! The crate models a super network of routing blocks whose candidate
//! operations and inter-block connections are relaxed into softmax
//! distributions. On top of that it provides:
//!
//! - [`space`]: construction and validation of the super network graph,
//! - [`params`]: the relaxation parameters, path probabilities and the
//!   dropping-path sampler with its re-balancing bias,
//! - [`cost`]: FLOPs/parameter accounting, lookup tables and the chained
//!   (recursive) expected-cost estimator with analytic gradients,
//! - [`search`]: the two-stage alternating search loop and a random-search
//!   baseline, driven by a pluggable [`search::Evaluator`],
//! - [`derive`]: Viterbi path extraction and argmax operation selection,
//! - [`experiments`]: the estimator correlation study and report plumbing
//!   used by the `densespace` binary.
//!
//! FLOPs are counted as multiply-accumulates throughout.

pub mod cli;
pub mod cost;
pub mod derive;
pub mod error;
pub mod experiments;
pub mod params;
pub mod reference;
pub mod search;
pub mod space;
pub mod util;

pub use crate::cost::{CostBreakdown, CostOp, CostTable, CostUnit, OpSignature};
pub use crate::derive::{derive, DerivedArchitecture};
pub use crate::error::{Error, Result};
pub use crate::params::{ArchParams, PathDistribution};
pub use crate::search::{search, Evaluator, SearchConfig, SearchTrace, SyntheticEvaluator};
pub use crate::space::{build_super_network, OperationKind, SpaceConfig, SuperNetworkSpec};
