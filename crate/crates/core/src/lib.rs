//! Upper bounds on the probability that a stochastic linear system under a
//! ReLU network controller reaches an unsafe set within a finite horizon.
//!
//! The pipeline:
//!
//! 1. [`scenario`] holds the plant, controller, workspace and partition.
//! 2. [`graph`] abstracts the closed loop into a transition graph whose edge
//!    weights upper-bound one-step transition probabilities, found by
//!    bisection over satisfiability-modulo-convex queries ([`smc`]) that run on
//!    the simplex engine in [`lp`].
//! 3. [`safety`] propagates reach-unsafe bounds over the horizon, tightened by
//!    partition merging and transition-probability normalization.
//! 4. [`refine`] splits cells along witness-guided hyperplanes.
//! 5. [`mc`], [`render`] and [`report`] validate bounds against Monte-Carlo
//!    ground truth and produce the artifacts used by the command-line tool.

pub mod demo;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod lp;
pub mod mc;
pub mod refine;
pub mod render;
pub mod report;
pub mod safety;
pub mod scenario;
pub mod smc;

pub use error::{Error, Result};

// The guide under `book/` is compiled as doc-tests so its listings stay in
// sync with the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/chance_constraints.md")]
    mod chance_constraints {}
    #[doc = include_str!("../../../book/src/smc.md")]
    mod smc {}
    #[doc = include_str!("../../../book/src/transition_graph.md")]
    mod transition_graph {}
    #[doc = include_str!("../../../book/src/safety_bounds.md")]
    mod safety_bounds {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
}
