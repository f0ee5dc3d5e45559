//! Phylogenetic likelihood engine with linear-time branch-length gradients.
//!
//! The [`engine`] computes the log-likelihood of a site-pattern alignment on
//! a fixed rooted binary tree together with the gradient and Hessian
//! diagonal with respect to every branch length, in one post-order and one
//! pre-order traversal. The [`clock`] module maps a random-effects relaxed
//! clock onto branch lengths, and [`inference`] provides L-BFGS and
//! Hamiltonian Monte Carlo on top of it. [`validation`] holds the
//! brute-force and finite-difference oracles plus the scaling benchmark.

pub mod alignment;
pub mod clock;
pub mod engine;
pub mod error;
pub mod inference;
pub mod substitution;
pub mod tree;
pub mod validation;

pub use alignment::{compress_patterns, parse_fasta, parse_phylip, simulate_alignment, RawAlignment, SitePatternAlignment};
pub use engine::{Engine, GradientReport, Rescaling};
pub use error::{Error, Result};
pub use substitution::{matrix_exponential, RateCategories, SubstitutionModel};
pub use tree::{parse_newick, Tree};
