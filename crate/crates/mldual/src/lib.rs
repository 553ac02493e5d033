//! Critical points and maximum-likelihood duality on rank-constrained
//! matrix models.
//!
//! The crate solves the likelihood equations on three families of models —
//! rank-constrained matrices (`rect`), symmetric matrices (`sym`) and
//! alternating matrices (`skew`) — by numerical homotopy continuation, and
//! certifies the duality map that pairs the critical points on a model of
//! rank `r` with those of its dual model.
//!
//! Pipeline: [`models`] describes the varieties, [`critsys`] builds square
//! polynomial systems for their critical equations, [`tracker`] follows
//! solution paths, [`monodromy`] grows a complete solution set over generic
//! data, and [`duality`] maps and cross-checks solution sets pairwise.

pub mod critsys;
pub mod duality;
pub mod error;
pub mod jsonio;
pub mod models;
pub mod monodromy;
pub mod numkit;
pub mod tracker;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
