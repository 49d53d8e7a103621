//! Classroom assignment from predicted friendship networks.
//!
//! The pipeline has three steps: learn an adjacency-probability matrix Ω
//! per classroom from predetermined features and aggregated friend reports
//! ([`peernn`]), estimate the friendship-weighted peer effect with an
//! instrumental-variable regression ([`peereffect`]), and search two-classroom
//! partitions of a school for a high and equitable mean peer effect
//! ([`assign`]). [`cohort`] holds the data model and a synthetic generator;
//! [`evalharness`] evaluates predicted networks and exports artifacts.

pub mod assign;
pub mod cohort;
pub mod error;
pub mod evalharness;
pub mod peereffect;
pub mod peernn;

pub use error::{Error, Result};
