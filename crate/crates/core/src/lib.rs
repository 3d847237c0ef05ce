//! Stochastic functional-gradient path planning on continuous occupancy maps.
//!
//! Paths are represented as weighted sums of approximate-kernel features
//! ([`features`], [`path`]) and optimized by occupancy-gated stochastic gradient
//! descent ([`planner`]) against a Hilbert-map style logistic occupancy model
//! ([`occupancy`]). An RRT* baseline ([`rrt`]), laser-log ingestion and a synthetic
//! laser simulator ([`world`]), and an experiment harness ([`bench`]) complete the
//! toolkit.

pub mod bench;
pub mod error;
pub mod features;
pub mod objective;
pub mod occupancy;
pub mod path;
pub mod planner;
pub mod rrt;
pub mod world;

pub use error::{Error, Result};
