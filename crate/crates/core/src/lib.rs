//! Object localisation with dual quadrics from multi-view detections.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod scene;
pub mod solver;
