//! Sub-goal conditioned sequence-model imitation learning.
//!
//! A high-level transformer proposes sub-goal states mined from the
//! demonstrations, and a low-level transformer imitates the demonstrator's
//! actions conditioned on those sub-goals. Return-conditioned and
//! behavior-cloning baselines, three grid environments with scripted
//! demonstrators, and the evaluation harness live alongside.

pub mod checkpoint;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod policy;
pub mod report;
pub mod seed;
pub mod subgoal;
pub mod train;

pub use error::{Error, Result};
