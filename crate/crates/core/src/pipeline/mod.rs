//! Configuration, the Stage-1 objective, the two-stage run, evaluation and
//! the self-check suite.

pub mod checkpoint;
pub mod config;
pub mod objective;
pub mod run;
pub mod selfcheck;
