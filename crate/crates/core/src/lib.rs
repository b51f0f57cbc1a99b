//! Confidence-based online pseudo-label adaptation of slice-level CT
//! classifiers under domain shift.
//!
//! The pipeline selects large-lung slices, pretrains a small CNN on a
//! horizontal-flip pretext task, transfers it into two slice models
//! (healthy/unhealthy and COVID/CAP), aggregates slice scores into a
//! patient verdict, and retrains from the pretext checkpoint as confident
//! pseudo-labeled test slices arrive in quarter batches.

pub mod imaging;
pub mod metrics;
pub mod nncore;
pub mod online;
pub mod pipeline;
pub mod synthgen;
