//! Desk-scale pipeline for culture-conditioned humorous captioning.
//!
//! The crate trains a small conditional token policy in three stages
//! (supervised fine-tuning on the high-resource culture, judge-ranked
//! group-relative policy optimization with a degradation-prototype
//! repulsion penalty, then low-resource adaptation with replay) and
//! evaluates it with a six-dimension rubric scorer, a hybrid
//! human/judge aggregation protocol, and a judge-reliability check.
//!
//! Everything is seeded and single-process: identical inputs and seeds
//! produce byte-identical corpora, transcripts, checkpoints, and reports.

pub mod corpus;
pub mod eval;
pub mod judge;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod trainer;
pub mod vocab;
