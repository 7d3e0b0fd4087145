#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod annotate;
pub mod casebase;
pub mod corpus;
pub mod embeddings;
pub mod explain;
pub mod metrics;
pub mod ner;
pub mod outcome;
pub mod synth;
pub mod textprep;
