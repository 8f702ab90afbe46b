//! First-order factoid question answering over a knowledge base of binary facts.
//!
//! A question is tagged for its entity span, the span is linked to candidate
//! nodes through an inverted n-gram index, a classifier predicts the relation,
//! and the answer is read off the facts of the best-scoring candidate.

pub mod classifier;
pub mod entity_index;
pub mod eval;
pub mod kb;
pub mod nn;
pub mod pipeline;
pub mod reach_index;
pub mod synth;
pub mod tagger;
pub mod text;
