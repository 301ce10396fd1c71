//! Round-trip fidelity harness for attention-prior transformers.
//!
//! The pipeline runs in five stages, each backed by a module here:
//!
//! 1. [`kg`] — generate a synthetic typed knowledge graph.
//! 2. [`cohort`] — sample visit records from the graph and turn code
//!    co-occurrence counts into per-visit attention priors.
//! 3. [`gct`] — train a graph convolution transformer whose first
//!    attention block is the fixed prior, under either a supervised
//!    loss with a KL regularizer or the regularizer alone.
//! 4. [`extract`] — walk trained attention matrices to recover
//!    (head, relation, tail) triples and assemble a recovered graph.
//! 5. [`eval`] — score the recovered graph against the source graph
//!    and compare training runs.
//!
//! [`numerics`] carries the shared dense-matrix type, the stable
//! softmax / KL / cross-entropy primitives, and a small reverse-mode
//! gradient tape that the trainer is built on.

pub mod cohort;
pub mod eval;
pub mod extract;
pub mod gct;
pub mod kg;
pub mod numerics;
pub mod seed;
