//! Neural architecture search with random-weight evaluation.
//!
//! Candidate CNNs are scored by freezing a randomly initialized backbone and
//! training only a linear classifier on its pooled features; NSGA-II then
//! trades that error estimate off against multiply-accumulate count.
//!
//! The crate is `no_std` with `alloc`. File formats, threads and the command
//! line live in the `rwenas` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bench;
pub mod data;
pub mod genome;
pub mod moea;
pub mod netgraph;
pub mod rwe;
pub mod tensor;
