//! Retrieval-augmented co-training for multi-label prediction over coded
//! patient records.
//!
//! The pipeline has three stages:
//!
//! 1. [`corpus`] turns exported knowledge (free-text passages and
//!    knowledge-graph triplets) into one passage corpus.
//! 2. [`retrieval`] indexes the corpus and [`summarizer`] condenses the
//!    top-k passages for every medical code into a task-specific summary,
//!    cached on disk.
//! 3. [`cotrain`] trains a text model over code names plus summaries
//!    ([`augmented`]) jointly with a hypergraph transformer over
//!    code co-occurrence ([`hygt`]) and blends their predictions.
//!
//! Both models run on the small reverse-mode engine in [`tensor`].

pub mod augmented;
pub mod corpus;
pub mod cotrain;
pub mod ehr;
pub mod error;
pub mod experiment;
pub mod hashing;
pub mod hygt;
pub mod metrics;
pub mod nn;
pub mod retrieval;
pub mod summarizer;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
