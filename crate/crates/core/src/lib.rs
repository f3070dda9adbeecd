//! Unified personalized dense-retrieval engine.
//!
//! A single bi-encoder model serves three information-access functionalities
//! (keyword search, query by example, complementary item recommendation),
//! personalized through an attentive network over the user's interaction
//! history. The crate covers the full pipeline: corpus modeling, BM25
//! negative mining, trainable encoders with manual backprop, two-phase
//! pre-training plus personalized fine-tuning, exact and approximate
//! inner-product retrieval, and a ranking-metric evaluation harness.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all file and terminal
//! IO lives in the companion `uia` binary crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod apn;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod index;
pub mod lexical;
pub mod math;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod synth;
pub mod training;

pub use corpus::{Functionality, Interaction, InteractionLog, Item, ItemCollection, Request};
pub use matrix::Matrix;

pub use rng::Rng;
