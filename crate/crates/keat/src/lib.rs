//! Knowledge-enhanced attention Bi-GRU short-text classifier.
//!
//! The pipeline: tokenize short texts, optionally filter the vocabulary by
//! information gain, encode each document at character and word level through
//! a Bi-GRU with multi-head self-attention, retrieve a concept set for the
//! document from a local knowledge-base lexicon, weight the concepts by their
//! relevance to the text and to each other, and classify on the fused text and
//! concept features. An alternative Gaussian-biased local attention layer can
//! replace the multi-head pooling path.
//!
//! Everything trains through a small reverse-mode tape ([`tape::Tape`]) whose
//! gradients are verified against central finite differences; see
//! [`gradcheck`].
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example train_toy
//! cargo run --release --example information_gain
//! cargo run --release --example conceptualize
//! cargo run --release --example encode_text
//! cargo run --release --example concept_fusion
//! cargo run --release --example local_attention
//! cargo run --release --example gradient_check
//! cargo run --release --example gamma_sweep
//! cargo run --release --example checkpoint_roundtrip
//! ```
//!
//! A tenth example, `make_fixtures`, regenerates the synthetic corpus under
//! `tests/data/` deterministically.
//!
//! The `keat` binary wraps the same library calls behind `train`, `eval`,
//! `predict`, `ig`, `gradcheck`, and `sweep` subcommands.

pub mod checkpoint;
pub mod cli;
pub mod concept;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod local_attn;
pub mod model;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{KeatError, Result};
pub use tensor::Tensor;
