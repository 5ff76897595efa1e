//! Compression of ultra-long user behavior sequences into a small set of
//! interest-level vectors.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`rq`] learns residual codebooks over frozen semantic item embeddings and
//!    maps every item to a semantic identifier (one codeword index per level).
//! 2. [`tree`] counts a user's tokenized history in a sparse prefix trie and
//!    keeps the top-k children per level, yielding weighted interest agents.
//! 3. [`routing`] aggregates ranking-space embeddings of *all* history items
//!    into one vector per agent with a distance-based softmax.
//! 4. [`serving`] runs candidate-to-sequence multi-head attention over the
//!    compressed sequence, with a query cache and an exact FLOP ledger.
//!
//! [`baselines`] provides training-free grouping baselines and [`eval`] runs the
//! whole thing end to end on seeded synthetic corpora.

pub mod baselines;
pub mod corpus;
pub mod eval;
pub mod matrix;
pub mod rng;
pub mod routing;
pub mod rq;
pub mod serving;
pub mod tree;

pub use corpus::{
    GroundTruth, InteractionEvent, InteractionSequence, ItemCorpus, ItemEmbedding,
    SyntheticConfig,
};
pub use matrix::Matrix;

pub use rq::{CodebookStack, RqConfig, SemanticId};

pub use routing::{CompressedSequence, RoutingConfig, RoutingMode, TimeDecay};
pub use tree::{InterestAgent, InterestAgentSet, VoteTrie, VotingConfig};
