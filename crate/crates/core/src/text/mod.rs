//! Vocabulary, corpus files, synthetic data and batching.

mod batch;
mod corpus;
mod embeddings;
mod vocab;

pub use batch::{make_batches, Batch};
pub(crate) use corpus::strip_wrapper;
pub use corpus::{
    gen_synthetic, record_tokens, Corpus, Record, Sample, SyntheticCorpus, SALIENT_WEIGHT,
};
pub use embeddings::{load_embeddings, random_embeddings, EmbeddingTable};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
