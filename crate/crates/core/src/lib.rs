//! Probing frozen text-encoder representations for dependency syntax.
//!
//! A probe is two linear maps trained on word vectors from one encoder
//! layer: one predicts each word's incoming relation label, the other
//! projects words into a subspace where Euclidean distance tracks
//! dependency-tree distance. Decoded trees are scored with LAS, UAS, UUAS,
//! LABEL and ROOT.
//!
//! Modules follow the data flow:
//!
//! - [`treebank`]: CoNLL-U gold trees, length filter, tree distances.
//! - [`embstore`]: the WEMB1 word-vector store and alignment checks.
//! - [`probe`]: parameters, losses, gradients and training.
//! - [`decoder`]: root selection and greedy top-down tree growth.
//! - [`metrics`]: attachment and labeling scores.
//! - [`synthetic`]: corpora whose syntax is linearly recoverable by construction.

pub mod decoder;
pub mod embstore;
pub mod metrics;
pub mod probe;
pub mod synthetic;
pub mod treebank;

pub use decoder::{decode_corpus, decode_tree, select_root, PredictedTree};
pub use embstore::{align_check, read_store, write_store, AlignmentReport, EmbeddedSentence, EmbeddingHeader};
pub use metrics::{score_corpus, score_sentence, EvalReport};
pub use probe::{gradients, load_probe, save_probe, train, AlignedSplit, ProbeParams, TrainConfig, TrainRecord};
pub use treebank::{
    build_vocabulary, filter_corpus, parse_conllu, tree_distances, write_conllu, GoldTree, Head, LabelVocabulary,
    ParseOptions, Token,
};
