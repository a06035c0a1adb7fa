//! Tree decoding from probe outputs.
//!
//! The root is the word most likely to carry the `root` label. The rest of
//! the tree grows from it greedily: at every step the closest
//! (in-tree head, out-of-tree dependent) pair in the structural subspace is
//! attached. Non-root words take their best non-`root` label.

use std::io::{self, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::embstore::{align_check, EmbeddedSentence};
use crate::probe::{column_distances, ProbeError, ProbeParams};
use crate::treebank::{check_tree_shape, write_sentence, GoldTree, Head, LabelVocabulary, ROOT_LABEL};

/// Label given to non-root words when the vocabulary has nothing but `root`.
pub const UNSPECIFIED_LABEL: &str = "_";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictedTree {
    pub heads: Vec<Head>,
    pub labels: Vec<String>,
    pub root_index: usize,
}

#[derive(Debug, Error)]
pub enum InvalidTree {
    #[error("{0} heads but {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Shape(#[from] crate::treebank::TreeShapeError),
    #[error("root index {stated} disagrees with heads (root at {actual})")]
    RootMismatch { stated: usize, actual: usize },
    #[error("{0} words carry the root label")]
    RootLabels(usize),
    #[error("root word is labelled {0:?}")]
    RootLabel(String),
}

impl PredictedTree {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Single root, connected, acyclic, exactly one `root` label on the root.
    pub fn validate(&self) -> Result<(), InvalidTree> {
        if self.heads.len() != self.labels.len() {
            return Err(InvalidTree::LengthMismatch(self.heads.len(), self.labels.len()));
        }
        let actual = check_tree_shape(&self.heads)?;
        if actual != self.root_index {
            return Err(InvalidTree::RootMismatch {
                stated: self.root_index,
                actual,
            });
        }
        let root_labels = self.labels.iter().filter(|l| *l == ROOT_LABEL).count();
        if self.labels[actual] != ROOT_LABEL {
            return Err(InvalidTree::RootLabel(self.labels[actual].clone()));
        }
        if root_labels != 1 {
            return Err(InvalidTree::RootLabels(root_labels));
        }
        Ok(())
    }
}

/// Word with the highest `root` log-probability; ties go to the lowest index.
pub fn select_root(logprobs: &DMatrix<f64>, vocabulary: &LabelVocabulary) -> usize {
    let column = logprobs.column(vocabulary.root_id());
    let mut best = 0;
    for (i, &v) in column.iter().enumerate().skip(1) {
        if v > column[best] {
            best = i;
        }
    }
    best
}

/// Greedy top-down growth from `root` over a symmetric distance matrix.
///
/// Each step attaches the frontier pair with the smallest distance, ties
/// broken by lower dependent index and then lower head index.
pub fn grow_tree(distances: &DMatrix<f64>, root: usize) -> Vec<Head> {
    let n = distances.nrows();
    let mut heads = vec![Head::Root; n];
    let mut in_tree = vec![false; n];
    in_tree[root] = true;
    // Best known attachment of every outside word.
    let mut best: Vec<(f64, usize)> = (0..n).map(|d| (distances[(root, d)], root)).collect();

    for _ in 1..n {
        let mut pick: Option<usize> = None;
        for d in 0..n {
            if in_tree[d] {
                continue;
            }
            // total_cmp keeps the choice total even for NaN distances.
            if pick.is_none_or(|p| best[d].0.total_cmp(&best[p].0).is_lt()) {
                pick = Some(d);
            }
        }
        let d = pick.expect("an outside word remains");
        heads[d] = Head::Word(best[d].1);
        in_tree[d] = true;
        for o in 0..n {
            if in_tree[o] {
                continue;
            }
            let dist = distances[(d, o)];
            let (cur, cur_head) = best[o];
            let ord = dist.total_cmp(&cur);
            if ord.is_lt() || (ord.is_eq() && d < cur_head) {
                best[o] = (dist, d);
            }
        }
    }
    heads
}

/// Per-word labels: `root` on the root, best non-`root` label elsewhere.
fn assign_labels(logprobs: &DMatrix<f64>, vocabulary: &LabelVocabulary, root: usize) -> Vec<String> {
    let root_id = vocabulary.root_id();
    (0..logprobs.nrows())
        .map(|w| {
            if w == root {
                return ROOT_LABEL.to_owned();
            }
            let mut best: Option<usize> = None;
            for k in (0..vocabulary.len()).filter(|&k| k != root_id) {
                if best.is_none_or(|b| logprobs[(w, k)].total_cmp(&logprobs[(w, b)]).is_gt()) {
                    best = Some(k);
                }
            }
            best.map_or(UNSPECIFIED_LABEL, |k| vocabulary.label(k)).to_owned()
        })
        .collect()
}

/// Decodes a tree from label log-probabilities and subspace distances.
pub fn decode_scores(logprobs: &DMatrix<f64>, distances: &DMatrix<f64>, vocabulary: &LabelVocabulary) -> PredictedTree {
    let root = select_root(logprobs, vocabulary);
    PredictedTree {
        heads: grow_tree(distances, root),
        labels: assign_labels(logprobs, vocabulary, root),
        root_index: root,
    }
}

/// Decodes one sentence given as a `words × hidden` matrix.
pub fn decode_words(params: &ProbeParams, words: &DMatrix<f64>) -> Result<PredictedTree, ProbeError> {
    let logprobs = params.label_logprobs(words)?;
    let distances = column_distances(&params.project(words)?);
    Ok(decode_scores(&logprobs, &distances, &params.vocabulary))
}

pub fn decode_tree(params: &ProbeParams, sentence: &EmbeddedSentence) -> Result<PredictedTree, ProbeError> {
    decode_words(params, &sentence.to_matrix())
}

pub(crate) fn decode_matrices(
    params: &ProbeParams,
    sentences: &[DMatrix<f64>],
) -> Result<Vec<PredictedTree>, ProbeError> {
    sentences.par_iter().map(|w| decode_words(params, w)).collect()
}

/// Decodes every sentence of an aligned store, in order.
pub fn decode_corpus(
    params: &ProbeParams,
    store: &[EmbeddedSentence],
    trees: &[GoldTree],
) -> Result<Vec<PredictedTree>, ProbeError> {
    let report = align_check(trees, store);
    if !report.passed() {
        return Err(ProbeError::Alignment(report.to_string()));
    }
    store.par_iter().map(|s| decode_tree(params, s)).collect()
}

/// Writes predictions as CoNLL-U, copying everything but HEAD and DEPREL
/// from the gold trees.
pub fn write_predictions<W: Write>(trees: &[GoldTree], predictions: &[PredictedTree], mut sink: W) -> io::Result<()> {
    if trees.len() != predictions.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} trees but {} predictions", trees.len(), predictions.len()),
        ));
    }
    for (tree, pred) in trees.iter().zip(predictions) {
        if tree.len() != pred.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "prediction length differs from tree",
            ));
        }
        write_sentence(
            &mut sink,
            tree,
            pred.heads.iter().copied(),
            pred.labels.iter().map(String::as_str),
        )?;
    }
    Ok(())
}
