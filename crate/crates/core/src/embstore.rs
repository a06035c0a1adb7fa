//! The WEMB1 embedding store.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "WEMB1"                      5 bytes
//! metadata length              u32
//! metadata                     UTF-8 JSON object
//! per sentence:
//!   word count n               u32
//!   n * hiddenDim values       f32, row-major
//! ```
//!
//! Sentences are positionally bound to a companion CoNLL-U file; there are
//! no per-sentence identifiers.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treebank::GoldTree;

pub const MAGIC: &[u8; 5] = b"WEMB1";
pub const DTYPE_F32: &str = "f32";

/// Upper bound on the metadata block; anything larger is not a store.
const MAX_METADATA_LEN: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not an embedding store")]
    BadMagic,
    #[error("unexpected end of store at sentence {0}")]
    Truncated(usize),
    #[error("unexpected end of store in header")]
    TruncatedHeader,
    #[error("invalid store metadata: {0}")]
    Metadata(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value at sentence {sentence}, word {word}")]
    NonFinite { sentence: usize, word: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EmbeddingHeader {
    pub model_id: String,
    pub layer_index: u32,
    pub hidden_dim: u32,
    pub sentence_count: u32,
    pub dtype: String,
}

impl EmbeddingHeader {
    pub fn new(model_id: impl Into<String>, layer_index: u32, hidden_dim: u32, sentence_count: u32) -> Self {
        EmbeddingHeader {
            model_id: model_id.into(),
            layer_index,
            hidden_dim,
            sentence_count,
            dtype: DTYPE_F32.to_owned(),
        }
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.hidden_dim == 0 {
            return Err(StoreError::Metadata("hiddenDim must be positive".to_owned()));
        }
        if self.dtype != DTYPE_F32 {
            return Err(StoreError::Metadata(format!("unsupported dtype {:?}", self.dtype)));
        }
        Ok(())
    }
}

/// Word-aligned vectors of one sentence, row-major `len × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSentence {
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddedSentence {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(StoreError::Format(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        Ok(EmbeddedSentence { dim, values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, StoreError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(StoreError::Format("ragged rows".to_owned()));
        }
        EmbeddedSentence::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Upcasts to a binary64 `len × dim` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.len(), self.dim, self.values.iter().map(|&v| f64::from(v)))
    }
}

/// Writes a store and returns the number of bytes written.
///
/// Shapes are validated before anything reaches the sink.
pub fn write_store<W: Write>(
    header: &EmbeddingHeader,
    sentences: &[EmbeddedSentence],
    mut sink: W,
) -> Result<u64, StoreError> {
    header.validate()?;
    if header.sentence_count as usize != sentences.len() {
        return Err(StoreError::Format(format!(
            "header declares {} sentences, got {}",
            header.sentence_count,
            sentences.len()
        )));
    }
    let dim = header.hidden_dim as usize;
    for (k, s) in sentences.iter().enumerate() {
        if !s.is_empty() && s.dim() != dim {
            return Err(StoreError::Format(format!(
                "sentence {k} has width {}, header hiddenDim is {dim}",
                s.dim()
            )));
        }
        if u32::try_from(s.len()).is_err() {
            return Err(StoreError::Format(format!("sentence {k} is too long")));
        }
    }

    let meta = serde_json::to_vec(header).map_err(|e| StoreError::Metadata(e.to_string()))?;
    let mut written = 0u64;
    sink.write_all(MAGIC)?;
    sink.write_all(&(meta.len() as u32).to_le_bytes())?;
    sink.write_all(&meta)?;
    written += (MAGIC.len() + 4 + meta.len()) as u64;

    let mut buf = Vec::new();
    for s in sentences {
        buf.clear();
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for v in &s.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], err: impl FnOnce() -> StoreError) -> Result<(), StoreError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => err(),
        _ => StoreError::Io(e),
    })
}

/// Reads a whole store, checking that every value is finite.
pub fn read_store<R: Read>(mut source: R) -> Result<(EmbeddingHeader, Vec<EmbeddedSentence>), StoreError> {
    let mut magic = [0u8; 5];
    read_exact_or(&mut source, &mut magic, || StoreError::BadMagic)?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let mut word = [0u8; 4];
    read_exact_or(&mut source, &mut word, || StoreError::TruncatedHeader)?;
    let meta_len = u32::from_le_bytes(word);
    if meta_len > MAX_METADATA_LEN {
        return Err(StoreError::Metadata(format!(
            "metadata length {meta_len} is implausible"
        )));
    }
    let mut meta = vec![0u8; meta_len as usize];
    read_exact_or(&mut source, &mut meta, || StoreError::TruncatedHeader)?;
    let header: EmbeddingHeader = serde_json::from_slice(&meta).map_err(|e| StoreError::Metadata(e.to_string()))?;
    header.validate()?;

    let dim = header.hidden_dim as usize;
    // Capacity is bounded by the declared count, never by untrusted row counts.
    let mut sentences = Vec::with_capacity((header.sentence_count as usize).min(1 << 16));
    let mut bytes = Vec::new();
    for k in 0..header.sentence_count as usize {
        read_exact_or(&mut source, &mut word, || StoreError::Truncated(k))?;
        let n = u32::from_le_bytes(word) as usize;
        let total = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| StoreError::Format(format!("sentence {k} size overflows")))?;
        bytes.clear();
        let got = (&mut source).take(total as u64).read_to_end(&mut bytes)?;
        if got != total {
            return Err(StoreError::Truncated(k));
        }
        let mut values = Vec::with_capacity(n * dim);
        for (idx, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(StoreError::NonFinite {
                    sentence: k,
                    word: idx / dim,
                });
            }
            values.push(v);
        }
        sentences.push(EmbeddedSentence { dim, values });
    }
    Ok((header, sentences))
}

/// Outcome of pairing a treebank with a store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentReport {
    pub tree_count: usize,
    pub store_count: usize,
    /// First mismatching ordinals (at most [`AlignmentReport::MAX_LISTED`]).
    pub mismatches: Vec<usize>,
    pub mismatch_count: usize,
}

impl AlignmentReport {
    pub const MAX_LISTED: usize = 10;

    pub fn passed(&self) -> bool {
        self.mismatch_count == 0
    }
}

impl std::fmt::Display for AlignmentReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.passed() {
            return write!(f, "aligned: {} sentences", self.tree_count);
        }
        write!(
            f,
            "alignment failed: treebank has {} sentences, store has {}; {} mismatching, first at {:?}",
            self.tree_count, self.store_count, self.mismatch_count, self.mismatches
        )
    }
}

/// Checks sentence counts and per-sentence word counts.
pub fn align_check(trees: &[GoldTree], store: &[EmbeddedSentence]) -> AlignmentReport {
    let longest = trees.len().max(store.len());
    let mut mismatches = Vec::new();
    let mut mismatch_count = 0;
    for k in 0..longest {
        let ok = match (trees.get(k), store.get(k)) {
            (Some(t), Some(s)) => t.len() == s.len(),
            _ => false,
        };
        if !ok {
            mismatch_count += 1;
            if mismatches.len() < AlignmentReport::MAX_LISTED {
                mismatches.push(k);
            }
        }
    }
    AlignmentReport {
        tree_count: trees.len(),
        store_count: store.len(),
        mismatches,
        mismatch_count,
    }
}
