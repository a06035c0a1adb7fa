//! Attachment and labeling scores.
//!
//! Token-level scores are micro-averaged over all words (punctuation
//! included). ROOT is averaged over sentences.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::PredictedTree;
use crate::treebank::{GoldTree, Head};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("sentence {sentence}: gold has {gold} words, prediction has {predicted}")]
    LengthMismatch {
        sentence: usize,
        gold: usize,
        predicted: usize,
    },
    #[error("corpus has {gold} gold trees but {predicted} predictions")]
    CorpusMismatch { gold: usize, predicted: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TokenFlags {
    pub label: bool,
    pub head: bool,
    pub labeled_attachment: bool,
    pub undirected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceScore {
    pub tokens: Vec<TokenFlags>,
    pub root_correct: bool,
}

/// Whether `token`'s predicted edge matches a gold edge, ignoring direction.
///
/// The gold root has no head edge; its prediction counts only when it is
/// also predicted as the root.
fn undirected_match(gold: &GoldTree, token: usize, predicted: Head) -> bool {
    let heads = gold.tokens();
    match (heads[token].head, predicted) {
        (Head::Root, p) => p.is_root(),
        (_, Head::Root) => false,
        (Head::Word(g), Head::Word(p)) => g == p || heads[p].head == Head::Word(token),
    }
}

pub fn score_sentence(gold: &GoldTree, pred: &PredictedTree, sentence: usize) -> Result<SentenceScore, ScoreError> {
    if gold.len() != pred.len() || pred.labels.len() != pred.len() {
        return Err(ScoreError::LengthMismatch {
            sentence,
            gold: gold.len(),
            predicted: pred.len(),
        });
    }
    let tokens = gold
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let label = pred.labels[i] == t.relation;
            let head = pred.heads[i] == t.head;
            TokenFlags {
                label,
                head,
                labeled_attachment: label && head,
                undirected: undirected_match(gold, i, pred.heads[i]),
            }
        })
        .collect();
    Ok(SentenceScore {
        tokens,
        root_correct: gold.root_index() == pred.root_index,
    })
}

/// Raw counts behind an [`EvalReport`]; additive over corpus concatenation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tokens: usize,
    pub sentences: usize,
    pub labeled_attachment: usize,
    pub head: usize,
    pub undirected: usize,
    pub label: usize,
    pub root: usize,
    /// relation → (gold count, head correct, label correct)
    pub per_relation: BTreeMap<String, (usize, usize, usize)>,
}

impl Counts {
    pub fn add_sentence(&mut self, gold: &GoldTree, score: &SentenceScore) {
        self.sentences += 1;
        self.root += usize::from(score.root_correct);
        for (token, flags) in gold.tokens().iter().zip(&score.tokens) {
            self.tokens += 1;
            self.labeled_attachment += usize::from(flags.labeled_attachment);
            self.head += usize::from(flags.head);
            self.undirected += usize::from(flags.undirected);
            self.label += usize::from(flags.label);
            let entry = self.per_relation.entry(token.relation.clone()).or_default();
            entry.0 += 1;
            entry.1 += usize::from(flags.head);
            entry.2 += usize::from(flags.label);
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.tokens += other.tokens;
        self.sentences += other.sentences;
        self.labeled_attachment += other.labeled_attachment;
        self.head += other.head;
        self.undirected += other.undirected;
        self.label += other.label;
        self.root += other.root;
        for (rel, (g, h, l)) in &other.per_relation {
            let entry = self.per_relation.entry(rel.clone()).or_default();
            entry.0 += g;
            entry.1 += h;
            entry.2 += l;
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            las: percent(self.labeled_attachment, self.tokens),
            uas: percent(self.head, self.tokens),
            uuas: percent(self.undirected, self.tokens),
            label: percent(self.label, self.tokens),
            root: percent(self.root, self.sentences),
            token_count: self.tokens,
            sentence_count: self.sentences,
            per_relation: self
                .per_relation
                .iter()
                .map(|(rel, &(gold, head, label))| {
                    (
                        rel.clone(),
                        RelationScore {
                            gold_count: gold,
                            attachment_score: percent(head, gold),
                            labeling_accuracy: percent(label, gold),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// `100 · correct / total`, rounded half-up to two decimals. Zero when
/// `total` is zero.
pub fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let (c, t) = (correct as u128, total as u128);
    let hundredths = (20_000 * c + t) / (2 * t);
    hundredths as f64 / 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RelationScore {
    pub gold_count: usize,
    pub attachment_score: f64,
    pub labeling_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub las: f64,
    pub uas: f64,
    pub uuas: f64,
    pub label: f64,
    pub root: f64,
    pub token_count: usize,
    pub sentence_count: usize,
    pub per_relation: BTreeMap<String, RelationScore>,
}

/// The five aggregate metrics in report order.
pub const METRIC_NAMES: [&str; 5] = ["LAS", "UAS", "UUAS", "LABEL", "ROOT"];

impl EvalReport {
    pub fn metrics(&self) -> [(&'static str, f64); 5] {
        [
            ("LAS", self.las),
            ("UAS", self.uas),
            ("UUAS", self.uuas),
            ("LABEL", self.label),
            ("ROOT", self.root),
        ]
    }

    /// Relations sorted by gold count (descending, then name), at most `top_k`.
    pub fn top_relations(&self, top_k: Option<usize>) -> Vec<(&str, &RelationScore)> {
        let mut rels: Vec<_> = self.per_relation.iter().map(|(k, v)| (k.as_str(), v)).collect();
        rels.sort_by(|a, b| b.1.gold_count.cmp(&a.1.gold_count).then(a.0.cmp(b.0)));
        rels.truncate(top_k.unwrap_or(usize::MAX));
        rels
    }
}

pub fn count_corpus(golds: &[GoldTree], preds: &[PredictedTree]) -> Result<Counts, ScoreError> {
    if golds.len() != preds.len() {
        return Err(ScoreError::CorpusMismatch {
            gold: golds.len(),
            predicted: preds.len(),
        });
    }
    let mut counts = Counts::default();
    for (k, (g, p)) in golds.iter().zip(preds).enumerate() {
        counts.add_sentence(g, &score_sentence(g, p, k)?);
    }
    Ok(counts)
}

pub fn score_corpus(golds: &[GoldTree], preds: &[PredictedTree]) -> Result<EvalReport, ScoreError> {
    Ok(count_corpus(golds, preds)?.report())
}

/// Identifies one evaluated probe in long-format reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportKey<'a> {
    pub model: &'a str,
    pub layer: u32,
    pub split: &'a str,
}

pub const LONG_HEADER: [&str; 5] = ["model", "layer", "split", "metric", "value"];

/// Appends the five aggregate rows (`model, layer, split, metric, value`).
pub fn write_long_rows<W: Write>(
    writer: &mut csv::Writer<W>,
    key: &ReportKey<'_>,
    report: &EvalReport,
) -> Result<usize, ScoreError> {
    let layer = key.layer.to_string();
    for (name, value) in report.metrics() {
        writer.write_record([key.model, &layer, key.split, name, &format!("{value:.2}")])?;
    }
    Ok(METRIC_NAMES.len())
}

/// Appends per-relation rows to a long-format report. Each relation adds
/// `count/<rel>`, `attachment/<rel>` and `labeling/<rel>` rows.
pub fn write_long_relation_rows<W: Write>(
    writer: &mut csv::Writer<W>,
    key: &ReportKey<'_>,
    report: &EvalReport,
    top_k: Option<usize>,
) -> Result<usize, ScoreError> {
    let layer = key.layer.to_string();
    let mut rows = 0;
    for (rel, score) in report.top_relations(top_k) {
        writer.write_record([
            key.model,
            &layer,
            key.split,
            &format!("count/{rel}"),
            &score.gold_count.to_string(),
        ])?;
        writer.write_record([
            key.model,
            &layer,
            key.split,
            &format!("attachment/{rel}"),
            &format!("{:.2}", score.attachment_score),
        ])?;
        writer.write_record([
            key.model,
            &layer,
            key.split,
            &format!("labeling/{rel}"),
            &format!("{:.2}", score.labeling_accuracy),
        ])?;
        rows += 3;
    }
    Ok(rows)
}

/// Per-relation table: `relation, goldCount, attachment, labeling`.
pub fn write_relation_table<W: Write>(sink: W, report: &EvalReport, top_k: Option<usize>) -> Result<(), ScoreError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(["relation", "goldCount", "attachment", "labeling"])?;
    for (rel, score) in report.top_relations(top_k) {
        writer.write_record([
            rel,
            &score.gold_count.to_string(),
            &format!("{:.2}", score.attachment_score),
            &format!("{:.2}", score.labeling_accuracy),
        ])?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}
