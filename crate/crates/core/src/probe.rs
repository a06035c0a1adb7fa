//! The two-matrix dependency probe.
//!
//! `L` (labels × hidden) scores the incoming relation of every word and
//! `B` (rank × hidden) projects words into a subspace whose Euclidean
//! distances are trained to match tree distances.

use nalgebra::DMatrix;
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::decode_matrices;
use crate::embstore::{align_check, EmbeddedSentence};
use crate::metrics::score_corpus;
use crate::treebank::{build_vocabulary, tree_distances, DistanceMatrix, GoldTree, LabelVocabulary};

/// Projected differences shorter than this contribute no gradient.
pub const DEGENERATE_DISTANCE: f64 = 1e-12;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("{0}")]
    Alignment(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    /// Label map `L`, one row per vocabulary entry.
    pub label_map: DMatrix<f64>,
    /// Structural projection `B`, one row per subspace dimension.
    pub structure: DMatrix<f64>,
    pub vocabulary: LabelVocabulary,
    pub model_id: String,
    pub layer_index: u32,
}

impl ProbeParams {
    pub fn new(
        label_map: DMatrix<f64>,
        structure: DMatrix<f64>,
        vocabulary: LabelVocabulary,
    ) -> Result<Self, ProbeError> {
        let params = ProbeParams {
            label_map,
            structure,
            vocabulary,
            model_id: String::new(),
            layer_index: 0,
        };
        params.validate()?;
        Ok(params)
    }

    /// Seeded initialization with entries uniform in ±1/sqrt(hidden_dim).
    pub fn random(vocabulary: LabelVocabulary, hidden_dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let label_map = DMatrix::from_fn(vocabulary.len(), hidden_dim, |_, _| dist.sample(rng));
        let structure = DMatrix::from_fn(rank, hidden_dim, |_, _| dist.sample(rng));
        ProbeParams {
            label_map,
            structure,
            vocabulary,
            model_id: String::new(),
            layer_index: 0,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.label_map.ncols()
    }

    pub fn rank(&self) -> usize {
        self.structure.nrows()
    }

    fn validate(&self) -> Result<(), ProbeError> {
        let d = self.label_map.ncols();
        if self.label_map.nrows() != self.vocabulary.len() {
            return Err(ProbeError::Format(format!(
                "label map has {} rows for {} labels",
                self.label_map.nrows(),
                self.vocabulary.len()
            )));
        }
        if self.structure.ncols() != d {
            return Err(ProbeError::Format(format!(
                "structure width {} differs from label map width {d}",
                self.structure.ncols()
            )));
        }
        if d == 0 || self.rank() == 0 || self.rank() > d {
            return Err(ProbeError::Format(format!(
                "rank {} invalid for hidden dim {d}",
                self.rank()
            )));
        }
        if self
            .label_map
            .iter()
            .chain(self.structure.iter())
            .any(|v| !v.is_finite())
        {
            return Err(ProbeError::Format("non-finite parameter".to_owned()));
        }
        Ok(())
    }

    fn check_width(&self, words: &DMatrix<f64>) -> Result<(), ProbeError> {
        if words.ncols() != self.hidden_dim() {
            return Err(ProbeError::Shape(format!(
                "sentence width {} but probe hidden dim {}",
                words.ncols(),
                self.hidden_dim()
            )));
        }
        Ok(())
    }

    /// Log-softmax label scores, `words × labels`.
    pub fn label_logprobs(&self, words: &DMatrix<f64>) -> Result<DMatrix<f64>, ProbeError> {
        self.check_width(words)?;
        let mut scores = words * self.label_map.transpose();
        for mut row in scores.row_iter_mut() {
            let max = row.max();
            let log_norm = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.add_scalar_mut(-log_norm);
        }
        Ok(scores)
    }

    /// Projected words as columns, `rank × words`.
    pub fn project(&self, words: &DMatrix<f64>) -> Result<DMatrix<f64>, ProbeError> {
        self.check_width(words)?;
        Ok(&self.structure * words.transpose())
    }

    /// Distance between two representations in the structural subspace.
    pub fn subspace_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), self.hidden_dim());
        assert_eq!(b.len(), self.hidden_dim());
        let mut sq = 0.0;
        for row in self.structure.row_iter() {
            let p: f64 = row.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * (x - y)).sum();
            sq += p * p;
        }
        sq.sqrt()
    }

    /// Normalized L1 gap between tree distances and subspace distances.
    pub fn structural_loss(&self, words: &DMatrix<f64>, gold: &DistanceMatrix) -> Result<StructuralLoss, ProbeError> {
        let proj = self.project(words)?;
        if gold.len() != proj.ncols() {
            return Err(ProbeError::Shape(format!(
                "distance matrix for {} words, sentence has {}",
                gold.len(),
                proj.ncols()
            )));
        }
        Ok(structural_terms(&proj, gold, false).0)
    }
}

/// Pairwise Euclidean distances between the columns of `proj`.
pub(crate) fn column_distances(proj: &DMatrix<f64>) -> DMatrix<f64> {
    let n = proj.ncols();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (proj.column(i) - proj.column(j)).norm();
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructuralLoss {
    pub value: f64,
    /// Single-word sentences carry no pairs and are left out of B updates.
    pub skipped: bool,
}

/// Loss and, when requested, the symmetric per-pair gradient weights.
fn structural_terms(
    proj: &DMatrix<f64>,
    gold: &DistanceMatrix,
    with_weights: bool,
) -> (StructuralLoss, Option<DMatrix<f64>>) {
    let n = proj.ncols();
    if n < 2 {
        return (
            StructuralLoss {
                value: 0.0,
                skipped: true,
            },
            None,
        );
    }
    let norm = ((n - 1) * (n - 1)) as f64;
    let mut total = 0.0;
    let mut weights = with_weights.then(|| DMatrix::zeros(n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (proj.column(i) - proj.column(j)).norm();
            let gap = f64::from(gold.get(i, j)) - d;
            // Ordered pairs (i, j) and (j, i) contribute equally.
            total += 2.0 * gap.abs();
            if let Some(w) = weights.as_mut() {
                if d >= DEGENERATE_DISTANCE && gap != 0.0 {
                    let c = -gap.signum() / (d * norm);
                    w[(i, j)] = c;
                    w[(j, i)] = c;
                }
            }
        }
    }
    (
        StructuralLoss {
            value: total / norm,
            skipped: false,
        },
        weights,
    )
}

/// One training sentence in probe-ready form.
#[derive(Clone, Debug)]
pub struct ProbeExample {
    pub words: DMatrix<f64>,
    /// Vocabulary id of each gold label; `None` for labels outside the vocabulary.
    pub labels: Vec<Option<usize>>,
    pub distances: DistanceMatrix,
}

impl ProbeExample {
    pub fn new(sentence: &EmbeddedSentence, tree: &GoldTree, vocabulary: &LabelVocabulary) -> Result<Self, ProbeError> {
        if sentence.len() != tree.len() {
            return Err(ProbeError::Shape(format!(
                "sentence has {} vectors, tree has {} words",
                sentence.len(),
                tree.len()
            )));
        }
        Ok(ProbeExample {
            words: sentence.to_matrix(),
            labels: tree.relations().map(|r| vocabulary.id(r)).collect(),
            distances: tree_distances(tree),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LossWeights {
    pub label: f64,
    pub structure: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            label: 1.0,
            structure: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub label_map: DMatrix<f64>,
    pub structure: DMatrix<f64>,
    /// Mean cross-entropy over labelled words in the batch.
    pub label_loss: f64,
    /// Mean structural loss over multi-word sentences in the batch.
    pub structural_loss: f64,
}

impl Gradients {
    pub fn combined_loss(&self, weights: LossWeights) -> f64 {
        weights.label * self.label_loss + weights.structure * self.structural_loss
    }
}

/// Weighted gradients of mean cross-entropy (w.r.t. `L`) and mean
/// structural loss (w.r.t. `B`) over a batch.
pub fn gradients(params: &ProbeParams, batch: &[&ProbeExample], weights: LossWeights) -> Result<Gradients, ProbeError> {
    let mut d_label = DMatrix::zeros(params.label_map.nrows(), params.hidden_dim());
    let mut d_struct = DMatrix::zeros(params.rank(), params.hidden_dim());
    let mut ce_sum = 0.0;
    let mut labelled = 0usize;
    let mut struct_sum = 0.0;
    let mut structured = 0usize;

    for ex in batch {
        let logprobs = params.label_logprobs(&ex.words)?;
        // Softmax minus one-hot, labels × words.
        let mut residual = logprobs.map(f64::exp).transpose();
        for (w, label) in ex.labels.iter().enumerate() {
            match label {
                Some(k) => {
                    ce_sum -= logprobs[(w, *k)];
                    residual[(*k, w)] -= 1.0;
                    labelled += 1;
                }
                None => residual.column_mut(w).fill(0.0),
            }
        }
        d_label += residual * &ex.words;

        let proj = params.project(&ex.words)?;
        let (loss, pair_weights) = structural_terms(&proj, &ex.distances, true);
        if loss.skipped {
            continue;
        }
        struct_sum += loss.value;
        structured += 1;
        let mut laplacian = -pair_weights.expect("weights requested");
        for i in 0..laplacian.nrows() {
            let row_sum: f64 = laplacian.row(i).sum();
            laplacian[(i, i)] = -row_sum;
        }
        d_struct += (proj * laplacian * &ex.words) * 2.0;
    }

    if labelled > 0 {
        d_label *= weights.label / labelled as f64;
    }
    if structured > 0 {
        d_struct *= weights.structure / structured as f64;
    }
    Ok(Gradients {
        label_map: d_label,
        structure: d_struct,
        label_loss: if labelled > 0 { ce_sum / labelled as f64 } else { 0.0 },
        structural_loss: if structured > 0 {
            struct_sum / structured as f64
        } else {
            0.0
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub rank: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rank: 128,
            step_size: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self, hidden_dim: usize) -> Result<(), ProbeError> {
        let fail = |m: String| Err(ProbeError::Config(m));
        if self.rank == 0 || self.rank > hidden_dim {
            return fail(format!("rank {} must be in 1..={hidden_dim}", self.rank));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return fail(format!("step size {} must be positive", self.step_size));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".to_owned());
        }
        if self.patience == 0 {
            return fail("patience must be positive".to_owned());
        }
        let w = self.loss_weights;
        if !(w.label >= 0.0 && w.structure >= 0.0 && w.label.is_finite() && w.structure.is_finite()) {
            return fail("loss weights must be finite and non-negative".to_owned());
        }
        Ok(())
    }
}

/// Adam with bias correction, one moment pair per parameter matrix.
#[derive(Clone, Debug)]
struct Adam {
    step_size: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl Adam {
    fn new(step_size: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: shapes
                .iter()
                .map(|&(r, c)| (DMatrix::zeros(r, c), DMatrix::zeros(r, c)))
                .collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[&DMatrix<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.step_size * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A treebank split paired with its aligned embeddings.
#[derive(Clone, Copy, Debug)]
pub struct AlignedSplit<'a> {
    pub trees: &'a [GoldTree],
    pub sentences: &'a [EmbeddedSentence],
}

impl<'a> AlignedSplit<'a> {
    pub fn new(trees: &'a [GoldTree], sentences: &'a [EmbeddedSentence]) -> Result<Self, ProbeError> {
        let report = align_check(trees, sentences);
        if !report.passed() {
            return Err(ProbeError::Alignment(report.to_string()));
        }
        Ok(AlignedSplit { trees, sentences })
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.sentences.iter().find(|s| !s.is_empty()).map(|s| s.dim())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochStats {
    pub epoch: usize,
    pub label_loss: f64,
    pub structural_loss: f64,
    pub dev_las: f64,
    pub dev_uas: f64,
    pub dev_label: f64,
}

impl EpochStats {
    pub fn combined_loss(&self, weights: LossWeights) -> f64 {
        weights.label * self.label_loss + weights.structure * self.structural_loss
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    /// Epoch with the best dev LAS; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub final_params: ProbeParams,
}

fn prepare(split: AlignedSplit<'_>, vocabulary: &LabelVocabulary) -> Result<Vec<ProbeExample>, ProbeError> {
    split
        .trees
        .iter()
        .zip(split.sentences)
        .map(|(t, s)| ProbeExample::new(s, t, vocabulary))
        .collect()
}

/// Trains `L` and `B` jointly with Adam and keeps the parameters from the
/// epoch with the best dev LAS.
pub fn train(train: AlignedSplit<'_>, dev: AlignedSplit<'_>, config: &TrainConfig) -> Result<TrainRecord, ProbeError> {
    if train.trees.is_empty() {
        return Err(ProbeError::Config("empty training corpus".to_owned()));
    }
    let hidden_dim = train
        .hidden_dim()
        .ok_or_else(|| ProbeError::Config("training store has no vectors".to_owned()))?;
    if let Some(d) = dev.hidden_dim() {
        if d != hidden_dim {
            return Err(ProbeError::Shape(format!(
                "dev width {d} differs from train width {hidden_dim}"
            )));
        }
    }
    config.validate(hidden_dim)?;

    let vocabulary = build_vocabulary(train.trees);
    let unseen = dev
        .trees
        .iter()
        .flat_map(|t| t.relations())
        .filter(|r| vocabulary.id(r).is_none())
        .count();
    if unseen > 0 {
        log::warn!("{unseen} dev words carry labels unseen in training; they will be scored incorrect");
    }

    let examples = prepare(train, &vocabulary)?;
    let dev_words: Vec<DMatrix<f64>> = dev.sentences.iter().map(EmbeddedSentence::to_matrix).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ProbeParams::random(vocabulary, hidden_dim, config.rank, &mut rng);
    let mut adam = Adam::new(config.step_size, &[params.label_map.shape(), params.structure.shape()]);

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ProbeParams)> = None;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let (mut label_total, mut struct_total, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ProbeExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let g = gradients(&params, &batch, config.loss_weights)?;
            label_total += g.label_loss;
            struct_total += g.structural_loss;
            batches += 1;
            adam.step(
                &mut [&mut params.label_map, &mut params.structure],
                &[&g.label_map, &g.structure],
            );
        }

        let predictions = decode_matrices(&params, &dev_words)?;
        let report = score_corpus(dev.trees, &predictions).map_err(|e| ProbeError::Shape(e.to_string()))?;
        let stats = EpochStats {
            epoch,
            label_loss: label_total / batches as f64,
            structural_loss: struct_total / batches as f64,
            dev_las: report.las,
            dev_uas: report.uas,
            dev_label: report.label,
        };
        log::info!(
            "epoch {epoch}: label loss {:.4}, structural loss {:.4}, dev LAS {:.2} UAS {:.2} LABEL {:.2}",
            stats.label_loss,
            stats.structural_loss,
            stats.dev_las,
            stats.dev_uas,
            stats.dev_label
        );
        epochs.push(stats);

        if best.as_ref().is_none_or(|(_, las, _)| report.las > *las) {
            best = Some((epoch, report.las, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, final_params) = match best {
        Some((e, _, p)) => (Some(e), p),
        None => (None, params),
    };
    Ok(TrainRecord {
        epochs,
        best_epoch,
        final_params,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct CheckpointDoc {
    format_version: u32,
    model_id: String,
    layer_index: u32,
    hidden_dim: usize,
    rank: usize,
    labels: Vec<String>,
    #[serde(rename = "L")]
    label_map: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    structure: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, ProbeError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(ProbeError::Format(format!("{name} is not {nrows} × {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Serializes a probe as a JSON checkpoint. Floats use shortest round-trip
/// formatting, so loading restores identical bits.
pub fn save_probe(params: &ProbeParams) -> String {
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_id: params.model_id.clone(),
        layer_index: params.layer_index,
        hidden_dim: params.hidden_dim(),
        rank: params.rank(),
        labels: params.vocabulary.labels().to_vec(),
        label_map: rows_of(&params.label_map),
        structure: rows_of(&params.structure),
    };
    let mut text = serde_json::to_string(&doc).expect("checkpoint serializes");
    text.push('\n');
    text
}

pub fn load_probe(text: &str) -> Result<ProbeParams, ProbeError> {
    let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| ProbeError::Format(e.to_string()))?;
    if doc.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ProbeError::Format(format!(
            "unsupported formatVersion {}",
            doc.format_version
        )));
    }
    let vocabulary = LabelVocabulary::from_labels(doc.labels).map_err(|e| ProbeError::Format(e.to_string()))?;
    let label_map = matrix_from_rows("L", &doc.label_map, vocabulary.len(), doc.hidden_dim)?;
    let structure = matrix_from_rows("B", &doc.structure, doc.rank, doc.hidden_dim)?;
    let mut params = ProbeParams::new(label_map, structure, vocabulary)?;
    params.model_id = doc.model_id;
    params.layer_index = doc.layer_index;
    Ok(params)
}
