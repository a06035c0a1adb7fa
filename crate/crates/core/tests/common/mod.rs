//! Independent oracles and random instance generators shared by the
//! integration and acceptance suites. Nothing here calls into the code
//! paths it is used to check.

#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use synprobe::decoder::PredictedTree;
use synprobe::probe::{ProbeExample, ProbeParams};
use synprobe::synthetic::random_heads;
use synprobe::treebank::{GoldTree, Head, LabelVocabulary, Token};
use synprobe::EmbeddedSentence;

pub fn random_tree(rng: &mut ChaCha8Rng, n: usize, labels: &[&str]) -> GoldTree {
    let heads = random_heads(n, rng);
    let tokens = heads
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let rel = if h.is_root() {
                "root"
            } else {
                labels[rng.gen_range(0..labels.len())]
            };
            Token::new(i + 1, format!("w{i}"), h, rel)
        })
        .collect();
    GoldTree::new(tokens).unwrap()
}

/// All-pairs distances by breadth-first search over the undirected tree.
pub fn bfs_distances(heads: &[Head]) -> Vec<Vec<u32>> {
    let n = heads.len();
    let mut adj = vec![Vec::new(); n];
    for (w, h) in heads.iter().enumerate() {
        if let Head::Word(p) = *h {
            adj[w].push(p);
            adj[p].push(w);
        }
    }
    (0..n)
        .map(|s| {
            let mut dist = vec![u32::MAX; n];
            dist[s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(v) = q.pop_front() {
                for &u in &adj[v] {
                    if dist[u] == u32::MAX {
                        dist[u] = dist[v] + 1;
                        q.push_back(u);
                    }
                }
            }
            dist
        })
        .collect()
}

/// `B · x` by explicit loops.
pub fn project_loop(b: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..b.nrows())
        .map(|r| (0..b.ncols()).map(|c| b[(r, c)] * x[c]).sum())
        .collect()
}

pub fn distance_loop(b: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let px = project_loop(b, x);
    let py = project_loop(b, y);
    px.iter().zip(&py).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt()
}

pub fn rows(words: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..words.nrows())
        .map(|i| (0..words.ncols()).map(|j| words[(i, j)]).collect())
        .collect()
}

/// Literal double sum over all ordered pairs, diagonal included.
pub fn structural_loss_loop(b: &DMatrix<f64>, words: &DMatrix<f64>, gold: &[Vec<u32>]) -> f64 {
    let n = words.nrows();
    if n < 2 {
        return 0.0;
    }
    let r = rows(words);
    let big_n = (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += (f64::from(gold[i][j]) - distance_loop(b, &r[i], &r[j])).abs();
        }
    }
    total / (big_n * big_n)
}

/// Mean cross-entropy of gold labels with a loop softmax.
pub fn cross_entropy_loop(l: &DMatrix<f64>, examples: &[&ProbeExample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        for (w, row) in rows(&ex.words).iter().enumerate() {
            let Some(gold) = ex.labels[w] else { continue };
            let logits = project_loop(l, row);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - logits[gold];
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn mean_structural_loop(b: &DMatrix<f64>, examples: &[&ProbeExample]) -> f64 {
    let multi: Vec<_> = examples.iter().filter(|e| e.words.nrows() > 1).collect();
    if multi.is_empty() {
        return 0.0;
    }
    let sum: f64 = multi
        .iter()
        .map(|e| {
            let n = e.words.nrows();
            let gold: Vec<Vec<u32>> = (0..n).map(|i| e.distances.row(i).to_vec()).collect();
            structural_loss_loop(b, &e.words, &gold)
        })
        .sum();
    sum / multi.len() as f64
}

pub struct GradientInstance {
    pub params: ProbeParams,
    pub examples: Vec<ProbeExample>,
}

/// Small random probe + batch (n ≤ 6, hidden ≤ 8, rank ≤ 4).
pub fn gradient_instance(rng: &mut ChaCha8Rng) -> GradientInstance {
    let hidden = rng.gen_range(1..=8);
    let rank = rng.gen_range(1..=hidden.min(4));
    let names = ["amod", "det", "nsubj", "obj", "root"];
    let vocab_len = rng.gen_range(2..=names.len());
    let mut labels: Vec<String> = names[..vocab_len - 1].iter().map(|s| s.to_string()).collect();
    labels.push("root".into());
    let vocabulary = LabelVocabulary::from_labels(labels.clone()).unwrap();
    let non_root: Vec<&str> = labels[..labels.len() - 1].iter().map(String::as_str).collect();

    let l = DMatrix::from_fn(vocab_len, hidden, |_, _| rng.gen_range(-1.5..1.5));
    let b = DMatrix::from_fn(rank, hidden, |_, _| rng.gen_range(-1.5..1.5));
    let params = ProbeParams::new(l, b, vocabulary).unwrap();

    let batch = rng.gen_range(1..=3);
    let examples = (0..batch)
        .map(|_| {
            let n = rng.gen_range(1..=6);
            let tree = random_tree(rng, n, &non_root);
            let values: Vec<f32> = (0..n * hidden).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let sentence = EmbeddedSentence::new(hidden, values).unwrap();
            ProbeExample::new(&sentence, &tree, &params.vocabulary).unwrap()
        })
        .collect();
    GradientInstance { params, examples }
}

/// Smallest |d_P − d_B| over all distinct pairs in the batch.
pub fn min_kink_gap(b: &DMatrix<f64>, examples: &[ProbeExample]) -> f64 {
    let mut best = f64::INFINITY;
    for ex in examples {
        let r = rows(&ex.words);
        for i in 0..r.len() {
            for j in (i + 1)..r.len() {
                let gap = (f64::from(ex.distances.get(i, j)) - distance_loop(b, &r[i], &r[j])).abs();
                best = best.min(gap);
            }
        }
    }
    best
}

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so that entries that are zero on both
/// sides compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `f` at every entry of `m`.
pub fn finite_differences(m: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let mut plus = m.clone();
            plus[(i, j)] += FD_STEP;
            let mut minus = m.clone();
            minus[(i, j)] -= FD_STEP;
            out[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        }
    }
    out
}

/// Worst relative error of the analytic gradients of one instance, as
/// `(label_map, structure)`; the structure entry is `None` when the
/// instance sits within 1e-6 of an L1 kink.
pub fn gradient_check(inst: &GradientInstance) -> (f64, Option<f64>) {
    let refs: Vec<&ProbeExample> = inst.examples.iter().collect();
    let g = synprobe::gradients(&inst.params, &refs, Default::default()).unwrap();

    let fd_l = finite_differences(&inst.params.label_map, |l| cross_entropy_loop(l, &refs));
    let worst_l = g
        .label_map
        .iter()
        .zip(fd_l.iter())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);

    if min_kink_gap(&inst.params.structure, &inst.examples) < 1e-6 {
        return (worst_l, None);
    }
    let fd_b = finite_differences(&inst.params.structure, |b| mean_structural_loop(b, &refs));
    let worst_b = g
        .structure
        .iter()
        .zip(fd_b.iter())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);
    (worst_l, Some(worst_b))
}

/// Random symmetric-in-spirit probe inputs for decoder fuzzing.
pub fn random_params(rng: &mut ChaCha8Rng, hidden: usize, rank: usize, labels: usize) -> ProbeParams {
    let mut names: Vec<String> = (0..labels - 1).map(|k| format!("r{k}")).collect();
    names.push("root".into());
    let vocabulary = LabelVocabulary::from_labels(names).unwrap();
    let scale = 10f64.powi(rng.gen_range(-3..=3));
    let l = DMatrix::from_fn(labels, hidden, |_, _| rng.gen_range(-scale..scale));
    let b = DMatrix::from_fn(rank, hidden, |_, _| rng.gen_range(-scale..scale));
    ProbeParams::new(l, b, vocabulary).unwrap()
}

pub fn random_sentence(rng: &mut ChaCha8Rng, n: usize, hidden: usize) -> EmbeddedSentence {
    // Occasionally repeat rows to create exact distance ties.
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for _ in 0..n {
        if !rows.is_empty() && rng.gen_bool(0.1) {
            let k = rng.gen_range(0..rows.len());
            rows.push(rows[k].clone());
        } else {
            rows.push((0..hidden).map(|_| rng.gen_range(-3.0f32..3.0)).collect());
        }
    }
    EmbeddedSentence::from_rows(&rows).unwrap()
}

/// Per-sentence counts (label, head, las, undirected, root) computed from
/// edge sets.
pub fn edge_set_counts(gold: &GoldTree, pred: &PredictedTree) -> (usize, usize, usize, usize, bool) {
    const ROOT: usize = usize::MAX;
    let as_node = |h: Head| h.word().unwrap_or(ROOT);
    let gold_directed: HashSet<(usize, usize, &str)> = gold
        .tokens()
        .iter()
        .enumerate()
        .map(|(d, t)| (as_node(t.head), d, t.relation.as_str()))
        .collect();
    let gold_unlabeled: HashSet<(usize, usize)> = gold_directed.iter().map(|&(h, d, _)| (h, d)).collect();
    let gold_undirected: HashSet<(usize, usize)> = gold_unlabeled
        .iter()
        .filter(|(h, _)| *h != ROOT)
        .map(|&(h, d)| (h.min(d), h.max(d)))
        .collect();
    let gold_root = gold.root_index();

    let (mut label, mut head, mut las, mut und) = (0, 0, 0, 0);
    for d in 0..pred.heads.len() {
        let h = as_node(pred.heads[d]);
        let rel = pred.labels[d].as_str();
        label += usize::from(gold.tokens()[d].relation == rel);
        head += usize::from(gold_unlabeled.contains(&(h, d)));
        las += usize::from(gold_directed.contains(&(h, d, rel)));
        let undirected_ok = if d == gold_root {
            h == ROOT
        } else {
            h != ROOT && gold_undirected.contains(&(h.min(d), h.max(d)))
        };
        und += usize::from(undirected_ok);
    }
    (label, head, las, und, pred.root_index == gold_root)
}

pub fn random_prediction(rng: &mut ChaCha8Rng, n: usize, labels: &[&str]) -> PredictedTree {
    let heads = random_heads(n, rng);
    let root_index = heads.iter().position(|h| h.is_root()).unwrap();
    let labels = heads
        .iter()
        .map(|h| {
            if h.is_root() {
                "root".to_owned()
            } else {
                labels[rng.gen_range(0..labels.len())].to_owned()
            }
        })
        .collect();
    PredictedTree {
        heads,
        labels,
        root_index,
    }
}
