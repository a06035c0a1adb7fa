//! Corpora whose syntax is linearly recoverable by construction.
//!
//! Each word vector is `[label one-hot | path code | filler]`. The path code
//! of word `v` is the sum of unit vectors `e_u` over every non-root word `u`
//! on the path from the root to `v`, so the squared Euclidean distance
//! between two path codes is exactly their tree distance. Adjacent words are
//! therefore at distance 1 and all other pairs at least sqrt(2): the gold
//! tree is the unique minimum spanning tree of the path codes.

use nalgebra::DMatrix;
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embstore::EmbeddedSentence;
use crate::probe::ProbeParams;
use crate::treebank::{build_vocabulary, GoldTree, Head, Token, ROOT_LABEL};

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of non-root relation labels.
    pub relations: usize,
    /// Trailing dimensions filled with uniform noise in ±`noise`.
    pub filler_dims: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sentences: 500,
            min_len: 1,
            max_len: 16,
            relations: 8,
            filler_dims: 8,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Label names in vocabulary (sorted) order; `root` sorts last.
    pub fn label_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.relations).map(|k| format!("rel{k:02}")).collect();
        names.push(ROOT_LABEL.to_owned());
        names
    }

    pub fn hidden_dim(&self) -> usize {
        self.relations + 1 + self.max_len + self.filler_dims
    }

    fn path_offset(&self) -> usize {
        self.relations + 1
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub trees: Vec<GoldTree>,
    pub sentences: Vec<EmbeddedSentence>,
}

/// Random tree over `n` words: a random root, then every further word (in
/// random order) attaches to a uniformly chosen word already in the tree.
pub fn random_heads<R: Rng>(n: usize, rng: &mut R) -> Vec<Head> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut heads = vec![Head::Root; n];
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        heads[order[k]] = Head::Word(parent);
    }
    heads
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.min_len >= 1 && spec.min_len <= spec.max_len);
    assert!(spec.relations >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let names = spec.label_names();
    let dim = spec.hidden_dim();
    let offset = spec.path_offset();
    let noise = (spec.noise > 0.0).then(|| Uniform::new_inclusive(-spec.noise, spec.noise));

    let mut trees = Vec::with_capacity(spec.sentences);
    let mut sentences = Vec::with_capacity(spec.sentences);
    for _ in 0..spec.sentences {
        let n = rng.gen_range(spec.min_len..=spec.max_len);
        let heads = random_heads(n, &mut rng);
        let label_ids: Vec<usize> = heads
            .iter()
            .map(|h| match h {
                Head::Root => spec.relations,
                Head::Word(_) => rng.gen_range(0..spec.relations),
            })
            .collect();
        let tokens: Vec<Token> = heads
            .iter()
            .zip(&label_ids)
            .enumerate()
            .map(|(i, (&h, &l))| Token::new(i + 1, format!("w{i}"), h, names[l].clone()))
            .collect();
        let tree = GoldTree::new(tokens).expect("generated heads form a tree");

        let mut values = vec![0f32; n * dim];
        for (w, &l) in label_ids.iter().enumerate() {
            let row = &mut values[w * dim..(w + 1) * dim];
            row[l] = 1.0;
            let mut v = w;
            while let Head::Word(parent) = heads[v] {
                row[offset + v] = 1.0;
                v = parent;
            }
            if let Some(dist) = &noise {
                for x in &mut row[offset + spec.max_len..] {
                    *x = dist.sample(&mut rng);
                }
            }
        }
        trees.push(tree);
        sentences.push(EmbeddedSentence::new(dim, values).expect("rows have width dim"));
    }
    SyntheticCorpus { trees, sentences }
}

/// Hand-built probe that reads labels off the one-hot block (scaled by
/// `label_scale`) and projects onto the path code.
pub fn oracle_probe(spec: &SyntheticSpec, corpus: &SyntheticCorpus, label_scale: f64) -> ProbeParams {
    let vocabulary = build_vocabulary(&corpus.trees);
    let names = spec.label_names();
    let dim = spec.hidden_dim();
    let mut label_map = DMatrix::zeros(vocabulary.len(), dim);
    for (slot, name) in names.iter().enumerate() {
        if let Some(id) = vocabulary.id(name) {
            label_map[(id, slot)] = label_scale;
        }
    }
    let offset = spec.path_offset();
    let structure = DMatrix::from_fn(spec.max_len, dim, |r, c| if c == offset + r { 1.0 } else { 0.0 });
    ProbeParams::new(label_map, structure, vocabulary).expect("oracle probe shapes are consistent")
}
