//! CoNLL-U treebanks as gold dependency trees.
//!
//! Only the basic-tree columns (ID, FORM, HEAD, DEPREL) are interpreted. The
//! remaining columns are carried through untouched so that a parsed corpus
//! can be written back out. Multiword-token ranges (`1-2`) and empty nodes
//! (`3.1`) are skipped: in UD basic trees the syntactic words carry the
//! annotation.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label carried by the root word of every UD tree.
pub const ROOT_LABEL: &str = "root";

/// Default sentence length limit, in syntactic words.
pub const DEFAULT_MAX_LEN: usize = 75;

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("sentence {sentence} (line {line}): {message}")]
    Structure {
        sentence: usize,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Head of a word: the artificial root or another word (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Head {
    Root,
    Word(usize),
}

impl Head {
    pub fn word(self) -> Option<usize> {
        match self {
            Head::Root => None,
            Head::Word(w) => Some(w),
        }
    }

    pub fn is_root(self) -> bool {
        matches!(self, Head::Root)
    }

    /// The CoNLL-U HEAD column value (1-based, 0 for root).
    pub fn conllu_value(self) -> usize {
        match self {
            Head::Root => 0,
            Head::Word(w) => w + 1,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.conllu_value())
    }
}

/// The CoNLL-U columns that are not interpreted, in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpaqueColumns {
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    pub deps: String,
    pub misc: String,
}

impl Default for OpaqueColumns {
    fn default() -> Self {
        let u = || "_".to_owned();
        OpaqueColumns {
            lemma: u(),
            upos: u(),
            xpos: u(),
            feats: u(),
            deps: u(),
            misc: u(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    /// 1-based position of the word in its sentence.
    pub index: usize,
    pub form: String,
    pub head: Head,
    pub relation: String,
    pub columns: OpaqueColumns,
}

impl Token {
    pub fn new(index: usize, form: impl Into<String>, head: Head, relation: impl Into<String>) -> Self {
        Token {
            index,
            form: form.into(),
            head,
            relation: relation.into(),
            columns: OpaqueColumns::default(),
        }
    }
}

/// A validated dependency tree over the syntactic words of one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldTree {
    tokens: Vec<Token>,
    root_index: usize,
    comments: Vec<String>,
}

/// Why a head assignment is not a tree.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TreeShapeError {
    #[error("empty sentence")]
    Empty,
    #[error("word {0} is its own head")]
    SelfLoop(usize),
    #[error("word {word} has head {head} but the sentence has {len} words")]
    HeadOutOfRange { word: usize, head: usize, len: usize },
    #[error("no word is attached to the root")]
    NoRoot,
    #[error("words {0} and {1} are both attached to the root")]
    MultipleRoots(usize, usize),
    #[error("word {0} is not reachable from the root (cycle)")]
    Unreachable(usize),
}

/// Checks that `heads` (0-based) form a single rooted tree and returns the root.
pub fn check_tree_shape(heads: &[Head]) -> Result<usize, TreeShapeError> {
    if heads.is_empty() {
        return Err(TreeShapeError::Empty);
    }
    let n = heads.len();
    let mut root = None;
    for (w, head) in heads.iter().enumerate() {
        match *head {
            Head::Root => {
                if let Some(r) = root {
                    return Err(TreeShapeError::MultipleRoots(r + 1, w + 1));
                }
                root = Some(w);
            }
            Head::Word(h) if h == w => return Err(TreeShapeError::SelfLoop(w + 1)),
            Head::Word(h) if h >= n => {
                return Err(TreeShapeError::HeadOutOfRange {
                    word: w + 1,
                    head: h + 1,
                    len: n,
                })
            }
            Head::Word(_) => {}
        }
    }
    let root = root.ok_or(TreeShapeError::NoRoot)?;
    let children = children_lists(heads);
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        for &c in &children[v] {
            if !seen[c] {
                seen[c] = true;
                stack.push(c);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(w) => Err(TreeShapeError::Unreachable(w + 1)),
        None => Ok(root),
    }
}

fn children_lists(heads: &[Head]) -> Vec<Vec<usize>> {
    let mut children = vec![Vec::new(); heads.len()];
    for (w, head) in heads.iter().enumerate() {
        if let Head::Word(h) = *head {
            if h < heads.len() {
                children[h].push(w);
            }
        }
    }
    children
}

impl GoldTree {
    /// Builds a tree from tokens, renumbering their `index` fields.
    pub fn new(mut tokens: Vec<Token>) -> Result<Self, TreeShapeError> {
        for (i, t) in tokens.iter_mut().enumerate() {
            t.index = i + 1;
        }
        let heads: Vec<Head> = tokens.iter().map(|t| t.head).collect();
        let root_index = check_tree_shape(&heads)?;
        Ok(GoldTree {
            tokens,
            root_index,
            comments: Vec::new(),
        })
    }

    /// Convenience constructor from `(form, conllu_head, relation)` triples
    /// where `conllu_head` is 1-based and 0 marks the root.
    pub fn from_triples<S: AsRef<str>>(triples: &[(S, usize, S)]) -> Result<Self, TreeShapeError> {
        let tokens = triples
            .iter()
            .enumerate()
            .map(|(i, (form, head, rel))| {
                let head = if *head == 0 { Head::Root } else { Head::Word(head - 1) };
                Token::new(i + 1, form.as_ref(), head, rel.as_ref())
            })
            .collect();
        GoldTree::new(tokens)
    }

    pub fn with_comments(mut self, comments: Vec<String>) -> Self {
        self.comments = comments;
        self
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    /// Comment lines without the leading `#`.
    pub fn comments(&self) -> &[String] {
        &self.comments
    }

    pub fn heads(&self) -> Vec<Head> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.relation.as_str())
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.form.as_str())
    }

    /// Value of a `# sent_id = ...` comment, if present.
    pub fn sent_id(&self) -> Option<&str> {
        self.comments.iter().find_map(|c| {
            let (key, value) = c.split_once('=')?;
            (key.trim() == "sent_id").then(|| value.trim())
        })
    }

    /// Words in breadth-first order from the root, paired with their parent.
    pub fn top_down_order(&self) -> Vec<(usize, Option<usize>)> {
        let children = children_lists(&self.heads());
        let mut order = Vec::with_capacity(self.len());
        let mut queue = VecDeque::from([(self.root_index, None)]);
        while let Some((v, parent)) = queue.pop_front() {
            order.push((v, parent));
            queue.extend(children[v].iter().map(|&c| (c, Some(v))));
        }
        order
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParseOptions {
    /// Strip relation subtypes at the first ':' (`nmod:poss` → `nmod`).
    pub strip_subtypes: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { strip_subtypes: true }
    }
}

/// Base relation of a possibly subtyped UD label.
pub fn base_relation(relation: &str) -> &str {
    relation.split(':').next().unwrap_or(relation)
}

struct PendingSentence {
    first_line: usize,
    comments: Vec<String>,
    tokens: Vec<Token>,
    head_lines: Vec<usize>,
}

impl PendingSentence {
    fn new(line: usize) -> Self {
        PendingSentence {
            first_line: line,
            comments: Vec::new(),
            tokens: Vec::new(),
            head_lines: Vec::new(),
        }
    }

    fn is_empty(&self) -> bool {
        self.comments.is_empty() && self.tokens.is_empty()
    }

    fn finish(self, ordinal: usize) -> Result<Option<GoldTree>, TreebankError> {
        if self.tokens.is_empty() {
            // Comment-only blocks carry no tree.
            return Ok(None);
        }
        let heads: Vec<Head> = self.tokens.iter().map(|t| t.head).collect();
        match check_tree_shape(&heads) {
            Ok(root_index) => Ok(Some(GoldTree {
                tokens: self.tokens,
                root_index,
                comments: self.comments,
            })),
            Err(e) => {
                let line = match e {
                    TreeShapeError::SelfLoop(w)
                    | TreeShapeError::HeadOutOfRange { word: w, .. }
                    | TreeShapeError::Unreachable(w) => self.head_lines[w - 1],
                    TreeShapeError::MultipleRoots(_, w) => self.head_lines[w - 1],
                    _ => self.first_line,
                };
                Err(TreebankError::Structure {
                    sentence: ordinal,
                    line,
                    message: e.to_string(),
                })
            }
        }
    }
}

/// Parses a CoNLL-U document into gold trees. Sentence ordinals in errors
/// are 0-based; line numbers are 1-based.
pub fn parse_conllu(text: &str, options: ParseOptions) -> Result<Vec<GoldTree>, TreebankError> {
    let mut trees = Vec::new();
    let mut current = PendingSentence::new(1);

    for (i, raw) in text.split('\n').enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);

        if line.trim().is_empty() {
            if !current.is_empty() {
                let done = std::mem::replace(&mut current, PendingSentence::new(lineno + 1));
                if let Some(tree) = done.finish(trees.len())? {
                    trees.push(tree);
                }
            } else {
                current.first_line = lineno + 1;
            }
            continue;
        }

        if let Some(comment) = line.strip_prefix('#') {
            current.comments.push(comment.to_owned());
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(TreebankError::Parse {
                line: lineno,
                message: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }

        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let index: usize = id.parse().map_err(|_| TreebankError::Parse {
            line: lineno,
            message: format!("invalid word id {id:?}"),
        })?;
        if index != current.tokens.len() + 1 {
            return Err(TreebankError::Parse {
                line: lineno,
                message: format!("word id {index} out of sequence, expected {}", current.tokens.len() + 1),
            });
        }

        let head_value: usize = cols[6].parse().map_err(|_| TreebankError::Parse {
            line: lineno,
            message: format!("non-numeric head {:?}", cols[6]),
        })?;
        let head = match head_value {
            0 => Head::Root,
            h => Head::Word(h - 1),
        };

        let deprel = cols[7];
        if deprel.is_empty() || deprel == "_" {
            return Err(TreebankError::Parse {
                line: lineno,
                message: "missing dependency relation".to_owned(),
            });
        }
        let relation = if options.strip_subtypes {
            base_relation(deprel)
        } else {
            deprel
        };

        current.tokens.push(Token {
            index,
            form: cols[1].to_owned(),
            head,
            relation: relation.to_owned(),
            columns: OpaqueColumns {
                lemma: cols[2].to_owned(),
                upos: cols[3].to_owned(),
                xpos: cols[4].to_owned(),
                feats: cols[5].to_owned(),
                deps: cols[8].to_owned(),
                misc: cols[9].to_owned(),
            },
        });
        current.head_lines.push(lineno);
    }

    if !current.is_empty() {
        if let Some(tree) = current.finish(trees.len())? {
            trees.push(tree);
        }
    }
    Ok(trees)
}

/// Writes trees as CoNLL-U (LF line endings).
pub fn write_conllu<W: Write>(trees: &[GoldTree], mut sink: W) -> io::Result<()> {
    for tree in trees {
        write_sentence(&mut sink, tree, tree.heads().iter().copied(), tree.relations())?;
    }
    Ok(())
}

/// Writes one sentence, taking forms and opaque columns from `tree` and
/// HEAD/DEPREL from the given iterators.
pub(crate) fn write_sentence<'a, W, H, R>(sink: &mut W, tree: &GoldTree, heads: H, relations: R) -> io::Result<()>
where
    W: Write,
    H: Iterator<Item = Head>,
    R: Iterator<Item = &'a str>,
{
    for comment in &tree.comments {
        writeln!(sink, "#{comment}")?;
    }
    for ((token, head), rel) in tree.tokens.iter().zip(heads).zip(relations) {
        let c = &token.columns;
        writeln!(
            sink,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            token.index, token.form, c.lemma, c.upos, c.xpos, c.feats, head, rel, c.deps, c.misc
        )?;
    }
    writeln!(sink)
}

/// Result of applying the sentence-length filter.
#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub kept: Vec<GoldTree>,
    pub removed: usize,
}

/// Keeps the trees with at most `max_len` words, preserving order.
pub fn filter_corpus(trees: Vec<GoldTree>, max_len: usize) -> FilterOutcome {
    assert!(max_len >= 1, "max_len must be at least 1");
    let total = trees.len();
    let kept: Vec<GoldTree> = trees.into_iter().filter(|t| t.len() <= max_len).collect();
    FilterOutcome {
        removed: total - kept.len(),
        kept,
    }
}

/// Symmetric matrix of tree (edge-count) distances between words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u32>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// All-pairs path lengths in the tree.
///
/// Words are visited top-down; a word's distances to everything visited
/// before it are its parent's distances plus one.
pub fn tree_distances(tree: &GoldTree) -> DistanceMatrix {
    let n = tree.len();
    let mut data = vec![0u32; n * n];
    let order = tree.top_down_order();
    for (k, &(v, parent)) in order.iter().enumerate() {
        let Some(p) = parent else { continue };
        for &(u, _) in &order[..k] {
            let d = data[p * n + u] + 1;
            data[v * n + u] = d;
            data[u * n + v] = d;
        }
    }
    DistanceMatrix { n, data }
}

/// Relation labels with stable integer ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocabulary {
    labels: Vec<String>,
    lookup: HashMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("duplicate label {0:?}")]
    Duplicate(String),
    #[error("vocabulary has no {ROOT_LABEL:?} label")]
    MissingRoot,
}

impl LabelVocabulary {
    /// Builds a vocabulary from labels in the given order.
    pub fn from_labels(labels: Vec<String>) -> Result<Self, VocabularyError> {
        let mut lookup = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if lookup.insert(l.clone(), i).is_some() {
                return Err(VocabularyError::Duplicate(l.clone()));
            }
        }
        if !lookup.contains_key(ROOT_LABEL) {
            return Err(VocabularyError::MissingRoot);
        }
        Ok(LabelVocabulary { labels, lookup })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.lookup.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn root_id(&self) -> usize {
        self.lookup[ROOT_LABEL]
    }
}

/// Lexicographically sorted vocabulary of every relation in the corpus.
/// `root` is always included.
pub fn build_vocabulary(trees: &[GoldTree]) -> LabelVocabulary {
    let mut set: BTreeSet<&str> = trees.iter().flat_map(|t| t.relations()).collect();
    set.insert(ROOT_LABEL);
    LabelVocabulary::from_labels(set.into_iter().map(str::to_owned).collect())
        .expect("sorted set has unique labels including root")
}
