use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Deserialize;
use synprobe::embstore::align_check;
use synprobe::metrics::{score_corpus, write_long_relation_rows, write_long_rows, EvalReport, ReportKey, LONG_HEADER};
use synprobe::probe::TrainConfig;
use synprobe::treebank::{GoldTree, DEFAULT_MAX_LEN};

use crate::eval::{predict, write_report_files, DEFAULT_TOP_K};
use crate::files::{
    create_dir, input_error, load_store, load_treebank, mark_failed, remove_marker, write_atomic, TreebankOptions,
};
use crate::train::{train_and_save, TrainInputs};

pub const REPORT_FILE: &str = "sweep.csv";

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML sweep specification.
    pub spec: PathBuf,
    /// Layers trained concurrently.
    #[arg(long, env = "SYNPROBE_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EvalSplit {
    pub name: String,
    pub conllu: PathBuf,
}

/// One model's layer grid. Relative paths resolve against the spec file.
#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SweepSpec {
    pub model: String,
    pub layers: Vec<u32>,
    pub train: PathBuf,
    pub dev: PathBuf,
    /// Splits every layer's probe is evaluated on.
    pub eval: Vec<EvalSplit>,
    /// Store path with `{split}`, `{model}` and `{layer}` placeholders.
    pub store_template: String,
    pub out: PathBuf,
    #[serde(default)]
    pub probe: TrainConfig,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_true")]
    pub strip_subtypes: bool,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

fn default_true() -> bool {
    true
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| input_error(format!("cannot read sweep spec {}: {e}", path.display())))?;
        let mut spec: SweepSpec = toml::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.train = base.join(&spec.train);
        spec.dev = base.join(&spec.dev);
        spec.out = base.join(&spec.out);
        for s in &mut spec.eval {
            s.conllu = base.join(&s.conllu);
        }
        spec.store_template = base.join(&spec.store_template).to_string_lossy().into_owned();
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(input_error("sweep lists no layers"));
        }
        if self.eval.is_empty() {
            return Err(input_error("sweep lists no evaluation splits"));
        }
        let mut names: Vec<&str> = self.eval.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.eval.len() {
            return Err(input_error("duplicate evaluation split name"));
        }
        let mut layers = self.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        if layers.len() != self.layers.len() {
            return Err(input_error("duplicate layer index"));
        }
        for key in ["{split}", "{layer}"] {
            if !self.store_template.contains(key) {
                return Err(input_error(format!("store template lacks {key}")));
            }
        }
        Ok(())
    }

    pub fn store_path(&self, split: &str, layer: u32) -> PathBuf {
        PathBuf::from(
            self.store_template
                .replace("{split}", split)
                .replace("{model}", &self.model)
                .replace("{layer}", &layer.to_string()),
        )
    }

    fn treebank_options(&self) -> TreebankOptions {
        TreebankOptions {
            strip_subtypes: self.strip_subtypes,
            max_len: Some(self.max_len),
        }
    }
}

struct Corpora {
    train: Vec<GoldTree>,
    dev: Vec<GoldTree>,
    eval: Vec<(String, Vec<GoldTree>)>,
}

impl Corpora {
    fn load(spec: &SweepSpec) -> Result<Self> {
        let options = spec.treebank_options();
        Ok(Corpora {
            train: load_treebank(&spec.train, options)?,
            dev: load_treebank(&spec.dev, options)?,
            eval: spec
                .eval
                .iter()
                .map(|s| Ok((s.name.clone(), load_treebank(&s.conllu, options)?)))
                .collect::<Result<_>>()?,
        })
    }

    fn splits(&self) -> impl Iterator<Item = (&str, &[GoldTree])> {
        [("train", self.train.as_slice()), ("dev", self.dev.as_slice())]
            .into_iter()
            .chain(self.eval.iter().map(|(n, t)| (n.as_str(), t.as_slice())))
    }
}

/// Reads every store the sweep needs and checks it against its treebank.
/// Stores are dropped again; layers reload them when they run.
fn check_stores(spec: &SweepSpec, corpora: &Corpora) -> Result<()> {
    let mut problems = Vec::new();
    for &layer in &spec.layers {
        let mut dim = None;
        for (split, trees) in corpora.splits() {
            let path = spec.store_path(split, layer);
            match load_store(&path) {
                Err(e) => problems.push(format!("{e}")),
                Ok((header, sentences)) => {
                    let report = align_check(trees, &sentences);
                    if !report.passed() {
                        problems.push(format!("{}: {report}", path.display()));
                    }
                    match dim {
                        None => dim = Some(header.hidden_dim),
                        Some(d) if d != header.hidden_dim => problems.push(format!(
                            "{}: hidden dimension {} differs from {d} in other layer {layer} stores",
                            path.display(),
                            header.hidden_dim
                        )),
                        Some(_) => {}
                    }
                }
            }
        }
        if let Some(d) = dim {
            if spec.probe.rank == 0 || spec.probe.rank > d as usize {
                problems.push(format!("rank {} must be in 1..={d} for layer {layer}", spec.probe.rank));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(input_error(problems.join("\n")))
    }
}

fn layer_dir(spec: &SweepSpec, layer: u32) -> PathBuf {
    spec.out.join(format!("L{layer}"))
}

/// Evaluation reports of one layer, by split.
type LayerReports = Vec<(String, EvalReport)>;

fn run_layer(spec: &SweepSpec, corpora: &Corpora, layer: u32) -> Result<LayerReports> {
    let dir = layer_dir(spec, layer);
    let train_store = spec.store_path("train", layer);
    let dev_store = spec.store_path("dev", layer);
    let inputs = TrainInputs {
        train_trees: &corpora.train,
        dev_trees: &corpora.dev,
        train_store: &train_store,
        dev_store: &dev_store,
    };
    let record = train_and_save(&inputs, &spec.probe, &dir)?;
    let params = record.final_params;

    let mut reports = Vec::new();
    for (split, trees) in &corpora.eval {
        let (_, predictions) = predict(&params, trees, &spec.store_path(split, layer))?;
        let report = score_corpus(trees, &predictions)?;
        let key = ReportKey {
            model: &spec.model,
            layer,
            split,
        };
        write_report_files(&dir, &key, &report, spec.top_k)?;
        reports.push((split.clone(), report));
    }
    Ok(reports)
}

/// Long-format report over all finished layers, in spec order.
fn sweep_csv(spec: &SweepSpec, results: &[(u32, LayerReports)]) -> Result<(Vec<u8>, usize)> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LONG_HEADER)?;
    let mut rows = 0;
    for (layer, reports) in results {
        for (split, report) in reports {
            let key = ReportKey {
                model: &spec.model,
                layer: *layer,
                split,
            };
            rows += write_long_rows(&mut w, &key, report)?;
        }
    }
    for (layer, reports) in results {
        for (split, report) in reports {
            let key = ReportKey {
                model: &spec.model,
                layer: *layer,
                split,
            };
            rows += write_long_relation_rows(&mut w, &key, report, Some(spec.top_k))?;
        }
    }
    Ok((w.into_inner().map_err(|e| e.into_error())?, rows))
}

/// Outcome of a sweep that ran to the end.
pub struct SweepOutcome {
    pub failed_layers: Vec<u32>,
    pub rows: usize,
    pub report: PathBuf,
}

pub fn sweep(spec: &SweepSpec, jobs: Option<usize>) -> Result<SweepOutcome> {
    let corpora = Corpora::load(spec)?;
    check_stores(spec, &corpora)?;
    create_dir(&spec.out)?;

    let threads = jobs
        .unwrap_or_else(|| spec.layers.len().min(rayon::current_num_threads()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")?;
    let outcomes: Vec<(u32, Result<LayerReports>)> = pool.install(|| {
        spec.layers
            .par_iter()
            .map(|&layer| {
                let dir = layer_dir(spec, layer);
                let result = run_layer(spec, &corpora, layer);
                match &result {
                    Ok(_) => {
                        remove_marker(&dir);
                        log::info!("layer {layer} done");
                    }
                    Err(e) => {
                        log::error!("layer {layer} failed: {e:#}");
                        mark_failed(&dir, e);
                    }
                }
                (layer, result)
            })
            .collect()
    });

    let mut failed_layers = Vec::new();
    let mut finished = Vec::new();
    for (layer, result) in outcomes {
        match result {
            Ok(r) => finished.push((layer, r)),
            Err(_) => failed_layers.push(layer),
        }
    }
    let report = spec.out.join(REPORT_FILE);
    let (bytes, rows) = sweep_csv(spec, &finished)?;
    write_atomic(&report, &bytes)?;
    Ok(SweepOutcome {
        failed_layers,
        rows,
        report,
    })
}

/// Some layers failed; the rest were reported.
#[derive(Debug)]
pub struct PartialFailure(pub Vec<u32>);

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layers {:?} failed; see the .failed markers", self.0)
    }
}

impl std::error::Error for PartialFailure {}

pub fn run(args: &SweepArgs) -> Result<()> {
    if args.jobs == Some(0) {
        return Err(input_error("--jobs must be at least 1"));
    }
    let spec = SweepSpec::load(&args.spec)?;
    let outcome = sweep(&spec, args.jobs)?;
    println!("wrote {} rows to {}", outcome.rows, outcome.report.display());
    if outcome.failed_layers.is_empty() {
        Ok(())
    } else {
        Err(PartialFailure(outcome.failed_layers).into())
    }
}
