use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use synprobe::decoder::{decode_corpus, write_predictions, PredictedTree};
use synprobe::embstore::EmbeddingHeader;
use synprobe::metrics::{score_corpus, write_long_rows, write_relation_table, EvalReport, ReportKey, LONG_HEADER};
use synprobe::probe::ProbeParams;
use synprobe::treebank::GoldTree;

use crate::files::{
    create_dir, input_error, load_checkpoint, load_store, load_treebank, mark_failed, remove_marker, write_atomic,
};
use crate::TreebankArgs;

pub const DEFAULT_TOP_K: usize = 15;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub conllu: PathBuf,
    #[arg(long)]
    pub emb: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Split name used in file names and report rows; defaults to the treebank file stem.
    #[arg(long)]
    pub split: Option<String>,
    /// Relations listed in the per-relation table, most frequent first.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Also write the decoded trees as CoNLL-U.
    #[arg(long)]
    pub emit_predictions: bool,
    #[command(flatten)]
    pub treebank: TreebankArgs,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub probe: PathBuf,
    /// Treebank the store was extracted from; its non-tree columns are copied.
    #[arg(long)]
    pub conllu: PathBuf,
    #[arg(long)]
    pub emb: PathBuf,
    /// Output CoNLL-U file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub treebank: TreebankArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report written by `eval`.
    pub report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
}

fn check_dims(params: &ProbeParams, header: &EmbeddingHeader, store: &Path) -> Result<()> {
    if params.hidden_dim() != header.hidden_dim as usize {
        return Err(input_error(format!(
            "probe expects hidden dimension {} but {} has {}",
            params.hidden_dim(),
            store.display(),
            header.hidden_dim
        )));
    }
    if !params.model_id.is_empty() && (params.model_id != header.model_id || params.layer_index != header.layer_index) {
        log::warn!(
            "probe was trained on {} layer {}, store is {} layer {}",
            params.model_id,
            params.layer_index,
            header.model_id,
            header.layer_index
        );
    }
    Ok(())
}

/// Decodes every sentence of `store` after checking it against the probe and treebank.
pub fn predict(
    params: &ProbeParams,
    trees: &[GoldTree],
    store: &Path,
) -> Result<(EmbeddingHeader, Vec<PredictedTree>)> {
    let (header, sentences) = load_store(store)?;
    check_dims(params, &header, store)?;
    let predictions =
        decode_corpus(params, &sentences, trees).map_err(|e| input_error(format!("{}: {e}", store.display())))?;
    Ok((header, predictions))
}

pub struct EvalOutputs {
    pub report: EvalReport,
    pub files: Vec<PathBuf>,
}

/// Writes `<split>_metrics.csv`, `<split>_relations.csv` and `<split>_report.json`.
pub fn write_report_files(out: &Path, key: &ReportKey<'_>, report: &EvalReport, top_k: usize) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let metrics = out.join(format!("{}_metrics.csv", key.split));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LONG_HEADER)?;
    write_long_rows(&mut w, key, report)?;
    write_atomic(&metrics, &w.into_inner().map_err(|e| e.into_error())?)?;

    let relations = out.join(format!("{}_relations.csv", key.split));
    let mut table = Vec::new();
    write_relation_table(&mut table, report, Some(top_k))?;
    write_atomic(&relations, &table)?;

    let json_path = out.join(format!("{}_report.json", key.split));
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write_atomic(&json_path, &json)?;
    Ok(vec![metrics, relations, json_path])
}

pub fn evaluate(args: &EvalArgs) -> Result<EvalOutputs> {
    let params = load_checkpoint(&args.probe)?;
    let trees = load_treebank(&args.conllu, args.treebank.options())?;
    let (header, predictions) = predict(&params, &trees, &args.emb)?;
    let report = score_corpus(&trees, &predictions).map_err(|e| input_error(e.to_string()))?;

    let split = match &args.split {
        Some(s) => s.clone(),
        None => args
            .conllu
            .file_stem()
            .map_or_else(|| "eval".to_owned(), |s| s.to_string_lossy().into_owned()),
    };
    let key = ReportKey {
        model: &header.model_id,
        layer: header.layer_index,
        split: &split,
    };
    let mut files = write_report_files(&args.out, &key, &report, args.top_k)?;
    if args.emit_predictions {
        let path = args.out.join(format!("{split}_predictions.conllu"));
        let mut text = Vec::new();
        write_predictions(&trees, &predictions, &mut text)?;
        write_atomic(&path, &text)?;
        files.push(path);
    }
    Ok(EvalOutputs { report, files })
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let outputs = evaluate(args).inspect_err(|e| {
        if args.out.exists() {
            mark_failed(&args.out, e);
        }
    })?;
    remove_marker(&args.out);
    print_summary(&outputs.report);
    for f in &outputs.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn run_decode(args: &DecodeArgs) -> Result<()> {
    let params = load_checkpoint(&args.probe)?;
    let trees = load_treebank(&args.conllu, args.treebank.options())?;
    let (_, predictions) = predict(&params, &trees, &args.emb)?;
    let mut text = Vec::new();
    write_predictions(&trees, &predictions, &mut text)?;
    write_atomic(&args.out, &text)?;
    println!("decoded {} sentences into {}", predictions.len(), args.out.display());
    Ok(())
}

pub fn run_report(args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.report)
        .map_err(|e| input_error(format!("cannot read {}: {e}", args.report.display())))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", args.report.display())))?;
    print_summary(&report);
    println!();
    println!(
        "{:<16} {:>8} {:>11} {:>9}",
        "relation", "count", "attachment", "labeling"
    );
    for (rel, s) in report.top_relations(Some(args.top_k)) {
        println!(
            "{rel:<16} {:>8} {:>11.2} {:>9.2}",
            s.gold_count, s.attachment_score, s.labeling_accuracy
        );
    }
    Ok(())
}

fn print_summary(report: &EvalReport) {
    println!("{} sentences, {} words", report.sentence_count, report.token_count);
    let line: Vec<String> = report.metrics().iter().map(|(n, v)| format!("{n} {v:.2}")).collect();
    println!("{}", line.join("  "));
}
