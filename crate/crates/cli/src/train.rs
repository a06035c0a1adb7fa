use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use serde::Serialize;
use synprobe::embstore::EmbeddingHeader;
use synprobe::probe::{save_probe, train, AlignedSplit, EpochStats, LossWeights, ProbeError, TrainConfig, TrainRecord};
use synprobe::treebank::GoldTree;

use crate::files::{
    create_dir, input_error, load_store, load_treebank, mark_failed, remove_marker, write_atomic, TreebankOptions,
};
use crate::TreebankArgs;

pub const CHECKPOINT_FILE: &str = "probe.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const RECORD_FILE: &str = "train_record.json";

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_conllu: PathBuf,
    #[arg(long)]
    pub dev_conllu: PathBuf,
    #[arg(long)]
    pub train_emb: PathBuf,
    #[arg(long)]
    pub dev_emb: PathBuf,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub rank: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub step_size: f64,
    /// Epochs without dev LAS improvement before stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 1.0)]
    pub label_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub structure_weight: f64,
    #[command(flatten)]
    pub treebank: TreebankArgs,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            rank: self.rank,
            step_size: self.step_size,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            loss_weights: LossWeights {
                label: self.label_weight,
                structure: self.structure_weight,
            },
        }
    }
}

/// Summary written next to the checkpoint.
#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct RecordDoc<'a> {
    model_id: &'a str,
    layer_index: u32,
    config: &'a TrainConfig,
    best_epoch: Option<usize>,
    epochs: &'a [EpochStats],
}

pub struct TrainInputs<'a> {
    pub train_trees: &'a [GoldTree],
    pub dev_trees: &'a [GoldTree],
    pub train_store: &'a Path,
    pub dev_store: &'a Path,
}

/// Loads both stores, trains, and writes checkpoint, log and record into `out`.
pub fn train_and_save(inputs: &TrainInputs<'_>, config: &TrainConfig, out: &Path) -> Result<TrainRecord> {
    let (train_header, train_sentences) = load_store(inputs.train_store)?;
    let (dev_header, dev_sentences) = load_store(inputs.dev_store)?;
    check_same_source(&train_header, &dev_header)?;

    let train_split = AlignedSplit::new(inputs.train_trees, &train_sentences)
        .map_err(|e| input_error(format!("{}: {e}", inputs.train_store.display())))?;
    let dev_split = AlignedSplit::new(inputs.dev_trees, &dev_sentences)
        .map_err(|e| input_error(format!("{}: {e}", inputs.dev_store.display())))?;
    let mut record = train(train_split, dev_split, config).map_err(|e| match e {
        ProbeError::Config(_) | ProbeError::Shape(_) | ProbeError::Alignment(_) => input_error(e.to_string()),
        other => anyhow::Error::new(other).context("training failed"),
    })?;
    record.final_params.model_id = train_header.model_id.clone();
    record.final_params.layer_index = train_header.layer_index;

    create_dir(out)?;
    write_atomic(&out.join(CHECKPOINT_FILE), save_probe(&record.final_params).as_bytes())?;
    write_atomic(&out.join(LOG_FILE), &epoch_log(&record)?)?;
    let doc = RecordDoc {
        model_id: &train_header.model_id,
        layer_index: train_header.layer_index,
        config,
        best_epoch: record.best_epoch,
        epochs: &record.epochs,
    };
    let mut json = serde_json::to_vec_pretty(&doc)?;
    json.push(b'\n');
    write_atomic(&out.join(RECORD_FILE), &json)?;
    Ok(record)
}

fn check_same_source(train: &EmbeddingHeader, dev: &EmbeddingHeader) -> Result<()> {
    if train.hidden_dim != dev.hidden_dim {
        return Err(input_error(format!(
            "train store has hidden dimension {} but dev store has {}",
            train.hidden_dim, dev.hidden_dim
        )));
    }
    if train.model_id != dev.model_id || train.layer_index != dev.layer_index {
        log::warn!(
            "train store is {} layer {}, dev store is {} layer {}",
            train.model_id,
            train.layer_index,
            dev.model_id,
            dev.layer_index
        );
    }
    Ok(())
}

fn epoch_log(record: &TrainRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "epoch",
        "labelLoss",
        "structuralLoss",
        "devLas",
        "devUas",
        "devLabel",
        "best",
    ])?;
    for e in &record.epochs {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.label_loss),
            format!("{:.6}", e.structural_loss),
            format!("{:.2}", e.dev_las),
            format!("{:.2}", e.dev_uas),
            format!("{:.2}", e.dev_label),
            (record.best_epoch == Some(e.epoch)).to_string(),
        ])?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let options: TreebankOptions = args.treebank.options();
    let train_trees = load_treebank(&args.train_conllu, options)?;
    let dev_trees = load_treebank(&args.dev_conllu, options)?;
    let inputs = TrainInputs {
        train_trees: &train_trees,
        dev_trees: &dev_trees,
        train_store: &args.train_emb,
        dev_store: &args.dev_emb,
    };
    let record = train_and_save(&inputs, &args.config(), &args.out).inspect_err(|e| {
        if args.out.exists() {
            mark_failed(&args.out, e);
        }
    })?;
    remove_marker(&args.out);
    match record.best_epoch {
        Some(best) => {
            let e = &record.epochs[best];
            println!(
                "trained {} epochs; best epoch {best}: dev LAS {:.2} UAS {:.2} LABEL {:.2}",
                record.epochs.len(),
                e.dev_las,
                e.dev_uas,
                e.dev_label
            );
        }
        None => println!("no epochs run; saved initial parameters"),
    }
    println!("wrote {}", args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}
