use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synprobe::embstore::{write_store, EmbeddedSentence, EmbeddingHeader};
use synprobe::synthetic::{generate, SyntheticSpec};
use synprobe::treebank::{write_conllu, DEFAULT_MAX_LEN};

use crate::files::{create_dir, input_error, load_treebank, write_atomic, TreebankOptions};

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub conllu: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
}

/// Writes the sentences of at most `max_len` words. Relations are kept as
/// written; multiword-token and empty-node lines are not copied.
pub fn run_filter(args: &FilterArgs) -> Result<()> {
    let all = load_treebank(
        &args.conllu,
        TreebankOptions {
            strip_subtypes: false,
            max_len: None,
        },
    )?;
    let total = all.len();
    let kept: Vec<_> = all.into_iter().filter(|t| t.len() <= args.max_len).collect();
    let mut text = Vec::new();
    write_conllu(&kept, &mut text)?;
    write_atomic(&args.out, &text)?;
    println!(
        "kept {} of {total} sentences ({} removed) in {}",
        kept.len(),
        total - kept.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for treebanks, stores and a sweep spec.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub model: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub layers: Vec<u32>,
    #[arg(long, default_value_t = 400)]
    pub train_sentences: usize,
    /// Sentences in each of dev and test.
    #[arg(long, default_value_t = 100)]
    pub eval_sentences: usize,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    #[arg(long, default_value_t = 8)]
    pub relations: usize,
    #[arg(long, default_value_t = 8)]
    pub filler_dims: usize,
    /// Noise amplitude added per layer position: the k-th listed layer gets
    /// uniform noise in ±k·noise on every dimension.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    if args.layers.is_empty() || args.max_len == 0 || args.relations == 0 {
        return Err(input_error("need at least one layer, word and relation"));
    }
    if !(args.noise >= 0.0 && args.noise.is_finite()) {
        return Err(input_error("noise must be finite and non-negative"));
    }
    create_dir(&args.out)?;
    let base = SyntheticSpec {
        max_len: args.max_len,
        relations: args.relations,
        filler_dims: args.filler_dims,
        ..Default::default()
    };
    for (split_index, split) in SPLITS.iter().enumerate() {
        let corpus = generate(&SyntheticSpec {
            sentences: if *split == "train" {
                args.train_sentences
            } else {
                args.eval_sentences
            },
            seed: args.seed.wrapping_add(split_index as u64),
            ..base.clone()
        });
        let mut text = Vec::new();
        write_conllu(&corpus.trees, &mut text)?;
        write_atomic(&args.out.join(format!("{split}.conllu")), &text)?;

        for (position, &layer) in args.layers.iter().enumerate() {
            let amplitude = args.noise * position as f32;
            let sentences = if amplitude > 0.0 {
                let seed = args.seed ^ (u64::from(layer) << 32) ^ (split_index as u64) << 16;
                perturb(&corpus.sentences, amplitude, seed)?
            } else {
                corpus.sentences.clone()
            };
            let header = EmbeddingHeader::new(
                args.model.clone(),
                layer,
                base.hidden_dim() as u32,
                sentences.len() as u32,
            );
            let mut bytes = Vec::new();
            write_store(&header, &sentences, &mut bytes)?;
            write_atomic(&args.out.join(format!("{split}.{}.L{layer}.wemb", args.model)), &bytes)?;
        }
    }

    let layers: Vec<String> = args.layers.iter().map(u32::to_string).collect();
    let spec = format!(
        "model = \"{model}\"\nlayers = [{layers}]\ntrain = \"train.conllu\"\ndev = \"dev.conllu\"\n\
         storeTemplate = \"{{split}}.{{model}}.L{{layer}}.wemb\"\nout = \"sweep\"\n\n\
         [[eval]]\nname = \"test\"\nconllu = \"test.conllu\"\n\n[probe]\nrank = {rank}\nseed = {seed}\n",
        model = args.model,
        layers = layers.join(", "),
        rank = base.hidden_dim().min(32),
        seed = args.seed,
    );
    write_atomic(&args.out.join("sweep.toml"), spec.as_bytes())?;
    println!("wrote synthetic data and sweep.toml to {}", args.out.display());
    Ok(())
}

fn perturb(sentences: &[EmbeddedSentence], amplitude: f32, seed: u64) -> Result<Vec<EmbeddedSentence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-amplitude, amplitude);
    sentences
        .iter()
        .map(|s| {
            let values = s.values().iter().map(|v| v + dist.sample(&mut rng)).collect();
            Ok(EmbeddedSentence::new(s.dim(), values)?)
        })
        .collect()
}
