use std::fmt;
use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use synprobe::embstore::{read_store, EmbeddedSentence, EmbeddingHeader};
use synprobe::probe::{load_probe, ProbeParams};
use synprobe::treebank::{filter_corpus, parse_conllu, GoldTree, ParseOptions};

/// Bad or missing input. Commands failing with this exit with code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(InputError(message.into()))
}

/// How treebank files are read before use.
#[derive(Clone, Copy, Debug)]
pub struct TreebankOptions {
    pub strip_subtypes: bool,
    /// Sentences longer than this many words are dropped; `None` keeps all.
    pub max_len: Option<usize>,
}

pub fn load_treebank(path: &Path, options: TreebankOptions) -> Result<Vec<GoldTree>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(input_error(format!("treebank not found: {}", path.display())))
        }
        Err(e) => return Err(input_error(format!("cannot read {}: {e}", path.display()))),
    };
    let trees = parse_conllu(
        &text,
        ParseOptions {
            strip_subtypes: options.strip_subtypes,
        },
    )
    .map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let Some(max_len) = options.max_len else {
        return Ok(trees);
    };
    let outcome = filter_corpus(trees, max_len);
    if outcome.removed > 0 {
        log::info!(
            "{}: dropped {} sentences longer than {max_len} words",
            path.display(),
            outcome.removed
        );
    }
    Ok(outcome.kept)
}

pub fn load_store(path: &Path) -> Result<(EmbeddingHeader, Vec<EmbeddedSentence>)> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(input_error(format!("store not found: {}", path.display())))
        }
        Err(e) => return Err(input_error(format!("cannot open {}: {e}", path.display()))),
    };
    read_store(BufReader::new(file)).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<ProbeParams> {
    let text =
        fs::read_to_string(path).map_err(|e| input_error(format!("cannot read probe {}: {e}", path.display())))?;
    load_probe(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

/// Writes `bytes` next to `path` and renames into place, so readers never
/// see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Leaves `<path>.failed` holding the error chain.
pub fn mark_failed(path: &Path, error: &anyhow::Error) {
    let mut marker = path.as_os_str().to_owned();
    marker.push(".failed");
    let marker = PathBuf::from(marker);
    if let Err(e) = fs::write(&marker, format!("{error:#}\n")) {
        log::error!("cannot write {}: {e}", marker.display());
    }
}

pub fn remove_marker(path: &Path) {
    let mut marker = path.as_os_str().to_owned();
    marker.push(".failed");
    let _ = fs::remove_file(PathBuf::from(marker));
}
