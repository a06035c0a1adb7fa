use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use synprobe::embstore::{write_store, EmbeddingHeader};
use synprobe::probe::save_probe;
use synprobe::synthetic::{generate, oracle_probe, SyntheticSpec};
use synprobe::treebank::{parse_conllu, write_conllu, ParseOptions};

fn synprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synprobe"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn synth(dir: &Path, layers: &str) -> PathBuf {
    let data = dir.join("data");
    let out = synprobe(&[
        "synth",
        "--out",
        &s(&data),
        "--layers",
        layers,
        "--train-sentences",
        "120",
        "--eval-sentences",
        "40",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

fn train_args<'a>(data: &'a str, out: &'a str, layer: &'a str) -> Vec<String> {
    vec![
        "train".into(),
        "--train-conllu".into(),
        format!("{data}/train.conllu"),
        "--dev-conllu".into(),
        format!("{data}/dev.conllu"),
        "--train-emb".into(),
        format!("{data}/train.synthetic.L{layer}.wemb"),
        "--dev-emb".into(),
        format!("{data}/dev.synthetic.L{layer}.wemb"),
        "--rank".into(),
        "8".into(),
        "--epochs".into(),
        "2".into(),
        "--out".into(),
        out.into(),
    ]
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0");
    let out = dir.path().join("run");
    let args = train_args(&s(&data), &s(&out), "0");
    let o = synprobe(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("probe.json").is_file());
    let log = rows(&out.join("train_log.csv"));
    assert!(!log.is_empty());
    assert_eq!(log.iter().filter(|r| r[6] == "true").count(), 1);
    let record: serde_json::Value = serde_json::from_slice(&fs::read(out.join("train_record.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["rank"], 8);
}

#[test]
fn missing_store_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0");
    let out = dir.path().join("run");
    let mut args = train_args(&s(&data), &s(&out), "0");
    args[6] = s(&data.join("absent.wemb"));
    let o = synprobe(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("store not found"));
    assert!(!out.join("probe.json").exists());
}

#[test]
fn oracle_probe_scores_perfectly_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        sentences: 30,
        seed: 8,
        ..Default::default()
    };
    let corpus = generate(&spec);
    let mut text = Vec::new();
    write_conllu(&corpus.trees, &mut text).unwrap();
    fs::write(dir.path().join("gold.conllu"), text).unwrap();
    let header = EmbeddingHeader::new("oracle", 0, spec.hidden_dim() as u32, corpus.sentences.len() as u32);
    let mut bytes = Vec::new();
    write_store(&header, &corpus.sentences, &mut bytes).unwrap();
    fs::write(dir.path().join("gold.wemb"), bytes).unwrap();
    fs::write(
        dir.path().join("probe.json"),
        save_probe(&oracle_probe(&spec, &corpus, 30.0)),
    )
    .unwrap();

    let out = dir.path().join("eval");
    let o = synprobe(&[
        "eval",
        "--probe",
        &s(&dir.path().join("probe.json")),
        "--conllu",
        &s(&dir.path().join("gold.conllu")),
        "--emb",
        &s(&dir.path().join("gold.wemb")),
        "--out",
        &s(&out),
        "--split",
        "test",
        "--emit-predictions",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = rows(&out.join("test_metrics.csv"));
    assert_eq!(metrics.len(), 5);
    for r in &metrics {
        assert_eq!(r[..3], ["oracle", "0", "test"]);
        assert_eq!(r[4], "100.00", "{}", r[3]);
    }
    for r in rows(&out.join("test_relations.csv")) {
        assert_eq!(r[2..], ["100.00", "100.00"]);
    }
    let predicted = fs::read_to_string(out.join("test_predictions.conllu")).unwrap();
    let predicted = parse_conllu(&predicted, ParseOptions::default()).unwrap();
    assert_eq!(predicted, corpus.trees);

    let report = synprobe(&["report", &s(&out.join("test_report.json"))]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("LAS 100.00"));
}

#[test]
fn eval_dimension_mismatch_names_both_dims() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0");
    let spec = SyntheticSpec {
        sentences: 2,
        max_len: 4,
        ..Default::default()
    };
    let small = generate(&spec);
    let probe = dir.path().join("small.json");
    fs::write(&probe, save_probe(&oracle_probe(&spec, &small, 1.0))).unwrap();
    let o = synprobe(&[
        "eval",
        "--probe",
        &s(&probe),
        "--conllu",
        &s(&data.join("test.conllu")),
        "--emb",
        &s(&data.join("test.synthetic.L0.wemb")),
        "--out",
        &s(&dir.path().join("eval")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains(&format!("hidden dimension {}", spec.hidden_dim())),
        "{err}"
    );
    assert!(err.contains("has 33"), "{err}");
}

#[test]
fn three_layer_sweep_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0,4,8");
    let o = synprobe(&["sweep", &s(&data.join("sweep.toml")), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let test = parse_conllu(
        &fs::read_to_string(data.join("test.conllu")).unwrap(),
        ParseOptions::default(),
    )
    .unwrap();
    let relations = synprobe::build_vocabulary(&test).len().min(15);
    let table = rows(&data.join("sweep/sweep.csv"));
    let aggregate = table.iter().filter(|r| !r[3].contains('/')).count();
    // 3 layers × 1 evaluation split.
    assert_eq!(aggregate, 3 * 5);
    assert_eq!(table.len(), aggregate + 3 * 3 * relations);
    let layers: Vec<&str> = table.iter().step_by(5).take(3).map(|r| r[1].as_str()).collect();
    assert_eq!(layers, ["0", "4", "8"]);
    for layer in ["L0", "L4", "L8"] {
        assert!(data.join("sweep").join(layer).join("probe.json").is_file());
        assert!(!data.join("sweep").join(format!("{layer}.failed")).exists());
    }
}

#[test]
fn sweep_is_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0,1");
    let spec = data.join("sweep.toml");
    assert!(synprobe(&["sweep", &s(&spec), "--jobs", "1"]).status.success());
    let first = fs::read(data.join("sweep/sweep.csv")).unwrap();
    let probe = fs::read(data.join("sweep/L1/probe.json")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_synprobe"))
        .args(["sweep", &s(&spec)])
        .env("SYNPROBE_JOBS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(data.join("sweep/sweep.csv")).unwrap(), first);
    assert_eq!(fs::read(data.join("sweep/L1/probe.json")).unwrap(), probe);
}

#[test]
fn sweep_checks_every_store_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0,1");
    fs::remove_file(data.join("test.synthetic.L1.wemb")).unwrap();
    let o = synprobe(&["sweep", &s(&data.join("sweep.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("store not found"));
    assert!(!data.join("sweep/L0").exists());
}

#[test]
fn failed_layer_is_marked_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0,1");
    // A file where layer 1's output directory belongs makes that layer fail.
    fs::create_dir_all(data.join("sweep")).unwrap();
    fs::write(data.join("sweep/L1"), "in the way").unwrap();
    let o = synprobe(&["sweep", &s(&data.join("sweep.toml"))]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("sweep/L1.failed").is_file());
    assert!(!data.join("sweep/L0.failed").exists());
    let table = rows(&data.join("sweep/sweep.csv"));
    assert!(!table.is_empty());
    assert!(table.iter().all(|r| r[1] == "0"));
}

#[test]
fn filter_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0");
    let filtered = dir.path().join("short.conllu");
    let o = synprobe(&[
        "filter",
        "--conllu",
        &s(&data.join("dev.conllu")),
        "--out",
        &s(&filtered),
        "--max-len",
        "5",
    ]);
    assert!(o.status.success());
    let all = parse_conllu(
        &fs::read_to_string(data.join("dev.conllu")).unwrap(),
        ParseOptions::default(),
    )
    .unwrap();
    let short = parse_conllu(&fs::read_to_string(&filtered).unwrap(), ParseOptions::default()).unwrap();
    assert_eq!(short.len(), all.iter().filter(|t| t.len() <= 5).count());
    assert!(short.iter().all(|t| t.len() <= 5));

    let run = dir.path().join("run");
    let args = train_args(&s(&data), &s(&run), "0");
    assert!(synprobe(&args.iter().map(String::as_str).collect::<Vec<_>>())
        .status
        .success());
    let decoded = dir.path().join("pred.conllu");
    let o = synprobe(&[
        "decode",
        "--probe",
        &s(&run.join("probe.json")),
        "--conllu",
        &s(&data.join("dev.conllu")),
        "--emb",
        &s(&data.join("dev.synthetic.L0.wemb")),
        "--out",
        &s(&decoded),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = parse_conllu(&fs::read_to_string(&decoded).unwrap(), ParseOptions::default()).unwrap();
    assert_eq!(pred.len(), all.len());
    for (p, g) in pred.iter().zip(&all) {
        assert_eq!(p.forms().collect::<Vec<_>>(), g.forms().collect::<Vec<_>>());
    }
}

#[test]
fn misaligned_treebank_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "0");
    let mut args = train_args(&s(&data), &s(&dir.path().join("run")), "0");
    // Dev treebank against the train store.
    args[2] = s(&data.join("dev.conllu"));
    let o = synprobe(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alignment failed"));
}
