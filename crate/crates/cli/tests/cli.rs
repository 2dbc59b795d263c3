use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evgraph::complexity::{report_model, GraphStats};
use evgraph::event_io::{read_stream, StreamFormat};
use evgraph::train::ModelConfig;

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn evgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evgraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, seed: &str, format: &str) -> Output {
    let spec = repo("configs/synth/two_class.toml");
    evgraph(&[
        "synth",
        "--spec",
        arg(&spec),
        "--out",
        arg(out),
        "--seed",
        seed,
        "--format",
        format,
    ])
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_determined_by_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    assert!(synth(&a, "3", "bin").status.success());
    assert!(synth(&b, "3", "bin").status.success());
    assert!(synth(&c, "4", "bin").status.success());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
    let index = fs::read_to_string(a.join("index.csv")).unwrap();
    assert_eq!(index.lines().next(), Some("file,label"));
    assert_eq!(index.lines().count(), 51);
}

#[test]
fn csv_and_binary_streams_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (bin, csv) = (tmp.path().join("bin"), tmp.path().join("csv"));
    assert!(synth(&bin, "1", "bin").status.success());
    assert!(synth(&csv, "1", "csv").status.success());
    let a = read_stream(&bin.join("stream_00000.bin"), StreamFormat::Bin).unwrap();
    let b = read_stream(&csv.join("stream_00000.csv"), StreamFormat::Csv).unwrap();
    assert_eq!(a.events(), b.events());
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
}

#[test]
fn sample_reduces_a_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(synth(&data, "2", "csv").status.success());
    let input = data.join("stream_00000.csv");
    let out = tmp.path().join("sampled.csv");
    let run = evgraph(&[
        "sample",
        "--in",
        arg(&input),
        "--out",
        arg(&out),
        "--k-max",
        "4",
        "--seed",
        "9",
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let (full, sampled) = (
        read_stream(&input, StreamFormat::Csv).unwrap(),
        read_stream(&out, StreamFormat::Csv).unwrap(),
    );
    assert!(!sampled.is_empty() && sampled.len() < full.len());
    assert!(sampled.events().iter().all(|e| full.events().contains(e)));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(evgraph(&[]).status.code(), Some(1));
    assert_eq!(evgraph(&["synth", "--spec"]).status.code(), Some(1));
    assert_eq!(evgraph(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(evgraph(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    let out = tmp.path().join("out");
    let run = evgraph(&["synth", "--spec", arg(&missing), "--out", arg(&out)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).starts_with("error:"));
    let run = synth(&out, "0", "parquet");
    assert_eq!(run.status.code(), Some(2));
    let run = evgraph(&[
        "eval",
        "--checkpoint",
        arg(&missing),
        "--data",
        arg(tmp.path()),
    ]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn flops_matches_the_library_report() {
    let tmp = tempfile::tempdir().unwrap();
    let stats = tmp.path().join("stats.csv");
    fs::write(
        &stats,
        "stage,mean_nodes,mean_edges\n0,900,7000\n1,250,1500\n2,40,120\n3,1,0\n",
    )
    .unwrap();
    let config = repo("configs/object_small.toml");
    let run = evgraph(&["flops", "--config", arg(&config), "--stats", arg(&stats)]);
    assert!(run.status.success());
    let expected = report_model(
        &ModelConfig::load(&config).unwrap(),
        &GraphStats::load(&stats).unwrap(),
    )
    .unwrap();
    assert_eq!(String::from_utf8(run.stdout).unwrap(), expected.to_csv());
    let table = evgraph(&[
        "flops",
        "--config",
        arg(&config),
        "--stats",
        arg(&stats),
        "--table",
    ]);
    assert!(String::from_utf8(table.stdout).unwrap().contains("798666"));
}

#[test]
fn synth_train_eval_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, graphs, run_dir) = (
        tmp.path().join("data"),
        tmp.path().join("graphs"),
        tmp.path().join("run"),
    );
    let config = repo("configs/desk_object.toml");
    assert!(synth(&data, "7", "bin").status.success());

    let built = evgraph(&[
        "build-graphs",
        "--in",
        arg(&data),
        "--out",
        arg(&graphs),
        "--config",
        arg(&config),
        "--seed",
        "7",
    ]);
    assert!(
        built.status.success(),
        "{}",
        String::from_utf8_lossy(&built.stderr)
    );
    assert!(graphs.join("sample_00049.grf").exists());
    let stats = fs::read_to_string(graphs.join("stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 5);

    let trained = evgraph(&[
        "train",
        "--config",
        arg(&config),
        "--data",
        arg(&graphs),
        "--out",
        arg(&run_dir),
        "--seed",
        "7",
    ]);
    assert!(
        trained.status.success(),
        "{}",
        String::from_utf8_lossy(&trained.stderr)
    );
    assert!(String::from_utf8_lossy(&trained.stdout).starts_with("best epoch"));
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("epoch,lr,train_loss,train_acc,val_loss,val_acc")
    );
    assert_eq!(metrics.lines().count(), 151);

    let best = run_dir.join("best.ckpt");
    let evaluated = evgraph(&["eval", "--checkpoint", arg(&best), "--data", arg(&graphs)]);
    assert!(evaluated.status.success());
    let text = String::from_utf8(evaluated.stdout).unwrap();
    let accuracy: f64 = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(accuracy >= 0.95, "{text}");
    assert!(text.contains("50 samples"));

    // Raw streams are turned into graphs with the same seed, so results agree.
    let from_streams = evgraph(&[
        "eval",
        "--checkpoint",
        arg(&best),
        "--data",
        arg(&data),
        "--seed",
        "7",
    ]);
    assert_eq!(String::from_utf8(from_streams.stdout).unwrap(), text);

    let clip = tmp.path().join("clip.clp");
    let exported = evgraph(&[
        "export-clip",
        "--graphs",
        arg(&graphs),
        "--checkpoint",
        arg(&best),
        "--out",
        arg(&clip),
    ]);
    assert!(
        exported.status.success(),
        "{}",
        String::from_utf8_lossy(&exported.stderr)
    );
    let clip = evgraph::graph2grid::GridClip::read(&clip).unwrap();
    assert_eq!(clip.dims[3], 1);
}
