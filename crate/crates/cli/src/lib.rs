//! Command-line front end for the evgraph pipeline.
//!
//! Data directories hold an `index.csv` (`file,label`) listing event streams
//! (`.csv` or `.bin`) or graph sequences (`.grf`) relative to the directory.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use evgraph::complexity::{report_model, GraphStats};
use evgraph::event_io::synth::{synth_dataset, SynthSpec};
use evgraph::event_io::{read_stream, write_stream, EventStream, StreamFormat};
use evgraph::graph_build::io::{read_sequence, write_sequence};
use evgraph::graph_build::GraphSequence;
use evgraph::params::Checkpoint;
use evgraph::sampling::{non_uniform_sample, SamplingParams};
use evgraph::train::{
    build_sequence, evaluate_checkpoint, export_clip, model_from_checkpoint, train_model_with,
    write_metrics_csv, Dataset, ModelConfig, TrainOptions,
};
use evgraph::{Error, Result};

pub const INDEX_FILE: &str = "index.csv";
const INDEX_HEADER: &str = "file,label";

#[derive(Debug, Parser)]
#[command(
    name = "evgraph",
    version,
    about = "Event-camera classification with event graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic event dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stream file format: csv or bin.
        #[arg(long, default_value = "bin")]
        format: String,
    },
    /// Non-uniformly sample one event stream.
    Sample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        k_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build graph sequences for every stream of a data directory.
    BuildGraphs {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Graphs per stream; defaults to the config's `s_count`.
        #[arg(long)]
        s: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batch-preparation threads; 0 prepares batches inline.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Evaluate a checkpoint on a data directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Seed for building graphs when the directory holds streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the cost report of a configuration as CSV.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Human-readable table instead of CSV.
        #[arg(long)]
        table: bool,
    },
    /// Write the grid clip the spatial module produces for one sample.
    ExportClip {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Position of the sample in the index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

/// Runs the command line `argv` (program name first). Returns 0 on
/// success, 1 on usage errors and 2 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            spec,
            out,
            seed,
            format,
        } => {
            let format = match format.as_str() {
                "csv" => StreamFormat::Csv,
                "bin" => StreamFormat::Bin,
                other => {
                    return Err(Error::Invalid(format!(
                        "unknown stream format {other:?} (csv or bin)"
                    )))
                }
            };
            let spec = SynthSpec::load(&spec)?;
            let streams = synth_dataset(&spec, seed)?;
            let entries = write_streams(&out, &streams, format)?;
            eprintln!("wrote {} streams to {}", entries.len(), out.display());
            Ok(())
        }
        Command::Sample {
            input,
            out,
            k_max,
            seed,
        } => {
            let stream = read_stream(&input, format_of(&input)?)?;
            let (t0, t1) = stream.time_span().unwrap_or((0, 0));
            let params = SamplingParams {
                k_max,
                rng_seed: seed,
            };
            let events = non_uniform_sample(&stream, t0 as f64, t1 as f64 + 1.0, &params)?;
            let sampled = EventStream::new(stream.width(), stream.height(), events, stream.label)?;
            write_stream(&sampled, &out, format_of(&out)?)?;
            eprintln!("kept {} of {} events", sampled.len(), stream.len());
            Ok(())
        }
        Command::BuildGraphs {
            input,
            out,
            config,
            s,
            seed,
        } => {
            let mut config = ModelConfig::load(&config)?;
            if let Some(s) = s {
                config.s_count = s;
            }
            let samples = load_samples(&input, &config, seed)?;
            create_dir(&out)?;
            let mut entries = Vec::with_capacity(samples.len());
            for (i, seq) in samples.iter().enumerate() {
                let file = format!("sample_{i:05}.grf");
                write_sequence(seq, &out.join(&file))?;
                entries.push((file, seq.label));
            }
            write_index(&out, &entries)?;
            let graphs: Vec<_> = samples
                .iter()
                .flat_map(|s| s.graphs.iter().cloned())
                .collect();
            let stats = GraphStats::measure(&graphs, &config.pools())?;
            write_file(&out.join("stats.csv"), stats.to_csv().as_bytes())?;
            eprintln!(
                "wrote {} graph sequences to {}",
                samples.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            workers,
        } => {
            let mut config = ModelConfig::load(&config)?;
            config.train.rng_seed = seed;
            let samples = load_samples(&data, &config, seed)?;
            let dataset = Dataset::split(samples, config.train.val_fraction, seed)?;
            eprintln!(
                "training on {} samples, validating on {}",
                dataset.train.len(),
                dataset.val.len()
            );
            let outcome = train_model_with(&dataset, &config, &TrainOptions { workers }, |m| {
                eprintln!(
                    "epoch {:>4}  lr {:.1e}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
                    m.epoch, m.lr, m.train_loss, m.train_acc, m.val_loss, m.val_acc
                );
            })?;
            create_dir(&out)?;
            write_metrics_csv(&outcome.metrics, &out.join("metrics.csv"))?;
            outcome.best.save(&out.join("best.ckpt"))?;
            let last = Checkpoint {
                config: outcome.best.config.clone(),
                params: outcome.params,
            };
            last.save(&out.join("final.ckpt"))?;
            let m = outcome.metrics[outcome.best_epoch - 1];
            println!(
                "best epoch {} train_acc {:.4} val_acc {:.4}",
                m.epoch, m.train_acc, m.val_acc
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = ModelConfig::from_toml(&ckpt.config)?;
            let samples = load_samples(&data, &config, seed)?;
            let report = evaluate_checkpoint(&ckpt, &samples)?;
            println!(
                "accuracy {:.4} ({} samples, loss {:.4})",
                report.accuracy, report.total, report.loss
            );
            println!("confusion (rows true, columns predicted):");
            for row in &report.confusion {
                println!(
                    "{}",
                    row.iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                );
            }
            Ok(())
        }
        Command::Flops {
            config,
            stats,
            table,
        } => {
            let config = ModelConfig::load(&config)?;
            let stats = GraphStats::load(&stats)?;
            let report = report_model(&config, &stats)?;
            if table {
                println!("{report}");
            } else {
                print!("{}", report.to_csv());
            }
            Ok(())
        }
        Command::ExportClip {
            graphs,
            checkpoint,
            out,
            index,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (model, params) = model_from_checkpoint(&ckpt)?;
            let entries = read_index(&graphs)?;
            let (file, label) = entries.get(index).ok_or_else(|| {
                Error::Invalid(format!("index {index} outside {} samples", entries.len()))
            })?;
            let mut seq = read_sequence(&graphs.join(file))?;
            seq.label = label.or(seq.label);
            let clip = export_clip(&model, &params, &seq)?;
            clip.write(&out)?;
            eprintln!("wrote clip {:?} to {}", clip.dims, out.display());
            Ok(())
        }
    }
}

fn format_of(path: &Path) -> Result<StreamFormat> {
    StreamFormat::from_path(path)
        .ok_or_else(|| Error::Invalid(format!("{}: unknown stream file extension", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Writes `stream_{i}.{ext}` files and the index; returns the index entries.
pub fn write_streams(
    dir: &Path,
    streams: &[EventStream],
    format: StreamFormat,
) -> Result<Vec<(String, Option<usize>)>> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(streams.len());
    for (i, s) in streams.iter().enumerate() {
        let file = format!("stream_{i:05}.{}", format.extension());
        write_stream(s, &dir.join(&file), format)?;
        entries.push((file, s.label));
    }
    write_index(dir, &entries)?;
    Ok(entries)
}

pub fn write_index(dir: &Path, entries: &[(String, Option<usize>)]) -> Result<()> {
    let mut text = format!("{INDEX_HEADER}\n");
    for (file, label) in entries {
        text.push_str(file);
        text.push(',');
        if let Some(l) = label {
            text.push_str(&l.to_string());
        }
        text.push('\n');
    }
    write_file(&dir.join(INDEX_FILE), text.as_bytes())
}

pub fn read_index(dir: &Path) -> Result<Vec<(String, Option<usize>)>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == INDEX_HEADER => {}
        _ => {
            return Err(Error::MalformedLine {
                line: 1,
                msg: format!("expected header {INDEX_HEADER:?}"),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let (file, label) = line.split_once(',').ok_or_else(|| Error::MalformedLine {
                line: i + 1,
                msg: "expected file,label".into(),
            })?;
            let label = match label.trim() {
                "" => None,
                l => Some(l.parse().map_err(|e| Error::MalformedLine {
                    line: i + 1,
                    msg: format!("label: {e}"),
                })?),
            };
            Ok((file.trim().to_string(), label))
        })
        .collect()
}

/// Graph sequences of a data directory: `.grf` files are read as they are,
/// event streams are segmented with `config` and `seed`.
pub fn load_samples(dir: &Path, config: &ModelConfig, seed: u64) -> Result<Vec<GraphSequence>> {
    let entries = read_index(dir)?;
    if entries.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: index lists no samples",
            dir.display()
        )));
    }
    entries
        .iter()
        .enumerate()
        .map(|(i, (file, label))| {
            let path = dir.join(file);
            let mut seq = if path.extension().is_some_and(|e| e == "grf") {
                read_sequence(&path)?
            } else {
                let mut stream = read_stream(&path, format_of(&path)?)?;
                stream.label = label.or(stream.label);
                build_sequence(&stream, config, seed, i)?
            };
            seq.label = label.or(seq.label);
            Ok(seq)
        })
        .collect()
}
