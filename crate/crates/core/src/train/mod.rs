//! Training and evaluation for the object (one graph, graph FC head) and
//! action (`S` graphs, grid mapping and 3-d convolutional head) tasks.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::event_io::EventStream;
use crate::graph2grid::GridClip;
use crate::graph_build::{segment_stream, GraphBatch, GraphSequence};
use crate::params::{Checkpoint, Ctx, ParamStore};
use crate::seed;

mod augment;
mod config;
mod model;
mod optim;

pub use augment::{augment_graph, AugmentDraw};
pub use config::{AugmentParams, HeadSpec, ModelConfig, Sensor, SpatialSpec, Task, TrainConfig};
pub use model::{GraphFcOrDense, Head, Model, SpatialLayer};
pub use optim::{adam_step, cross_entropy_softmax, AdamConfig, AdamState};

const BUILD_TAG: u64 = 0xB17D;
const SPLIT_TAG: u64 = 0x5B17;
const SHUFFLE_TAG: u64 = 0x5F1E;
const AUGMENT_TAG: u64 = 0xA06E;
const DROPOUT_TAG: u64 = 0xD209;

/// Builds the graph sequence of every stream with the configured
/// segmentation; stream `i` draws from a generator derived from `(seed, i)`.
pub fn build_sequences(
    streams: &[EventStream],
    config: &ModelConfig,
    seed: u64,
) -> Result<Vec<GraphSequence>> {
    streams
        .iter()
        .enumerate()
        .map(|(i, s)| build_sequence(s, config, seed, i))
        .collect()
}

pub fn build_sequence(
    stream: &EventStream,
    config: &ModelConfig,
    seed: u64,
    index: usize,
) -> Result<GraphSequence> {
    let s = seed::derive(seed, &[BUILD_TAG, index as u64]);
    segment_stream(stream, config.s_count, &config.graph, &config.sampling, s)
}

/// Labeled graph sequences split into training and validation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<GraphSequence>,
    pub val: Vec<GraphSequence>,
}

impl Dataset {
    /// Seeded shuffle, then the first `round(n * val_fraction)` samples
    /// (in shuffled order) form the validation part.
    pub fn split(samples: Vec<GraphSequence>, val_fraction: f64, seed: u64) -> Result<Dataset> {
        if samples.is_empty() {
            return Err(invalid!("empty dataset"));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(invalid!("val_fraction {val_fraction} outside [0, 1)"));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[SPLIT_TAG]));
        let n_val = (samples.len() as f64 * val_fraction).round() as usize;
        let mut slots: Vec<Option<GraphSequence>> = samples.into_iter().map(Some).collect();
        let mut take = |i: usize| slots[i].take().expect("each index once");
        let val = order[..n_val].iter().map(|&i| take(i)).collect();
        let mut train_idx = order[n_val..].to_vec();
        train_idx.sort_unstable();
        let train = train_idx.into_iter().map(take).collect();
        Ok(Dataset { train, val })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

/// Metrics as CSV text with a header row.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.val_loss, m.val_acc
        );
    }
    out
}

pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(metrics)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Background threads preparing batches; 0 prepares them inline.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamStore,
    /// Parameters of the epoch with the best validation accuracy (training
    /// metrics when there is no validation data). Ties go to the lower loss,
    /// then to the earlier epoch.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

/// Accuracy, mean loss and confusion counts (`confusion[true][predicted]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub total: usize,
    pub confusion: Vec<Vec<usize>>,
}

struct PreparedBatch {
    graph: GraphBatch,
    features: Vec<f64>,
    channels: usize,
    labels: Vec<usize>,
}

fn label_of(seq: &GraphSequence, num_classes: usize) -> Result<usize> {
    match seq.label {
        Some(l) if l < num_classes => Ok(l),
        Some(l) => Err(invalid!("label {l} outside {num_classes} classes")),
        None => Err(invalid!("sample without a label")),
    }
}

/// Concatenates the graphs of `samples` sample-major. With `augment`, each
/// sample gets one transform drawn from `(seed, epoch, sample index)`.
fn prepare(
    config: &ModelConfig,
    samples: &[GraphSequence],
    indices: &[usize],
    augment: Option<(u64, usize)>,
) -> Result<PreparedBatch> {
    let mut owned = Vec::new();
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let seq = &samples[i];
        if seq.graphs.len() != config.s_count {
            return Err(invalid!(
                "sample {i} has {} graphs, config expects {}",
                seq.graphs.len(),
                config.s_count
            ));
        }
        labels.push(label_of(seq, config.num_classes)?);
        match augment {
            Some((seed, epoch)) => {
                let mut rng = seed::rng(seed, &[AUGMENT_TAG, epoch as u64, i as u64]);
                let draw = AugmentDraw::sample(&config.augment, &mut rng);
                owned.extend(seq.graphs.iter().map(|g| draw.apply(g)));
            }
            None => owned.extend(seq.graphs.iter().cloned()),
        }
    }
    let refs: Vec<_> = owned.iter().collect();
    let (graph, features, channels) = GraphBatch::from_graphs(&refs)?;
    Ok(PreparedBatch {
        graph,
        features,
        channels,
        labels,
    })
}

struct StepResult {
    loss_sum: f64,
    correct: usize,
    predictions: Vec<usize>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward pass, optionally followed by backward and an optimizer step.
fn run_batch(
    model: &Model,
    store: &mut ParamStore,
    batch: &PreparedBatch,
    optim: Option<(&mut [AdamState], f64, u64, usize)>,
) -> Result<StepResult> {
    let train = optim.is_some();
    let ctx_seed = optim.as_ref().map_or(0, |o| o.2);
    let mut ctx = Ctx::new(store, train, ctx_seed);
    let n = batch.graph.num_nodes();
    let x = ctx
        .tape
        .constant(&[n, batch.channels], batch.features.clone())?;
    let logits = model.forward(&mut ctx, &batch.graph, x)?;
    let loss = ctx.tape.cross_entropy(logits, &batch.labels)?;
    let loss_value = ctx.tape.data(loss)[0];
    let q = model.config.num_classes;
    let predictions: Vec<usize> = ctx.tape.data(logits).chunks(q).map(argmax).collect();
    let correct = predictions
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    if let Some((states, lr, _, epoch)) = optim {
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("training loss became {loss_value}"),
            });
        }
        ctx.tape.backward(loss)?;
        let grads = ctx.take_grads();
        drop(ctx);
        let cfg = AdamConfig::default();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                adam_step(
                    store.params_mut()[i].value.data_mut(),
                    &g,
                    &mut states[i],
                    lr,
                    &cfg,
                )?;
            }
        }
    }
    Ok(StepResult {
        loss_sum: loss_value * batch.labels.len() as f64,
        correct,
        predictions,
    })
}

/// Evaluation-mode pass over `samples` in order, without augmentation.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    samples: &[GraphSequence],
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid!("cannot evaluate on an empty dataset"));
    }
    let q = model.config.num_classes;
    let mut store = params.clone();
    let mut confusion = vec![vec![0; q]; q];
    let mut loss = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = prepare(&model.config, samples, chunk, None)?;
        let r = run_batch(model, &mut store, &batch, None)?;
        loss += r.loss_sum;
        correct += r.correct;
        for (&p, &l) in r.predictions.iter().zip(&batch.labels) {
            confusion[l][p] += 1;
        }
    }
    let total = samples.len();
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        loss: loss / total as f64,
        total,
        confusion,
    })
}

/// Rebuilds the model from the checkpoint's configuration and evaluates it.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    samples: &[GraphSequence],
) -> Result<EvalReport> {
    let (model, params) = model_from_checkpoint(checkpoint)?;
    evaluate(&model, &params, samples, model.config.train.batch_size)
}

pub fn model_from_checkpoint(checkpoint: &Checkpoint) -> Result<(Model, ParamStore)> {
    let config = ModelConfig::from_toml(&checkpoint.config)?;
    let (model, mut params) = Model::build(&config, 0)?;
    params.load_from(&checkpoint.params)?;
    Ok((model, params))
}

/// Eval-mode grid clip `H x W x C x S` produced by the spatial module for one sample.
pub fn export_clip(model: &Model, params: &ParamStore, sample: &GraphSequence) -> Result<GridClip> {
    let refs: Vec<_> = sample.graphs.iter().collect();
    let (graph, features, channels) = GraphBatch::from_graphs(&refs)?;
    let mut store = params.clone();
    let mut ctx = Ctx::new(&mut store, false, 0);
    let x = ctx
        .tape
        .constant(&[graph.num_nodes(), channels], features)?;
    let clips = model.grid_clips(&mut ctx, &graph, x)?;
    let shape = ctx.tape.shape(clips).to_vec();
    if shape[0] != 1 {
        return Err(invalid!("sample holds {} clips, expected 1", shape[0]));
    }
    Ok(GridClip {
        values: ctx.tape.data(clips).to_vec(),
        dims: [shape[1], shape[2], shape[3], shape[4]],
    })
}

pub fn train_model(dataset: &Dataset, config: &ModelConfig) -> Result<TrainOutcome> {
    train_model_with(dataset, config, &TrainOptions::default(), |_| {})
}

/// Adam on the cross-entropy loss with step-wise learning-rate decay.
/// Deterministic for a given `config.train.rng_seed`: shuffling,
/// augmentation and dropout draw from generators derived from
/// `(seed, epoch, ...)`, so the worker count does not change results.
pub fn train_model_with(
    dataset: &Dataset,
    config: &ModelConfig,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(invalid!("empty training set"));
    }
    let tc = &config.train;
    let seed = tc.rng_seed;
    let (model, mut store) = Model::build(config, seed)?;
    let mut states: Vec<AdamState> = store
        .iter()
        .map(|p| AdamState::new(p.value.len()))
        .collect();
    let config_text = config.to_toml();
    let mut metrics = Vec::with_capacity(tc.epochs);
    let mut best: Option<((f64, f64), usize, ParamStore)> = None;
    let n = dataset.train.len();
    for epoch in 1..=tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed, &[SHUFFLE_TAG, epoch as u64]));
        let chunks: Vec<Vec<usize>> = order.chunks(tc.batch_size).map(<[usize]>::to_vec).collect();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut step = |b: usize, batch: PreparedBatch, store: &mut ParamStore| -> Result<()> {
            let ctx_seed = seed::derive(seed, &[DROPOUT_TAG, epoch as u64, b as u64]);
            let r = run_batch(
                &model,
                store,
                &batch,
                Some((&mut states, lr, ctx_seed, epoch)),
            )?;
            loss_sum += r.loss_sum;
            correct += r.correct;
            Ok(())
        };
        if options.workers == 0 {
            for (b, chunk) in chunks.iter().enumerate() {
                let batch = prepare(config, &dataset.train, chunk, Some((seed, epoch)))?;
                step(b, batch, &mut store)?;
            }
        } else {
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel(options.workers);
                let chunks = &chunks;
                scope.spawn(move || {
                    for chunk in chunks {
                        if tx
                            .send(prepare(config, &dataset.train, chunk, Some((seed, epoch))))
                            .is_err()
                        {
                            break;
                        }
                    }
                });
                for (b, batch) in rx.iter().enumerate() {
                    step(b, batch?, &mut store)?;
                }
                Ok(())
            })?;
        }
        let train_loss = loss_sum / n as f64;
        let train_acc = correct as f64 / n as f64;
        let (val_loss, val_acc) = if dataset.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let r = evaluate(&model, &store, &dataset.val, tc.batch_size)?;
            (r.loss, r.accuracy)
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        };
        on_epoch(&m);
        metrics.push(m);
        let score = if dataset.val.is_empty() {
            (train_acc, -train_loss)
        } else {
            (val_acc, -val_loss)
        };
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, store.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        params: store,
        best: Checkpoint {
            config: config_text,
            params: best_params,
        },
        best_epoch,
        metrics,
    })
}
