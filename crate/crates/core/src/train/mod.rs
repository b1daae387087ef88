//! Minibatch training with Adam, validation-loss early stopping and
//! best-epoch restore, plus inference-mode scoring.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{eer, ScoreSet};
use crate::models::{Architecture, ModelGraph, Parameter, Phase};
use crate::objective::{cross_entropy, total_loss_node, Batch, LossConfig};
use crate::rng::{self, Stream};

/// Rows per inference chunk when scoring whole datasets.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            early_stop_patience: 5,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, arch: Architecture) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        let min_batch = if arch.is_fusion() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch size must be >= {min_batch} for {arch}, got {}",
                self.batch_size
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early-stop patience must be >= 1".into()));
        }
        self.adam.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `None` when the validation set lacks one of the classes.
    pub val_eer: Option<f64>,
    /// Mean over batches of the CKA between projected branches (FIONA only).
    pub mean_batch_cka: Option<f64>,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Batches skipped because the alignment term was undefined.
    pub skipped_batches: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Equality on everything except wall time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        TrainReport {
            wall_time_secs: 0.0,
            ..self.clone()
        } == TrainReport {
            wall_time_secs: 0.0,
            ..other.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the validation loss of `epoch`. Only a strict decrease counts
    /// as an improvement.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            return Verdict::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Index ranges covering `0..n` in chunks of `size`, with a final chunk
/// smaller than `min_last` merged into its predecessor.
fn chunk_ranges(n: usize, size: usize, min_last: usize) -> Vec<std::ops::Range<usize>> {
    let mut ranges: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if ranges.len() > 1 && ranges.last().is_some_and(|r| r.len() < min_last) {
        let last = ranges.pop().expect("non-empty");
        ranges.last_mut().expect("non-empty").end = last.end;
    }
    ranges
}

/// Inference-mode class probabilities for every row of `data`.
pub fn predict_probs(model: &ModelGraph, data: &Batch) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Data("cannot score an empty dataset".into()));
    }
    let min_rows = if model.arch() == Architecture::Fiona { 2 } else { 1 };
    let mut out = Vec::with_capacity(data.len() * 2);
    for range in chunk_ranges(data.len(), EVAL_CHUNK, min_rows) {
        let rows: Vec<usize> = range.collect();
        let chunk = data.select(&rows)?;
        out.extend_from_slice(model.predict(&chunk.inputs)?.data());
    }
    Tensor::new(vec![data.len(), 2], out)
}

/// Scores every row: the inference-mode probability of the deepfake class.
pub fn evaluate(model: &ModelGraph, data: &Batch) -> Result<ScoreSet> {
    let probs = predict_probs(model, data)?;
    let scores = (0..data.len()).map(|i| probs.row(i)[1]).collect();
    ScoreSet::new(scores, data.labels.clone())
}

/// [`evaluate`] with caller-supplied utterance ids.
pub fn evaluate_with_ids(model: &ModelGraph, data: &Batch, ids: &[String]) -> Result<ScoreSet> {
    let set = evaluate(model, data)?;
    ScoreSet::with_ids(ids.to_vec(), set.scores().to_vec(), set.labels().to_vec())
}

fn validation_metrics(model: &ModelGraph, val: &Batch, smoothing: f64) -> Result<(f64, Option<f64>)> {
    let probs = predict_probs(model, val)?;
    let loss = cross_entropy(&probs, &val.labels, smoothing)?;
    let scores = (0..val.len()).map(|i| probs.row(i)[1]).collect();
    let set = ScoreSet::new(scores, val.labels.clone())?;
    let val_eer = match eer(&set) {
        Ok(v) => Some(v),
        Err(Error::MetricUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((loss, val_eer))
}

struct StepOutcome {
    loss: f64,
    cka: Option<f64>,
}

fn train_step(
    model: &mut ModelGraph,
    batch: &Batch,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<StepOutcome> {
    let mut graph = Graph::new();
    let fwd = model.forward(&mut graph, &batch.inputs, Phase::Train(dropout_rng))?;
    let terms = total_loss_node(&mut graph, fwd.probs, &batch.labels, fwd.projections(), &cfg.loss)?;
    let loss = graph.value(terms.total).item().expect("scalar loss");
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss became {loss}")));
    }
    let mut grads = graph.backward(terms.total)?;
    let grads: Vec<Tensor> = fwd
        .params
        .iter()
        .map(|&id| grads.take(id).expect("parameters require gradients"))
        .collect();
    adam_step(model.parameters_mut(), &grads, adam, &cfg.adam)?;
    Ok(StepOutcome { loss, cka: terms.cka })
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the lowest validation cross-entropy.
///
/// Batches are drawn from a fresh permutation each epoch. Fusion models drop
/// a trailing batch of one sample, and skip (and count) batches whose
/// alignment term is undefined.
pub fn train(model: &mut ModelGraph, train_set: &Batch, val_set: &Batch, cfg: &TrainConfig) -> Result<TrainReport> {
    let started = Instant::now();
    let arch = model.arch();
    cfg.validate(arch)?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let min_batch = if arch.is_fusion() { 2 } else { 1 };

    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = rng::stream(cfg.seed, Stream::Dropout);
    let mut adam = AdamState::new(model.parameters());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params: Vec<Parameter> = model.parameters().to_vec();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut steps, mut skipped) = (0.0, 0usize, 0usize);
        let (mut cka_sum, mut cka_count) = (0.0, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            if rows.len() < min_batch {
                continue;
            }
            let batch = train_set.select(rows)?;
            match train_step(model, &batch, cfg, &mut adam, &mut dropout_rng) {
                Ok(step) => {
                    loss_sum += step.loss;
                    steps += 1;
                    if let Some(c) = step.cka {
                        cka_sum += c;
                        cka_count += 1;
                    }
                }
                Err(Error::DegenerateBatch { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if steps == 0 {
            return Err(Error::Diverged(format!("epoch {epoch}: every batch was skipped")));
        }
        let (val_loss, val_eer) = validation_metrics(model, val_set, cfg.loss.label_smoothing)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: validation loss {val_loss}")));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_loss,
            val_eer,
            mean_batch_cka: (cka_count > 0).then(|| cka_sum / cka_count as f64),
            skipped_batches: skipped,
        });
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best_params.clone_from_slice(model.parameters()),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    model.parameters_mut().clone_from_slice(&best_params);
    Ok(TrainReport {
        skipped_batches: epochs.iter().map(|e| e.skipped_batches).sum(),
        epochs,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
