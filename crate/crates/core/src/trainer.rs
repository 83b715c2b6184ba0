//! Vanilla SGD training and binary checkpoints.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_batches, stratified_batches, write_atomic, Dataset, MiniBatch};
use crate::error::{Error, Result};
use crate::model::{evaluate, forward, layer_gradients, LossKind, MlpConfig, MlpParams};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    /// Stratified when the class layout allows it, shuffled otherwise.
    #[default]
    Auto,
    Stratified,
    Shuffled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once the train accuracy reaches this value (if `early_stop`).
    pub target_accuracy: f64,
    pub early_stop: bool,
    /// Epochs to checkpoint; `None` means 0, every power of two, and the final epoch.
    pub checkpoint_epochs: Option<Vec<usize>>,
    /// Draw a fresh batch order every epoch.
    pub reshuffle: bool,
    pub batching: Batching,
}

impl TrainConfig {
    pub fn for_loss(loss: LossKind) -> Self {
        Self {
            batch: 50,
            lr: 0.1,
            epochs: 100,
            seed: 0,
            target_accuracy: default_target(loss),
            early_stop: true,
            checkpoint_epochs: None,
            reshuffle: true,
            batching: Batching::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::BatchShapeError("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidDimension(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    fn wants_checkpoint(&self, epoch: usize) -> bool {
        match &self.checkpoint_epochs {
            Some(list) => list.contains(&epoch),
            None => epoch == 0 || epoch.is_power_of_two(),
        }
    }
}

/// Accuracy target used to declare convergence.
pub fn default_target(loss: LossKind) -> f64 {
    match loss {
        LossKind::Ce => 1.0,
        LossKind::Mse => 0.95,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config: MlpConfig,
    pub params: MlpParams<T>,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub seed: u64,
    /// How to regenerate the RNG position: stream family, seed and next epoch.
    pub rng_state: String,
    /// Free-form provenance string (the CLI stores its config hash here).
    pub lineage: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub checkpoints: Vec<Checkpoint<T>>,
    pub history: Vec<EpochMetrics>,
    pub batching: Batching,
}

impl<T: Real> TrainOutcome<T> {
    pub fn last(&self) -> &Checkpoint<T> {
        self.checkpoints.last().expect("training always checkpoints")
    }
}

/// One SGD step on every layer: `W ← W − η · mean_p ∇_W ℓ_p`.
pub fn sgd_step<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    data: &Dataset<T>,
    batch: &MiniBatch,
    lr: T,
) -> Result<MlpParams<T>> {
    if batch.is_empty() {
        return Ok(params.clone());
    }
    let grads: Vec<Vec<DMatrix<T>>> = batch
        .indices
        .par_iter()
        .map(|&i| {
            let t = forward(params, cfg, data.input(i), data.label(i))?;
            Ok(layer_gradients(&t, params, cfg))
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| Error::DivergenceError {
            epoch: 0,
            reason: e.to_string(),
        })?;
    let mean = tree_mean(&grads);
    let weights: Vec<DMatrix<T>> = params
        .weights
        .iter()
        .zip(&mean)
        .map(|(w, g)| w - g * lr)
        .collect();
    let next = MlpParams { weights };
    if !next.is_finite() {
        return Err(Error::DivergenceError {
            epoch: 0,
            reason: "non-finite weights after update".into(),
        });
    }
    Ok(next)
}

fn tree_mean<T: Real>(grads: &[Vec<DMatrix<T>>]) -> Vec<DMatrix<T>> {
    fn sum<T: Real>(g: &[Vec<DMatrix<T>>]) -> Vec<DMatrix<T>> {
        if g.len() == 1 {
            return g[0].clone();
        }
        let mid = g.len() / 2;
        let (a, b) = (sum(&g[..mid]), sum(&g[mid..]));
        a.iter().zip(&b).map(|(x, y)| x + y).collect()
    }
    let n = T::count(grads.len());
    sum(grads).into_iter().map(|m| m / n).collect()
}

fn resolve_batching<T: Real>(data: &Dataset<T>, cfg: &TrainConfig) -> Result<Batching> {
    match cfg.batching {
        Batching::Auto => Ok(match stratified_batches(data, cfg.batch, cfg.seed, 0) {
            Ok(_) => Batching::Stratified,
            Err(_) => Batching::Shuffled,
        }),
        Batching::Stratified => {
            stratified_batches(data, cfg.batch, cfg.seed, 0)?;
            Ok(Batching::Stratified)
        }
        Batching::Shuffled => Ok(Batching::Shuffled),
    }
}

/// Runs SGD from the seeded initialization.
pub fn train<T: Real>(
    data: &Dataset<T>,
    mlp: &MlpConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    mlp.validate()?;
    cfg.validate()?;
    if data.dim() != mlp.input_dim() || data.class_count() != mlp.classes() {
        return Err(Error::ShapeError(format!(
            "dataset has dim {} and {} classes, network expects {} and {}",
            data.dim(),
            data.class_count(),
            mlp.input_dim(),
            mlp.classes()
        )));
    }
    let batching = resolve_batching(data, cfg)?;
    log::info!("training with {batching:?} batches of {}", cfg.batch);
    let lr = T::lit(cfg.lr);
    let mut params = MlpParams::init_uniform(mlp, cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut checkpoints = Vec::new();
    let snapshot = |params: &MlpParams<T>, m: &EpochMetrics| Checkpoint {
        config: mlp.clone(),
        params: params.clone(),
        epoch: m.epoch,
        train_loss: m.loss,
        train_accuracy: m.accuracy,
        seed: cfg.seed,
        rng_state: format!("chacha8/derived:seed={}:next_epoch={}", cfg.seed, m.epoch + 1),
        lineage: String::new(),
    };
    let metrics = |params: &MlpParams<T>, epoch: usize| -> Result<EpochMetrics> {
        let (loss, acc) = evaluate(params, mlp, data).map_err(|e| Error::DivergenceError {
            epoch,
            reason: e.to_string(),
        })?;
        Ok(EpochMetrics {
            epoch,
            loss: loss.as_f64(),
            accuracy: acc.as_f64(),
        })
    };
    let m0 = metrics(&params, 0)?;
    let mut last_saved = None;
    if cfg.wants_checkpoint(0) || cfg.epochs == 0 {
        checkpoints.push(snapshot(&params, &m0));
        last_saved = Some(0);
    }
    let mut converged = cfg.early_stop && m0.accuracy >= cfg.target_accuracy;
    history.push(m0);
    let mut epoch = 0;
    while epoch < cfg.epochs && !converged {
        epoch += 1;
        let stream = if cfg.reshuffle { epoch as u64 } else { 0 };
        let batches = match batching {
            Batching::Stratified => stratified_batches(data, cfg.batch, cfg.seed, stream)?,
            _ => shuffled_batches(data, cfg.batch, cfg.seed, stream)?,
        };
        for b in &batches {
            params = sgd_step(&params, mlp, data, b, lr).map_err(|e| match e {
                Error::DivergenceError { reason, .. } => Error::DivergenceError { epoch, reason },
                other => other,
            })?;
        }
        let m = metrics(&params, epoch)?;
        log::debug!("epoch {epoch}: loss {:.6} acc {:.4}", m.loss, m.accuracy);
        converged = cfg.early_stop && m.accuracy >= cfg.target_accuracy;
        if cfg.wants_checkpoint(epoch) {
            checkpoints.push(snapshot(&params, &m));
            last_saved = Some(epoch);
        }
        history.push(m);
    }
    if last_saved != Some(epoch) {
        let m = history.last().expect("initial metrics recorded");
        checkpoints.push(snapshot(&params, m));
    }
    Ok(TrainOutcome {
        checkpoints,
        history,
        batching,
    })
}

const MAGIC: &[u8; 4] = b"CVNZ";
const VERSION: u8 = b'1';

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    loss_kind: LossKind,
    layer_dims: Vec<usize>,
    focal_layer: usize,
    train_loss: f64,
    train_accuracy: f64,
    seed: u64,
    rng_state: String,
    lineage: String,
}

pub fn encode_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(ckpt.params.weights.len() as u32).to_le_bytes());
    for w in &ckpt.params.weights {
        out.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
    }
    for w in &ckpt.params.weights {
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                out.extend_from_slice(&w[(r, c)].as_f64().to_le_bytes());
            }
        }
    }
    let meta = Meta {
        epoch: ckpt.epoch,
        loss_kind: ckpt.config.loss,
        layer_dims: ckpt.config.layer_dims.clone(),
        focal_layer: ckpt.config.focal_layer,
        train_loss: ckpt.train_loss,
        train_accuracy: ckpt.train_accuracy,
        seed: ckpt.seed,
        rng_state: ckpt.rng_state.clone(),
        lineage: ckpt.lineage.clone(),
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| Error::FormatError(format!("metadata encoding: {e}")))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.at..e];
                self.at = e;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint(format!(
                "file ends at byte {} while reading {n} more",
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::FormatError("not a checkpoint file (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::FormatError(format!(
            "unsupported checkpoint version {:?} (expected {:?})",
            bytes[4] as char, VERSION as char
        )));
    }
    let mut cur = Cursor { bytes, at: 5 };
    let layers = cur.u32()? as usize;
    let mut shapes = Vec::with_capacity(layers.min(64));
    for _ in 0..layers {
        shapes.push((cur.u32()? as usize, cur.u32()? as usize));
    }
    let mut weights = Vec::with_capacity(layers);
    for &(rows, cols) in &shapes {
        let raw = cur.take(rows.saturating_mul(cols).saturating_mul(8))?;
        let vals: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        weights.push(DMatrix::from_row_slice(rows, cols, &vals));
    }
    let len = cur.u32()? as usize;
    let json = cur.take(len)?;
    if cur.at != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.at
        )));
    }
    let meta: Meta = serde_json::from_slice(json)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let config = MlpConfig::new(meta.layer_dims, meta.focal_layer, meta.loss_kind)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let params = MlpParams { weights };
    params
        .check(&config)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if !meta.train_loss.is_finite() || !meta.train_accuracy.is_finite() {
        return Err(Error::CorruptCheckpoint("non-finite metrics".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        epoch: meta.epoch,
        train_loss: meta.train_loss,
        train_accuracy: meta.train_accuracy,
        seed: meta.seed,
        rng_state: meta.rng_state,
        lineage: meta.lineage,
    })
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
