//! Mini-batch training with per-batch augmentation and resumable state.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpec;
use crate::autodiff::Tape;
use crate::encoder::{EncoderModel, Featurizer, Side};
use crate::error::{Error, Result};
use crate::eval::{mean_std, mrr_from_ranks, retrieve, EvalSet};
use crate::io::{atomic_write, CorpusRecord, Payload};
use crate::loss::{augmented_pools, augmented_variant, plain_variant, LossConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, label};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub aug_copies: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub aug_menu: Vec<AugmentationSpec>,
    pub aug_enabled: bool,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            aug_copies: 5,
            epochs: 30,
            optimizer: AdamConfig::default(),
            seed: 0,
            aug_menu: crate::augment::Method::TRAINING_MENU
                .iter()
                .map(|&m| AugmentationSpec::for_method(m))
                .collect(),
            aug_enabled: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.eval_every < 1 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if self.augmenting() && self.aug_menu.is_empty() {
            return Err(Error::config("augmentation is enabled but the method menu is empty"));
        }
        for spec in &self.aug_menu {
            spec.validate()?;
        }
        self.optimizer.validate()
    }

    /// Whether batches actually receive augmented copies.
    pub fn augmenting(&self) -> bool {
        self.aug_enabled && self.aug_copies > 0
    }

    /// Label written to the metrics file for this arm.
    pub fn aug_label(&self) -> String {
        if !self.augmenting() {
            return "none".to_string();
        }
        let names: Vec<&str> = self.aug_menu.iter().map(|s| s.method.name()).collect();
        format!("{}x{}", names.join("+"), self.aug_copies)
    }
}

/// Featurized, aligned query/item rows.
#[derive(Debug, Clone)]
pub struct PairData {
    pub queries: Tensor,
    pub items: Tensor,
}

impl PairData {
    pub fn from_records(records: &[&CorpusRecord], featurizer: &Featurizer) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::contract("no records to featurize"));
        }
        let mut q = Vec::with_capacity(records.len());
        let mut c = Vec::with_capacity(records.len());
        for r in records {
            match &r.payload {
                Payload::Text { query, code } => {
                    q.push(featurizer.featurize(query));
                    c.push(featurizer.featurize(code));
                }
                Payload::Vectors { qvec, cvec } => {
                    q.push(qvec.clone());
                    c.push(cvec.clone());
                }
            }
        }
        Ok(Self {
            queries: Tensor::from_rows(&q)?,
            items: Tensor::from_rows(&c)?,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.queries.cols()
    }

    /// Each query paired with its own item over this split's items.
    pub fn eval_set(&self) -> Result<EvalSet> {
        EvalSet::new(self.queries.clone(), self.items.clone(), (0..self.len()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub mrr: Option<f64>,
    pub norm_std: Option<f64>,
    pub aug: String,
}

/// Evaluation outcome on a held-out split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub mrr: f64,
    /// Population std of item-representation norms.
    pub norm_std: f64,
}

pub fn validate_model(model: &EncoderModel, set: &EvalSet) -> Result<Validation> {
    let r = retrieve(set, model)?;
    let (_, norm_std) = mean_std(&r.code_embeddings.row_norms());
    Ok(Validation {
        mrr: mrr_from_ranks(&r.ranks, None)?,
        norm_std,
    })
}

/// Loss and gradients for one batch. `aug` carries the method and the seed
/// its copies are drawn from.
pub fn batch_step(
    model: &EncoderModel,
    q: &Tensor,
    c: &Tensor,
    loss: &LossConfig,
    aug: Option<(&AugmentationSpec, usize, u64)>,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let enc = model.bind(&tape);
    let qv = enc.forward(Side::Query, tape.constant(q.clone()))?;
    let cv = enc.forward(Side::Item, tape.constant(c.clone()))?;
    let l = match aug {
        Some((spec, copies, seed)) => {
            let (qp, cp, pairs) = augmented_pools(qv, cv, spec, copies, seed)?;
            augmented_variant(loss, qp, cp, &pairs)?
        }
        None => plain_variant(loss, qv, cv)?,
    };
    let value = l.item();
    if !value.is_finite() {
        return Err(Error::Domain {
            op: "train",
            detail: format!("non-finite batch loss {value}"),
        });
    }
    let mut grads = l.backward()?;
    let g = enc.params().iter().map(|&p| grads.take(p)).collect();
    Ok((value, g))
}

/// One pass over `data`; returns the mean batch loss. Every random choice
/// is drawn from a stream keyed by (seed, epoch, batch), so an epoch's work
/// depends only on the model, optimizer state and epoch index.
pub fn train_epoch(
    model: &mut EncoderModel,
    adam: &mut Adam,
    data: &PairData,
    config: &TrainConfig,
    loss: &LossConfig,
    epoch: usize,
) -> Result<f64> {
    let b = config.batch_size;
    if data.len() < b {
        return Err(Error::config(format!(
            "corpus has {} training pairs, fewer than one batch of {b}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, &[label::SHUFFLE, epoch as u64]));
    let batches = data.len() / b;
    let mut total = 0.0;
    for k in 0..batches {
        let idx = &order[k * b..(k + 1) * b];
        let q = data.queries.select_rows(idx);
        let c = data.items.select_rows(idx);
        let path = [epoch as u64, k as u64];
        let aug = if config.augmenting() {
            let mut pick = rng::stream(config.seed, &[label::METHOD, path[0], path[1]]);
            let spec = &config.aug_menu[pick.random_range(0..config.aug_menu.len())];
            let seed = rng::derive_seed(config.seed, &[label::AUGMENT, path[0], path[1]]);
            Some((spec, config.aug_copies, seed))
        } else {
            None
        };
        let (value, grads) = batch_step(model, &q, &c, loss, aug)?;
        adam.update(&mut model.params_mut(), &grads)?;
        total += value;
    }
    Ok(total / batches as f64)
}

/// Resumable training state. Random streams are derived from the seed and
/// epoch index, so no generator state needs saving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainState {
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub epochs_done: usize,
    pub adam: Adam,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_mrr: Option<f64>,
}

pub const MODEL_FILE: &str = "model.ramd";
pub const BEST_MODEL_FILE: &str = "best.ramd";
pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub struct Trainer {
    pub model: EncoderModel,
    pub best_model: Option<EncoderModel>,
    pub state: TrainState,
    pub epoch_seconds: Vec<f64>,
}

impl Trainer {
    pub fn new(model: EncoderModel, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let adam = Adam::for_params(config.optimizer, &model.params());
        Ok(Self {
            model,
            best_model: None,
            state: TrainState {
                config,
                loss,
                epochs_done: 0,
                adam,
                metrics: Vec::new(),
                best_epoch: None,
                best_mrr: None,
            },
            epoch_seconds: Vec::new(),
        })
    }

    pub fn done(&self) -> bool {
        self.state.epochs_done >= self.state.config.epochs
    }

    /// Trains one epoch and, when due, evaluates on `valid`.
    pub fn run_epoch(&mut self, data: &PairData, valid: Option<&EvalSet>) -> Result<EpochMetrics> {
        let epoch = self.state.epochs_done;
        let start = Instant::now();
        let loss = train_epoch(
            &mut self.model,
            &mut self.state.adam,
            data,
            &self.state.config,
            &self.state.loss,
            epoch,
        )?;
        self.epoch_seconds.push(start.elapsed().as_secs_f64());
        self.state.epochs_done += 1;
        let number = self.state.epochs_done;
        let due = number.is_multiple_of(self.state.config.eval_every) || number == self.state.config.epochs;
        let val = match valid {
            Some(set) if due => Some(validate_model(&self.model, set)?),
            _ => None,
        };
        if let Some(v) = val {
            if self.state.best_mrr.is_none_or(|b| v.mrr > b) {
                self.state.best_mrr = Some(v.mrr);
                self.state.best_epoch = Some(number);
                self.best_model = Some(self.model.clone());
            }
        }
        let m = EpochMetrics {
            epoch: number,
            loss,
            mrr: val.map(|v| v.mrr),
            norm_std: val.map(|v| v.norm_std),
            aug: self.state.config.aug_label(),
        };
        self.state.metrics.push(m.clone());
        Ok(m)
    }

    pub fn run(&mut self, data: &PairData, valid: Option<&EvalSet>) -> Result<()> {
        while !self.done() {
            self.run_epoch(data, valid)?;
        }
        Ok(())
    }

    pub fn metrics_jsonl(&self) -> String {
        metrics_jsonl(&self.state.metrics)
    }

    /// Writes model, best model, state and metrics into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(MODEL_FILE))?;
        if let Some(best) = &self.best_model {
            best.save(&dir.join(BEST_MODEL_FILE))?;
        }
        let state = serde_json::to_vec_pretty(&self.state).map_err(|e| Error::Format(e.to_string()))?;
        atomic_write(&dir.join(STATE_FILE), &state)?;
        atomic_write(&dir.join(METRICS_FILE), self.metrics_jsonl().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_slice(&bytes).map_err(|e| Error::Format(e.to_string()))?;
        let model = EncoderModel::load(&dir.join(MODEL_FILE))?;
        let best_path = dir.join(BEST_MODEL_FILE);
        let best_model = if state.best_epoch.is_some() {
            Some(EncoderModel::load(&best_path)?)
        } else {
            None
        };
        Ok(Self {
            model,
            best_model,
            state,
            epoch_seconds: Vec::new(),
        })
    }
}

pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

/// Result of a complete run: final and validation-best models side by side.
pub struct RunOutput {
    pub final_model: EncoderModel,
    pub best_model: EncoderModel,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub epoch_seconds: Vec<f64>,
}

pub fn train(
    model: EncoderModel,
    data: &PairData,
    valid: Option<&EvalSet>,
    config: &TrainConfig,
    loss: &LossConfig,
) -> Result<RunOutput> {
    let mut t = Trainer::new(model, config.clone(), *loss)?;
    t.run(data, valid)?;
    let best_epoch = t.state.best_epoch.unwrap_or(t.state.epochs_done);
    let final_model = t.model;
    Ok(RunOutput {
        best_model: t.best_model.unwrap_or_else(|| final_model.clone()),
        final_model,
        best_epoch,
        metrics: t.state.metrics,
        epoch_seconds: t.epoch_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn toy(n: usize, dim: usize, seed: u64) -> PairData {
        let mut r = rng::from_seed(seed);
        let q: Vec<f64> = (0..n * dim).map(|_| r.random::<f64>() - 0.5).collect();
        let c = q.iter().map(|v| v + 0.1 * (r.random::<f64>() - 0.5)).collect();
        PairData {
            queries: Tensor::matrix(n, dim, q),
            items: Tensor::matrix(n, dim, c),
        }
    }

    fn small_model(dim: usize) -> EncoderModel {
        let cfg = EncoderConfig {
            layer_sizes: vec![dim, 16, 8],
            ..EncoderConfig::default()
        };
        EncoderModel::new(cfg, 1).unwrap()
    }

    fn small_config(aug: bool) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            aug_copies: 2,
            epochs: 2,
            aug_enabled: aug,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_gives_one_metrics_row() {
        let data = toy(32, 6, 1);
        let cfg = TrainConfig {
            epochs: 1,
            ..small_config(true)
        };
        let out = train(small_model(6), &data, Some(&data.eval_set().unwrap()), &cfg, &LossConfig::default()).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].epoch, 1);
        assert!(out.metrics[0].mrr.is_some());
    }

    #[test]
    fn too_small_corpus_is_a_config_error() {
        let data = toy(5, 6, 1);
        let err = train(small_model(6), &data, None, &small_config(false), &LossConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let data = toy(32, 6, 2);
        let a = train(small_model(6), &data, None, &small_config(true), &LossConfig::default()).unwrap();
        let b = train(small_model(6), &data, None, &small_config(true), &LossConfig::default()).unwrap();
        assert_eq!(metrics_jsonl(&a.metrics), metrics_jsonl(&b.metrics));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = toy(32, 6, 3);
        let cfg = small_config(true);
        let full = train(small_model(6), &data, None, &cfg, &LossConfig::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(small_model(6), cfg, LossConfig::default()).unwrap();
        t.run_epoch(&data, None).unwrap();
        t.save(dir.path()).unwrap();
        let mut resumed = Trainer::load(dir.path()).unwrap();
        resumed.run(&data, None).unwrap();
        assert_eq!(metrics_jsonl(&full.metrics), resumed.metrics_jsonl());
        assert_eq!(full.final_model.to_bytes(), resumed.model.to_bytes());
    }
}
