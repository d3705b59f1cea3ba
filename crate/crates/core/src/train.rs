//! Mini-batch Adam training with best-validation checkpointing, and the
//! α / frequency-range ablation runners built on top of it.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{Corpus, Split, TensorSet};
use crate::losses::{combo_loss_with_grad, evaluate_dataset, EvalReport, LossConfig};
use crate::model::{ModelConfig, SegmentationModel, Variant};
use crate::nn::{Mode, Module};
use crate::spectral::FrequencyFilter;
use crate::{Error, Result};

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const RUN_RECORD: &str = "run.json";

/// Keeps the shuffle stream independent of the weight-init stream.
const SHUFFLE_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 coefficient added to every gradient before the Adam update.
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub loss: LossConfig,
    /// Where `best.safetensors` and `run.json` go; nothing is written if unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            max_epochs: 80,
            optimizer: Optimizer::Adam,
            seed: 0,
            loss: LossConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Adam with bias correction; weight decay is folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        let mut params = Vec::new();
        model.params("", &mut params);
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())))
                .collect();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for ((_, p), (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g + wd * *w;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Preprocessed train / val / test tensors.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: TensorSet,
    pub val: TensorSet,
    pub test: TensorSet,
}

impl SplitData {
    pub fn load(corpus: &Corpus, size: usize) -> Result<Self> {
        Ok(Self {
            train: corpus.tensors(Split::Train, size)?,
            val: corpus.tensors(Split::Val, size)?,
            test: corpus.tensors(Split::Test, size)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation mean dice per epoch.
    pub val_mean_dice: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
    /// Test-split scores of the best-validation weights.
    pub test: EvalReport,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

type Snapshot = (Vec<ArrayD<f64>>, Vec<ArrayD<f64>>);

fn snapshot(model: &mut SegmentationModel) -> Snapshot {
    let mut params = Vec::new();
    model.params("", &mut params);
    let values = params.into_iter().map(|(_, p)| p.value.clone()).collect();
    let mut buffers = Vec::new();
    model.buffers("", &mut buffers);
    (values, buffers.into_iter().map(|(_, b)| b.clone()).collect())
}

fn restore(model: &mut SegmentationModel, snap: &Snapshot) {
    let mut params = Vec::new();
    model.params("", &mut params);
    for ((_, p), v) in params.into_iter().zip(&snap.0) {
        p.value.assign(v);
    }
    let mut buffers = Vec::new();
    model.buffers("", &mut buffers);
    for ((_, b), v) in buffers.into_iter().zip(&snap.1) {
        b.assign(v);
    }
}

fn check_size(model_cfg: &ModelConfig, data: &SplitData) -> Result<()> {
    let (h, w) = model_cfg.input_size;
    for (name, set) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let (_, _, sh, sw) = set.images.dim();
        if set.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
        if (sh, sw) != (h, w) {
            return Err(Error::Config(format!(
                "{name} tensors are {sh}x{sw} but the model expects {h}x{w}"
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model and returns its curves plus the test report of the
/// best-validation weights.
pub fn train(model_cfg: &ModelConfig, data: &SplitData, cfg: &TrainConfig) -> Result<RunRecord> {
    let (model, record) = train_model(model_cfg, data, cfg)?;
    drop(model);
    Ok(record)
}

/// As [`train`], also returning the model holding the best-validation weights.
pub fn train_model(
    model_cfg: &ModelConfig,
    data: &SplitData,
    cfg: &TrainConfig,
) -> Result<(SegmentationModel, RunRecord)> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_size(model_cfg, data)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = SegmentationModel::from_seed(model_cfg.clone(), cfg.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);

    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_loss = Vec::with_capacity(cfg.max_epochs);
    let mut val_curve = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, Snapshot)> = None;
    let checkpoint = cfg.checkpoint_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT));

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.train.select(chunk);
            model.zero_grad();
            let logits = match model.forward(&batch.images, Mode::Train) {
                Ok(l) => l,
                Err(Error::InvalidInput(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let (loss, grad) = combo_loss_with_grad(&logits, &batch.masks, &cfg.loss)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: loss.total,
                });
            }
            model.backward(&grad);
            adam.step(&mut model);
            loss_sum += loss.total * chunk.len() as f64;
        }
        let epoch_loss = loss_sum / n as f64;
        train_loss.push(epoch_loss);

        let val = evaluate_dataset(&mut model, &data.val, cfg.batch_size)?;
        val_curve.push(val.mean_dice);
        log::info!(
            "epoch {epoch}/{}: train loss {epoch_loss:.4}, val mean dice {:.4}",
            cfg.max_epochs,
            val.mean_dice
        );
        if best.as_ref().is_none_or(|(_, score, _)| val.mean_dice > *score) {
            best = Some((epoch, val.mean_dice, snapshot(&mut model)));
            if let Some(path) = &checkpoint {
                save_checkpoint(&mut model, path)?;
            }
        }
    }

    let (best_epoch, _, snap) = best.expect("at least one epoch ran");
    restore(&mut model, &snap);
    let test = evaluate_dataset(&mut model, &data.test, cfg.batch_size)?;
    let record = RunRecord {
        model_config: model_cfg.clone(),
        train_config: cfg.clone(),
        train_loss,
        val_mean_dice: val_curve,
        best_epoch,
        checkpoint,
        test,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        record.save(&dir.join(RUN_RECORD))?;
    }
    Ok((model, record))
}

/// Loads the corpus at `corpus_dir` and trains on it.
pub fn train_on_corpus(
    model_cfg: &ModelConfig,
    corpus_dir: &Path,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let corpus = Corpus::open(corpus_dir)?;
    let (h, w) = model_cfg.input_size;
    if h != w {
        return Err(Error::Config(format!("corpus preprocessing needs a square input, got {h}x{w}")));
    }
    let data = SplitData::load(&corpus, h)?;
    train(model_cfg, &data, cfg)
}

/// One row of an ablation table; a failed row keeps its error message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub model_config: ModelConfig,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn report(&self) -> Option<&EvalReport> {
        self.record.as_ref().map(|r| &r.test)
    }
}

fn run_row(label: String, model_cfg: ModelConfig, data: &SplitData, cfg: &TrainConfig) -> AblationRow {
    let mut row_cfg = cfg.clone();
    row_cfg.checkpoint_dir = cfg.checkpoint_dir.as_ref().map(|d| d.join(&label));
    log::info!("ablation row `{label}`");
    match train(&model_cfg, data, &row_cfg) {
        Ok(record) => AblationRow {
            label,
            model_config: model_cfg,
            record: Some(record),
            error: None,
        },
        Err(e) => {
            log::error!("ablation row `{label}` failed: {e}");
            AblationRow {
                label,
                model_config: model_cfg,
                record: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// One spectral-branch run per α, then one run with a conv-only second branch.
pub fn run_alpha_ablation(
    alphas: &[f64],
    base: &ModelConfig,
    data: &SplitData,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    let mut rows: Vec<AblationRow> = alphas
        .iter()
        .map(|&alpha| {
            let m = ModelConfig {
                variant: Variant::Ynet,
                alpha,
                ..base.clone()
            };
            run_row(format!("alpha_{alpha}"), m, data, cfg)
        })
        .collect();
    let conv = ModelConfig {
        variant: Variant::YnetConvBranch,
        ..base.clone()
    };
    rows.push(run_row("conv_branch".into(), conv, data, cfg));
    Ok(rows)
}

/// One spectral-branch run per frequency filter.
pub fn run_frequency_ablation(
    filters: &[FrequencyFilter],
    base: &ModelConfig,
    data: &SplitData,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    for f in filters {
        f.validate()?;
    }
    Ok(filters
        .iter()
        .map(|&filter| {
            let m = ModelConfig {
                variant: Variant::Ynet,
                filter,
                ..base.clone()
            };
            run_row(format!("freq_{}", filter.label()), m, data, cfg)
        })
        .collect())
}

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub fn default_frequency_filters() -> Vec<FrequencyFilter> {
    vec![
        FrequencyFilter::none(),
        FrequencyFilter::keep(10.0),
        FrequencyFilter::remove(10.0),
    ]
}
