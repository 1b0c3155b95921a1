//! Training loop: Adam with weight decay folded into the gradient, linear
//! per-epoch warmup, stepped learning-rate decay, seeded shuffling, per-epoch
//! validation, and versioned checkpoints that resume bit-exactly.

use crate::dmf::{DmfError, Model, ModelConfig};
use crate::gradcore::{GradError, Matrix, Mode, Tape, Var};
use crate::metrics::{MetricError, MetricsReport};
use crate::synthdata::SynthDataset;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

const CKPT_MAGIC: &[u8; 5] = b"CFDC1";
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Validation forward passes are chunked to bound tape memory.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("epoch {epoch} out of range for {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("parameter {index} has no gradient")]
    MissingGradient { index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: training diverged")]
    Diverged { epoch: usize, batch: usize },
    #[error("checkpoint has bad magic {0:?}, expected \"CFDC1\"")]
    BadMagic([u8; 5]),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: file is corrupt")]
    ChecksumMismatch,
    #[error("checkpoint config hash {stored} does not match provided configs {expected}")]
    ConfigHashMismatch { stored: String, expected: String },
    #[error("checkpoint parameter {index} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dmf(#[from] DmfError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn default_batch() -> usize {
    32
}
fn default_warmup() -> usize {
    5
}
fn default_decay_factor() -> f64 {
    0.8
}
fn default_decay_every() -> usize {
    5
}
fn default_weight_decay() -> f64 {
    1e-4
}

/// Optimization hyperparameters. Model hyperparameters (loss weights,
/// dropout, ablation flags) live in [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(TrainError::BadConfig(
                "epochs, batch_size and decay_every must be ≥ 1".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::BadConfig(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TrainError::BadConfig(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::BadConfig(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Learning rate at an epoch: linear warmup from base_lr/warmup to base_lr
/// over the first `warmup_epochs` epochs, then multiplied by `decay_factor`
/// at the warmup boundary and every `decay_every` epochs after it.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= config.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: config.epochs,
        });
    }
    let w = config.warmup_epochs;
    if epoch < w {
        return Ok(config.base_lr * (epoch + 1) as f64 / w as f64);
    }
    let steps = 1 + (epoch - w) / config.decay_every;
    Ok(config.base_lr * config.decay_factor.powi(steps as i32))
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[crate::gradcore::ParamRef]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.borrow().len()).collect();
        Self {
            m: shapes.iter().map(|&l| vec![0.0; l]).collect(),
            v: shapes.iter().map(|&l| vec![0.0; l]).collect(),
            step: 0,
        }
    }
}

/// One Adam update over all parameters. Weight decay is folded into the
/// gradient (g ← g + λθ) before the moment updates; bias correction applied.
pub fn adam_step(
    params: &[crate::gradcore::ParamRef],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (index, p) in params.iter().enumerate() {
        let mut p = p.borrow_mut();
        if p.grad().is_none() {
            return Err(TrainError::MissingGradient { index });
        }
        let m = &mut state.m[index];
        let v = &mut state.v[index];
        for k in 0..p.len() {
            let g = p.grad().expect("checked")[k] + weight_decay * p.data()[k];
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub l_cls: f64,
    pub l_sh: f64,
    pub l_ps: f64,
    pub l_diff: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

pub fn history_csv_header() -> &'static str {
    "epoch,lr,train_loss,l_cls,l_sh,l_ps,l_diff,val_acc,val_auc"
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(history_csv_header());
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.l_cls, r.l_sh, r.l_ps, r.l_diff, r.val_acc, r.val_auc
        ));
    }
    out
}

/// Full resumable training state. Saving and reloading at any epoch boundary
/// reproduces the uninterrupted run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    pub params: Vec<Matrix>,
    pub adam: AdamState,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_auc: f64,
    pub best_params: Vec<Matrix>,
}

/// sha256 (hex) of the serialized config pair; guards resume against a
/// different configuration.
pub fn config_hash(model_config: &ModelConfig, train_config: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(&(model_config, train_config)).expect("serializable configs");
    hex(&Sha256::digest(&bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Drives training of one model: owns the model, optimizer state and rng.
pub struct Trainer {
    pub model: Model,
    pub train_config: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    rng_seed: [u8; 32],
    epoch: usize,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_auc: f64,
    best_params: Vec<Matrix>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, train_config: TrainConfig) -> Result<Self, TrainError> {
        train_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        let rng_seed = rng.get_seed();
        let model = Model::init(model_config, &mut rng)?;
        let adam = AdamState::new(&model.params());
        Ok(Self {
            model,
            train_config,
            adam,
            rng,
            rng_seed,
            epoch: 0,
            history: Vec::new(),
            best_epoch: None,
            best_auc: f64::NEG_INFINITY,
            best_params: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    /// Runs all remaining epochs.
    pub fn fit(&mut self, train: &SynthDataset, val: &SynthDataset) -> Result<(), TrainError> {
        while self.epoch < self.train_config.epochs {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    /// Runs one epoch (shuffle, mini-batch updates, validation) and appends
    /// its history row.
    pub fn run_epoch(
        &mut self,
        train: &SynthDataset,
        val: &SynthDataset,
    ) -> Result<EpochRecord, TrainError> {
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.train_config)?;
        let n = train.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let params = self.model.params();
        let mut sums = [0.0; 5]; // total, cls, sh, ps, diff
        for (batch_idx, batch) in order.chunks(self.train_config.batch_size).enumerate() {
            let diverged = |e: TrainError| match e {
                TrainError::Grad(GradError::NonFinite { .. }) => TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                },
                other => other,
            };
            let mut tape = Tape::new();
            let xs: Vec<Var> = train
                .x
                .iter()
                .map(|m| tape.constant(m.select_rows(batch)))
                .collect::<Result<_, _>>()
                .map_err(|e| diverged(e.into()))?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.y[i]).collect();
            let parts = self
                .model
                .loss(&mut tape, &xs, &labels, Mode::Train, &mut self.rng)
                .map_err(|e| diverged(e.into()))?;
            let total = tape.scalar_value(parts.total);
            if !total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            let w = batch.len() as f64 / n as f64;
            sums[0] += total * w;
            sums[1] += tape.scalar_value(parts.l_cls) * w;
            sums[2] += tape.scalar_value(parts.l_sh) * w;
            sums[3] += tape.scalar_value(parts.l_ps) * w;
            sums[4] += tape.scalar_value(parts.l_diff) * w;

            for p in &params {
                p.borrow_mut().zero_grad();
            }
            tape.backward(parts.total).map_err(|e| diverged(e.into()))?;
            adam_step(&params, &mut self.adam, lr, self.train_config.weight_decay)?;
        }

        let report = evaluate(&self.model, val)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: sums[0],
            l_cls: sums[1],
            l_sh: sums[2],
            l_ps: sums[3],
            l_diff: sums[4],
            val_acc: report.acc.unwrap_or(f64::NAN),
            val_auc: report.auc.unwrap_or(f64::NAN),
        };
        if record.val_auc > self.best_auc {
            self.best_auc = record.val_auc;
            self.best_epoch = Some(epoch);
            self.best_params = snapshot_params(&self.model);
        }
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// The model restored to its best-validation-AUC parameters.
    pub fn best_model(&self) -> Result<Model, TrainError> {
        let mut model = Model::init(
            self.model.config.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        set_params(&mut model, &self.best_params)?;
        Ok(model)
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            params: snapshot_params(&self.model),
            adam: self.adam.clone(),
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng.get_word_pos(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            best_auc: self.best_auc,
            best_params: self.best_params.clone(),
        }
    }

    /// Rebuilds a trainer from a checkpoint, verifying the config hash when
    /// expected configs are given.
    pub fn from_checkpoint(
        ckpt: Checkpoint,
        expected: Option<(&ModelConfig, &TrainConfig)>,
    ) -> Result<Self, TrainError> {
        if let Some((mc, tc)) = expected {
            let stored = config_hash(&ckpt.model_config, &ckpt.train_config);
            let want = config_hash(mc, tc);
            if stored != want {
                return Err(TrainError::ConfigHashMismatch {
                    stored,
                    expected: want,
                });
            }
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        let mut model = Model::init(
            ckpt.model_config.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        set_params(&mut model, &ckpt.params)?;
        Ok(Self {
            model,
            train_config: ckpt.train_config,
            adam: ckpt.adam,
            rng,
            rng_seed: ckpt.rng_seed,
            epoch: ckpt.epoch,
            history: ckpt.history,
            best_epoch: ckpt.best_epoch,
            best_auc: ckpt.best_auc,
            best_params: ckpt.best_params,
        })
    }
}

fn snapshot_params(model: &Model) -> Vec<Matrix> {
    // value-only copies: gradient buffers are transient optimizer state
    model
        .params()
        .iter()
        .map(|p| {
            let p = p.borrow();
            Matrix::new(p.rows(), p.cols(), p.data().to_vec()).expect("consistent")
        })
        .collect()
}

/// Overwrites the model's parameters with the given matrices (same canonical
/// order as `Model::params`).
pub fn set_params(model: &mut Model, values: &[Matrix]) -> Result<(), TrainError> {
    let params = model.params();
    if params.len() != values.len() {
        return Err(TrainError::BadConfig(format!(
            "parameter list length {} does not match model's {}",
            values.len(),
            params.len()
        )));
    }
    for (index, (p, v)) in params.iter().zip(values).enumerate() {
        let mut p = p.borrow_mut();
        if p.shape() != v.shape() {
            return Err(TrainError::ParamShape {
                index,
                expected: p.shape(),
                got: v.shape(),
            });
        }
        p.data_mut().copy_from_slice(v.data());
    }
    Ok(())
}

/// Eval-mode class probabilities for a whole dataset, chunked to bound tape
/// memory.
pub fn predict_probs(model: &Model, data: &SynthDataset) -> Result<Matrix, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let n = data.n();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let xs: Vec<Var> = data
            .x
            .iter()
            .map(|m| tape.constant(m.select_rows(chunk)))
            .collect::<Result<_, _>>()?;
        let pass = model.forward(&mut tape, &xs, Mode::Eval, &mut rng)?;
        let probs = tape.softmax_rows(pass.logits)?;
        let pm = tape.value(probs);
        for r in 0..pm.rows() {
            rows.push(pm.row(r).to_vec());
        }
    }
    Ok(Matrix::from_rows(&rows)?)
}

/// Eval-mode metrics of a model on a dataset.
pub fn evaluate(model: &Model, data: &SynthDataset) -> Result<MetricsReport, TrainError> {
    let probs = predict_probs(model, data)?;
    Ok(MetricsReport::evaluate(&probs, &data.y)?)
}

// ---- checkpoint serialization ----------------------------------------------

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    config_hash: String,
    epoch: usize,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_auc: f64,
}

fn write_matrices(w: &mut impl Write, ms: &[Matrix]) -> io::Result<()> {
    w.write_u32::<LittleEndian>(ms.len() as u32)?;
    for m in ms {
        w.write_u32::<LittleEndian>(m.rows() as u32)?;
        w.write_u32::<LittleEndian>(m.cols() as u32)?;
        for &v in m.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_matrices(r: &mut impl Read) -> Result<Vec<Matrix>, TrainError> {
    let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?;
        out.push(Matrix::new(rows, cols, data).map_err(|_| TrainError::Truncated)?);
    }
    Ok(out)
}

fn write_vecs(w: &mut impl Write, vs: &[Vec<f64>]) -> io::Result<()> {
    w.write_u32::<LittleEndian>(vs.len() as u32)?;
    for v in vs {
        w.write_u32::<LittleEndian>(v.len() as u32)?;
        for &x in v {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn read_vecs(r: &mut impl Read) -> Result<Vec<Vec<f64>>, TrainError> {
    let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut v = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut v).map_err(trunc)?;
        out.push(v);
    }
    Ok(out)
}

fn trunc(e: io::Error) -> TrainError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        TrainError::Truncated
    } else {
        TrainError::Io(e)
    }
}

/// Writes a checkpoint atomically (temp file + rename). The file ends with a
/// sha256 checksum of everything before it.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let meta = CkptMeta {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        config_hash: config_hash(&ckpt.model_config, &ckpt.train_config),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        best_epoch: ckpt.best_epoch,
        best_auc: ckpt.best_auc,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    buf.write_u32::<LittleEndian>(meta_json.len() as u32)?;
    buf.extend_from_slice(&meta_json);
    write_matrices(&mut buf, &ckpt.params)?;
    write_matrices(&mut buf, &ckpt.best_params)?;
    write_vecs(&mut buf, &ckpt.adam.m)?;
    write_vecs(&mut buf, &ckpt.adam.v)?;
    buf.write_u64::<LittleEndian>(ckpt.adam.step)?;
    buf.extend_from_slice(&ckpt.rng_seed);
    buf.write_u64::<LittleEndian>(ckpt.rng_word_pos as u64)?;
    buf.write_u64::<LittleEndian>((ckpt.rng_word_pos >> 64) as u64)?;
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let path = path.as_ref();
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint, verifying magic, checksum, and the embedded config
/// hash.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let buf = std::fs::read(path.as_ref())?;
    if buf.len() < 5 + 32 {
        return Err(TrainError::Truncated);
    }
    if &buf[..5] != CKPT_MAGIC {
        let mut magic = [0u8; 5];
        magic.copy_from_slice(&buf[..5]);
        return Err(TrainError::BadMagic(magic));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(TrainError::ChecksumMismatch);
    }
    let mut r = &body[5..];
    let meta_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    if r.len() < meta_len {
        return Err(TrainError::Truncated);
    }
    let meta: CkptMeta = serde_json::from_slice(&r[..meta_len])?;
    let stored = config_hash(&meta.model_config, &meta.train_config);
    if stored != meta.config_hash {
        return Err(TrainError::ConfigHashMismatch {
            stored: meta.config_hash,
            expected: stored,
        });
    }
    r = &r[meta_len..];
    let params = read_matrices(&mut r)?;
    let best_params = read_matrices(&mut r)?;
    let m = read_vecs(&mut r)?;
    let v = read_vecs(&mut r)?;
    let step = r.read_u64::<LittleEndian>().map_err(trunc)?;
    let mut rng_seed = [0u8; 32];
    r.read_exact(&mut rng_seed).map_err(trunc)?;
    let lo = r.read_u64::<LittleEndian>().map_err(trunc)?;
    let hi = r.read_u64::<LittleEndian>().map_err(trunc)?;
    Ok(Checkpoint {
        model_config: meta.model_config,
        train_config: meta.train_config,
        epoch: meta.epoch,
        params,
        best_params,
        adam: AdamState { m, v, step },
        rng_seed,
        rng_word_pos: (hi as u128) << 64 | lo as u128,
        history: meta.history,
        best_epoch: meta.best_epoch,
        best_auc: meta.best_auc,
    })
}
