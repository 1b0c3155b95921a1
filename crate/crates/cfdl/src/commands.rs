//! Command layer shared by the CLI binary and the examples: dataset
//! generation, k-fold training with aggregation, the ablation grid, gate and
//! similarity exports, and evaluation. Each command is deterministic given
//! config + seed and writes self-describing artifact directories.

use crate::dmf::{AblationFlags, Model, ModelConfig};
use crate::gradcore::{GradError, Matrix, Mode, Tape, Var};
use crate::metrics::{aggregate, MetricError, MetricsReport};
use crate::synthdata::{self, SynthConfig, SynthDataset, SynthError};
use crate::train::{
    self, config_hash, history_to_csv, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig,
    TrainError, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Command-level error, classified by exit code: config errors exit 2,
/// numerical failures exit 3, everything else exits 1.
#[derive(Debug, Error)]
pub enum CmdError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Numerical(_) => 3,
            CmdError::Other(_) => 1,
        }
    }
}

impl From<SynthError> for CmdError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(_) => CmdError::Other(e.to_string()),
            _ => CmdError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CmdError::Numerical(e.to_string()),
            TrainError::Grad(GradError::NonFinite { .. }) => CmdError::Numerical(e.to_string()),
            TrainError::BadConfig(_)
            | TrainError::EpochOutOfRange { .. }
            | TrainError::BadMagic(_)
            | TrainError::Truncated
            | TrainError::ChecksumMismatch
            | TrainError::ConfigHashMismatch { .. }
            | TrainError::Json(_) => CmdError::Config(e.to_string()),
            other => CmdError::Other(other.to_string()),
        }
    }
}

impl From<crate::dmf::DmfError> for CmdError {
    fn from(e: crate::dmf::DmfError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<GradError> for CmdError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::NonFinite { .. } => CmdError::Numerical(e.to_string()),
            other => CmdError::Other(other.to_string()),
        }
    }
}

impl From<MetricError> for CmdError {
    fn from(e: MetricError) -> Self {
        CmdError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Other(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CmdError {
    fn from(e: serde_json::Error) -> Self {
        CmdError::Config(format!("json: {e}"))
    }
}

fn default_model_dim() -> usize {
    32
}
fn default_weight() -> f64 {
    1.0
}
fn default_dropout() -> f64 {
    0.5
}
fn default_folds() -> usize {
    3
}

/// Model hyperparameters of a run; shape fields (modalities, in_dim,
/// num_cls) are taken from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default = "default_model_dim")]
    pub dim: usize,
    #[serde(default = "default_weight")]
    pub alpha: f64,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub flags: AblationFlags,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            dim: default_model_dim(),
            alpha: default_weight(),
            beta: default_weight(),
            dropout: default_dropout(),
            flags: AblationFlags::default(),
        }
    }
}

/// A full run description, parsed from a JSON file. Exactly one of `synth`
/// (generate data) or `dataset` (load a saved file) must be set. Unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSettings,
    pub train: TrainConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CmdError> {
        match (&self.synth, &self.dataset) {
            (Some(_), Some(_)) => {
                return Err(CmdError::Config(
                    "set either synth or dataset, not both".into(),
                ))
            }
            (None, None) => {
                return Err(CmdError::Config(
                    "one of synth or dataset is required".into(),
                ))
            }
            _ => {}
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.folds < 2 {
            return Err(CmdError::Config(format!(
                "folds must be ≥ 2, got {}",
                self.folds
            )));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// CLI-flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub flags: Option<AblationFlags>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, run: &mut RunConfig) {
        if let Some(seed) = self.seed {
            run.train.seed = seed;
            if let Some(s) = &mut run.synth {
                s.seed = seed;
            }
        }
        if let Some(folds) = self.folds {
            run.folds = folds;
        }
        if let Some(flags) = self.flags {
            run.model.flags = flags;
        }
        if let Some(out) = &self.out {
            run.out_dir = Some(out.clone());
        }
    }
}

/// Parses `--flags` values: a comma-separated list of the enabled switches
/// out of dis_ps, moe, ling. Unlisted switches are off.
pub fn parse_flags(s: &str) -> Result<AblationFlags, CmdError> {
    let mut flags = AblationFlags {
        dis_ps: false,
        moe: false,
        ling: false,
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "dis_ps" => flags.dis_ps = true,
            "moe" => flags.moe = true,
            "ling" => flags.ling = true,
            other => {
                return Err(CmdError::Config(format!(
                    "unknown flag '{other}', expected dis_ps, moe or ling"
                )))
            }
        }
    }
    Ok(flags)
}

/// Loads and validates a run config, applying overrides.
pub fn load_run_config(path: impl AsRef<Path>, over: &Overrides) -> Result<RunConfig, CmdError> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut run: RunConfig = serde_json::from_str(&text)?;
    over.apply(&mut run);
    run.validate()?;
    Ok(run)
}

/// Generates a dataset and writes it; returns a one-line summary
/// (modalities, samples, class histogram).
pub fn cmd_gen_data(config: &SynthConfig, out: impl AsRef<Path>) -> Result<String, CmdError> {
    let d = synthdata::generate(config)?;
    synthdata::save(&d, out.as_ref())?;
    let mut hist = vec![0usize; d.num_cls];
    for &y in &d.y {
        hist[y] += 1;
    }
    Ok(format!(
        "wrote {}: M={} n={} in_dim={} classes={} histogram={:?}",
        out.as_ref().display(),
        d.modalities(),
        d.n(),
        d.in_dim(),
        d.num_cls,
        hist
    ))
}

/// Everything a training run leaves behind, in memory form.
pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub fold_reports: Vec<MetricsReport>,
    /// Per-metric (name, mean, std) over folds.
    pub aggregate: Vec<(String, f64, f64)>,
}

fn resolve_dataset(run: &RunConfig) -> Result<SynthDataset, CmdError> {
    match (&run.synth, &run.dataset) {
        (Some(cfg), None) => Ok(synthdata::generate(cfg)?),
        (None, Some(path)) => Ok(synthdata::load(path)?),
        _ => Err(CmdError::Config(
            "one of synth or dataset is required".into(),
        )),
    }
}

fn model_config_for(run: &RunConfig, data: &SynthDataset) -> ModelConfig {
    ModelConfig {
        modalities: data.modalities(),
        in_dim: data.in_dim(),
        dim: run.model.dim,
        num_cls: data.num_cls,
        flags: run.model.flags,
        alpha: run.model.alpha,
        beta: run.model.beta,
        dropout: run.model.dropout,
    }
}

fn out_dir_of(run: &RunConfig) -> Result<PathBuf, CmdError> {
    run.out_dir
        .clone()
        .ok_or_else(|| CmdError::Config("no output directory: set out_dir or --out".into()))
}

/// Trains over stratified k folds, writing per-fold artifacts (history CSV,
/// checkpoint, metrics JSON) plus a config snapshot and a mean±std summary.
pub fn cmd_train(run: &RunConfig) -> Result<TrainArtifacts, CmdError> {
    run.validate()?;
    let out_dir = out_dir_of(run)?;
    let data = resolve_dataset(run)?;
    run_training(run, &data, &out_dir)
}

fn run_training(
    run: &RunConfig,
    data: &SynthDataset,
    out_dir: &Path,
) -> Result<TrainArtifacts, CmdError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(run)?,
    )?;
    if run.synth.is_some() {
        synthdata::save(data, out_dir.join("dataset.cfdl"))?;
    }

    let model_config = model_config_for(run, data);
    let folds = synthdata::kfold_split(&data.y, run.folds, run.train.seed)?;
    let mut fold_reports = Vec::with_capacity(folds.len());
    for (f, (train_idx, val_idx)) in folds.iter().enumerate() {
        let fold_dir = out_dir.join(format!("fold_{f}"));
        std::fs::create_dir_all(&fold_dir)?;
        let train_set = data.select(train_idx);
        let val_set = data.select(val_idx);
        let mut tc = run.train.clone();
        tc.seed = run.train.seed.wrapping_add(f as u64);
        let mut trainer = Trainer::new(model_config.clone(), tc)?;
        trainer.fit(&train_set, &val_set)?;

        std::fs::write(
            fold_dir.join("history.csv"),
            history_to_csv(trainer.history()),
        )?;
        save_checkpoint(&trainer.checkpoint(), fold_dir.join("checkpoint.ckpt"))?;
        let best = trainer.best_model()?;
        let report = train::evaluate(&best, &val_set)?;
        std::fs::write(
            fold_dir.join("metrics.json"),
            serde_json::to_string_pretty(&report.to_json())?,
        )?;
        fold_reports.push(report);
    }

    let agg = aggregate(&fold_reports);
    let mut csv = String::from("metric,mean,std\n");
    for (name, mean, std) in &agg {
        writeln!(csv, "{name},{mean},{std}").expect("string write");
    }
    std::fs::write(out_dir.join("metrics_mean_std.csv"), csv)?;
    let summary = serde_json::json!({
        "folds": fold_reports.iter().map(MetricsReport::to_json).collect::<Vec<_>>(),
        "mean_std": agg.iter().map(|(n, m, s)| serde_json::json!({
            "metric": n, "mean": m, "std": s
        })).collect::<Vec<_>>(),
    });
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    Ok(TrainArtifacts {
        out_dir: out_dir.to_path_buf(),
        fold_reports,
        aggregate: agg,
    })
}

/// One row of the ablation grid.
pub struct AblationRow {
    pub flags: AblationFlags,
    pub artifacts: TrainArtifacts,
}

pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    /// Set when the grid collapsed (M=2 has no partial subsets, so dis_ps
    /// has no effect).
    pub notice: Option<String>,
}

/// Runs the ablation grid — dis_ps × MoE × LinG, with LinG only meaningful
/// under MoE — on one shared dataset with identical seeds per row. Six rows
/// for M ≥ 3; three rows (plus a notice) for M = 2.
pub fn cmd_ablate(run: &RunConfig) -> Result<AblationGrid, CmdError> {
    run.validate()?;
    let out_dir = out_dir_of(run)?;
    std::fs::create_dir_all(&out_dir)?;
    let data = resolve_dataset(run)?;

    let m = data.modalities();
    let (grid, notice): (Vec<AblationFlags>, Option<String>) = if m >= 3 {
        (
            vec![
                flags(false, false, false),
                flags(true, false, false),
                flags(false, true, false),
                flags(false, true, true),
                flags(true, true, false),
                flags(true, true, true),
            ],
            None,
        )
    } else {
        (
            vec![
                flags(true, false, false),
                flags(true, true, false),
                flags(true, true, true),
            ],
            Some(format!(
                "M={m} has no partial subsets; dis_ps rows collapse, grid reduced to 3 rows"
            )),
        )
    };

    let mut rows = Vec::with_capacity(grid.len());
    for f in grid {
        let mut row_run = run.clone();
        row_run.model.flags = f;
        let dir = out_dir.join(row_label(&f));
        row_run.out_dir = Some(dir.clone());
        let artifacts = run_training(&row_run, &data, &dir)?;
        rows.push(AblationRow { flags: f, artifacts });
    }

    // grid summary CSV: flag columns plus mean/std per metric
    let metric_names: Vec<String> = rows[0]
        .artifacts
        .aggregate
        .iter()
        .map(|(n, _, _)| n.clone())
        .collect();
    let mut csv = String::from("dis_ps,moe,ling");
    for n in &metric_names {
        write!(csv, ",{n}_mean,{n}_std").expect("string write");
    }
    csv.push('\n');
    for row in &rows {
        write!(
            csv,
            "{},{},{}",
            row.flags.dis_ps as u8, row.flags.moe as u8, row.flags.ling as u8
        )
        .expect("string write");
        for n in &metric_names {
            let (_, mean, std) = row
                .artifacts
                .aggregate
                .iter()
                .find(|(name, _, _)| name == n)
                .expect("same metric set per row");
            write!(csv, ",{mean},{std}").expect("string write");
        }
        csv.push('\n');
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    if let Some(n) = &notice {
        std::fs::write(out_dir.join("NOTICE.txt"), n)?;
    }

    Ok(AblationGrid { rows, notice })
}

fn flags(dis_ps: bool, moe: bool, ling: bool) -> AblationFlags {
    AblationFlags { dis_ps, moe, ling }
}

fn row_label(f: &AblationFlags) -> String {
    let mark = |b: bool| if b { "on" } else { "off" };
    format!(
        "dis_ps-{}_moe-{}_ling-{}",
        mark(f.dis_ps),
        mark(f.moe),
        mark(f.ling)
    )
}

/// Rebuilds a model from a checkpoint, preferring the best-validation
/// parameters when available.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model, CmdError> {
    let mut model = Model::init(
        ckpt.model_config.clone(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .map_err(TrainError::from)?;
    let params = if ckpt.best_params.is_empty() {
        &ckpt.params
    } else {
        &ckpt.best_params
    };
    train::set_params(&mut model, params)?;
    Ok(model)
}

fn check_compatible(ckpt: &Checkpoint, data: &SynthDataset) -> Result<(), CmdError> {
    let c = &ckpt.model_config;
    if c.modalities != data.modalities() || c.in_dim != data.in_dim() || c.num_cls != data.num_cls
    {
        return Err(CmdError::Config(format!(
            "checkpoint (M={}, in_dim={}, classes={}) does not match dataset (M={}, in_dim={}, classes={}); config hash {}",
            c.modalities,
            c.in_dim,
            c.num_cls,
            data.modalities(),
            data.in_dim(),
            data.num_cls,
            config_hash(c, &ckpt.train_config),
        )));
    }
    Ok(())
}

/// Eval-mode per-feature matrices (raw then final, canonical order) and the
/// gate weights when expert fusion is active.
fn collect_features(
    model: &Model,
    data: &SynthDataset,
) -> Result<(Vec<String>, Vec<Matrix>, Option<Matrix>), CmdError> {
    let mut names = model.lattice.raw_feature_names();
    names.extend(model.lattice.feature_names());
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); names.len()];
    let mut omega_rows: Vec<Vec<f64>> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let idx: Vec<usize> = (0..data.n()).collect();
    for chunk in idx.chunks(256) {
        let mut tape = Tape::new();
        let xs: Vec<Var> = data
            .x
            .iter()
            .map(|m| tape.constant(m.select_rows(chunk)))
            .collect::<Result<_, _>>()
            .map_err(CmdError::from)?;
        let pass = model
            .forward(&mut tape, &xs, Mode::Eval, &mut rng)
            .map_err(TrainError::from)?;
        let fs = &pass.features;
        let mut vars: Vec<Var> = Vec::with_capacity(names.len());
        vars.extend(&fs.shared_raw);
        vars.extend(&fs.specific);
        for group in &fs.partial_raw {
            vars.extend(group);
        }
        vars.extend(&fs.flat);
        debug_assert_eq!(vars.len(), names.len());
        for (k, v) in vars.iter().enumerate() {
            let m = tape.value(*v);
            for r in 0..m.rows() {
                rows[k].push(m.row(r).to_vec());
            }
        }
        if let Some(trace) = &pass.trace {
            for r in 0..trace.omega.rows() {
                omega_rows.push(trace.omega.row(r).to_vec());
            }
        }
    }
    let mats = rows
        .into_iter()
        .map(|r| Matrix::from_rows(&r).map_err(CmdError::from))
        .collect::<Result<Vec<_>, _>>()?;
    let omega = if omega_rows.is_empty() {
        None
    } else {
        Some(Matrix::from_rows(&omega_rows)?)
    };
    Ok((names, mats, omega))
}

/// Exports per-sample gate weights plus a mean row, columns labeled by the
/// canonical final-feature names. Returns the mean row.
pub fn cmd_export_gates(
    checkpoint: impl AsRef<Path>,
    dataset: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<Vec<f64>, CmdError> {
    let ckpt = load_checkpoint(checkpoint.as_ref())?;
    let data = synthdata::load(dataset.as_ref())?;
    check_compatible(&ckpt, &data)?;
    let model = model_from_checkpoint(&ckpt)?;
    let (_, _, omega) = collect_features(&model, &data)?;
    let omega = omega.ok_or_else(|| {
        CmdError::Config("checkpoint was trained without expert fusion (moe off); no gate weights to export".into())
    })?;

    let names = model.lattice.feature_names();
    let mut csv = String::from("sample");
    for n in &names {
        write!(csv, ",{n}").expect("string write");
    }
    csv.push('\n');
    let mut mean = vec![0.0; omega.cols()];
    for r in 0..omega.rows() {
        write!(csv, "{r}").expect("string write");
        for (k, v) in omega.row(r).iter().enumerate() {
            mean[k] += v / omega.rows() as f64;
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
    }
    csv.push_str("mean");
    for v in &mean {
        write!(csv, ",{v}").expect("string write");
    }
    csv.push('\n');
    std::fs::write(out.as_ref(), csv)?;
    Ok(mean)
}

/// Mean over samples of the row-wise cosine similarity of two feature
/// matrices.
pub fn mean_cosine(a: &Matrix, b: &Matrix) -> f64 {
    let eps = 1e-8;
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (ar, br) = (a.row(i), b.row(i));
        let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        let na: f64 = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = br.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += dot / ((na + eps) * (nb + eps));
    }
    total / n as f64
}

/// Exports the batch-averaged pairwise cosine-similarity matrix over all raw
/// and final decoupled features (`similarity.csv`), plus a per-sample feature
/// dump (`features.csv`) for external embedding tools. Returns the matrix.
pub fn cmd_export_similarity(
    checkpoint: impl AsRef<Path>,
    dataset: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<(Vec<String>, Matrix), CmdError> {
    let ckpt = load_checkpoint(checkpoint.as_ref())?;
    let data = synthdata::load(dataset.as_ref())?;
    check_compatible(&ckpt, &data)?;
    let model = model_from_checkpoint(&ckpt)?;
    let (names, mats, _) = collect_features(&model, &data)?;

    let k = names.len();
    let mut sim = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = mean_cosine(&mats[i], &mats[j]);
            sim.set(i, j, v);
            sim.set(j, i, v);
        }
    }

    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("feature");
    for n in &names {
        write!(csv, ",{n}").expect("string write");
    }
    csv.push('\n');
    for (i, n) in names.iter().enumerate() {
        write!(csv, "{n}").expect("string write");
        for v in sim.row(i) {
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
    }
    std::fs::write(out_dir.join("similarity.csv"), csv)?;

    let dim = mats[0].cols();
    let mut dump = String::from("feature,sample");
    for d in 0..dim {
        write!(dump, ",d{d}").expect("string write");
    }
    dump.push('\n');
    for (n, m) in names.iter().zip(&mats) {
        for r in 0..m.rows() {
            write!(dump, "{n},{r}").expect("string write");
            for v in m.row(r) {
                write!(dump, ",{v}").expect("string write");
            }
            dump.push('\n');
        }
    }
    std::fs::write(out_dir.join("features.csv"), dump)?;

    Ok((names, sim))
}

/// Evaluates a checkpoint on a dataset and returns the metrics report.
pub fn cmd_eval(
    checkpoint: impl AsRef<Path>,
    dataset: impl AsRef<Path>,
) -> Result<MetricsReport, CmdError> {
    let ckpt = load_checkpoint(checkpoint.as_ref())?;
    let data = synthdata::load(dataset.as_ref())?;
    check_compatible(&ckpt, &data)?;
    let model = model_from_checkpoint(&ckpt)?;
    Ok(train::evaluate(&model, &data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run(dir: &Path, modalities: usize, moe: bool) -> RunConfig {
        RunConfig {
            synth: Some(SynthConfig {
                modalities,
                n_samples: 60,
                in_dim: 8,
                factor_dim: 4,
                num_cls: 2,
                noise_sigma: 0.1,
                informative_subsets: vec![(1..=modalities).collect()],
                class_weights: None,
                seed: 11,
            }),
            dataset: None,
            model: ModelSettings {
                dim: 4,
                flags: AblationFlags {
                    dis_ps: true,
                    moe,
                    ling: moe,
                },
                ..ModelSettings::default()
            },
            train: TrainConfig {
                base_lr: 1e-3,
                epochs: 2,
                batch_size: 16,
                warmup_epochs: 2,
                decay_factor: 0.8,
                decay_every: 5,
                weight_decay: 1e-4,
                seed: 11,
            },
            folds: 2,
            out_dir: Some(dir.to_path_buf()),
        }
    }

    #[test]
    fn run_config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run(dir.path(), 2, true);
        assert!(run.validate().is_ok());
        run.dataset = Some(PathBuf::from("x.cfdl"));
        assert!(matches!(run.validate(), Err(CmdError::Config(_))));
        run.synth = None;
        run.dataset = None;
        assert!(matches!(run.validate(), Err(CmdError::Config(_))));
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let bad = r#"{"train":{"base_lr":1e-3,"epochs":1},"synth":{"modalities":2,"n_samples":10,"num_cls":2,"informative_subsets":[[1,2]]},"bogus":1}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
    }

    #[test]
    fn flag_parsing() {
        let f = parse_flags("dis_ps,moe").unwrap();
        assert_eq!(f, flags(true, true, false));
        assert_eq!(parse_flags("").unwrap(), flags(false, false, false));
        assert_eq!(
            parse_flags("dis_ps, moe, ling").unwrap(),
            flags(true, true, true)
        );
        assert!(matches!(parse_flags("bogus"), Err(CmdError::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run(dir.path(), 2, true);
        Overrides {
            seed: Some(99),
            folds: Some(4),
            flags: Some(flags(true, false, false)),
            out: Some(PathBuf::from("elsewhere")),
        }
        .apply(&mut run);
        assert_eq!(run.train.seed, 99);
        assert_eq!(run.synth.as_ref().unwrap().seed, 99);
        assert_eq!(run.folds, 4);
        assert!(!run.model.flags.moe);
        assert_eq!(run.out_dir, Some(PathBuf::from("elsewhere")));
    }

    #[test]
    fn gen_data_is_deterministic_and_summarized() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            modalities: 3,
            n_samples: 50,
            in_dim: 8,
            factor_dim: 4,
            num_cls: 2,
            noise_sigma: 0.1,
            informative_subsets: vec![vec![1, 2, 3]],
            class_weights: None,
            seed: 5,
        };
        let p1 = dir.path().join("a.cfdl");
        let p2 = dir.path().join("b.cfdl");
        let s1 = cmd_gen_data(&cfg, &p1).unwrap();
        cmd_gen_data(&cfg, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert!(s1.contains("M=3"), "summary: {s1}");
        assert!(s1.contains("histogram"), "summary: {s1}");
    }

    #[test]
    fn train_writes_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let out1 = dir.path().join("r1");
        let out2 = dir.path().join("r2");
        let mut run = tiny_run(&out1, 2, true);
        let art = cmd_train(&run).unwrap();
        assert_eq!(art.fold_reports.len(), 2);
        for f in ["config.json", "metrics.json", "metrics_mean_std.csv", "dataset.cfdl"] {
            assert!(out1.join(f).exists(), "missing {f}");
        }
        for f in ["history.csv", "checkpoint.ckpt", "metrics.json"] {
            assert!(out1.join("fold_0").join(f).exists(), "missing fold_0/{f}");
        }
        // one row per metric in the mean±std block
        let csv = std::fs::read_to_string(out1.join("metrics_mean_std.csv")).unwrap();
        assert_eq!(csv.lines().count() - 1, art.aggregate.len());

        run.out_dir = Some(out2.clone());
        cmd_train(&run).unwrap();
        assert_eq!(
            std::fs::read(out1.join("metrics.json")).unwrap(),
            std::fs::read(out2.join("metrics.json")).unwrap()
        );
    }

    #[test]
    fn ablation_grid_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(&dir.path().join("m2"), 2, true);
        let grid = cmd_ablate(&run).unwrap();
        assert_eq!(grid.rows.len(), 3);
        assert!(grid.notice.is_some());

        let mut run3 = tiny_run(&dir.path().join("m3"), 3, true);
        run3.train.epochs = 1;
        run3.train.warmup_epochs = 1;
        let grid3 = cmd_ablate(&run3).unwrap();
        assert_eq!(grid3.rows.len(), 6);
        assert!(grid3.notice.is_none());
        let csv = std::fs::read_to_string(dir.path().join("m3").join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn full_row_of_grid_matches_plain_train() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(&dir.path().join("grid"), 2, true);
        let grid = cmd_ablate(&run).unwrap();
        let full = grid
            .rows
            .iter()
            .find(|r| r.flags == flags(true, true, true))
            .unwrap();
        let mut plain = tiny_run(&dir.path().join("plain"), 2, true);
        plain.model.flags = flags(true, true, true);
        let art = cmd_train(&plain).unwrap();
        for ((n1, m1, s1), (n2, m2, s2)) in full.artifacts.aggregate.iter().zip(&art.aggregate) {
            assert_eq!(n1, n2);
            assert_eq!(m1, m2);
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn gate_export_rows_are_simplex_points() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let run = tiny_run(&out, 3, true);
        cmd_train(&run).unwrap();
        let gates = dir.path().join("gates.csv");
        let mean = cmd_export_gates(
            out.join("fold_0/checkpoint.ckpt"),
            out.join("dataset.cfdl"),
            &gates,
        )
        .unwrap();
        assert_eq!(mean.len(), 7); // 2^3 − 1 final features
        assert!((mean.iter().sum::<f64>() - 1.0).abs() < 1e-8);

        let text = std::fs::read_to_string(&gates).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.len(), 8);
        assert_eq!(header[1], "F");
        assert_eq!(header[2], "P_1");
        let mut data_rows = 0;
        for line in lines {
            let vals: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|v| v.parse().unwrap())
                .collect();
            assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-8, "{line}");
            data_rows += 1;
        }
        assert_eq!(data_rows, 60 + 1); // samples + mean row
    }

    #[test]
    fn gate_export_requires_expert_fusion() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let run = tiny_run(&out, 2, false);
        cmd_train(&run).unwrap();
        let err = cmd_export_gates(
            out.join("fold_0/checkpoint.ckpt"),
            out.join("dataset.cfdl"),
            dir.path().join("gates.csv"),
        )
        .unwrap_err();
        assert!(matches!(err, CmdError::Config(_)));
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_unit_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let run = tiny_run(&out, 2, true);
        cmd_train(&run).unwrap();
        let sim_dir = dir.path().join("sim");
        let (names, sim) = cmd_export_similarity(
            out.join("fold_0/checkpoint.ckpt"),
            out.join("dataset.cfdl"),
            &sim_dir,
        )
        .unwrap();
        // M=2: raw = F_1,F_2,P_1,P_2; final = F,P_1,P_2
        assert_eq!(names.len(), 7);
        for i in 0..names.len() {
            assert!((sim.get(i, i) - 1.0).abs() < 1e-6);
            for j in 0..names.len() {
                assert_eq!(sim.get(i, j), sim.get(j, i));
                assert!(sim.get(i, j) <= 1.0 + 1e-9);
            }
        }
        assert!(sim_dir.join("similarity.csv").exists());
        assert!(sim_dir.join("features.csv").exists());

        // CSV round-trip of the matrix values
        let text = std::fs::read_to_string(sim_dir.join("similarity.csv")).unwrap();
        for (i, line) in text.lines().skip(1).enumerate() {
            for (j, v) in line.split(',').skip(1).enumerate() {
                assert_eq!(v.parse::<f64>().unwrap(), sim.get(i, j));
            }
        }
    }

    #[test]
    fn eval_and_mismatch_detection() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let run = tiny_run(&out, 2, true);
        cmd_train(&run).unwrap();
        let report = cmd_eval(out.join("fold_0/checkpoint.ckpt"), out.join("dataset.cfdl")).unwrap();
        assert!(report.acc.unwrap() >= 0.0 && report.acc.unwrap() <= 1.0);

        // dataset with different shape → config error
        let other = dir.path().join("other.cfdl");
        cmd_gen_data(
            &SynthConfig {
                modalities: 3,
                n_samples: 30,
                in_dim: 8,
                factor_dim: 4,
                num_cls: 2,
                noise_sigma: 0.1,
                informative_subsets: vec![vec![1, 2, 3]],
                class_weights: None,
                seed: 1,
            },
            &other,
        )
        .unwrap();
        let err = cmd_eval(out.join("fold_0/checkpoint.ckpt"), &other).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(CmdError::Config("x".into()).exit_code(), 2);
        assert_eq!(CmdError::Numerical("x".into()).exit_code(), 3);
        assert_eq!(CmdError::Other("x".into()).exit_code(), 1);
        let diverged: CmdError = TrainError::Diverged { epoch: 0, batch: 1 }.into();
        assert_eq!(diverged.exit_code(), 3);
    }
}
