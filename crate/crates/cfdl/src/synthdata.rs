//! Synthetic multimodal dataset generator with planted latent factors.
//!
//! One standard-normal factor z_S is drawn per subset S of the modality
//! lattice; modality j observes x_j = Σ_{S∋j} z_S·A_{j,S} + σ·noise through
//! fixed random mixing maps. The label is the argmax of a fixed random linear
//! readout of the factors of the chosen informative subsets, with per-class
//! offsets calibrated so the class distribution matches the requested weights.
//! By construction, label signal lives exactly in the informative subsets.
//!
//! Also hosts the on-disk dataset format (binary, magic "CFDL1") and a CSV
//! ingestion path for externally extracted features, plus stratified k-fold
//! splitting.

use crate::cfd::enumerate_subsets;
use crate::gradcore::Matrix;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 5] = b"CFDL1";
const CALIBRATION_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("informative subset {subset:?} is not a lattice subset for {m} modalities (1-based indices)")]
    InvalidSubset { subset: Vec<usize>, m: usize },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"CFDL1\"")]
    BadMagic([u8; 5]),
    #[error("file truncated")]
    Truncated,
    #[error("label {label} out of range for {num_cls} classes")]
    LabelOutOfRange { label: u64, num_cls: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv file {path} row {row}: {msg}")]
    CsvShape {
        path: String,
        row: usize,
        msg: String,
    },
    #[error("class {class} has {count} samples, fewer than k={k} folds")]
    ClassSmallerThanK {
        class: usize,
        count: usize,
        k: usize,
    },
}

fn de_truncated(e: io::Error) -> SynthError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        SynthError::Truncated
    } else {
        SynthError::Io(e)
    }
}

fn default_in_dim() -> usize {
    512
}
fn default_factor_dim() -> usize {
    8
}
fn default_noise() -> f64 {
    0.1
}

/// Generator configuration. `informative_subsets` uses 1-based modality
/// indices, matching the feature naming (e.g. `[[1,2]]` plants the label in
/// the partial-shared factor of modalities 1 and 2; `[[1,2,3]]` with M=3 uses
/// the fully shared factor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub modalities: usize,
    pub n_samples: usize,
    #[serde(default = "default_in_dim")]
    pub in_dim: usize,
    #[serde(default = "default_factor_dim")]
    pub factor_dim: usize,
    pub num_cls: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    pub informative_subsets: Vec<Vec<usize>>,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    /// Validates the config and returns the informative subsets as 0-based
    /// sorted member lists.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>, SynthError> {
        if self.modalities < 2 {
            return Err(SynthError::BadConfig(format!(
                "need at least 2 modalities, got {}",
                self.modalities
            )));
        }
        if self.num_cls < 2 {
            return Err(SynthError::BadConfig(format!(
                "need at least 2 classes, got {}",
                self.num_cls
            )));
        }
        if self.n_samples < self.num_cls {
            return Err(SynthError::BadConfig(format!(
                "n_samples {} < num_cls {}",
                self.n_samples, self.num_cls
            )));
        }
        if self.in_dim == 0 || self.factor_dim == 0 {
            return Err(SynthError::BadConfig("zero in_dim or factor_dim".into()));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(SynthError::BadConfig(format!(
                "noise_sigma must be finite and ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        if self.informative_subsets.is_empty() {
            return Err(SynthError::BadConfig(
                "informative_subsets must be non-empty".into(),
            ));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_cls {
                return Err(SynthError::BadConfig(format!(
                    "class_weights has {} entries for {} classes",
                    w.len(),
                    self.num_cls
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(SynthError::BadConfig(
                    "class_weights must be positive".into(),
                ));
            }
        }
        let mut out = Vec::with_capacity(self.informative_subsets.len());
        for s in &self.informative_subsets {
            let mut zero_based: Vec<usize> = Vec::with_capacity(s.len());
            for &j in s {
                if j == 0 || j > self.modalities {
                    return Err(SynthError::InvalidSubset {
                        subset: s.clone(),
                        m: self.modalities,
                    });
                }
                zero_based.push(j - 1);
            }
            zero_based.sort_unstable();
            zero_based.dedup();
            if zero_based.len() != s.len() {
                return Err(SynthError::InvalidSubset {
                    subset: s.clone(),
                    m: self.modalities,
                });
            }
            out.push(zero_based);
        }
        Ok(out)
    }

    fn target_weights(&self) -> Vec<f64> {
        match &self.class_weights {
            Some(w) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|v| v / total).collect()
            }
            None => vec![1.0 / self.num_cls as f64; self.num_cls],
        }
    }
}

/// Ground truth of a generated dataset: the planted factors, the mixing maps,
/// and the label readout. Everything a test oracle needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    /// All lattice subsets in canonical order, 0-based members.
    pub subsets: Vec<Vec<usize>>,
    /// Per-subset factor matrix, n×factor_dim.
    pub factors: Vec<Matrix>,
    /// Per subset, one factor_dim×in_dim mixing map per member modality.
    pub mixing: Vec<Vec<Matrix>>,
    /// Indices into `subsets` of the label-driving subsets.
    pub informative: Vec<usize>,
    /// Per informative subset, a factor_dim×num_cls readout.
    pub readouts: Vec<Matrix>,
    /// Calibrated per-class offsets.
    pub offsets: Vec<f64>,
}

/// A multimodal dataset: one n×in_dim matrix per modality plus labels, with
/// generation ground truth when it came from the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub x: Vec<Matrix>,
    pub y: Vec<usize>,
    pub num_cls: usize,
    pub provenance: Option<Provenance>,
}

impl SynthDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn modalities(&self) -> usize {
        self.x.len()
    }

    pub fn in_dim(&self) -> usize {
        self.x[0].cols()
    }

    /// Row-subset view used to build train/val splits.
    pub fn select(&self, idx: &[usize]) -> SynthDataset {
        SynthDataset {
            x: self.x.iter().map(|m| m.select_rows(idx)).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_cls: self.num_cls,
            provenance: None,
        }
    }
}

/// Mixing weight for factors of subsets that do not drive the label. The
/// label-relevant factors mix at full strength while the remaining factors
/// enter at this reduced weight, so the dominant planted structure is the
/// structure a classifier must recover; the weaker components stay present
/// so every subset remains attributable.
const MINOR_SUBSET_WEIGHT: f64 = 0.3;

/// Global scale of the mixing maps. Keeps generated features at a modest
/// amplitude so downstream dot-product scores start in their responsive
/// range rather than saturated; signal-to-noise is controlled separately
/// through `noise_sigma`.
const MIX_BASE_SCALE: f64 = 1.0;

/// How strongly the member views of a shared factor use a common mixing
/// direction. Each member map is a blend `c·A_S + sqrt(1−c²)·B_{j,S}` of a
/// subset-wide component and a member-private component, so shared factors
/// express partly through the same feature directions in every member
/// modality while each view keeps a private signature.
const VIEW_COUPLING: f64 = 1.0;

/// Off-emphasis amplitude for partial-shared factors. Each member modality of
/// a proper partial subset expresses an interleaved slice of the factor
/// dimensions at full strength and the remaining dimensions at this reduced
/// amplitude, so no single member carries the subset's full information —
/// recovering a partial-shared factor requires its member modalities jointly.
const MEMBER_EMPHASIS_MINOR: f64 = 1.0;
/// Fraction of the noise variance carried by a common field seen by every
/// modality (sensor-rig common-mode interference); the remainder is drawn
/// independently per modality.
const NOISE_COMMONALITY: f64 = 0.8;

fn subset_weight(informative: bool) -> f64 {
    if informative {
        1.0
    } else {
        MINOR_SUBSET_WEIGHT
    }
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("consistent")
}

/// Deterministically generates a dataset from the config seed.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    let informative_members = config.validate()?;
    let lattice = enumerate_subsets(config.modalities)
        .map_err(|e| SynthError::BadConfig(e.to_string()))?;
    let mut subsets: Vec<Vec<usize>> = lattice.specifics().to_vec();
    subsets.extend(lattice.partials().iter().cloned());
    subsets.push(lattice.full().to_vec());

    let informative: Vec<usize> = informative_members
        .iter()
        .map(|s| {
            subsets
                .iter()
                .position(|t| t == s)
                .ok_or_else(|| SynthError::InvalidSubset {
                    subset: s.iter().map(|j| j + 1).collect(),
                    m: config.modalities,
                })
        })
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, in_dim, fd) = (config.n_samples, config.in_dim, config.factor_dim);

    // fixed structure first, then per-sample draws: mixing maps, readouts,
    // factors, noise — so the structure is stable under changes of n
    let mix_scale = MIX_BASE_SCALE / (fd as f64).sqrt();
    let m = config.modalities;
    let mixing: Vec<Vec<Matrix>> = subsets
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let scale = mix_scale * subset_weight(informative.contains(&si));
            let c = if s.len() >= 2 { VIEW_COUPLING } else { 0.0 };
            let common = normal_matrix(fd, in_dim, scale, &mut rng);
            let split = s.len() >= 2 && s.len() < m;
            s.iter()
                .enumerate()
                .map(|(r, _)| {
                    let mut a = normal_matrix(fd, in_dim, scale * (1.0 - c * c).sqrt(), &mut rng);
                    for (av, cv) in a.data_mut().iter_mut().zip(common.data()) {
                        *av += c * cv;
                    }
                    if split {
                        for f in 0..fd {
                            if f % s.len() != r {
                                for v in &mut a.data_mut()[f * in_dim..(f + 1) * in_dim] {
                                    *v *= MEMBER_EMPHASIS_MINOR;
                                }
                            }
                        }
                    }
                    a
                })
                .collect()
        })
        .collect();
    let readouts: Vec<Matrix> = informative
        .iter()
        .map(|_| normal_matrix(fd, config.num_cls, 1.0, &mut rng))
        .collect();
    let factors: Vec<Matrix> = subsets
        .iter()
        .map(|_| normal_matrix(n, fd, 1.0, &mut rng))
        .collect();

    let common_noise = normal_matrix(n, in_dim, config.noise_sigma * NOISE_COMMONALITY.sqrt(), &mut rng);
    let own_scale = config.noise_sigma * (1.0 - NOISE_COMMONALITY).sqrt();
    let mut x: Vec<Matrix> = (0..config.modalities)
        .map(|_| {
            let mut nz = normal_matrix(n, in_dim, own_scale, &mut rng);
            for (v, c) in nz.data_mut().iter_mut().zip(common_noise.data()) {
                *v += c;
            }
            nz
        })
        .collect();
    for (si, s) in subsets.iter().enumerate() {
        for (mi, &j) in s.iter().enumerate() {
            add_product(&mut x[j], &factors[si], &mixing[si][mi]);
        }
    }

    let scores = label_scores(&factors, &informative, &readouts);
    let offsets = calibrate_offsets(&scores, &config.target_weights());
    let y = argmax_labels(&scores, &offsets);

    Ok(SynthDataset {
        x,
        y,
        num_cls: config.num_cls,
        provenance: Some(Provenance {
            subsets,
            factors,
            mixing,
            informative,
            readouts,
            offsets,
        }),
    })
}

/// out += z · a, with z n×fd and a fd×in_dim.
fn add_product(out: &mut Matrix, z: &Matrix, a: &Matrix) {
    let (n, fd, cols) = (z.rows(), z.cols(), a.cols());
    for i in 0..n {
        let zrow = z.row(i);
        let orow = &mut out.data_mut()[i * cols..(i + 1) * cols];
        for (k, &zv) in zrow.iter().enumerate().take(fd) {
            let arow = &a.data()[k * cols..(k + 1) * cols];
            for (o, &av) in orow.iter_mut().zip(arow) {
                *o += zv * av;
            }
        }
    }
}

/// Raw (offset-free) per-class label scores from the informative factors.
pub fn label_scores(factors: &[Matrix], informative: &[usize], readouts: &[Matrix]) -> Matrix {
    let n = factors[0].rows();
    let num_cls = readouts[0].cols();
    let mut scores = Matrix::zeros(n, num_cls);
    for (&si, w) in informative.iter().zip(readouts) {
        add_product(&mut scores, &factors[si], w);
    }
    scores
}

/// Iteratively shifts per-class offsets until the argmax class distribution
/// matches the target weights.
fn calibrate_offsets(scores: &Matrix, targets: &[f64]) -> Vec<f64> {
    let n = scores.rows();
    let num_cls = targets.len();
    let mut offsets = vec![0.0; num_cls];
    let floor = 0.5 / n as f64;
    for _ in 0..CALIBRATION_ITERS {
        let labels = argmax_labels(scores, &offsets);
        let mut counts = vec![0usize; num_cls];
        for &y in &labels {
            counts[y] += 1;
        }
        for k in 0..num_cls {
            let actual = (counts[k] as f64 / n as f64).max(floor);
            offsets[k] += 0.5 * (targets[k] / actual).ln();
        }
    }
    offsets
}

/// Argmax labels with ties broken toward the lower class index.
pub fn argmax_labels(scores: &Matrix, offsets: &[f64]) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] + offsets[k] > row[best] + offsets[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

impl Provenance {
    /// Recomputes the labels from a (possibly modified) set of factor
    /// matrices using the stored readout and offsets.
    pub fn labels_from(&self, factors: &[Matrix]) -> Vec<usize> {
        let scores = label_scores(factors, &self.informative, &self.readouts);
        argmax_labels(&scores, &self.offsets)
    }
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> io::Result<()> {
    for &v in m.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix, SynthError> {
    let mut data = vec![0.0; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(de_truncated)?;
    Matrix::new(rows, cols, data).map_err(|_| SynthError::Truncated)
}

fn write_subset(w: &mut impl Write, s: &[usize]) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    for &j in s {
        w.write_u32::<LittleEndian>(j as u32)?;
    }
    Ok(())
}

fn read_subset(r: &mut impl Read) -> Result<Vec<usize>, SynthError> {
    let len = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
    let mut s = Vec::with_capacity(len);
    for _ in 0..len {
        s.push(r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize);
    }
    Ok(s)
}

/// Saves the dataset atomically (temp file + rename), provenance included
/// when present.
pub fn save(d: &SynthDataset, path: impl AsRef<Path>) -> Result<(), SynthError> {
    let path = path.as_ref();
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(d.modalities() as u32)?;
        w.write_u32::<LittleEndian>(d.n() as u32)?;
        w.write_u32::<LittleEndian>(d.in_dim() as u32)?;
        w.write_u32::<LittleEndian>(d.num_cls as u32)?;
        for &y in &d.y {
            w.write_u32::<LittleEndian>(y as u32)?;
        }
        for m in &d.x {
            write_matrix(&mut w, m)?;
        }
        match &d.provenance {
            None => w.write_u8(0)?,
            Some(p) => {
                w.write_u8(1)?;
                let fd = p.factors[0].cols();
                w.write_u32::<LittleEndian>(fd as u32)?;
                w.write_u32::<LittleEndian>(p.subsets.len() as u32)?;
                for s in &p.subsets {
                    write_subset(&mut w, s)?;
                }
                for z in &p.factors {
                    write_matrix(&mut w, z)?;
                }
                for maps in &p.mixing {
                    for a in maps {
                        write_matrix(&mut w, a)?;
                    }
                }
                w.write_u32::<LittleEndian>(p.informative.len() as u32)?;
                for &si in &p.informative {
                    w.write_u32::<LittleEndian>(si as u32)?;
                }
                for ro in &p.readouts {
                    write_matrix(&mut w, ro)?;
                }
                for &c in &p.offsets {
                    w.write_f64::<LittleEndian>(c)?;
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a dataset, validating magic, dimensions and label range.
pub fn load(path: impl AsRef<Path>) -> Result<SynthDataset, SynthError> {
    let mut r = BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(de_truncated)?;
    if &magic != MAGIC {
        return Err(SynthError::BadMagic(magic));
    }
    let m = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
    let n = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
    let in_dim = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
    let num_cls = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
        if label >= num_cls {
            return Err(SynthError::LabelOutOfRange {
                label: label as u64,
                num_cls,
            });
        }
        y.push(label);
    }
    let mut x = Vec::with_capacity(m);
    for _ in 0..m {
        x.push(read_matrix(&mut r, n, in_dim)?);
    }
    let provenance = match r.read_u8().map_err(de_truncated)? {
        0 => None,
        _ => {
            let fd = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
            let n_subsets = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
            let mut subsets = Vec::with_capacity(n_subsets);
            for _ in 0..n_subsets {
                subsets.push(read_subset(&mut r)?);
            }
            let mut factors = Vec::with_capacity(n_subsets);
            for _ in 0..n_subsets {
                factors.push(read_matrix(&mut r, n, fd)?);
            }
            let mut mixing = Vec::with_capacity(n_subsets);
            for s in &subsets {
                let mut maps = Vec::with_capacity(s.len());
                for _ in s {
                    maps.push(read_matrix(&mut r, fd, in_dim)?);
                }
                mixing.push(maps);
            }
            let n_inf = r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize;
            let mut informative = Vec::with_capacity(n_inf);
            for _ in 0..n_inf {
                informative.push(r.read_u32::<LittleEndian>().map_err(de_truncated)? as usize);
            }
            let mut readouts = Vec::with_capacity(n_inf);
            for _ in 0..n_inf {
                readouts.push(read_matrix(&mut r, fd, num_cls)?);
            }
            let mut offsets = vec![0.0; num_cls];
            r.read_f64_into::<LittleEndian>(&mut offsets)
                .map_err(de_truncated)?;
            Some(Provenance {
                subsets,
                factors,
                mixing,
                informative,
                readouts,
                offsets,
            })
        }
    };
    Ok(SynthDataset {
        x,
        y,
        num_cls,
        provenance,
    })
}

/// Loads externally extracted features: one headerless CSV of floats per
/// modality, plus a labels CSV whose last column is the class index.
pub fn load_csv(
    modality_paths: &[impl AsRef<Path>],
    labels_path: impl AsRef<Path>,
) -> Result<SynthDataset, SynthError> {
    let mut x = Vec::with_capacity(modality_paths.len());
    for p in modality_paths {
        let p = p.as_ref();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(p)?;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row: Vec<f64> = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| SynthError::CsvShape {
                    path: p.display().to_string(),
                    row: i,
                    msg: e.to_string(),
                })?;
            rows.push(row);
        }
        let m = Matrix::from_rows(&rows).map_err(|e| SynthError::CsvShape {
            path: p.display().to_string(),
            row: 0,
            msg: e.to_string(),
        })?;
        if let Some(prev) = x.last() {
            let prev: &Matrix = prev;
            if prev.shape() != m.shape() {
                return Err(SynthError::CsvShape {
                    path: p.display().to_string(),
                    row: 0,
                    msg: format!("shape {:?} differs from first modality {:?}", m.shape(), prev.shape()),
                });
            }
        }
        x.push(m);
    }
    let lp = labels_path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(lp)?;
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let last = rec.iter().last().ok_or_else(|| SynthError::CsvShape {
            path: lp.display().to_string(),
            row: i,
            msg: "empty row".into(),
        })?;
        let label = last.trim().parse::<usize>().map_err(|e| SynthError::CsvShape {
            path: lp.display().to_string(),
            row: i,
            msg: e.to_string(),
        })?;
        y.push(label);
    }
    if x.is_empty() || x[0].rows() != y.len() {
        return Err(SynthError::CsvShape {
            path: lp.display().to_string(),
            row: y.len(),
            msg: format!(
                "label count {} does not match feature rows {}",
                y.len(),
                x.first().map_or(0, Matrix::rows)
            ),
        });
    }
    let num_cls = y.iter().max().copied().unwrap_or(0) + 1;
    Ok(SynthDataset {
        x,
        y,
        num_cls: num_cls.max(2),
        provenance: None,
    })
}

/// Stratified k-fold split: per class, indices are shuffled by the seed and
/// dealt round-robin into folds. Returns (train, val) index lists per fold.
pub fn kfold_split(
    labels: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>, SynthError> {
    if k < 2 || labels.len() < k {
        return Err(SynthError::BadConfig(format!(
            "need 2 ≤ k ≤ n, got k={} n={}",
            k,
            labels.len()
        )));
    }
    let num_cls = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_cls];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < k {
            return Err(SynthError::ClassSmallerThanK {
                class,
                count: idx.len(),
                k,
            });
        }
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            folds[pos % k].push(i);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok((0..k)
        .map(|fi| {
            let val = folds[fi].clone();
            let train = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != fi)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            (train, val)
        })
        .collect())
}
