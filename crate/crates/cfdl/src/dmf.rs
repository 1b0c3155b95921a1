//! Dynamic mixture-of-experts fusion and the full classification model.
//!
//! Each final decoupled feature gets its own expert (one linear layer). The
//! local-global gating network forms a global feature g from the concatenated
//! features, scores each local feature against g, and softmax-normalizes the
//! scores into per-sample expert weights. The weighted expert outputs are
//! concatenated and classified by a two-hidden-layer MLP with ReLU and
//! dropout after each hidden layer.
//!
//! Ablation switches: `dis_ps` removes partial-shared subsets from the
//! lattice, `moe` replaces expert fusion by plain concatenation, `ling`
//! replaces the local-global gate by a flat linear gate on the concatenated
//! features.

use crate::cfd::{self, CfdEncoders, CfdError, DecoupledFeatureSet, SubsetLattice};
use crate::gradcore::{GradError, Linear, Matrix, Mode, ParamRef, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmfError {
    #[error("loss weights must be nonnegative, got alpha={alpha}, beta={beta}")]
    NegativeWeight { alpha: f64, beta: f64 },
    #[error("classifier expects input width {expected}, got {got}")]
    ClassifierWidth { expected: usize, got: usize },
    #[error(transparent)]
    Cfd(#[from] CfdError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Ablation switches matching the three factors of the ablation grid.
/// `ling` is meaningful only when `moe` is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub dis_ps: bool,
    pub moe: bool,
    pub ling: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            dis_ps: true,
            moe: true,
            ling: true,
        }
    }
}

impl AblationFlags {
    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        if self.moe {
            format!("{}/{}/{}", mark(self.dis_ps), mark(self.moe), mark(self.ling))
        } else {
            format!("{}/{}/-", mark(self.dis_ps), mark(self.moe))
        }
    }
}

/// Static model shape plus loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: usize,
    pub in_dim: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub num_cls: usize,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default = "default_weight")]
    pub alpha: f64,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dim() -> usize {
    32
}

fn default_weight() -> f64 {
    1.0
}

fn default_dropout() -> f64 {
    0.5
}

impl ModelConfig {
    /// Lattice implied by the dis_ps flag.
    pub fn lattice(&self) -> Result<SubsetLattice, CfdError> {
        let lattice = cfd::enumerate_subsets(self.modalities)?;
        Ok(if self.flags.dis_ps {
            lattice
        } else {
            lattice.without_partials()
        })
    }
}

/// Per-sample gate outputs and the fused feature of one forward pass.
/// Every row of `omega` is a probability simplex point.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    /// Global feature; absent under the flat (ling-off) gate.
    pub g: Option<Matrix>,
    pub omega: Matrix,
    pub fused: Matrix,
}

/// MLP head: two hidden layers (ReLU + dropout after each) and an output
/// layer.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
}

impl Classifier {
    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p.extend(self.out.params());
        p
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.out.param_count()
    }
}

#[derive(Debug, Clone)]
pub enum Gate {
    /// Local-global gating: softmax of the stacked features times the global
    /// feature.
    LinG { fc: Linear },
    /// Flat gating: one linear layer on the concatenated features.
    Flat { fc: Linear },
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Moe { experts: Vec<Linear>, gate: Gate },
    Concat,
}

/// The full model: encoder bank, fusion stage, classifier.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub lattice: SubsetLattice,
    pub encoders: CfdEncoders,
    pub fusion: Fusion,
    pub classifier: Classifier,
}

/// One forward pass: logits plus the decoupled features that the losses need,
/// and the gate trace when expert fusion is active.
pub struct ForwardPass {
    pub logits: Var,
    pub features: DecoupledFeatureSet,
    pub trace: Option<FusionTrace>,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, DmfError> {
        let lattice = config.lattice()?;
        let k = lattice.final_count();
        let (dim, in_dim) = (config.dim, config.in_dim);
        let encoders = CfdEncoders::init(&lattice, in_dim, dim, rng);
        let fusion = if config.flags.moe {
            let experts = (0..k).map(|_| Linear::glorot(dim, dim, rng)).collect();
            let gate = if config.flags.ling {
                Gate::LinG {
                    fc: Linear::glorot(k * dim, dim, rng),
                }
            } else {
                Gate::Flat {
                    fc: Linear::glorot(k * dim, k, rng),
                }
            };
            Fusion::Moe { experts, gate }
        } else {
            Fusion::Concat
        };
        let classifier = Classifier {
            fc1: Linear::glorot(k * dim, dim, rng),
            fc2: Linear::glorot(dim, dim, rng),
            out: Linear::glorot(dim, config.num_cls, rng),
        };
        Ok(Self {
            config,
            lattice,
            encoders,
            fusion,
            classifier,
        })
    }

    /// All trainable parameters in a stable order (encoders, experts, gate,
    /// classifier).
    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = self.encoders.params();
        if let Fusion::Moe { experts, gate } = &self.fusion {
            for e in experts {
                p.extend(e.params());
            }
            match gate {
                Gate::LinG { fc } | Gate::Flat { fc } => p.extend(fc.params()),
            }
        }
        p.extend(self.classifier.params());
        p
    }

    /// Exact trainable parameter count of this instance.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.borrow().len()).sum()
    }

    /// Full forward pass under the configured ablation flags.
    pub fn forward(
        &self,
        tape: &mut Tape,
        xs: &[Var],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<ForwardPass, DmfError> {
        let features = cfd::decouple(tape, xs, &self.encoders, &self.lattice)?;
        let (fused, trace) = match &self.fusion {
            Fusion::Moe { experts, gate } => {
                let omega = match gate {
                    Gate::LinG { fc } => {
                        let g = global_feature(tape, &features.flat, fc)?;
                        let omega = gate_weights(tape, &features.flat, g)?;
                        (omega, Some(g))
                    }
                    Gate::Flat { fc } => {
                        let cat = tape.concat_cols(&features.flat)?;
                        let logits = fc.apply(tape, cat)?;
                        (tape.softmax_rows(logits)?, None)
                    }
                };
                let (omega, g) = omega;
                let fused = fuse(tape, &features.flat, omega, experts)?;
                let trace = FusionTrace {
                    g: g.map(|v| tape.value(v).clone()),
                    omega: tape.value(omega).clone(),
                    fused: tape.value(fused).clone(),
                };
                (fused, Some(trace))
            }
            Fusion::Concat => (tape.concat_cols(&features.flat)?, None),
        };
        let logits = classify(tape, fused, &self.classifier, self.config.dropout, mode, rng)?;
        Ok(ForwardPass {
            logits,
            features,
            trace,
        })
    }

    /// Forward pass plus the composite loss; used by the training loop.
    pub fn loss(
        &self,
        tape: &mut Tape,
        xs: &[Var],
        labels: &[usize],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<LossParts, DmfError> {
        let pass = self.forward(tape, xs, mode, rng)?;
        let l_cls = tape.cross_entropy(pass.logits, labels)?;
        let l_sh = cfd::loss_sh(tape, &pass.features.shared_raw)?;
        let l_ps = cfd::loss_ps(tape, &pass.features.partial_raw, &self.lattice)?;
        let l_diff = cfd::loss_diff(tape, &pass.features.flat)?;
        let total = total_loss(
            tape,
            l_cls,
            l_sh,
            l_ps,
            l_diff,
            self.config.alpha,
            self.config.beta,
        )?;
        Ok(LossParts {
            total,
            l_cls,
            l_sh,
            l_ps,
            l_diff,
            pass,
        })
    }
}

/// Composite loss nodes of one training step.
pub struct LossParts {
    pub total: Var,
    pub l_cls: Var,
    pub l_sh: Var,
    pub l_ps: Var,
    pub l_diff: Var,
    pub pass: ForwardPass,
}

/// g = FC(ReLU(Cat(S_1..S_K))) — concatenate first, then ReLU, then the
/// linear map, in that order.
pub fn global_feature(tape: &mut Tape, flat: &[Var], gate_fc: &Linear) -> Result<Var, DmfError> {
    let cat = tape.concat_cols(flat)?;
    let act = tape.relu(cat)?;
    Ok(gate_fc.apply(tape, act)?)
}

/// ω = softmax(O·g) computed per sample: the k-th gate logit of row i is the
/// dot product of S_k's i-th row with g's i-th row. Returns batch×K.
pub fn gate_weights(tape: &mut Tape, flat: &[Var], g: Var) -> Result<Var, DmfError> {
    let mut logit_cols = Vec::with_capacity(flat.len());
    for &s in flat {
        let prod = tape.hadamard(s, g)?;
        logit_cols.push(tape.row_sums(prod)?);
    }
    let logits = tape.concat_cols(&logit_cols)?;
    Ok(tape.softmax_rows(logits)?)
}

/// F_f = Cat(ω_1⊙Ex_1(S_1), ..., ω_K⊙Ex_K(S_K)); each gate weight scales the
/// whole output row of its expert.
pub fn fuse(tape: &mut Tape, flat: &[Var], omega: Var, experts: &[Linear]) -> Result<Var, DmfError> {
    let mut blocks = Vec::with_capacity(flat.len());
    for (k, (&s, expert)) in flat.iter().zip(experts).enumerate() {
        let ex = expert.apply(tape, s)?;
        let w = tape.col(omega, k)?;
        blocks.push(tape.mul_col(ex, w)?);
    }
    Ok(tape.concat_cols(&blocks)?)
}

/// Two hidden layers with ReLU and dropout after each, then the output layer.
pub fn classify(
    tape: &mut Tape,
    fused: Var,
    head: &Classifier,
    dropout: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var, DmfError> {
    let expected = head.fc1.in_dim();
    let got = tape.value(fused).cols();
    if got != expected {
        return Err(DmfError::ClassifierWidth { expected, got });
    }
    let h1 = head.fc1.apply(tape, fused)?;
    let h1 = tape.relu(h1)?;
    let h1 = tape.dropout(h1, dropout, mode, rng)?;
    let h2 = head.fc2.apply(tape, h1)?;
    let h2 = tape.relu(h2)?;
    let h2 = tape.dropout(h2, dropout, mode, rng)?;
    Ok(head.out.apply(tape, h2)?)
}

/// L = L_cls + α(L_sh + L_ps) + β·L_diff. Negative weights are rejected; a
/// zero weight contributes no tape nodes, so the gradient is exactly the
/// remaining terms'.
pub fn total_loss(
    tape: &mut Tape,
    l_cls: Var,
    l_sh: Var,
    l_ps: Var,
    l_diff: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var, DmfError> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(DmfError::NegativeWeight { alpha, beta });
    }
    let mut total = l_cls;
    if alpha > 0.0 {
        let align = tape.add(l_sh, l_ps)?;
        let scaled = tape.scale(align, alpha)?;
        total = tape.add(total, scaled)?;
    }
    if beta > 0.0 {
        let scaled = tape.scale(l_diff, beta)?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Exact trainable-parameter count implied by the configuration (encoders,
/// fusion stage, classifier head); the out-of-scope backbone is excluded.
pub fn count_parameters(config: &ModelConfig) -> Result<usize, DmfError> {
    let lattice = config.lattice()?;
    let k = lattice.final_count();
    let (dim, in_dim) = (config.dim, config.in_dim);
    let linear = |i: usize, o: usize| i * o + o;

    let encoder_count = 1 + config.modalities + lattice.partials().len();
    let mut total = encoder_count * linear(in_dim, dim);
    if config.flags.moe {
        total += k * linear(dim, dim);
        total += if config.flags.ling {
            linear(k * dim, dim)
        } else {
            linear(k * dim, k)
        };
    }
    total += linear(k * dim, dim) + linear(dim, dim) + linear(dim, config.num_cls);
    Ok(total)
}
