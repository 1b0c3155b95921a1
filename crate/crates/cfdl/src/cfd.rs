//! Completed feature disentanglement: the subset lattice over modalities, the
//! encoder bank (one shared, one per modality, one per proper subset of size
//! ≥ 2), feature aggregation, and the three disentanglement losses.
//!
//! For M modalities the final decoupled features are the aggregate shared
//! feature F, the M specific features P_j, and one partial-shared feature G_S
//! per subset S with 2 ≤ |S| < M — 2^M − 1 features in total (7 for M=3,
//! 15 for M=4).

use crate::gradcore::{GradError, Linear, Matrix, ParamRef, Tape, Var};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CfdError {
    #[error("need at least 2 modalities, got {0}")]
    TooFewModalities(usize),
    #[error("expected {expected} modality matrices, got {got}")]
    ModalityCount { expected: usize, got: usize },
    #[error("modality {index} has shape {got:?}, expected {expected:?}")]
    ModalityShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("need at least 2 features for a pairwise loss, got {0}")]
    TooFewFeatures(usize),
    #[error("partial group {group} expects {expected} members, got {got}")]
    GroupSize {
        group: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// All modality subsets relevant to disentanglement, in canonical order:
/// singletons, then proper subsets of size 2..M−1 ordered by ascending size
/// and lexicographically within a size, then the full set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetLattice {
    m: usize,
    specifics: Vec<Vec<usize>>,
    partials: Vec<Vec<usize>>,
    full: Vec<usize>,
}

/// Enumerates the lattice for `m` modalities. For m=2 there are no partial
/// subsets; the final feature count is always 2^m − 1.
pub fn enumerate_subsets(m: usize) -> Result<SubsetLattice, CfdError> {
    if m < 2 {
        return Err(CfdError::TooFewModalities(m));
    }
    let specifics = (0..m).map(|j| vec![j]).collect();
    let full: Vec<usize> = (0..m).collect();
    let mut partials = Vec::new();
    for size in 2..m {
        let mut of_size = subsets_of_size(m, size);
        of_size.sort();
        partials.extend(of_size);
    }
    Ok(SubsetLattice {
        m,
        specifics,
        partials,
        full,
    })
}

fn subsets_of_size(m: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(size);
    fn rec(m: usize, size: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == size {
            out.push(current.clone());
            return;
        }
        for j in start..m {
            current.push(j);
            rec(m, size, j + 1, current, out);
            current.pop();
        }
    }
    rec(m, size, 0, &mut current, &mut out);
    out
}

impl SubsetLattice {
    pub fn modalities(&self) -> usize {
        self.m
    }

    pub fn specifics(&self) -> &[Vec<usize>] {
        &self.specifics
    }

    pub fn partials(&self) -> &[Vec<usize>] {
        &self.partials
    }

    pub fn full(&self) -> &[usize] {
        &self.full
    }

    /// Number of final decoupled features: 2^M − 1.
    pub fn final_count(&self) -> usize {
        1 + self.m + self.partials.len()
    }

    /// Number of raw (pre-aggregation) decoupled features:
    /// M shared + M specific + Σ|S| over partial subsets.
    pub fn raw_count(&self) -> usize {
        2 * self.m + self.partials.iter().map(|s| s.len()).sum::<usize>()
    }

    /// The dis_ps-off lattice: singletons and the full set only.
    pub fn without_partials(mut self) -> Self {
        self.partials.clear();
        self
    }

    /// Names of the final features in canonical order: F, P_1..P_M, G_{..}.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec!["F".to_string()];
        for j in 0..self.m {
            names.push(format!("P_{}", j + 1));
        }
        for s in &self.partials {
            names.push(format!("G_{{{}}}", members(s)));
        }
        names
    }

    /// Names of the raw features: F_j, then P_j, then G_S^j per group member.
    pub fn raw_feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.m).map(|j| format!("F_{}", j + 1)).collect();
        for j in 0..self.m {
            names.push(format!("P_{}", j + 1));
        }
        for s in &self.partials {
            for &j in s {
                names.push(format!("G_{{{}}}^{}", members(s), j + 1));
            }
        }
        names
    }
}

fn members(s: &[usize]) -> String {
    s.iter()
        .map(|j| (j + 1).to_string())
        .collect::<Vec<_>>()
        .join("")
}

/// The encoder bank: one shared encoder, one specific encoder per modality,
/// and one partial-shared encoder per partial subset (shared across the
/// subset's members).
#[derive(Debug, Clone)]
pub struct CfdEncoders {
    pub shared: Linear,
    pub specific: Vec<Linear>,
    pub partial: Vec<Linear>,
}

impl CfdEncoders {
    pub fn init(
        lattice: &SubsetLattice,
        in_dim: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            shared: Linear::glorot(in_dim, dim, rng),
            specific: (0..lattice.modalities())
                .map(|_| Linear::glorot(in_dim, dim, rng))
                .collect(),
            partial: lattice
                .partials()
                .iter()
                .map(|_| Linear::glorot(in_dim, dim, rng))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut out = self.shared.params();
        for e in &self.specific {
            out.extend(e.params());
        }
        for e in &self.partial {
            out.extend(e.params());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.shared.param_count()
            + self.specific.iter().map(Linear::param_count).sum::<usize>()
            + self.partial.iter().map(Linear::param_count).sum::<usize>()
    }
}

/// Raw and aggregated decoupled features for one batch. `flat` is the
/// canonical final-feature list [F, P_1..P_M, G_S in lattice order].
pub struct DecoupledFeatureSet {
    pub shared_raw: Vec<Var>,
    pub specific: Vec<Var>,
    pub partial_raw: Vec<Vec<Var>>,
    pub shared: Var,
    pub partial: Vec<Var>,
    pub flat: Vec<Var>,
}

/// Runs every encoder and aggregates: F_j = E_sh(x_j), P_j = E_sp[j](x_j),
/// G_S^j = E_ps[S](x_j) for j∈S; F is the mean of the F_j and each G_S the
/// mean over its group.
pub fn decouple(
    tape: &mut Tape,
    xs: &[Var],
    enc: &CfdEncoders,
    lattice: &SubsetLattice,
) -> Result<DecoupledFeatureSet, CfdError> {
    let m = lattice.modalities();
    if xs.len() != m {
        return Err(CfdError::ModalityCount {
            expected: m,
            got: xs.len(),
        });
    }
    let shape = tape.value(xs[0]).shape();
    for (index, x) in xs.iter().enumerate() {
        let got = tape.value(*x).shape();
        if got != shape {
            return Err(CfdError::ModalityShape {
                index,
                expected: shape,
                got,
            });
        }
    }

    let mut shared_raw = Vec::with_capacity(m);
    let mut specific = Vec::with_capacity(m);
    for (j, &x) in xs.iter().enumerate() {
        shared_raw.push(enc.shared.apply(tape, x)?);
        specific.push(enc.specific[j].apply(tape, x)?);
    }
    let shared = tape.mean_mats(&shared_raw)?;

    let mut partial_raw = Vec::with_capacity(lattice.partials().len());
    let mut partial = Vec::with_capacity(lattice.partials().len());
    for (s, encoder) in lattice.partials().iter().zip(&enc.partial) {
        let group: Vec<Var> = s
            .iter()
            .map(|&j| encoder.apply(tape, xs[j]))
            .collect::<Result<_, _>>()?;
        partial.push(tape.mean_mats(&group)?);
        partial_raw.push(group);
    }

    let mut flat = Vec::with_capacity(lattice.final_count());
    flat.push(shared);
    flat.extend(&specific);
    flat.extend(&partial);

    Ok(DecoupledFeatureSet {
        shared_raw,
        specific,
        partial_raw,
        shared,
        partial,
        flat,
    })
}

/// Σ over unordered pairs j<k of MSE(F_j, F_k).
pub fn loss_sh(tape: &mut Tape, shared_raw: &[Var]) -> Result<Var, CfdError> {
    if shared_raw.len() < 2 {
        return Err(CfdError::TooFewFeatures(shared_raw.len()));
    }
    pairwise_sum(tape, shared_raw, |t, a, b| t.mse(a, b)).map_err(Into::into)
}

/// Σ over partial groups of Σ over unordered in-group pairs of MSE. For
/// groups larger than two this covers every pair within the group. Zero when
/// there are no partial subsets (M=2).
pub fn loss_ps(
    tape: &mut Tape,
    partial_raw: &[Vec<Var>],
    lattice: &SubsetLattice,
) -> Result<Var, CfdError> {
    for (group, (members, got)) in lattice.partials().iter().zip(partial_raw).enumerate() {
        if got.len() != members.len() {
            return Err(CfdError::GroupSize {
                group,
                expected: members.len(),
                got: got.len(),
            });
        }
    }
    let mut total: Option<Var> = None;
    for group in partial_raw {
        let sum = pairwise_sum(tape, group, |t, a, b| t.mse(a, b))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sum)?,
            None => sum,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Matrix::scalar(0.0))?),
    }
}

/// Σ over unordered pairs of final decoupled features of their raw cosine
/// similarity (not absolute, not squared — anti-aligned pairs reduce the
/// loss).
pub fn loss_diff(tape: &mut Tape, flat: &[Var]) -> Result<Var, CfdError> {
    if flat.len() < 2 {
        return Err(CfdError::TooFewFeatures(flat.len()));
    }
    pairwise_sum(tape, flat, |t, a, b| t.cosine_similarity(a, b)).map_err(Into::into)
}

fn pairwise_sum(
    tape: &mut Tape,
    items: &[Var],
    mut term: impl FnMut(&mut Tape, Var, Var) -> Result<Var, GradError>,
) -> Result<Var, GradError> {
    let mut total: Option<Var> = None;
    for j in 0..items.len() {
        for k in j + 1..items.len() {
            let t = term(tape, items[j], items[k])?;
            total = Some(match total {
                Some(acc) => tape.add(acc, t)?,
                None => t,
            });
        }
    }
    match total {
        Some(v) => Ok(v),
        None => tape.constant(Matrix::scalar(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lattice_m3_matches_documented_counts() {
        let l = enumerate_subsets(3).unwrap();
        assert_eq!(l.partials(), &[vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(l.final_count(), 7);
        assert_eq!(l.raw_count(), 12);
        assert_eq!(
            l.feature_names(),
            vec!["F", "P_1", "P_2", "P_3", "G_{12}", "G_{13}", "G_{23}"]
        );
    }

    #[test]
    fn lattice_m4_has_32_raw_and_15_final() {
        let l = enumerate_subsets(4).unwrap();
        assert_eq!(l.partials().len(), 10); // 6 pairs + 4 triples
        assert_eq!(l.final_count(), 15);
        // 4 shared + 4 specific + 6*2 + 4*3 = 24 partial-raw members... raw
        // decoupled features as counted per encoder output:
        assert_eq!(l.raw_count(), 4 + 4 + 6 * 2 + 4 * 3);
        assert_eq!(l.raw_count(), 32);
    }

    #[test]
    fn lattice_m2_degenerates() {
        let l = enumerate_subsets(2).unwrap();
        assert!(l.partials().is_empty());
        assert_eq!(l.final_count(), 3);
        assert!(matches!(
            enumerate_subsets(1),
            Err(CfdError::TooFewModalities(1))
        ));
    }

    #[test]
    fn final_count_is_power_of_two_minus_one() {
        for m in 2..=5 {
            let l = enumerate_subsets(m).unwrap();
            assert_eq!(l.final_count(), (1 << m) - 1, "m={m}");
        }
    }

    #[test]
    fn canonical_order_is_stable() {
        let a = enumerate_subsets(5).unwrap();
        let b = enumerate_subsets(5).unwrap();
        assert_eq!(a, b);
        // ascending size, lexicographic within a size
        let sizes: Vec<usize> = a.partials().iter().map(|s| s.len()).collect();
        let mut sorted = sizes.clone();
        sorted.sort();
        assert_eq!(sizes, sorted);
    }

    fn identical_input_setup(
        batch: usize,
        in_dim: usize,
        dim: usize,
    ) -> (Tape, Vec<Var>, CfdEncoders, SubsetLattice) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lattice = enumerate_subsets(3).unwrap();
        let enc = CfdEncoders::init(&lattice, in_dim, dim, &mut rng);
        let x = Matrix::glorot(batch, in_dim, &mut rng);
        let mut tape = Tape::new();
        let xs: Vec<Var> = (0..3).map(|_| tape.constant(x.clone()).unwrap()).collect();
        (tape, xs, enc, lattice)
    }

    #[test]
    fn decouple_identical_inputs_share_raw_shared_features() {
        let (mut tape, xs, enc, lattice) = identical_input_setup(2, 6, 4);
        let set = decouple(&mut tape, &xs, &enc, &lattice).unwrap();
        let f1 = tape.value(set.shared_raw[0]).clone();
        for &fj in &set.shared_raw[1..] {
            assert_eq!(tape.value(fj).data(), f1.data());
        }
        // the aggregate mean of identical features equals them up to the
        // rounding of (a+a+a)/3
        for (a, b) in tape.value(set.shared).data().iter().zip(f1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decouple_shapes_and_flat_length() {
        let (mut tape, xs, enc, lattice) = identical_input_setup(2, 6, 32);
        let set = decouple(&mut tape, &xs, &enc, &lattice).unwrap();
        assert_eq!(set.flat.len(), 7);
        for &f in &set.flat {
            assert_eq!(tape.value(f).shape(), (2, 32));
        }
    }

    #[test]
    fn decouple_zero_encoders_broadcast_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lattice = enumerate_subsets(3).unwrap();
        let enc = CfdEncoders::init(&lattice, 4, 3, &mut rng);
        let bias = vec![0.5, -1.0, 2.0];
        for layer in std::iter::once(&enc.shared)
            .chain(&enc.specific)
            .chain(&enc.partial)
        {
            layer.w.borrow_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
            layer
                .b
                .borrow_mut()
                .data_mut()
                .copy_from_slice(&bias);
        }
        let mut tape = Tape::new();
        let xs: Vec<Var> = (0..3)
            .map(|_| tape.constant(Matrix::glorot(2, 4, &mut rng)).unwrap())
            .collect();
        let set = decouple(&mut tape, &xs, &enc, &lattice).unwrap();
        for &f in &set.flat {
            for r in 0..2 {
                assert_eq!(tape.value(f).row(r), bias.as_slice());
            }
        }
    }

    #[test]
    fn decouple_rejects_mismatched_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lattice = enumerate_subsets(3).unwrap();
        let enc = CfdEncoders::init(&lattice, 4, 3, &mut rng);
        let mut tape = Tape::new();
        let xs = vec![
            tape.constant(Matrix::zeros(2, 4)).unwrap(),
            tape.constant(Matrix::zeros(3, 4)).unwrap(),
            tape.constant(Matrix::zeros(2, 4)).unwrap(),
        ];
        assert!(matches!(
            decouple(&mut tape, &xs, &enc, &lattice),
            Err(CfdError::ModalityShape { index: 1, .. })
        ));
    }

    #[test]
    fn loss_sh_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::scalar(1.5)).unwrap();
        let zero = loss_sh(&mut tape, &[a, a, a]).unwrap();
        assert_eq!(tape.scalar_value(zero), 0.0);

        let f1 = tape.constant(Matrix::scalar(0.0)).unwrap();
        let f2 = tape.constant(Matrix::scalar(2.0)).unwrap();
        let l = loss_sh(&mut tape, &[f1, f2]).unwrap();
        assert_eq!(tape.scalar_value(l), 4.0);

        assert!(matches!(
            loss_sh(&mut tape, &[a]),
            Err(CfdError::TooFewFeatures(1))
        ));
    }

    #[test]
    fn loss_sh_m3_has_three_terms() {
        let mut tape = Tape::new();
        let zero = tape.constant(Matrix::scalar(0.0)).unwrap();
        let one = tape.constant(Matrix::scalar(1.0)).unwrap();
        // features 0, 1, 1: pairs (0,1)=1, (0,1)=1, (1,1)=0 → 2
        let l = loss_sh(&mut tape, &[zero, one, one]).unwrap();
        assert_eq!(tape.scalar_value(l), 2.0);
    }

    #[test]
    fn loss_ps_cases() {
        let lattice = enumerate_subsets(3).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::scalar(3.0)).unwrap();
        let groups = vec![vec![a, a], vec![a, a], vec![a, a]];
        let l = loss_ps(&mut tape, &groups, &lattice).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let b = tape.constant(Matrix::scalar(4.0)).unwrap();
        let groups = vec![vec![a, b], vec![a, a], vec![a, a]];
        let l = loss_ps(&mut tape, &groups, &lattice).unwrap();
        assert_eq!(tape.scalar_value(l), 1.0);

        // M=2: empty sum
        let l2 = enumerate_subsets(2).unwrap();
        let l = loss_ps(&mut tape, &[], &l2).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let short = vec![vec![a], vec![a, a], vec![a, a]];
        assert!(matches!(
            loss_ps(&mut tape, &short, &lattice),
            Err(CfdError::GroupSize { group: 0, .. })
        ));
    }

    #[test]
    fn loss_ps_m4_has_18_terms() {
        let lattice = enumerate_subsets(4).unwrap();
        let mut tape = Tape::new();
        let zero = tape.constant(Matrix::scalar(0.0)).unwrap();
        let one = tape.constant(Matrix::scalar(1.0)).unwrap();
        // every group alternates 0/1 so each in-group pair is 0 or 1
        let groups: Vec<Vec<Var>> = lattice
            .partials()
            .iter()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(i, _)| if i % 2 == 0 { zero } else { one })
                    .collect()
            })
            .collect();
        // pairs: 6 pair-groups contribute 1 each; 4 triple-groups (0,1,0)
        // contribute pairs (0,1)=1,(0,0)=0,(1,0)=1 → 2 each. Total 6+8=14.
        let l = loss_ps(&mut tape, &groups, &lattice).unwrap();
        assert_eq!(tape.scalar_value(l), 14.0);
        let pair_terms: usize = lattice
            .partials()
            .iter()
            .map(|s| s.len() * (s.len() - 1) / 2)
            .sum();
        assert_eq!(pair_terms, 18);
    }

    #[test]
    fn loss_diff_cases() {
        let mut tape = Tape::new();
        // orthogonal features → 0
        let e1 = tape
            .constant(Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let e2 = tape
            .constant(Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap())
            .unwrap();
        let e3 = tape
            .constant(Matrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap())
            .unwrap();
        let l = loss_diff(&mut tape, &[e1, e2, e3]).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-12);

        // identical nonzero features → K(K−1)/2
        let v = tape
            .constant(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap())
            .unwrap();
        let feats = vec![v; 7];
        let l = loss_diff(&mut tape, &feats).unwrap();
        assert!((tape.scalar_value(l) - 21.0).abs() < 1e-5);
    }

    #[test]
    fn loss_diff_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats: Vec<Matrix> = (0..5).map(|_| Matrix::glorot(3, 8, &mut rng)).collect();
        let eval = |scaled: Option<usize>, c: f64| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = feats
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let v = tape.constant(f.clone()).unwrap();
                    if scaled == Some(i) {
                        tape.scale(v, c).unwrap()
                    } else {
                        v
                    }
                })
                .collect();
            let l = loss_diff(&mut tape, &vars).unwrap();
            tape.scalar_value(l)
        };
        let base = eval(None, 1.0);
        let scaled = eval(Some(2), 37.5);
        assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn decouple_is_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lattice = enumerate_subsets(3).unwrap();
        let enc = CfdEncoders::init(&lattice, 5, 4, &mut rng);
        let xs_mats: Vec<Matrix> = (0..3).map(|_| Matrix::glorot(2, 5, &mut rng)).collect();

        let mut tape = Tape::new();
        let xs: Vec<Var> = xs_mats
            .iter()
            .map(|x| tape.constant(x.clone()).unwrap())
            .collect();
        let base = decouple(&mut tape, &xs, &enc, &lattice).unwrap();

        // relabel modalities by the cycle 0→1→2→0 and permute encoder
        // assignments accordingly
        let perm = [1, 2, 0]; // modality j of the permuted problem is old perm[j]
        let enc_perm = CfdEncoders {
            shared: enc.shared.clone(),
            specific: perm.iter().map(|&j| enc.specific[j].clone()).collect(),
            // old pair {perm[a], perm[b]} for new pair {a,b}
            partial: lattice
                .partials()
                .iter()
                .map(|s| {
                    let mut old: Vec<usize> = s.iter().map(|&j| perm[j]).collect();
                    old.sort();
                    let pos = lattice.partials().iter().position(|p| *p == old).unwrap();
                    enc.partial[pos].clone()
                })
                .collect(),
        };
        let mut tape2 = Tape::new();
        let xs2: Vec<Var> = perm
            .iter()
            .map(|&j| tape2.constant(xs_mats[j].clone()).unwrap())
            .collect();
        let permuted = decouple(&mut tape2, &xs2, &enc_perm, &lattice).unwrap();

        // F unchanged
        for (a, b) in tape
            .value(base.shared)
            .data()
            .iter()
            .zip(tape2.value(permuted.shared).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
        // P permuted identically
        for j in 0..3 {
            for (a, b) in tape
                .value(base.specific[perm[j]])
                .data()
                .iter()
                .zip(tape2.value(permuted.specific[j]).data())
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // G groups permuted identically
        for (new_idx, s) in lattice.partials().iter().enumerate() {
            let mut old: Vec<usize> = s.iter().map(|&j| perm[j]).collect();
            old.sort();
            let old_idx = lattice.partials().iter().position(|p| *p == old).unwrap();
            for (a, b) in tape
                .value(base.partial[old_idx])
                .data()
                .iter()
                .zip(tape2.value(permuted.partial[new_idx]).data())
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn minimizing_alignment_losses_collapses_shared_features() {
        // dim=8 toy instance, full-batch plain gradient descent
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lattice = enumerate_subsets(3).unwrap();
        let enc = CfdEncoders::init(&lattice, 8, 8, &mut rng);
        let xs_mats: Vec<Matrix> = (0..3).map(|_| Matrix::glorot(4, 8, &mut rng)).collect();
        let params = enc.params();

        let lr = 2e-2;
        let mut max_pair_mse = f64::INFINITY;
        for _ in 0..5000 {
            for p in &params {
                p.borrow_mut().zero_grad();
            }
            let mut tape = Tape::new();
            let xs: Vec<Var> = xs_mats
                .iter()
                .map(|x| tape.constant(x.clone()).unwrap())
                .collect();
            let set = decouple(&mut tape, &xs, &enc, &lattice).unwrap();
            let lsh = loss_sh(&mut tape, &set.shared_raw).unwrap();
            let lps = loss_ps(&mut tape, &set.partial_raw, &lattice).unwrap();
            let loss = tape.add(lsh, lps).unwrap();
            tape.backward(loss).unwrap();
            for p in &params {
                let mut m = p.borrow_mut();
                let grad = m.grad().unwrap().to_vec();
                for (v, g) in m.data_mut().iter_mut().zip(grad) {
                    *v -= lr * g;
                }
            }

            // track max pairwise MSE of raw shared features
            let mut tape = Tape::new();
            let xs: Vec<Var> = xs_mats
                .iter()
                .map(|x| tape.constant(x.clone()).unwrap())
                .collect();
            let set = decouple(&mut tape, &xs, &enc, &lattice).unwrap();
            max_pair_mse = 0.0_f64;
            for j in 0..3 {
                for k in j + 1..3 {
                    let m = tape.mse(set.shared_raw[j], set.shared_raw[k]).unwrap();
                    max_pair_mse = max_pair_mse.max(tape.scalar_value(m));
                }
            }
            if max_pair_mse < 1e-3 {
                break;
            }
        }
        assert!(max_pair_mse < 1e-3, "max pairwise MSE {max_pair_mse}");
    }

    #[test]
    fn losses_are_differentiable_end_to_end() {
        use crate::gradcore::check::gradient_check;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lattice = enumerate_subsets(3).unwrap();
        let enc = CfdEncoders::init(&lattice, 4, 3, &mut rng);
        let xs_mats: Vec<Matrix> = (0..3).map(|_| Matrix::glorot(2, 4, &mut rng)).collect();
        let params = enc.params();
        let lat = lattice.clone();
        let err = gradient_check(&params, 1e-5, |tape| {
            let xs: Vec<Var> = xs_mats
                .iter()
                .map(|x| tape.constant(x.clone()))
                .collect::<Result<_, _>>()?;
            let set = decouple(tape, &xs, &enc, &lat).map_err(cfd_to_grad)?;
            let lsh = loss_sh(tape, &set.shared_raw).map_err(cfd_to_grad)?;
            let lps = loss_ps(tape, &set.partial_raw, &lat).map_err(cfd_to_grad)?;
            let ld = loss_diff(tape, &set.flat).map_err(cfd_to_grad)?;
            let a = tape.add(lsh, lps)?;
            tape.add(a, ld)
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    fn cfd_to_grad(e: CfdError) -> GradError {
        match e {
            CfdError::Grad(g) => g,
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn dropout_mode_is_threaded_separately() {
        // smoke: a tape with dropout in eval mode is deterministic
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::glorot(2, 4, &mut rng)).unwrap();
        let a = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        let b = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }
}
