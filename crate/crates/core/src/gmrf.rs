//! Prior structure matrices, identifiability constraints and constrained
//! Gaussian utilities.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{MainEffect, ModelSpec};
use crate::sparse::{Cholesky, SymMatrix};

/// Relative diagonal jitter added to intrinsic structure matrices before
/// factorization.
pub const JITTER: f64 = 1e-8;

/// A symmetric positive semi-definite prior structure with its declared
/// null-space dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix {
    matrix: SymMatrix,
    rank_deficiency: usize,
}

impl StructureMatrix {
    pub fn new(matrix: SymMatrix, rank_deficiency: usize) -> Self {
        Self {
            matrix,
            rank_deficiency,
        }
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn rank_deficiency(&self) -> usize {
        self.rank_deficiency
    }

    pub fn is_structured(&self) -> bool {
        self.rank_deficiency > 0
    }
}

pub fn rw1_structure(n: usize) -> Result<StructureMatrix> {
    if n < 2 {
        return Err(Error::InvalidDimension(format!(
            "random walk needs at least 2 nodes, got {n}"
        )));
    }
    let mut e = Vec::with_capacity(2 * n);
    for i in 0..n {
        let d = if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
        e.push((i, i, d));
        if i + 1 < n {
            e.push((i, i + 1, -1.0));
        }
    }
    Ok(StructureMatrix::new(SymMatrix::from_entries(n, e), 1))
}

pub fn identity_structure(n: usize) -> Result<StructureMatrix> {
    if n == 0 {
        return Err(Error::InvalidDimension("identity of size 0".into()));
    }
    Ok(StructureMatrix::new(SymMatrix::identity(n), 0))
}

pub fn main_structure(effect: MainEffect, n: usize) -> Result<StructureMatrix> {
    match effect {
        MainEffect::Iid => identity_structure(n),
        MainEffect::Rw1 => rw1_structure(n),
    }
}

/// `tau * (lambda * R + (1 - lambda) * I)`.
pub fn leroux_precision(r: &StructureMatrix, lambda: f64, tau: f64) -> Result<SymMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidHyperparameter(format!(
            "mixing parameter {lambda} outside [0, 1]"
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!(
            "precision {tau} must be positive"
        )));
    }
    let eye = SymMatrix::identity(r.dim());
    Ok(r.matrix()
        .scaled(lambda * tau)
        .add_scaled(&eye, (1.0 - lambda) * tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Interaction {
    /// ζ¹, area by period.
    SpaceTime,
    /// ζ², area by age group.
    SpaceAge,
    /// ζ³, age group by period.
    TimeAge,
}

impl Interaction {
    pub const ALL: [Interaction; 3] = [Self::SpaceTime, Self::SpaceAge, Self::TimeAge];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InteractionType {
    I,
    II,
    III,
    IV,
}

impl InteractionType {
    pub const ALL: [InteractionType; 4] = [Self::I, Self::II, Self::III, Self::IV];
}

impl fmt::Display for InteractionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InteractionKind {
    pub which: Interaction,
    pub ty: InteractionType,
}

impl InteractionKind {
    pub fn new(which: Interaction, ty: InteractionType) -> Self {
        Self { which, ty }
    }

    /// Whether the left and right Kronecker operands are structured.
    pub fn structured_operands(&self) -> (bool, bool) {
        use InteractionType::*;
        match (self.which, self.ty) {
            (_, I) => (false, false),
            (_, IV) => (true, true),
            (Interaction::TimeAge, II) | (Interaction::SpaceTime | Interaction::SpaceAge, III) => {
                (true, false)
            }
            _ => (false, true),
        }
    }
}

/// Kronecker product `left ⊗ right` for the given interaction. The operands
/// must be structured or identity as the interaction type demands.
pub fn interaction_structure(
    kind: InteractionKind,
    left: &StructureMatrix,
    right: &StructureMatrix,
) -> Result<StructureMatrix> {
    let (sl, sr) = kind.structured_operands();
    if sl != left.is_structured() || sr != right.is_structured() {
        return Err(Error::InvalidSpecification(format!(
            "{:?} type {} expects operands (structured: {sl}, {sr})",
            kind.which, kind.ty
        )));
    }
    let (l, r) = (left.dim(), right.dim());
    let (nl, nr) = (left.rank_deficiency(), right.rank_deficiency());
    let def = nl * r + l * nr - nl * nr;
    Ok(StructureMatrix::new(
        left.matrix().kron(right.matrix()),
        def,
    ))
}

/// Operand dimensions `(left, right)` of an interaction.
pub fn interaction_dims(which: Interaction, s: usize, t: usize, k: usize) -> (usize, usize) {
    match which {
        Interaction::SpaceTime => (s, t),
        Interaction::SpaceAge => (s, k),
        Interaction::TimeAge => (k, t),
    }
}

/// Builds an interaction structure from the spatial ICAR matrix and the
/// temporal and age dimensions. Structured temporal and age operands are RW1.
pub fn interaction_for(
    kind: InteractionKind,
    r_phi: &StructureMatrix,
    t: usize,
    k: usize,
) -> Result<StructureMatrix> {
    let (sl, sr) = kind.structured_operands();
    let operand = |structured: bool, spatial: bool, n: usize| -> Result<StructureMatrix> {
        match (structured, spatial) {
            (true, true) => Ok(r_phi.clone()),
            (true, false) => rw1_structure(n),
            (false, _) => identity_structure(n),
        }
    };
    let (left, right) = match kind.which {
        Interaction::SpaceTime => (operand(sl, true, r_phi.dim())?, operand(sr, false, t)?),
        Interaction::SpaceAge => (operand(sl, true, r_phi.dim())?, operand(sr, false, k)?),
        Interaction::TimeAge => (operand(sl, false, k)?, operand(sr, false, t)?),
    };
    interaction_structure(kind, &left, &right)
}

/// Rank deficiency of an interaction structure on a connected spatial graph.
pub fn rank_deficiency(kind: InteractionKind, s: usize, t: usize, k: usize) -> usize {
    rank_deficiency_with_components(kind, s, t, k, 1)
}

pub fn rank_deficiency_with_components(
    kind: InteractionKind,
    s: usize,
    t: usize,
    k: usize,
    components: usize,
) -> usize {
    let (l, r) = interaction_dims(kind.which, s, t, k);
    let (sl, sr) = kind.structured_operands();
    let left_null = |structured: bool| match (structured, kind.which) {
        (false, _) => 0,
        (true, Interaction::TimeAge) => 1,
        (true, _) => components,
    };
    let nl = left_null(sl);
    let nr = usize::from(sr);
    nl * r + l * nr - nl * nr
}

/// Latent blocks of the linear predictor, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Alpha,
    Phi,
    Delta,
    Gamma,
    Zeta1,
    Zeta2,
    Zeta3,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Alpha => "alpha",
            Block::Phi => "phi",
            Block::Delta => "delta",
            Block::Gamma => "gamma",
            Block::Zeta1 => "zeta1",
            Block::Zeta2 => "zeta2",
            Block::Zeta3 => "zeta3",
        }
    }

    pub fn interaction(which: Interaction) -> Self {
        match which {
            Interaction::SpaceTime => Block::Zeta1,
            Interaction::SpaceAge => Block::Zeta2,
            Interaction::TimeAge => Block::Zeta3,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Linear constraint rows `A x = 0` on one latent block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub block: Block,
    rows: DMatrix<f64>,
}

impl ConstraintSet {
    pub fn new(block: Block, rows: DMatrix<f64>) -> Self {
        Self { block, rows }
    }

    pub fn from_index_sets(block: Block, dim: usize, sets: &[Vec<usize>]) -> Self {
        let mut rows = DMatrix::zeros(sets.len(), dim);
        for (r, set) in sets.iter().enumerate() {
            for &c in set {
                rows[(r, c)] = 1.0;
            }
        }
        Self::new(block, rows)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// Orthonormal basis of the row space, as rows. Redundant rows are
    /// removed by a rank-revealing decomposition.
    pub fn independent_rows(&self) -> DMatrix<f64> {
        orthonormal_row_basis(&self.rows)
    }

    pub fn rank(&self) -> usize {
        self.independent_rows().nrows()
    }

    pub fn max_residual(&self, x: &[f64]) -> f64 {
        let v = &self.rows * DVector::from_column_slice(x);
        v.amax()
    }
}

pub(crate) fn orthonormal_row_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::zeros(0, a.ncols());
    }
    // Row space of A is the column space of Aᵀ.
    let svd = a.transpose().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (a.nrows().max(a.ncols()) as f64);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    let mut out = DMatrix::zeros(keep.len(), a.ncols());
    for (r, &i) in keep.iter().enumerate() {
        out.row_mut(r).copy_from(&u.column(i).transpose());
    }
    out
}

/// Index sets whose sums are constrained for an interaction block stored as
/// `left ⊗ right` (index `a * r + b`).
fn interaction_sets(
    kind: InteractionKind,
    l: usize,
    r: usize,
    left_groups: &[Vec<usize>],
    right_groups: &[Vec<usize>],
) -> Vec<Vec<usize>> {
    if kind.ty == InteractionType::I {
        return vec![(0..l * r).collect()];
    }
    let (sl, sr) = kind.structured_operands();
    let mut sets = Vec::new();
    if sl {
        for g in left_groups {
            for b in 0..r {
                sets.push(g.iter().map(|&a| a * r + b).collect());
            }
        }
    }
    if sr {
        for a in 0..l {
            for g in right_groups {
                sets.push(g.iter().map(|&b| a * r + b).collect());
            }
        }
    }
    sets
}

/// Sum-to-zero constraints for every latent block present in `spec`.
/// `components` are the connected components of the spatial graph.
pub fn constraint_set(
    spec: &ModelSpec,
    s: usize,
    t: usize,
    k: usize,
    components: &[Vec<usize>],
) -> BTreeMap<Block, ConstraintSet> {
    let mut out = BTreeMap::new();
    out.insert(
        Block::Phi,
        ConstraintSet::from_index_sets(Block::Phi, s, components),
    );
    if spec.delta.is_some() {
        out.insert(
            Block::Delta,
            ConstraintSet::from_index_sets(Block::Delta, t, &[(0..t).collect()]),
        );
    }
    if spec.gamma.is_some() {
        out.insert(
            Block::Gamma,
            ConstraintSet::from_index_sets(Block::Gamma, k, &[(0..k).collect()]),
        );
    }
    let all = |n: usize| vec![(0..n).collect::<Vec<_>>()];
    for which in Interaction::ALL {
        let Some(ty) = spec.interaction(which) else {
            continue;
        };
        let kind = InteractionKind::new(which, ty);
        let (l, r) = interaction_dims(which, s, t, k);
        let sets = match which {
            Interaction::TimeAge => interaction_sets(kind, l, r, &all(l), &all(r)),
            _ => interaction_sets(kind, l, r, components, &all(r)),
        };
        let block = Block::interaction(which);
        out.insert(block, ConstraintSet::from_index_sets(block, l * r, &sets));
    }
    out
}

/// Projects `x` onto `{A x = 0}` in the metric of `Q` (conditioning by kriging).
pub fn condition_on_constraints(q: &SymMatrix, a: &DMatrix<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let chol = Cholesky::from_matrix(q)?;
    let kriging = Kriging::new(&chol, a);
    Ok(kriging.project(x))
}

/// Precomputed pieces of the kriging correction for a fixed factor and
/// constraint matrix.
#[derive(Debug, Clone)]
pub struct Kriging {
    a: Arc<DMatrix<f64>>,
    /// `Q⁻¹ Aᵀ`, one column per independent row.
    v: DMatrix<f64>,
    /// Cholesky factor of `A Q⁻¹ Aᵀ`.
    w: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Kriging {
    pub fn new(chol: &Cholesky, a: &DMatrix<f64>) -> Self {
        Self::with_rows(chol, Arc::new(orthonormal_row_basis(a)))
    }

    /// `a` must have linearly independent rows.
    pub fn with_rows(chol: &Cholesky, a: Arc<DMatrix<f64>>) -> Self {
        if a.nrows() == 0 {
            return Self {
                v: DMatrix::zeros(a.ncols(), 0),
                a,
                w: None,
            };
        }
        let v = chol.solve_columns(&a.transpose());
        let w = a.as_ref() * &v;
        let w = 0.5 * (&w + w.transpose());
        let w = nalgebra::Cholesky::new(w);
        Self { a, v, w }
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    /// False when `A Q⁻¹ Aᵀ` could not be factorized.
    pub fn is_valid(&self) -> bool {
        self.a.nrows() == 0 || self.w.is_some()
    }

    /// `log |A Q⁻¹ Aᵀ|`.
    pub fn log_det(&self) -> f64 {
        match &self.w {
            Some(w) => 2.0 * w.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None if self.a.nrows() == 0 => 0.0,
            None => f64::NAN,
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.split(x).0
    }

    /// Projects `x` and returns the coefficients `c` of the removed part
    /// `Q⁻¹ Aᵀ c`. When `x = Q⁻¹ b`, the projection solves the constrained
    /// system `Q y = b - Aᵀ c, A y = 0`.
    pub fn split(&self, x: &[f64]) -> (Vec<f64>, DVector<f64>) {
        let Some(w) = &self.w else {
            return (x.to_vec(), DVector::zeros(0));
        };
        let mut out = DVector::from_column_slice(x);
        let mut total = DVector::zeros(self.a.nrows());
        // A second pass removes the rounding left by the first.
        for _ in 0..2 {
            let ax = self.a.as_ref() * &out;
            let coef = w.solve(&ax);
            out -= &self.v * &coef;
            total += coef;
        }
        (out.as_slice().to_vec(), total)
    }
}

/// Draws `x ~ N(0, Q⁻¹)`.
pub fn sample_gmrf(q: &SymMatrix, seed: u64) -> Result<Vec<f64>> {
    let chol = Cholesky::from_matrix(q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_with(&chol, &mut rng))
}

pub fn sample_with<R: rand::Rng + ?Sized>(chol: &Cholesky, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..chol.dim())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    chol.correlate(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{icar_structure, SpatialGraph};

    fn numerical_rank(m: &SymMatrix) -> usize {
        let eig = m.to_dense().symmetric_eigen().eigenvalues;
        let max = eig.amax().max(1.0);
        eig.iter().filter(|&&e| e.abs() > 1e-9 * max).count()
    }

    #[test]
    fn rw1_seven() {
        let r = rw1_structure(7).unwrap();
        let d = r.matrix().to_dense();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(7, 7, &[
             1.0, -1.0,  0.0,  0.0,  0.0,  0.0,  0.0,
            -1.0,  2.0, -1.0,  0.0,  0.0,  0.0,  0.0,
             0.0, -1.0,  2.0, -1.0,  0.0,  0.0,  0.0,
             0.0,  0.0, -1.0,  2.0, -1.0,  0.0,  0.0,
             0.0,  0.0,  0.0, -1.0,  2.0, -1.0,  0.0,
             0.0,  0.0,  0.0,  0.0, -1.0,  2.0, -1.0,
             0.0,  0.0,  0.0,  0.0,  0.0, -1.0,  1.0,
        ]);
        assert_eq!(d, expected);
        assert_eq!(r.rank_deficiency(), 1);
    }

    #[test]
    fn rw1_small_and_null_space() {
        assert!(matches!(rw1_structure(1), Err(Error::InvalidDimension(_))));
        assert_eq!(
            rw1_structure(2).unwrap().matrix().to_dense(),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
        let r = rw1_structure(5).unwrap();
        assert_eq!(numerical_rank(r.matrix()), 4);
        assert!(r.matrix().matvec(&[1.0; 5]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity() {
        assert_eq!(
            identity_structure(1).unwrap().matrix().to_dense(),
            DMatrix::identity(1, 1)
        );
        let i4 = identity_structure(4).unwrap();
        assert_eq!(i4.matrix().to_dense(), DMatrix::identity(4, 4));
        assert_eq!(i4.rank_deficiency(), 0);
    }

    #[test]
    fn leroux_examples() {
        let r = icar_structure(&SpatialGraph::path(4).unwrap());
        let q = leroux_precision(&r, 0.0, 3.0).unwrap();
        assert_eq!(q.to_dense(), DMatrix::identity(4, 4) * 3.0);
        let q = leroux_precision(&r, 1.0, 1.0).unwrap();
        assert_eq!(q.to_dense(), r.matrix().to_dense());
        let r3 = icar_structure(&SpatialGraph::path(3).unwrap());
        let q = leroux_precision(&r3, 0.5, 2.0).unwrap();
        assert_eq!(
            q.to_dense(),
            DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 3.0, -1.0, 0.0, -1.0, 2.0])
        );
        assert!(leroux_precision(&r3, 1.5, 1.0).is_err());
        assert!(leroux_precision(&r3, 0.5, 0.0).is_err());
    }

    #[test]
    fn leroux_eigenvalues_follow_structure() {
        let g = SpatialGraph::grid(4, 5).unwrap();
        let r = icar_structure(&g);
        let mut mu: Vec<f64> = r
            .matrix()
            .to_dense()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        mu.sort_by(f64::total_cmp);
        for (lambda, tau) in [(0.2, 0.7), (0.9, 3.0)] {
            let q = leroux_precision(&r, lambda, tau).unwrap();
            let mut ev: Vec<f64> = q
                .to_dense()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .collect();
            ev.sort_by(f64::total_cmp);
            for (e, m) in ev.iter().zip(&mu) {
                assert!((e - tau * (lambda * m + 1.0 - lambda)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn interaction_examples() {
        let st = |ty| InteractionKind::new(Interaction::SpaceTime, ty);
        let r_phi = icar_structure(&SpatialGraph::path(2).unwrap());
        let z = interaction_for(
            st(InteractionType::I),
            &icar_structure(&SpatialGraph::path(2).unwrap()),
            3,
            2,
        )
        .unwrap();
        assert_eq!(z.matrix().to_dense(), DMatrix::identity(6, 6));

        let z = interaction_for(st(InteractionType::IV), &r_phi, 2, 2).unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
             1.0, -1.0, -1.0,  1.0,
            -1.0,  1.0,  1.0, -1.0,
            -1.0,  1.0,  1.0, -1.0,
             1.0, -1.0, -1.0,  1.0,
        ]);
        assert_eq!(z.matrix().to_dense(), expected);
        assert_eq!(numerical_rank(z.matrix()), 1);
        assert_eq!(z.rank_deficiency(), 3);

        let r3 = icar_structure(&SpatialGraph::path(3).unwrap());
        let z = interaction_for(
            InteractionKind::new(Interaction::SpaceAge, InteractionType::II),
            &r3,
            5,
            4,
        )
        .unwrap();
        assert_eq!(z.dim(), 12);
        let rw = rw1_structure(4).unwrap().matrix().to_dense();
        let d = z.matrix().to_dense();
        for a in 0..3 {
            for b in 0..3 {
                let blk = d.view((4 * a, 4 * b), (4, 4)).into_owned();
                if a == b {
                    assert_eq!(blk, rw);
                } else {
                    assert_eq!(blk, DMatrix::zeros(4, 4));
                }
            }
        }
    }

    #[test]
    fn operand_mismatch_is_rejected() {
        let r = rw1_structure(3).unwrap();
        let i = identity_structure(3).unwrap();
        let kind = InteractionKind::new(Interaction::SpaceTime, InteractionType::II);
        assert!(matches!(
            interaction_structure(kind, &r, &i),
            Err(Error::InvalidSpecification(_))
        ));
        assert!(interaction_structure(kind, &i, &r).is_ok());
        let ta = InteractionKind::new(Interaction::TimeAge, InteractionType::II);
        assert!(interaction_structure(ta, &r, &i).is_ok());
    }

    #[test]
    fn rank_deficiency_examples() {
        use InteractionType::*;
        let st = |ty| InteractionKind::new(Interaction::SpaceTime, ty);
        assert_eq!(rank_deficiency(st(I), 4, 5, 3), 0);
        assert_eq!(rank_deficiency(st(II), 4, 5, 3), 4);
        assert_eq!(rank_deficiency(st(III), 4, 5, 3), 5);
        assert_eq!(rank_deficiency(st(IV), 4, 5, 3), 8);
        assert_eq!(
            rank_deficiency(InteractionKind::new(Interaction::TimeAge, IV), 3, 5, 8),
            12
        );
        let z = interaction_for(
            InteractionKind::new(Interaction::TimeAge, IV),
            &icar_structure(&SpatialGraph::path(3).unwrap()),
            5,
            8,
        )
        .unwrap();
        assert_eq!(40 - numerical_rank(z.matrix()), 12);
    }

    #[test]
    fn constraint_examples() {
        use InteractionType::*;
        let comps = vec![vec![0, 1, 2]];
        let spec =
            |ty| ModelSpec::new(Some(MainEffect::Rw1), None, [Some(ty), None, None]).unwrap();
        let c = constraint_set(&spec(II), 3, 4, 2, &comps);
        let z = &c[&Block::Zeta1];
        assert_eq!(z.n_rows(), 3);
        for i in 0..3 {
            for c in 0..12 {
                assert_eq!(z.rows()[(i, c)], if c / 4 == i { 1.0 } else { 0.0 });
            }
        }
        let c = constraint_set(&spec(IV), 3, 4, 2, &comps);
        assert_eq!(c[&Block::Zeta1].n_rows(), 7);
        assert_eq!(c[&Block::Zeta1].rank(), 6);
        let c = constraint_set(&spec(I), 3, 4, 2, &comps);
        assert_eq!(c[&Block::Zeta1].n_rows(), 1);
        assert!(c[&Block::Zeta1].rows().iter().all(|&v| v == 1.0));
        assert_eq!(c[&Block::Phi].n_rows(), 1);
        assert_eq!(c[&Block::Delta].n_rows(), 1);
        assert!(!c.contains_key(&Block::Gamma));
    }

    #[test]
    fn kriging_examples() {
        let ones = DMatrix::from_element(1, 6, 1.0);
        let x = [1.0, 4.0, -2.0, 0.5, 3.0, 7.0];
        let mean = x.iter().sum::<f64>() / 6.0;
        let y = condition_on_constraints(&SymMatrix::identity(6), &ones, &x).unwrap();
        for i in 0..6 {
            assert!((y[i] - (x[i] - mean)).abs() < 1e-12);
        }
        let again = condition_on_constraints(&SymMatrix::identity(6), &ones, &y).unwrap();
        for i in 0..6 {
            assert!((again[i] - y[i]).abs() < 1e-12);
        }

        // Dense oracle: x - Σ Aᵀ (A Σ Aᵀ)⁻¹ A x with Σ = Q⁻¹.
        let diag: Vec<f64> = (1..=6).map(f64::from).collect();
        let q = SymMatrix::diagonal(&diag);
        let y = condition_on_constraints(&q, &ones, &x).unwrap();
        let sigma =
            DMatrix::from_diagonal(&DVector::from_iterator(6, diag.iter().map(|d| 1.0 / d)));
        let xv = DVector::from_column_slice(&x);
        let at = ones.transpose();
        let w = (&ones * &sigma * &at)[(0, 0)];
        let expected = &xv - &sigma * &at * ((&ones * &xv)[(0, 0)] / w);
        for i in 0..6 {
            assert!((y[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn redundant_rows_are_dropped() {
        let mut a = DMatrix::zeros(3, 4);
        a.row_mut(0).copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        a.row_mut(1).copy_from_slice(&[0.0, 0.0, 1.0, 1.0]);
        a.row_mut(2).copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        let x = [1.0, 2.0, 3.0, 5.0];
        let y = condition_on_constraints(&SymMatrix::identity(4), &a, &x).unwrap();
        assert!((a * DVector::from_column_slice(&y)).amax() < 1e-12);
        assert!((y[0] + 0.5).abs() < 1e-12 && (y[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_moments() {
        let x: Vec<Vec<f64>> = (0..10_000)
            .map(|s| sample_gmrf(&SymMatrix::diagonal(&[4.0]), s).unwrap())
            .collect();
        let var = x.iter().map(|v| v[0] * v[0]).sum::<f64>() / x.len() as f64;
        let sd = var.sqrt();
        assert!((sd - 0.5).abs() < 3.0 * 0.5 / (2.0 * 10_000f64).sqrt());

        let r3 = icar_structure(&SpatialGraph::path(3).unwrap());
        let q = leroux_precision(&r3, 0.5, 2.0).unwrap();
        let chol = Cholesky::from_matrix(&q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut cov = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let v = DVector::from_vec(sample_with(&chol, &mut rng));
            cov += &v * v.transpose();
        }
        cov /= n as f64;
        let inv = q.to_dense().try_inverse().unwrap();
        assert!((cov - inv).amax() < 2e-2);
    }

    #[test]
    fn identity_sampler_variance() {
        let q = SymMatrix::identity(1000);
        let chol = Cholesky::from_matrix(&q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sumsq = vec![0.0; 1000];
        let n = 10_000;
        for _ in 0..n {
            for (s, v) in sumsq.iter_mut().zip(sample_with(&chol, &mut rng)) {
                *s += v * v;
            }
        }
        assert!(sumsq
            .iter()
            .all(|s| (0.94..=1.06).contains(&(s / n as f64))));
    }

    #[test]
    fn sampler_is_deterministic() {
        let q = SymMatrix::identity(5);
        assert_eq!(sample_gmrf(&q, 3).unwrap(), sample_gmrf(&q, 3).unwrap());
        assert_ne!(sample_gmrf(&q, 3).unwrap(), sample_gmrf(&q, 4).unwrap());
    }
}
