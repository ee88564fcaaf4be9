//! Latent vector layout and the assembled log posterior of one model on one
//! dataset.

use std::sync::Arc;

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gmrf::{
    constraint_set, interaction_dims, interaction_for, main_structure, rw1_structure, Block,
    Interaction, InteractionKind, StructureMatrix, JITTER,
};
use crate::graph::{connected_components, icar_structure, SpatialGraph};
use crate::model::{
    check_expected, hyper_params, log_hyperprior_internal, Dims, HyperParam, ModelSpec, PriorFamily,
};
use crate::sparse::{SymMatrix, SymbolicCholesky};
use crate::standardize::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub block: Block,
    pub offset: usize,
    pub len: usize,
}

impl BlockInfo {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Upper-triangle entry of a prior precision in global latent indices, with
/// its slot in the Hessian value array.
#[derive(Debug, Clone, Copy)]
struct Entry {
    i: usize,
    j: usize,
    v: f64,
    pos: usize,
}

#[derive(Debug, Clone)]
enum BlockPrior {
    Flat,
    Leroux {
        structure: Vec<Entry>,
        identity: Vec<Entry>,
        /// Nonzero eigenvalues of the ICAR matrix.
        eigenvalues: Vec<f64>,
    },
    /// `τ I` on an unstructured block.
    Scaled {
        param: usize,
        base: Vec<Entry>,
        /// Block length minus the number of independent constraints.
        free_dim: usize,
    },
    /// `τ R + (JITTER τ + ε) I` on an intrinsic block.
    Intrinsic {
        param: usize,
        structure: Vec<Entry>,
        identity: Vec<Entry>,
        /// Nonzero eigenvalues of `R`.
        eigenvalues: Vec<f64>,
    },
}

/// Prior precision at fixed hyperparameters: a list of entry groups, each
/// with a common scale.
pub(crate) struct Precision<'p> {
    groups: Vec<(&'p [Entry], f64)>,
}

impl Precision<'_> {
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for (entries, s) in &self.groups {
            for e in entries.iter() {
                let v = s * e.v;
                y[e.i] += v * x[e.j];
                if e.i != e.j {
                    y[e.j] += v * x[e.i];
                }
            }
        }
        y
    }

    pub fn quad(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for (entries, s) in &self.groups {
            for e in entries.iter() {
                let v = s * e.v * x[e.i] * x[e.j];
                q += if e.i == e.j { v } else { 2.0 * v };
            }
        }
        q
    }

    pub fn add_to(&self, values: &mut [f64]) {
        for (entries, s) in &self.groups {
            for e in entries.iter() {
                values[e.pos] += s * e.v;
            }
        }
    }
}

/// Everything needed to evaluate and differentiate the log posterior of the
/// latent field for one model and dataset.
#[derive(Debug)]
pub(crate) struct Problem {
    pub spec: ModelSpec,
    #[cfg(test)]
    pub dims: Dims,
    pub prior_family: PriorFamily,
    pub blocks: Vec<BlockInfo>,
    pub n: usize,
    pub params: Vec<HyperParam>,
    width: usize,
    cell_idx: Vec<u32>,
    cell_pos: Vec<u32>,
    observed: Vec<f64>,
    expected: Vec<f64>,
    /// `O log E - log O!` per cell, zero where `E = 0`.
    constant: Vec<f64>,
    priors: Vec<BlockPrior>,
    ridge_floor: f64,
    /// Orthonormal constraint rows over the whole latent vector.
    pub constraints: Arc<DMatrix<f64>>,
    /// Raw per-block constraint rows, for residual reporting.
    pub raw_constraints: Vec<(BlockInfo, DMatrix<f64>)>,
    pub symbolic: Arc<SymbolicCholesky>,
}

fn block_structure(
    block: Block,
    spec: &ModelSpec,
    dims: Dims,
    r_phi: &StructureMatrix,
) -> Result<StructureMatrix> {
    match block {
        Block::Delta => main_structure(spec.delta.unwrap(), dims.t),
        Block::Gamma => main_structure(spec.gamma.unwrap(), dims.k),
        Block::Zeta1 | Block::Zeta2 | Block::Zeta3 => {
            let which = match block {
                Block::Zeta1 => Interaction::SpaceTime,
                Block::Zeta2 => Interaction::SpaceAge,
                _ => Interaction::TimeAge,
            };
            let kind = InteractionKind::new(which, spec.interaction(which).unwrap());
            interaction_for(kind, r_phi, dims.t, dims.k)
        }
        Block::Alpha | Block::Phi => unreachable!("handled separately"),
    }
}

/// Absolute ridge on intrinsic blocks per unit of total observed count.
const RIDGE_FLOOR: f64 = 1e-10;

fn symmetric_eigenvalues(m: &SymMatrix) -> Vec<f64> {
    m.to_dense()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect()
}

/// Nonzero eigenvalues of an intrinsic block structure, from the Kronecker
/// operands so large interactions need no dense decomposition.
fn structure_eigenvalues(
    block: Block,
    spec: &ModelSpec,
    dims: Dims,
    r_phi: &StructureMatrix,
    st: &StructureMatrix,
) -> Result<Vec<f64>> {
    let mut all = match block {
        Block::Delta | Block::Gamma => symmetric_eigenvalues(st.matrix()),
        _ => {
            let which = match block {
                Block::Zeta1 => Interaction::SpaceTime,
                Block::Zeta2 => Interaction::SpaceAge,
                _ => Interaction::TimeAge,
            };
            let kind = InteractionKind::new(which, spec.interaction(which).unwrap());
            let (sl, sr) = kind.structured_operands();
            let (nl, nr) = interaction_dims(which, dims.s, dims.t, dims.k);
            let operand = |structured: bool, spatial: bool, n: usize| -> Result<Vec<f64>> {
                Ok(match (structured, spatial) {
                    (false, _) => vec![1.0; n],
                    (true, true) => symmetric_eigenvalues(r_phi.matrix()),
                    (true, false) => symmetric_eigenvalues(rw1_structure(n)?.matrix()),
                })
            };
            let spatial = which != Interaction::TimeAge;
            let left = operand(sl, spatial, nl)?;
            let right = operand(sr, false, nr)?;
            left.iter()
                .flat_map(|a| right.iter().map(move |b| a * b))
                .collect()
        }
    };
    all.sort_by(f64::total_cmp);
    Ok(all.split_off(st.rank_deficiency()))
}

fn param_of(block: Block) -> HyperParam {
    match block {
        Block::Delta => HyperParam::TauDelta,
        Block::Gamma => HyperParam::TauGamma,
        Block::Zeta1 => HyperParam::TauZeta(Interaction::SpaceTime),
        Block::Zeta2 => HyperParam::TauZeta(Interaction::SpaceAge),
        Block::Zeta3 => HyperParam::TauZeta(Interaction::TimeAge),
        Block::Alpha | Block::Phi => HyperParam::TauPhi,
    }
}

impl Problem {
    pub fn new(
        data: &Dataset,
        graph: &SpatialGraph,
        expected: &[f64],
        spec: &ModelSpec,
        prior_family: PriorFamily,
    ) -> Result<Self> {
        let dims = data.dims();
        if graph.area_ids() != data.area_ids() {
            return Err(Error::InvalidInput(
                "dataset areas do not match the adjacency graph (same ids in the same order are required)".into(),
            ));
        }
        check_expected(data, expected)?;
        if expected.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidInput("all expected counts are zero".into()));
        }
        if spec.delta.is_some() && dims.t < 2 || spec.gamma.is_some() && dims.k < 2 {
            // RW1 needs two nodes; iid with a sum-to-zero constraint on one node is degenerate too.
            return Err(Error::InvalidDimension(
                "temporal and age effects need at least two levels".into(),
            ));
        }

        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |block: Block, len: usize| {
            blocks.push(BlockInfo { block, offset, len });
            offset += len;
        };
        push(Block::Alpha, 1);
        push(Block::Phi, dims.s);
        if spec.delta.is_some() {
            push(Block::Delta, dims.t);
        }
        if spec.gamma.is_some() {
            push(Block::Gamma, dims.k);
        }
        for which in Interaction::ALL {
            if spec.has_interaction(which) {
                push(Block::interaction(which), dims.interaction_len(which));
            }
        }
        let n = offset;
        let width = blocks.len();

        let mut cell_idx = Vec::with_capacity(dims.n_cells() * width);
        for i in 0..dims.s {
            for j in 0..dims.t {
                for k in 0..dims.k {
                    for b in &blocks {
                        let local = match b.block {
                            Block::Alpha => 0,
                            Block::Phi => i,
                            Block::Delta => j,
                            Block::Gamma => k,
                            Block::Zeta1 => dims.zeta1_index(i, j),
                            Block::Zeta2 => dims.zeta2_index(i, k),
                            Block::Zeta3 => dims.zeta3_index(j, k),
                        };
                        cell_idx.push((b.offset + local) as u32);
                    }
                }
            }
        }

        // Prior structures in global coordinates.
        let r_phi = icar_structure(graph);
        let components = connected_components(graph);
        if components.len() > 1 {
            log::warn!(
                "spatial graph has {} connected components; adding one constraint per component",
                components.len()
            );
        }
        let cons = constraint_set(spec, dims.s, dims.t, dims.k, &components);
        let params = hyper_params(spec);

        let mut upper: Vec<Vec<(usize, usize, f64)>> = Vec::new();
        let mut kinds = Vec::new();
        let mut eigen = std::collections::HashMap::new();
        for b in &blocks {
            let shift = |m: &SymMatrix| -> Vec<(usize, usize, f64)> {
                m.upper_entries()
                    .map(|(i, j, v)| (b.offset + i, b.offset + j, v))
                    .collect()
            };
            match b.block {
                Block::Alpha => kinds.push((b.block, 0usize, 0usize, 0usize)),
                Block::Phi => {
                    upper.push(shift(r_phi.matrix()));
                    upper.push(shift(&SymMatrix::identity(dims.s)));
                    kinds.push((b.block, upper.len() - 2, 0, 0));
                }
                blk => {
                    let st = block_structure(blk, spec, dims, &r_phi)?;
                    upper.push(shift(st.matrix()));
                    if st.is_structured() {
                        upper.push(shift(&SymMatrix::identity(st.dim())));
                        eigen.insert(blk, structure_eigenvalues(blk, spec, dims, &r_phi, &st)?);
                    }
                    let rank = cons[&blk].rank();
                    let param = params.iter().position(|&p| p == param_of(blk)).unwrap();
                    kinds.push((
                        blk,
                        upper.len() - 1 - usize::from(st.is_structured()),
                        param,
                        b.len - rank,
                    ));
                }
            }
        }

        let pairs_per_cell = width * (width + 1) / 2;
        let pattern =
            upper
                .iter()
                .flatten()
                .map(|&(i, j, _)| (i, j))
                .chain(cell_idx.chunks(width).flat_map(|idx| {
                    (0..width).flat_map(move |a| {
                        (a..width).map(move |b| (idx[a] as usize, idx[b] as usize))
                    })
                }));
        let symbolic = SymbolicCholesky::new(n, pattern)?;

        let mut cell_pos = Vec::with_capacity(dims.n_cells() * pairs_per_cell);
        for idx in cell_idx.chunks(width) {
            for a in 0..width {
                for b in a..width {
                    let p = symbolic.position(idx[a] as usize, idx[b] as usize).unwrap();
                    cell_pos.push(p as u32);
                }
            }
        }
        let entries: Vec<Vec<Entry>> = upper
            .iter()
            .map(|list| {
                list.iter()
                    .map(|&(i, j, v)| Entry {
                        i,
                        j,
                        v,
                        pos: symbolic.position(i, j).unwrap(),
                    })
                    .collect()
            })
            .collect();

        let mut priors = Vec::new();
        for (blk, list, param, free_dim) in kinds {
            priors.push(match blk {
                Block::Alpha => BlockPrior::Flat,
                Block::Phi => {
                    let eig = r_phi.matrix().to_dense().symmetric_eigen().eigenvalues;
                    let max = eig.amax().max(1.0);
                    let mut eigenvalues: Vec<f64> =
                        eig.iter().copied().filter(|&e| e > 1e-9 * max).collect();
                    eigenvalues.sort_by(f64::total_cmp);
                    BlockPrior::Leroux {
                        structure: entries[list].clone(),
                        identity: entries[list + 1].clone(),
                        eigenvalues,
                    }
                }
                blk => match eigen.remove(&blk) {
                    Some(eigenvalues) => BlockPrior::Intrinsic {
                        param,
                        structure: entries[list].clone(),
                        identity: entries[list + 1].clone(),
                        eigenvalues,
                    },
                    None => BlockPrior::Scaled {
                        param,
                        base: entries[list].clone(),
                        free_dim,
                    },
                },
            });
        }

        let mut rows: Vec<DMatrix<f64>> = Vec::new();
        let mut raw_constraints = Vec::new();
        for b in &blocks {
            if let Some(c) = cons.get(&b.block) {
                let ind = c.independent_rows();
                let mut g = DMatrix::zeros(ind.nrows(), n);
                g.view_mut((0, b.offset), (ind.nrows(), b.len))
                    .copy_from(&ind);
                rows.push(g);
                raw_constraints.push((*b, c.rows().clone()));
            }
        }
        let m: usize = rows.iter().map(|r| r.nrows()).sum();
        let mut a = DMatrix::zeros(m, n);
        let mut r0 = 0;
        for r in rows {
            a.view_mut((r0, 0), (r.nrows(), n)).copy_from(&r);
            r0 += r.nrows();
        }

        let observed: Vec<f64> = data.observed().iter().map(|&o| o as f64).collect();
        let constant = observed
            .iter()
            .zip(expected)
            .map(|(&o, &e)| {
                if e > 0.0 {
                    let lf = if o < 2.0 { 0.0 } else { ln_gamma(o + 1.0) };
                    o * e.ln() - lf
                } else {
                    0.0
                }
            })
            .collect();

        let ridge_floor = RIDGE_FLOOR * observed.iter().sum::<f64>().max(1.0);
        Ok(Self {
            spec: *spec,
            #[cfg(test)]
            dims,
            prior_family,
            blocks,
            n,
            params,
            width,
            cell_idx,
            cell_pos,
            observed,
            expected: expected.to_vec(),
            constant,
            priors,
            ridge_floor,
            constraints: Arc::new(a),
            raw_constraints,
            symbolic,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.observed.len()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn block(&self, block: Block) -> Option<BlockInfo> {
        self.blocks.iter().copied().find(|b| b.block == block)
    }

    /// Latent indices entering cell `c`.
    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn expected(&self) -> &[f64] {
        &self.expected
    }

    pub fn cell_indices(&self, c: usize) -> &[u32] {
        &self.cell_idx[c * self.width..(c + 1) * self.width]
    }

    /// Diagonal added to an intrinsic precision `τ R`. The absolute part keeps
    /// the factorization stable when `τ` is small next to the data curvature.
    fn ridge(&self, tau: f64) -> f64 {
        JITTER * tau + self.ridge_floor
    }

    pub fn precision(&self, theta: &[f64]) -> Precision<'_> {
        let mut groups = Vec::new();
        for p in &self.priors {
            match p {
                BlockPrior::Flat => {}
                BlockPrior::Leroux {
                    structure,
                    identity,
                    ..
                } => {
                    let tau = theta[0].exp();
                    let lambda = crate::model::inv_logit(theta[1]);
                    groups.push((structure.as_slice(), tau * lambda));
                    groups.push((identity.as_slice(), tau * (1.0 - lambda)));
                }
                BlockPrior::Scaled { param, base, .. } => {
                    groups.push((base.as_slice(), theta[*param].exp()));
                }
                BlockPrior::Intrinsic {
                    param,
                    structure,
                    identity,
                    ..
                } => {
                    let tau = theta[*param].exp();
                    groups.push((structure.as_slice(), tau));
                    groups.push((identity.as_slice(), self.ridge(tau)));
                }
            }
        }
        Precision { groups }
    }

    /// Log determinant of the prior precision restricted to the constraint
    /// subspace, up to a constant.
    pub fn prior_log_det(&self, theta: &[f64]) -> f64 {
        let mut ld = 0.0;
        for p in &self.priors {
            match p {
                BlockPrior::Flat => {}
                BlockPrior::Leroux { eigenvalues, .. } => {
                    let lambda = crate::model::inv_logit(theta[1]);
                    ld += eigenvalues.len() as f64 * theta[0];
                    ld += eigenvalues
                        .iter()
                        .map(|&mu| (lambda * (mu - 1.0)).ln_1p())
                        .sum::<f64>();
                }
                BlockPrior::Scaled {
                    param, free_dim, ..
                } => {
                    ld += *free_dim as f64 * theta[*param];
                }
                BlockPrior::Intrinsic {
                    param, eigenvalues, ..
                } => {
                    let tau = theta[*param].exp();
                    let ridge = self.ridge(tau);
                    ld += eigenvalues
                        .iter()
                        .map(|&e| (tau * e + ridge).ln())
                        .sum::<f64>();
                }
            }
        }
        ld
    }

    pub fn log_hyperprior(&self, theta: &[f64]) -> f64 {
        log_hyperprior_internal(&self.spec, theta, self.prior_family)
    }

    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        self.cell_idx
            .chunks(self.width)
            .map(|idx| idx.iter().map(|&i| x[i as usize]).sum())
            .collect()
    }

    /// `Σ O η - E exp(η)`, the likelihood without constants.
    pub fn loglik_kernel(&self, eta: &[f64]) -> f64 {
        eta.iter()
            .zip(&self.observed)
            .zip(&self.expected)
            .map(|((&h, &o), &e)| if e > 0.0 { o * h - e * h.exp() } else { 0.0 })
            .sum()
    }

    /// Full Poisson log-likelihood per cell.
    pub fn pointwise_into(&self, eta: &[f64], out: &mut [f64]) {
        for c in 0..eta.len() {
            let e = self.expected[c];
            out[c] = if e > 0.0 {
                self.observed[c] * eta[c] - e * eta[c].exp() + self.constant[c]
            } else {
                0.0
            };
        }
    }

    pub fn loglik_full(&self, eta: &[f64]) -> f64 {
        self.loglik_kernel(eta) + self.constant.iter().sum::<f64>()
    }

    /// Poisson means `E exp(η)`.
    pub fn means(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter()
            .zip(&self.expected)
            .map(|(&h, &e)| if e > 0.0 { e * h.exp() } else { 0.0 })
            .collect()
    }

    /// `Xᵀ v` for a per-cell vector `v`.
    pub fn scatter(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (idx, &vc) in self.cell_idx.chunks(self.width).zip(v) {
            for &i in idx {
                out[i as usize] += vc;
            }
        }
        out
    }

    /// Gradient of the log posterior kernel.
    pub fn gradient(&self, prec: &Precision<'_>, x: &[f64], mu: &[f64]) -> Vec<f64> {
        let resid: Vec<f64> = self.observed.iter().zip(mu).map(|(o, m)| o - m).collect();
        let mut g = self.scatter(&resid);
        for (gi, qi) in g.iter_mut().zip(prec.matvec(x)) {
            *gi -= qi;
        }
        g
    }

    /// `(Q + Xᵀ diag(w) X) v`.
    pub fn hessian_matvec(&self, prec: &Precision<'_>, w: &[f64], v: &[f64]) -> Vec<f64> {
        let xv: Vec<f64> = self.eta(v).iter().zip(w).map(|(a, b)| a * b).collect();
        let mut out = self.scatter(&xv);
        for (o, q) in out.iter_mut().zip(prec.matvec(v)) {
            *o += q;
        }
        out
    }

    /// Values of `Q + Xᵀ diag(w) X` on the symbolic pattern.
    pub fn hessian_values(&self, prec: &Precision<'_>, w: &[f64]) -> Vec<f64> {
        let mut values = vec![0.0; self.symbolic.nnz()];
        prec.add_to(&mut values);
        let np = self.width * (self.width + 1) / 2;
        for (pos, &wc) in self.cell_pos.chunks(np).zip(w) {
            if wc != 0.0 {
                for &p in pos {
                    values[p as usize] += wc;
                }
            }
        }
        values
    }

    #[cfg(test)]
    pub fn unpack(&self, x: &[f64]) -> crate::model::LatentState {
        let mut state = crate::model::LatentState::zeros(&self.spec, self.dims);
        for b in &self.blocks {
            let v = x[b.range()].to_vec();
            match b.block {
                Block::Alpha => state.alpha = v[0],
                Block::Phi => state.phi = v,
                Block::Delta => state.delta = Some(v),
                Block::Gamma => state.gamma = Some(v),
                Block::Zeta1 => state.zeta1 = Some(v),
                Block::Zeta2 => state.zeta2 = Some(v),
                Block::Zeta3 => state.zeta3 = Some(v),
            }
        }
        state
    }

    #[cfg(test)]
    pub fn pack(&self, state: &crate::model::LatentState) -> Result<Vec<f64>> {
        state.check(&self.spec, self.dims)?;
        let mut x = vec![0.0; self.n];
        for b in &self.blocks {
            let src: &[f64] = match b.block {
                Block::Alpha => std::slice::from_ref(&state.alpha),
                Block::Phi => &state.phi,
                Block::Delta => state.delta.as_ref().unwrap(),
                Block::Gamma => state.gamma.as_ref().unwrap(),
                Block::Zeta1 => state.zeta1.as_ref().unwrap(),
                Block::Zeta2 => state.zeta2.as_ref().unwrap(),
                Block::Zeta3 => state.zeta3.as_ref().unwrap(),
            };
            x[b.range()].copy_from_slice(src);
        }
        Ok(x)
    }

    /// Largest absolute violation of the raw constraint rows.
    pub fn constraint_residual(&self, x: &[f64]) -> f64 {
        self.raw_constraints
            .iter()
            .map(|(b, rows)| {
                let xb = nalgebra::DVector::from_column_slice(&x[b.range()]);
                (rows * xb).amax()
            })
            .fold(0.0, f64::max)
    }

    /// Euclidean projection onto the constraint subspace.
    pub fn project_euclidean(&self, x: &mut [f64]) {
        let a = self.constraints.as_ref();
        if a.nrows() == 0 {
            return;
        }
        let xv = nalgebra::DVector::from_column_slice(x);
        let corr = a.transpose() * (a * &xv);
        for (xi, ci) in x.iter_mut().zip(corr.iter()) {
            *xi -= ci;
        }
    }

    /// Dense prior precision of one block at `theta`, as used by the block sampler.
    pub fn block_precision_dense(&self, theta: &[f64], block: Block) -> DMatrix<f64> {
        let info = self.block(block).unwrap();
        let bi = self.blocks.iter().position(|b| b.block == block).unwrap();
        let mut m = DMatrix::zeros(info.len, info.len);
        let mut add = |entries: &[Entry], s: f64| {
            for e in entries {
                let (i, j) = (e.i - info.offset, e.j - info.offset);
                m[(i, j)] += s * e.v;
                if i != j {
                    m[(j, i)] += s * e.v;
                }
            }
        };
        match &self.priors[bi] {
            BlockPrior::Flat => {}
            BlockPrior::Leroux {
                structure,
                identity,
                ..
            } => {
                let tau = theta[0].exp();
                let lambda = crate::model::inv_logit(theta[1]);
                add(structure, tau * lambda);
                add(identity, tau * (1.0 - lambda));
            }
            BlockPrior::Scaled { param, base, .. } => add(base, theta[*param].exp()),
            BlockPrior::Intrinsic {
                param,
                structure,
                identity,
                ..
            } => {
                let tau = theta[*param].exp();
                add(structure, tau);
                add(identity, self.ridge(tau));
            }
        }
        m
    }

    /// Orthonormal constraint rows restricted to one block.
    pub fn block_constraints(&self, block: Block) -> DMatrix<f64> {
        let info = self.block(block).unwrap();
        let a = self.constraints.as_ref();
        let rows: Vec<usize> = (0..a.nrows())
            .filter(|&r| (info.offset..info.offset + info.len).any(|c| a[(r, c)] != 0.0))
            .collect();
        DMatrix::from_fn(rows.len(), info.len, |r, c| a[(rows[r], info.offset + c)])
    }

    /// Log prior density of each block given `theta`, up to constants
    /// independent of `theta`: `½ log|Q_b| - ½ x_bᵀ Q_b x_b`.
    pub fn log_prior_latent(&self, theta: &[f64], x: &[f64]) -> f64 {
        0.5 * self.prior_log_det(theta) - 0.5 * self.precision(theta).quad(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MainEffect;

    fn setup(spec: &str) -> (Dataset, SpatialGraph, Vec<f64>) {
        let g = SpatialGraph::grid(2, 2).unwrap();
        let (t, k) = (3, 2);
        let n = 4 * t * k;
        let d = Dataset::new(
            g.area_ids().to_vec(),
            (0..t).map(|j| j.to_string()).collect(),
            (0..k).map(|k| k.to_string()).collect(),
            (0..n as u64).map(|c| c % 5).collect(),
            vec![100.0; n],
        )
        .unwrap();
        let _ = spec;
        (d, g, vec![2.0; n])
    }

    #[test]
    fn layout_and_gradient_match_finite_differences() {
        let spec: ModelSpec = "delta=rw1;gamma=iid;z1=IV;z2=II;z3=III".parse().unwrap();
        let (d, g, e) = setup("");
        let p = Problem::new(&d, &g, &e, &spec, PriorFamily::Pc).unwrap();
        assert_eq!(p.n, 1 + 4 + 3 + 2 + 12 + 8 + 6);
        let theta: Vec<f64> = (0..p.n_params()).map(|i| 0.3 * i as f64 - 0.5).collect();
        let x: Vec<f64> = (0..p.n)
            .map(|i| ((i * 7 % 11) as f64 - 5.0) / 20.0)
            .collect();
        let prec = p.precision(&theta);
        let f = |x: &[f64]| p.loglik_kernel(&p.eta(x)) - 0.5 * prec.quad(x);
        let mu = p.means(&p.eta(&x));
        let grad = p.gradient(&prec, &x, &mu);
        let h = 1e-6;
        for i in 0..p.n {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-5,
                "coordinate {i}: {fd} vs {}",
                grad[i]
            );
        }

        // Hessian values against a dense oracle.
        let values = p.hessian_values(&prec, &mu);
        let mut dense = DMatrix::<f64>::zeros(p.n, p.n);
        for c in 0..p.n_cells() {
            let idx = p.cell_indices(c);
            for &a in idx {
                for &b in idx {
                    dense[(a as usize, b as usize)] += mu[c];
                }
            }
        }
        for i in 0..p.n {
            let mut ei = vec![0.0; p.n];
            ei[i] = 1.0;
            let qi = prec.matvec(&ei);
            for j in 0..p.n {
                dense[(j, i)] += qi[j];
            }
        }
        for i in 0..p.n {
            for j in i..p.n {
                let got = p.symbolic.position(i, j).map_or(0.0, |q| values[q]);
                assert!((got - dense[(i, j)]).abs() < 1e-12);
            }
        }

        let state = p.unpack(&x);
        assert_eq!(p.pack(&state).unwrap(), x);
        let eta = crate::model::predictor_all(&spec, &state, d.dims()).unwrap();
        for (a, b) in eta.iter().zip(p.eta(&x)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constraint_rows_are_orthonormal() {
        let spec = ModelSpec::new(
            Some(MainEffect::Rw1),
            Some(MainEffect::Rw1),
            [
                Some(crate::gmrf::InteractionType::IV),
                Some(crate::gmrf::InteractionType::IV),
                Some(crate::gmrf::InteractionType::IV),
            ],
        )
        .unwrap();
        let (d, g, e) = setup("");
        let p = Problem::new(&d, &g, &e, &spec, PriorFamily::Pc).unwrap();
        let a = p.constraints.as_ref();
        let gram = a * a.transpose();
        assert!((gram - DMatrix::identity(a.nrows(), a.nrows())).amax() < 1e-12);
        // phi 1, delta 1, gamma 1, z1 4+3-1, z2 4+2-1, z3 2+3-1.
        assert_eq!(a.nrows(), 3 + 6 + 5 + 4);
    }

    #[test]
    fn mismatched_graph_rejected() {
        let (d, _, e) = setup("");
        let g = SpatialGraph::path(4).unwrap();
        let spec: ModelSpec = "delta=iid".parse().unwrap();
        assert!(Problem::new(&d, &g, &e, &spec, PriorFamily::Pc).is_err());
    }
}
