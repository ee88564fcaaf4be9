//! Model space, linear predictor, Poisson likelihood and hyperpriors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gmrf::{Interaction, InteractionType};
use crate::standardize::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MainEffect {
    Iid,
    Rw1,
}

impl MainEffect {
    pub const ALL: [MainEffect; 2] = [MainEffect::Iid, MainEffect::Rw1];
}

impl fmt::Display for MainEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MainEffect::Iid => "iid",
            MainEffect::Rw1 => "rw1",
        })
    }
}

/// One model of the search space. The spatial effect is always Leroux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub delta: Option<MainEffect>,
    pub gamma: Option<MainEffect>,
    pub zeta: [Option<InteractionType>; 3],
}

/// The eight predictor families used for the best-per-family table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    Delta,
    DeltaZeta1,
    Gamma,
    GammaZeta2,
    DeltaGamma,
    DeltaGammaZeta1,
    DeltaGammaZeta12,
    DeltaGammaZeta123,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Delta,
        Family::DeltaZeta1,
        Family::Gamma,
        Family::GammaZeta2,
        Family::DeltaGamma,
        Family::DeltaGammaZeta1,
        Family::DeltaGammaZeta12,
        Family::DeltaGammaZeta123,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::Delta => "phi+delta",
            Family::DeltaZeta1 => "phi+delta+zeta1",
            Family::Gamma => "phi+gamma",
            Family::GammaZeta2 => "phi+gamma+zeta2",
            Family::DeltaGamma => "phi+delta+gamma",
            Family::DeltaGammaZeta1 => "phi+delta+gamma+zeta1",
            Family::DeltaGammaZeta12 => "phi+delta+gamma+zeta1+zeta2",
            Family::DeltaGammaZeta123 => "phi+delta+gamma+zeta1+zeta2+zeta3",
        }
    }
}

impl ModelSpec {
    pub fn new(
        delta: Option<MainEffect>,
        gamma: Option<MainEffect>,
        zeta: [Option<InteractionType>; 3],
    ) -> Result<Self> {
        let spec = Self { delta, gamma, zeta };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let [z1, z2, z3] = self.zeta;
        if z1.is_some() && self.delta.is_none() {
            return Err(Error::InvalidSpecification(
                "space-time interaction requires the temporal main effect".into(),
            ));
        }
        if z2.is_some() && self.gamma.is_none() {
            return Err(Error::InvalidSpecification(
                "space-age interaction requires the age main effect".into(),
            ));
        }
        if z3.is_some() && (self.delta.is_none() || self.gamma.is_none()) {
            return Err(Error::InvalidSpecification(
                "time-age interaction requires both temporal and age main effects".into(),
            ));
        }
        Ok(())
    }

    pub fn interaction(&self, which: Interaction) -> Option<InteractionType> {
        self.zeta[which.index()]
    }

    pub fn has_interaction(&self, which: Interaction) -> bool {
        self.interaction(which).is_some()
    }

    /// Family of the best-per-family table, if the spec's set of effects is one of them.
    pub fn family(&self) -> Option<Family> {
        let present = (
            self.delta.is_some(),
            self.gamma.is_some(),
            self.zeta.map(|z| z.is_some()),
        );
        match present {
            (true, false, [false, false, false]) => Some(Family::Delta),
            (true, false, [true, false, false]) => Some(Family::DeltaZeta1),
            (false, true, [false, false, false]) => Some(Family::Gamma),
            (false, true, [false, true, false]) => Some(Family::GammaZeta2),
            (true, true, [false, false, false]) => Some(Family::DeltaGamma),
            (true, true, [true, false, false]) => Some(Family::DeltaGammaZeta1),
            (true, true, [true, true, false]) => Some(Family::DeltaGammaZeta12),
            (true, true, [true, true, true]) => Some(Family::DeltaGammaZeta123),
            _ => None,
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let main = |m: Option<MainEffect>| m.map_or("-".to_string(), |m| m.to_string());
        let ty = |t: Option<InteractionType>| t.map_or("-".to_string(), |t| t.to_string());
        write!(
            f,
            "delta={};gamma={};z1={};z2={};z3={}",
            main(self.delta),
            main(self.gamma),
            ty(self.zeta[0]),
            ty(self.zeta[1]),
            ty(self.zeta[2])
        )
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidSpecification(msg);
        let mut delta = None;
        let mut gamma = None;
        let mut zeta = [None; 3];
        let mut seen = [false; 5];
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{part}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let slot = match key {
                "delta" => 0,
                "gamma" => 1,
                "z1" => 2,
                "z2" => 3,
                "z3" => 4,
                _ => return Err(bad(format!("unknown key `{key}`"))),
            };
            if std::mem::replace(&mut seen[slot], true) {
                return Err(bad(format!("key `{key}` given twice")));
            }
            if slot < 2 {
                let m = match value.to_ascii_lowercase().as_str() {
                    "-" => None,
                    "iid" => Some(MainEffect::Iid),
                    "rw1" => Some(MainEffect::Rw1),
                    _ => return Err(bad(format!("unknown main-effect structure `{value}`"))),
                };
                if slot == 0 {
                    delta = m;
                } else {
                    gamma = m;
                }
            } else {
                zeta[slot - 2] = match value.to_ascii_uppercase().as_str() {
                    "-" => None,
                    "I" => Some(InteractionType::I),
                    "II" => Some(InteractionType::II),
                    "III" => Some(InteractionType::III),
                    "IV" => Some(InteractionType::IV),
                    _ => return Err(bad(format!("unknown interaction type `{value}`"))),
                };
            }
        }
        ModelSpec::new(delta, gamma, zeta)
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Order of type pairs for two-interaction subsets: an expanding square over
/// `{I, II, III, IV}²`.
fn pair_order() -> Vec<(InteractionType, InteractionType)> {
    let t = InteractionType::ALL;
    let mut out = Vec::with_capacity(16);
    for m in 0..4 {
        for a in 0..m {
            out.push((t[m], t[a]));
        }
        for b in 0..=m {
            out.push((t[b], t[m]));
        }
    }
    out
}

/// All 520 models, subset by subset, in the reference table order.
pub fn enumerate_models() -> Vec<ModelSpec> {
    use InteractionType::*;
    let mains = MainEffect::ALL;
    // (delta, gamma) with delta varying fastest.
    let combos: Vec<(MainEffect, MainEffect)> = mains
        .iter()
        .flat_map(|&g| mains.iter().map(move |&d| (d, g)))
        .collect();
    let types = InteractionType::ALL;
    let mk =
        |d: Option<MainEffect>, g: Option<MainEffect>, z: [Option<InteractionType>; 3]| ModelSpec {
            delta: d,
            gamma: g,
            zeta: z,
        };
    let mut out = Vec::with_capacity(520);

    for d in mains {
        out.push(mk(Some(d), None, [None; 3]));
    }
    for g in mains {
        out.push(mk(None, Some(g), [None; 3]));
    }
    for &(d, g) in &combos {
        out.push(mk(Some(d), Some(g), [None; 3]));
    }
    for d in mains {
        for t in types {
            out.push(mk(Some(d), None, [Some(t), None, None]));
        }
    }
    for t in types {
        for &(d, g) in &combos {
            out.push(mk(Some(d), Some(g), [Some(t), None, None]));
        }
    }
    for g in mains {
        for t in types {
            out.push(mk(None, Some(g), [None, Some(t), None]));
        }
    }
    for slot in [1, 2] {
        for t in types {
            for &(d, g) in &combos {
                let mut z = [None; 3];
                z[slot] = Some(t);
                out.push(mk(Some(d), Some(g), z));
            }
        }
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        for (ta, tb) in pair_order() {
            for &(d, g) in &combos {
                let mut z = [None; 3];
                z[a] = Some(ta);
                z[b] = Some(tb);
                out.push(mk(Some(d), Some(g), z));
            }
        }
    }
    let mut triples = Vec::with_capacity(64);
    for z1 in types {
        triples.push((z1, I, I));
    }
    for z1 in types {
        for (z2, z3) in [(II, I), (III, I), (IV, I), (I, II), (I, III), (I, IV)] {
            triples.push((z1, z2, z3));
        }
    }
    for z3 in [II, III, IV] {
        for z1 in types {
            for z2 in [II, III, IV] {
                triples.push((z1, z2, z3));
            }
        }
    }
    for (z1, z2, z3) in triples {
        for &(d, g) in &combos {
            out.push(mk(Some(d), Some(g), [Some(z1), Some(z2), Some(z3)]));
        }
    }
    out
}

/// Lattice dimensions: areas, periods, age groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub s: usize,
    pub t: usize,
    pub k: usize,
}

impl Dims {
    pub fn new(s: usize, t: usize, k: usize) -> Self {
        Self { s, t, k }
    }

    pub fn n_cells(&self) -> usize {
        self.s * self.t * self.k
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.t + j) * self.k + k
    }

    pub fn zeta1_index(&self, i: usize, j: usize) -> usize {
        i * self.t + j
    }

    pub fn zeta2_index(&self, i: usize, k: usize) -> usize {
        i * self.k + k
    }

    pub fn zeta3_index(&self, j: usize, k: usize) -> usize {
        k * self.t + j
    }

    pub fn interaction_len(&self, which: Interaction) -> usize {
        match which {
            Interaction::SpaceTime => self.s * self.t,
            Interaction::SpaceAge => self.s * self.k,
            Interaction::TimeAge => self.k * self.t,
        }
    }
}

/// Latent effects of the linear predictor. Absent blocks are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub alpha: f64,
    pub phi: Vec<f64>,
    pub delta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub zeta1: Option<Vec<f64>>,
    pub zeta2: Option<Vec<f64>>,
    pub zeta3: Option<Vec<f64>>,
}

impl LatentState {
    /// All blocks demanded by `spec` set to zero.
    pub fn zeros(spec: &ModelSpec, dims: Dims) -> Self {
        let z = |which: Interaction| {
            spec.has_interaction(which)
                .then(|| vec![0.0; dims.interaction_len(which)])
        };
        Self {
            alpha: 0.0,
            phi: vec![0.0; dims.s],
            delta: spec.delta.map(|_| vec![0.0; dims.t]),
            gamma: spec.gamma.map(|_| vec![0.0; dims.k]),
            zeta1: z(Interaction::SpaceTime),
            zeta2: z(Interaction::SpaceAge),
            zeta3: z(Interaction::TimeAge),
        }
    }

    pub fn zeta(&self, which: Interaction) -> Option<&Vec<f64>> {
        match which {
            Interaction::SpaceTime => self.zeta1.as_ref(),
            Interaction::SpaceAge => self.zeta2.as_ref(),
            Interaction::TimeAge => self.zeta3.as_ref(),
        }
    }

    pub fn zeta_mut(&mut self, which: Interaction) -> &mut Option<Vec<f64>> {
        match which {
            Interaction::SpaceTime => &mut self.zeta1,
            Interaction::SpaceAge => &mut self.zeta2,
            Interaction::TimeAge => &mut self.zeta3,
        }
    }

    /// Checks that the blocks demanded by `spec` are present with the right lengths.
    pub fn check(&self, spec: &ModelSpec, dims: Dims) -> Result<()> {
        let mismatch = |what: &str| Err(Error::SpecificationMismatch(what.to_string()));
        if self.phi.len() != dims.s {
            return mismatch("phi has the wrong length");
        }
        let check =
            |block: Option<&Vec<f64>>, wanted: bool, len: usize, name: &str| -> Result<()> {
                match (block, wanted) {
                    (None, true) => Err(Error::SpecificationMismatch(format!("{name} is missing"))),
                    (Some(v), true) if v.len() != len => Err(Error::SpecificationMismatch(
                        format!("{name} has length {} but {len} is required", v.len()),
                    )),
                    _ => Ok(()),
                }
            };
        check(self.delta.as_ref(), spec.delta.is_some(), dims.t, "delta")?;
        check(self.gamma.as_ref(), spec.gamma.is_some(), dims.k, "gamma")?;
        for (which, name) in Interaction::ALL
            .into_iter()
            .zip(["zeta1", "zeta2", "zeta3"])
        {
            check(
                self.zeta(which),
                spec.has_interaction(which),
                dims.interaction_len(which),
                name,
            )?;
        }
        Ok(())
    }
}

fn predictor_unchecked(
    spec: &ModelSpec,
    x: &LatentState,
    dims: Dims,
    i: usize,
    j: usize,
    k: usize,
) -> f64 {
    let mut eta = x.alpha + x.phi[i];
    if spec.delta.is_some() {
        eta += x.delta.as_ref().unwrap()[j];
    }
    if spec.gamma.is_some() {
        eta += x.gamma.as_ref().unwrap()[k];
    }
    if spec.zeta[0].is_some() {
        eta += x.zeta1.as_ref().unwrap()[dims.zeta1_index(i, j)];
    }
    if spec.zeta[1].is_some() {
        eta += x.zeta2.as_ref().unwrap()[dims.zeta2_index(i, k)];
    }
    if spec.zeta[2].is_some() {
        eta += x.zeta3.as_ref().unwrap()[dims.zeta3_index(j, k)];
    }
    eta
}

/// `α + φ_i + δ_j + γ_k + ζ¹_ij + ζ²_ik + ζ³_jk` over the blocks in `spec`.
pub fn linear_predictor(
    spec: &ModelSpec,
    x: &LatentState,
    dims: Dims,
    i: usize,
    j: usize,
    k: usize,
) -> Result<f64> {
    x.check(spec, dims)?;
    if i >= dims.s || j >= dims.t || k >= dims.k {
        return Err(Error::InvalidDimension(format!(
            "cell ({i}, {j}, {k}) outside the lattice"
        )));
    }
    Ok(predictor_unchecked(spec, x, dims, i, j, k))
}

/// Predictor for every cell in lattice order.
pub fn predictor_all(spec: &ModelSpec, x: &LatentState, dims: Dims) -> Result<Vec<f64>> {
    x.check(spec, dims)?;
    let mut eta = Vec::with_capacity(dims.n_cells());
    for i in 0..dims.s {
        for j in 0..dims.t {
            for k in 0..dims.k {
                eta.push(predictor_unchecked(spec, x, dims, i, j, k));
            }
        }
    }
    Ok(eta)
}

/// Poisson log-pmf of `o` with mean `e * exp(eta)`; zero-mean cells must be empty.
pub fn poisson_term(o: u64, e: f64, eta: f64) -> f64 {
    if e <= 0.0 {
        return if o == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let of = o as f64;
    let log_fact = if o < 2 { 0.0 } else { ln_gamma(of + 1.0) };
    of * (e.ln() + eta) - e * eta.exp() - log_fact
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loglik {
    pub total: f64,
    pub pointwise: Vec<f64>,
}

/// Rejects cells with events but no expected count.
pub fn check_expected(d: &Dataset, e: &[f64]) -> Result<()> {
    let dims = d.dims();
    if e.len() != dims.n_cells() {
        return Err(Error::InvalidInput(format!(
            "expected counts have length {} but the lattice has {} cells",
            e.len(),
            dims.n_cells()
        )));
    }
    for i in 0..dims.s {
        for j in 0..dims.t {
            for k in 0..dims.k {
                let c = dims.cell(i, j, k);
                if !(e[c] >= 0.0 && e[c].is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "expected count {} is invalid",
                        e[c]
                    )));
                }
                if e[c] == 0.0 && d.observed()[c] > 0 {
                    return Err(Error::ImpossibleCell {
                        area: d.area_ids()[i].clone(),
                        period: d.period_labels()[j].clone(),
                        age: d.age_labels()[k].clone(),
                        observed: d.observed()[c],
                    });
                }
            }
        }
    }
    Ok(())
}

pub fn poisson_loglik(d: &Dataset, e: &[f64], spec: &ModelSpec, x: &LatentState) -> Result<Loglik> {
    check_expected(d, e)?;
    let eta = predictor_all(spec, x, d.dims())?;
    let pointwise: Vec<f64> = eta
        .iter()
        .zip(e)
        .zip(d.observed())
        .map(|((&eta, &e), &o)| poisson_term(o, e, eta))
        .collect();
    Ok(Loglik {
        total: pointwise.iter().sum(),
        pointwise,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorFamily {
    Pc,
    Noninformative,
}

impl FromStr for PriorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pc" => Ok(PriorFamily::Pc),
            "noninformative" | "flat" => Ok(PriorFamily::Noninformative),
            _ => Err(Error::InvalidInput(format!("unknown prior family `{s}`"))),
        }
    }
}

/// Upper bound `U` and tail probability of the PC prior `P(σ > U) = tail`.
pub const PC_UPPER: f64 = 1.0;
pub const PC_TAIL: f64 = 0.01;

pub fn pc_rate(upper: f64, tail: f64) -> f64 {
    -tail.ln() / upper
}

impl PriorFamily {
    /// Log density of a standard deviation `σ` (unnormalized for the flat family).
    pub fn log_density_sigma(self, sigma: f64) -> f64 {
        match self {
            PriorFamily::Pc => {
                let rate = pc_rate(PC_UPPER, PC_TAIL);
                rate.ln() - rate * sigma
            }
            PriorFamily::Noninformative => 0.0,
        }
    }

    /// Log density of `log τ`, including the Jacobian of `σ = exp(-log τ / 2)`.
    pub fn log_density_log_tau(self, log_tau: f64) -> f64 {
        let sigma = (-0.5 * log_tau).exp();
        self.log_density_sigma(sigma) + sigma.ln() - std::f64::consts::LN_2
    }
}

/// Log density of `logit λ` under a uniform prior on λ.
pub fn log_density_logit_lambda(logit: f64) -> f64 {
    // log λ + log(1 - λ) computed stably.
    -(softplus(logit) + softplus(-logit))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub tau_phi: f64,
    pub lambda_phi: f64,
    pub tau_delta: Option<f64>,
    pub tau_gamma: Option<f64>,
    pub tau_zeta1: Option<f64>,
    pub tau_zeta2: Option<f64>,
    pub tau_zeta3: Option<f64>,
}

/// A hyperparameter on its internal unconstrained scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HyperParam {
    TauPhi,
    LambdaPhi,
    TauDelta,
    TauGamma,
    TauZeta(Interaction),
}

impl HyperParam {
    /// Name on the reporting scale.
    pub fn report_name(self) -> &'static str {
        match self {
            HyperParam::TauPhi => "sigma_phi",
            HyperParam::LambdaPhi => "lambda_phi",
            HyperParam::TauDelta => "sigma_delta",
            HyperParam::TauGamma => "sigma_gamma",
            HyperParam::TauZeta(Interaction::SpaceTime) => "sigma_zeta1",
            HyperParam::TauZeta(Interaction::SpaceAge) => "sigma_zeta2",
            HyperParam::TauZeta(Interaction::TimeAge) => "sigma_zeta3",
        }
    }

    /// Maps the internal value to the reporting scale (σ or λ).
    pub fn to_report(self, internal: f64) -> f64 {
        match self {
            HyperParam::LambdaPhi => inv_logit(internal),
            _ => (-0.5 * internal).exp(),
        }
    }
}

/// Internal coordinates present for `spec`, in order.
pub fn hyper_params(spec: &ModelSpec) -> Vec<HyperParam> {
    let mut out = vec![HyperParam::TauPhi, HyperParam::LambdaPhi];
    if spec.delta.is_some() {
        out.push(HyperParam::TauDelta);
    }
    if spec.gamma.is_some() {
        out.push(HyperParam::TauGamma);
    }
    for which in Interaction::ALL {
        if spec.has_interaction(which) {
            out.push(HyperParam::TauZeta(which));
        }
    }
    out
}

impl Hyperparameters {
    /// Every precision present in `spec` set to `tau` with mixing `lambda`.
    pub fn uniform(spec: &ModelSpec, tau: f64, lambda: f64) -> Self {
        let z = |w| spec.has_interaction(w).then_some(tau);
        Self {
            tau_phi: tau,
            lambda_phi: lambda,
            tau_delta: spec.delta.map(|_| tau),
            tau_gamma: spec.gamma.map(|_| tau),
            tau_zeta1: z(Interaction::SpaceTime),
            tau_zeta2: z(Interaction::SpaceAge),
            tau_zeta3: z(Interaction::TimeAge),
        }
    }

    pub fn tau_zeta(&self, which: Interaction) -> Option<f64> {
        match which {
            Interaction::SpaceTime => self.tau_zeta1,
            Interaction::SpaceAge => self.tau_zeta2,
            Interaction::TimeAge => self.tau_zeta3,
        }
    }

    pub fn get(&self, p: HyperParam) -> Option<f64> {
        match p {
            HyperParam::TauPhi => Some(self.tau_phi),
            HyperParam::LambdaPhi => Some(self.lambda_phi),
            HyperParam::TauDelta => self.tau_delta,
            HyperParam::TauGamma => self.tau_gamma,
            HyperParam::TauZeta(w) => self.tau_zeta(w),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_phi) {
            return Err(Error::InvalidHyperparameter(format!(
                "lambda_phi = {} outside [0, 1]",
                self.lambda_phi
            )));
        }
        for p in hyper_params(spec) {
            if p == HyperParam::LambdaPhi {
                continue;
            }
            match self.get(p) {
                Some(t) if t > 0.0 && t.is_finite() => {}
                Some(t) => {
                    return Err(Error::InvalidHyperparameter(format!(
                        "{} precision {t} must be positive",
                        p.report_name()
                    )))
                }
                None => {
                    return Err(Error::InvalidHyperparameter(format!(
                        "precision for {} is missing",
                        p.report_name()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn to_internal(&self, spec: &ModelSpec) -> Result<Vec<f64>> {
        self.validate(spec)?;
        Ok(hyper_params(spec)
            .into_iter()
            .map(|p| match p {
                HyperParam::LambdaPhi => logit(self.lambda_phi),
                _ => self.get(p).unwrap().ln(),
            })
            .collect())
    }

    pub fn from_internal(spec: &ModelSpec, theta: &[f64]) -> Self {
        let params = hyper_params(spec);
        assert_eq!(params.len(), theta.len());
        let mut h = Hyperparameters::uniform(spec, 1.0, 0.5);
        for (p, &v) in params.into_iter().zip(theta) {
            match p {
                HyperParam::TauPhi => h.tau_phi = v.exp(),
                HyperParam::LambdaPhi => h.lambda_phi = inv_logit(v),
                HyperParam::TauDelta => h.tau_delta = Some(v.exp()),
                HyperParam::TauGamma => h.tau_gamma = Some(v.exp()),
                HyperParam::TauZeta(Interaction::SpaceTime) => h.tau_zeta1 = Some(v.exp()),
                HyperParam::TauZeta(Interaction::SpaceAge) => h.tau_zeta2 = Some(v.exp()),
                HyperParam::TauZeta(Interaction::TimeAge) => h.tau_zeta3 = Some(v.exp()),
            }
        }
        h
    }
}

/// Log hyperprior density on the internal `(log τ, logit λ)` scale.
pub fn log_hyperprior(h: &Hyperparameters, spec: &ModelSpec, family: PriorFamily) -> Result<f64> {
    let theta = h.to_internal(spec)?;
    Ok(log_hyperprior_internal(spec, &theta, family))
}

pub fn log_hyperprior_internal(spec: &ModelSpec, theta: &[f64], family: PriorFamily) -> f64 {
    hyper_params(spec)
        .into_iter()
        .zip(theta)
        .map(|(p, &v)| match p {
            HyperParam::LambdaPhi => log_density_logit_lambda(v),
            _ => family.log_density_log_tau(v),
        })
        .sum()
}
