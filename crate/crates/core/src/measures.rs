//! Mixture states of Dirichlet and gamma random measures.
//!
//! A filter state is a finite mixture indexed by multiplicity vectors over an
//! append-only atom registry, together with the diffuse base measure
//! `alpha = theta * P0`. Gamma-measure states additionally carry the rate
//! offset `s` accumulated by observation events. States serialize to a
//! canonical JSON form in which every float is written with 17 significant
//! digits, so serialize -> parse -> serialize is byte-identical.

use crate::lattice::{MultiplicityVector, Partition};
use crate::parametric::{DirichletMixture, GammaMixture};
use crate::{Error, Result};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

/// Nonatomic sampling distribution underlying the base measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum P0 {
    Uniform { a: f64, b: f64 },
    Gaussian { mu: f64, var: f64 },
}

impl P0 {
    pub fn validate(&self) -> Result<()> {
        match *self {
            P0::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite() && b > a) {
                    return Err(Error::invalid(format!("uniform needs a < b: [{a}, {b}]")));
                }
            }
            P0::Gaussian { mu, var } => {
                if !(mu.is_finite() && var.is_finite() && var > 0.0) {
                    return Err(Error::invalid(format!(
                        "gaussian needs finite mu and var > 0: ({mu}, {var})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn density(&self, y: f64) -> f64 {
        match *self {
            P0::Uniform { a, b } => {
                if y >= a && y <= b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            P0::Gaussian { mu, var } => {
                let z = y - mu;
                (-z * z / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            P0::Uniform { a, b } => a + (b - a) * rng.random::<f64>(),
            P0::Gaussian { mu, var } => {
                let z: f64 = StandardNormal.sample(rng);
                mu + var.sqrt() * z
            }
        }
    }
}

/// Finite base measure `alpha = theta * P0` with `theta > 0` and `P0` nonatomic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseMeasure {
    pub theta: f64,
    pub p0: P0,
}

impl BaseMeasure {
    pub fn new(theta: f64, p0: P0) -> Result<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::invalid(format!("theta must be positive: {theta}")));
        }
        p0.validate()?;
        Ok(Self { theta, p0 })
    }
}

/// Append-only registry of observed atom locations, matched by exact value.
///
/// Negative zero is normalized to zero on ingest so bit-level lookup is
/// consistent; values must be finite.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AtomRegistry {
    values: Vec<f64>,
    index: HashMap<u64, u32>,
}

impl AtomRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        let mut reg = Self::new();
        for &v in values {
            let before = reg.len();
            reg.intern(v)?;
            if reg.len() == before {
                return Err(Error::invalid(format!("duplicate atom value {v}")));
            }
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, idx: u32) -> f64 {
        self.values[idx as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn key(v: f64) -> u64 {
        let v = if v == 0.0 { 0.0 } else { v };
        v.to_bits()
    }

    pub fn lookup(&self, v: f64) -> Option<u32> {
        self.index.get(&Self::key(v)).copied()
    }

    /// Returns the index of `v`, appending it when unseen.
    pub fn intern(&mut self, v: f64) -> Result<u32> {
        if !v.is_finite() {
            return Err(Error::invalid(format!("atom value must be finite: {v}")));
        }
        let k = Self::key(v);
        if let Some(&i) = self.index.get(&k) {
            return Ok(i);
        }
        let i = self.values.len() as u32;
        self.values.push(if v == 0.0 { 0.0 } else { v });
        self.index.insert(k, i);
        Ok(i)
    }
}

/// Weighted mixture over multiplicity vectors; weights kept normalized.
pub type ComponentMap = BTreeMap<MultiplicityVector, f64>;

/// Mixture of Dirichlet random measures: the conjugate family of the
/// Fleming-Viot signal.
#[derive(Clone, Debug, PartialEq)]
pub struct FvFilterState {
    pub base: BaseMeasure,
    pub sigma_speed: f64,
    pub atoms: AtomRegistry,
    pub components: ComponentMap,
}

/// Mixture of gamma random measures with common rate offset `s`: the
/// conjugate family of the Dawson-Watanabe signal.
#[derive(Clone, Debug, PartialEq)]
pub struct DwFilterState {
    pub base: BaseMeasure,
    pub beta: f64,
    pub s: f64,
    pub sigma_speed: f64,
    pub atoms: AtomRegistry,
    pub components: ComponentMap,
}

fn single_component() -> ComponentMap {
    let mut m = ComponentMap::new();
    m.insert(MultiplicityVector::zero(), 1.0);
    m
}

impl FvFilterState {
    /// Stationary prior: the single Dirichlet measure with parameter `alpha`.
    pub fn prior(base: BaseMeasure, sigma_speed: f64) -> Result<Self> {
        if !(sigma_speed > 0.0) || !sigma_speed.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_speed must be positive: {sigma_speed}"
            )));
        }
        Ok(Self {
            base,
            sigma_speed,
            atoms: AtomRegistry::new(),
            components: single_component(),
        })
    }
}

impl DwFilterState {
    /// Stationary prior: the single gamma measure with parameter `(alpha, beta)`.
    pub fn prior(base: BaseMeasure, beta: f64, sigma_speed: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta must be positive: {beta}")));
        }
        if !(sigma_speed > 0.0) || !sigma_speed.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_speed must be positive: {sigma_speed}"
            )));
        }
        Ok(Self {
            base,
            beta,
            s: 0.0,
            sigma_speed,
            atoms: AtomRegistry::new(),
            components: single_component(),
        })
    }
}

/// One-step predictive density of the next observation location under a
/// Dirichlet-mixture state, relative to the mixed dominating measure that
/// puts counting mass on registered atoms and Lebesgue mass elsewhere.
///
/// At a registered atom a component contributes its count over `theta+|m|`
/// (zero when it does not carry the atom: the centering distribution is
/// nonatomic, so the diffuse part assigns no mass to single points); off the
/// registry it contributes `theta p0(y)/(theta+|m|)`. With this convention
/// the density integrates to one exactly. Update reweighting uses a
/// different rule for tied values; see the filter operators.
pub fn predictive_density(state: &FvFilterState, y: f64) -> f64 {
    let theta = state.base.theta;
    let at_atom = state.atoms.lookup(y);
    let mut dens = 0.0;
    for (m, w) in &state.components {
        let tot = theta + m.total() as f64;
        let l = match at_atom {
            Some(i) => m.get(i) as f64 / tot,
            None => theta * state.base.p0.density(y) / tot,
        };
        dens += w * l;
    }
    dens
}

/// Expected mass the random measure assigns to each partition cell.
///
/// `p0_cell_masses[j]` must hold `P0(A_j)`; they must be nonnegative and sum
/// to one. For the Dirichlet state the result sums to one; `mean_measure_dw`
/// scales cell `j` by the expected total mass `(theta+|m|)/(beta+s)`.
pub fn mean_measure_fv(
    state: &FvFilterState,
    part: &Partition,
    p0_cell_masses: &[f64],
) -> Result<Vec<f64>> {
    check_cell_masses(part, p0_cell_masses)?;
    let theta = state.base.theta;
    let mut out = vec![0.0; part.n_cells() as usize];
    for (m, w) in &state.components {
        let tot = theta + m.total() as f64;
        for (j, &q) in p0_cell_masses.iter().enumerate() {
            out[j] += w * theta * q / tot;
        }
        for (idx, c) in m.iter() {
            out[part.cell_of(idx)? as usize] += w * c as f64 / tot;
        }
    }
    Ok(out)
}

pub fn mean_measure_dw(
    state: &DwFilterState,
    part: &Partition,
    p0_cell_masses: &[f64],
) -> Result<Vec<f64>> {
    check_cell_masses(part, p0_cell_masses)?;
    let theta = state.base.theta;
    let rate = state.beta + state.s;
    let mut out = vec![0.0; part.n_cells() as usize];
    for (m, w) in &state.components {
        for (j, &q) in p0_cell_masses.iter().enumerate() {
            out[j] += w * theta * q / rate;
        }
        for (idx, c) in m.iter() {
            out[part.cell_of(idx)? as usize] += w * c as f64 / rate;
        }
    }
    Ok(out)
}

/// Expected point mass at a single registered atom.
pub fn mean_mass_at_atom_fv(state: &FvFilterState, atom: u32) -> f64 {
    let theta = state.base.theta;
    state
        .components
        .iter()
        .map(|(m, w)| w * m.get(atom) as f64 / (theta + m.total() as f64))
        .sum()
}

pub fn mean_mass_at_atom_dw(state: &DwFilterState, atom: u32) -> f64 {
    let rate = state.beta + state.s;
    state
        .components
        .iter()
        .map(|(m, w)| w * m.get(atom) as f64 / rate)
        .sum()
}

fn check_cell_masses(part: &Partition, q: &[f64]) -> Result<()> {
    if q.len() != part.n_cells() as usize {
        return Err(Error::invalid(format!(
            "expected {} cell masses, got {}",
            part.n_cells(),
            q.len()
        )));
    }
    if q.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid("cell masses must be nonnegative"));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("cell masses must sum to 1: {sum}")));
    }
    Ok(())
}

/// Projects a Dirichlet-mixture state onto a partition: each component
/// becomes a Dirichlet distribution on the simplex with parameters
/// `theta P0(A_j) + m~_j`; weights of coinciding projections merge.
pub fn project_state_fv(
    state: &FvFilterState,
    part: &Partition,
    p0_cell_masses: &[f64],
) -> Result<DirichletMixture> {
    check_cell_masses(part, p0_cell_masses)?;
    let k = part.n_cells() as usize;
    let alpha: Vec<f64> = p0_cell_masses
        .iter()
        .map(|&q| state.base.theta * q)
        .collect();
    let mut comps: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    for (m, w) in &state.components {
        let proj = m.project(part)?.to_dense(k)?;
        *comps.entry(proj).or_insert(0.0) += w;
    }
    DirichletMixture::new(alpha, state.sigma_speed, comps)
}

/// Projects a gamma-mixture state onto a partition into a vector of
/// independent gamma laws sharing the rate `beta + s`.
pub fn project_state_dw(
    state: &DwFilterState,
    part: &Partition,
    p0_cell_masses: &[f64],
) -> Result<GammaMixture> {
    check_cell_masses(part, p0_cell_masses)?;
    let k = part.n_cells() as usize;
    let alpha: Vec<f64> = p0_cell_masses
        .iter()
        .map(|&q| state.base.theta * q)
        .collect();
    let mut comps: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    for (m, w) in &state.components {
        let proj = m.project(part)?.to_dense(k)?;
        *comps.entry(proj).or_insert(0.0) += w;
    }
    GammaMixture::new(alpha, state.beta, state.s, state.sigma_speed, comps)
}

/// Drops components with weight below `eps`, renormalizes, and returns the
/// removed mass. The heaviest component always survives, so the state stays
/// a probability mixture for any `eps`.
pub fn prune_components(components: &mut ComponentMap, eps: f64) -> f64 {
    crate::parametric::prune_map(components, eps)
}

// --- canonical serialization ---------------------------------------------

/// Formats a float with 17 significant digits; parsing the result recovers
/// the exact same f64.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_p0(out: &mut String, p0: &P0) {
    match *p0 {
        P0::Uniform { a, b } => {
            let _ = write!(
                out,
                "{{\"type\":\"uniform\",\"a\":{},\"b\":{}}}",
                fmt_g17(a),
                fmt_g17(b)
            );
        }
        P0::Gaussian { mu, var } => {
            let _ = write!(
                out,
                "{{\"type\":\"gaussian\",\"mu\":{},\"var\":{}}}",
                fmt_g17(mu),
                fmt_g17(var)
            );
        }
    }
}

fn write_components(out: &mut String, components: &ComponentMap) {
    out.push('[');
    for (i, (m, w)) in components.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"counts\":{");
        for (j, (idx, c)) in m.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "\"{idx}\":{c}");
        }
        let _ = write!(out, "}},\"w\":{}}}", fmt_g17(*w));
    }
    out.push(']');
}

fn write_atoms(out: &mut String, atoms: &AtomRegistry) {
    out.push('[');
    for (i, v) in atoms.values().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_g17(*v));
    }
    out.push(']');
}

/// Canonical JSON form of a Dirichlet-mixture state.
pub fn fv_state_to_json(state: &FvFilterState) -> String {
    let mut out = String::new();
    let _ = write!(out, "{{\"theta\":{},\"p0\":", fmt_g17(state.base.theta));
    write_p0(&mut out, &state.base.p0);
    let _ = write!(out, ",\"sigma_speed\":{},\"atoms\":", fmt_g17(state.sigma_speed));
    write_atoms(&mut out, &state.atoms);
    out.push_str(",\"components\":");
    write_components(&mut out, &state.components);
    out.push('}');
    out
}

/// Canonical JSON form of a gamma-mixture state.
pub fn dw_state_to_json(state: &DwFilterState) -> String {
    let mut out = String::new();
    let _ = write!(out, "{{\"theta\":{},\"p0\":", fmt_g17(state.base.theta));
    write_p0(&mut out, &state.base.p0);
    let _ = write!(
        out,
        ",\"beta\":{},\"s\":{},\"sigma_speed\":{},\"atoms\":",
        fmt_g17(state.beta),
        fmt_g17(state.s),
        fmt_g17(state.sigma_speed)
    );
    write_atoms(&mut out, &state.atoms);
    out.push_str(",\"components\":");
    write_components(&mut out, &state.components);
    out.push('}');
    out
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum P0Json {
    Uniform { a: f64, b: f64 },
    Gaussian { mu: f64, var: f64 },
}

impl From<P0Json> for P0 {
    fn from(p: P0Json) -> P0 {
        match p {
            P0Json::Uniform { a, b } => P0::Uniform { a, b },
            P0Json::Gaussian { mu, var } => P0::Gaussian { mu, var },
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentJson {
    counts: BTreeMap<String, u64>,
    w: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StateJson {
    theta: f64,
    p0: P0Json,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default)]
    s: Option<f64>,
    sigma_speed: f64,
    atoms: Vec<f64>,
    components: Vec<ComponentJson>,
}

fn parse_components(raw: Vec<ComponentJson>, n_atoms: usize) -> Result<ComponentMap> {
    let mut components = ComponentMap::new();
    let mut sum = 0.0;
    for comp in raw {
        let mut pairs = Vec::with_capacity(comp.counts.len());
        for (key, c) in comp.counts {
            let idx: u32 = key
                .parse()
                .map_err(|_| Error::Parse(format!("bad atom index key {key:?}")))?;
            if idx as usize >= n_atoms {
                return Err(Error::Parse(format!(
                    "component references atom {idx} beyond registry of {n_atoms}"
                )));
            }
            if c == 0 {
                return Err(Error::Parse("zero count stored in component".into()));
            }
            pairs.push((idx, c));
        }
        if !(comp.w >= 0.0) || !comp.w.is_finite() {
            return Err(Error::Parse(format!("bad component weight {}", comp.w)));
        }
        let m = MultiplicityVector::from_pairs(&pairs);
        if components.insert(m, comp.w).is_some() {
            return Err(Error::Parse("duplicate component".into()));
        }
        sum += comp.w;
    }
    if components.is_empty() {
        return Err(Error::Parse("state needs at least one component".into()));
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Parse(format!("component weights sum to {sum}")));
    }
    Ok(components)
}

pub fn fv_state_from_json(text: &str) -> Result<FvFilterState> {
    let raw: StateJson =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if raw.beta.is_some() || raw.s.is_some() {
        return Err(Error::Parse(
            "beta/s belong to gamma-measure states".into(),
        ));
    }
    let base = BaseMeasure::new(raw.theta, raw.p0.into())?;
    let atoms = AtomRegistry::from_values(&raw.atoms)?;
    let components = parse_components(raw.components, atoms.len())?;
    if !(raw.sigma_speed > 0.0) {
        return Err(Error::Parse("sigma_speed must be positive".into()));
    }
    Ok(FvFilterState {
        base,
        sigma_speed: raw.sigma_speed,
        atoms,
        components,
    })
}

pub fn dw_state_from_json(text: &str) -> Result<DwFilterState> {
    let raw: StateJson =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let beta = raw
        .beta
        .ok_or_else(|| Error::Parse("gamma-measure state needs beta".into()))?;
    let s = raw
        .s
        .ok_or_else(|| Error::Parse("gamma-measure state needs s".into()))?;
    if !(beta > 0.0) || !(s >= 0.0) {
        return Err(Error::Parse(format!("bad beta={beta} or s={s}")));
    }
    let base = BaseMeasure::new(raw.theta, raw.p0.into())?;
    let atoms = AtomRegistry::from_values(&raw.atoms)?;
    let components = parse_components(raw.components, atoms.len())?;
    if !(raw.sigma_speed > 0.0) {
        return Err(Error::Parse("sigma_speed must be positive".into()));
    }
    Ok(DwFilterState {
        base,
        beta,
        s,
        sigma_speed: raw.sigma_speed,
        atoms,
        components,
    })
}
