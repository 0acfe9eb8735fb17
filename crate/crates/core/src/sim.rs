//! Exact synthetic-data generation for all four signal classes and the
//! Monte Carlo verification harnesses. Every draw is exact in distribution;
//! nothing here discretizes a diffusion.

use crate::dual::{coeff_cache, dw_sstar, sample_lineage_count, DwDualParams, FvDualParams};
use crate::fv::check_dataset_times;
use crate::lattice::MultiplicityVector;
use crate::measures::{AtomRegistry, BaseMeasure};
use crate::parametric::for_each_leq;
use crate::{Error, Result};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeMap;

const STREAM_FV: u64 = 1;
const STREAM_DW: u64 = 2;
const STREAM_WF: u64 = 3;
const STREAM_CIR: u64 = 4;
const STREAM_DUALITY: u64 = 5;
const STREAM_PARTICLE: u64 = 6;
const STREAM_INIT: u64 = u64::MAX;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream keyed by `(seed, path)`: distinct paths give
/// independent-behaving generators, so epochs and replicates can be drawn
/// in any order with identical results.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut s = seed;
    let mut mixed = splitmix64(&mut s);
    for &p in path {
        s ^= p.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(mixed);
        mixed = splitmix64(&mut s);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    if shape == 0.0 {
        return 0.0;
    }
    Gamma::new(shape, 1.0 / rate).expect("valid gamma").sample(rng)
}

fn poisson_draw<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    let x: f64 = Poisson::new(rate).expect("valid poisson").sample(rng);
    x as u64
}

fn dirichlet_draw<R: Rng + ?Sized>(shapes: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = shapes.iter().map(|&a| gamma_draw(a, 1.0, rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            return g.iter().map(|&v| v / s).collect();
        }
    }
}

fn multinomial_draw<R: Rng + ?Sized>(n: u64, p: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0u64; p.len()];
    let mut rest: f64 = p.iter().sum();
    let mut left = n;
    for (i, &pi) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == p.len() || rest <= 0.0 || pi >= rest {
            out[i] = left;
            left = 0;
            break;
        }
        let c = Binomial::new(left, (pi / rest).clamp(0.0, 1.0))
            .expect("valid binomial")
            .sample(rng);
        out[i] = c;
        left -= c;
        rest -= pi;
    }
    if left > 0 {
        *out.last_mut().expect("nonempty categories") += left;
    }
    out
}

/// Blackwell-MacQueen urn over `theta * P0` plus retained atoms: each draw is
/// fresh from `P0` with probability `theta / (theta + total)` and a previous
/// atom proportionally to its count otherwise.
pub struct Urn {
    base: BaseMeasure,
    atoms: AtomRegistry,
    counts: BTreeMap<u32, u64>,
    total: u64,
}

impl Urn {
    pub fn new(base: BaseMeasure) -> Self {
        Self {
            base,
            atoms: AtomRegistry::new(),
            counts: BTreeMap::new(),
            total: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        let theta = self.base.theta;
        let u = rng.random::<f64>() * (theta + self.total as f64);
        let value = if u < theta || self.total == 0 {
            self.base.p0.sample(rng)
        } else {
            let mut acc = theta;
            let mut chosen = None;
            for (&idx, &c) in &self.counts {
                acc += c as f64;
                if u < acc {
                    chosen = Some(idx);
                    break;
                }
            }
            let idx = chosen.unwrap_or_else(|| *self.counts.keys().next_back().expect("nonempty"));
            self.atoms.values()[idx as usize]
        };
        let idx = self.atoms.intern(value)?;
        *self.counts.entry(idx).or_insert(0) += 1;
        self.total += 1;
        Ok(value)
    }

    /// Replaces the retained atoms with `values`, keeping the registry.
    pub fn reset_to(&mut self, values: &[f64]) -> Result<()> {
        self.counts.clear();
        self.total = 0;
        for &v in values {
            let idx = self.atoms.intern(v)?;
            *self.counts.entry(idx).or_insert(0) += 1;
            self.total += 1;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimBatch {
    pub t: f64,
    pub obs: Vec<f64>,
    /// Latent total mass at the batch time (gamma-type models only).
    pub latent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub batches: Vec<SimBatch>,
}

fn check_schedule(schedule: &[(f64, u64)]) -> Result<()> {
    let times: Vec<f64> = schedule.iter().map(|&(t, _)| t).collect();
    check_dataset_times(&times, schedule.len())
}

/// Exact draw of a Wright-Fisher transition by the lineage construction:
/// an ancestral sample size from the death chain, a multinomial split, and
/// a posterior Dirichlet draw.
pub fn sim_wf_transition<R: Rng + ?Sized>(
    x: &[f64],
    dt: f64,
    alpha: &[f64],
    sigma_speed: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x.len() != alpha.len() || x.is_empty() {
        return Err(Error::invalid("x and alpha dimensions must match"));
    }
    let sum: f64 = x.iter().sum();
    if x.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("x must lie on the simplex: {x:?}")));
    }
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time must be nonnegative: {dt}")));
    }
    if dt == 0.0 {
        return Ok(x.to_vec());
    }
    let theta: f64 = alpha.iter().sum();
    let params = FvDualParams::new(theta, sigma_speed)?;
    let m = sample_lineage_count(&params, dt, rng)?;
    let counts = multinomial_draw(m, x, rng);
    let shapes: Vec<f64> = alpha
        .iter()
        .zip(&counts)
        .map(|(&a, &c)| a + c as f64)
        .collect();
    Ok(dirichlet_draw(&shapes, rng))
}

/// Exact draw of a CIR transition: a Poisson seed count at rate `z S*_dt`
/// followed by a gamma draw at the shifted rate.
pub fn sim_cir_transition<R: Rng + ?Sized>(
    z: f64,
    dt: f64,
    alpha_i: f64,
    beta: f64,
    sigma_speed: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(z >= 0.0) || !z.is_finite() {
        return Err(Error::invalid(format!("z must be nonnegative: {z}")));
    }
    let params = DwDualParams::new(alpha_i.max(f64::MIN_POSITIVE), beta, sigma_speed)?;
    let sstar = dw_sstar(&params, dt)?;
    let m = poisson_draw(z * sstar, rng);
    Ok(gamma_draw(alpha_i + m as f64, beta + sstar, rng))
}

/// Hidden-Markov simulation of FV observation batches by the marginal urn
/// scheme: batches extend the urn, ancestral seeds are drawn from the urn
/// continuing past the batch, and everything except the seeds is forgotten
/// between epochs.
pub fn sim_fv_hmm(
    base: BaseMeasure,
    sigma_speed: f64,
    schedule: &[(f64, u64)],
    seed: u64,
) -> Result<Dataset> {
    check_schedule(schedule)?;
    let params = FvDualParams::new(base.theta, sigma_speed)?;
    let mut urn = Urn::new(base);
    let mut batches = Vec::with_capacity(schedule.len());
    for (i, &(t, n)) in schedule.iter().enumerate() {
        let mut rng = substream(seed, &[STREAM_FV, i as u64]);
        let mut obs = Vec::with_capacity(n as usize);
        for _ in 0..n {
            obs.push(urn.draw(&mut rng)?);
        }
        batches.push(SimBatch {
            t,
            obs,
            latent: None,
        });
        if let Some(&(t_next, _)) = schedule.get(i + 1) {
            let m = sample_lineage_count(&params, t_next - t, &mut rng)?;
            let mut seeds = Vec::with_capacity(m as usize);
            for _ in 0..m {
                seeds.push(urn.draw(&mut rng)?);
            }
            urn.reset_to(&seeds)?;
        }
    }
    Ok(Dataset { batches })
}

/// Hidden-Markov simulation of DW observation batches: the latent total mass
/// follows the exact gamma/Poisson chain while locations run through the urn
/// exactly as in the FV case. The schedule's size field is ignored; counts
/// are Poisson draws at the latent mass.
pub fn sim_dw_hmm(
    base: BaseMeasure,
    beta: f64,
    sigma_speed: f64,
    schedule: &[(f64, u64)],
    seed: u64,
) -> Result<Dataset> {
    check_schedule(schedule)?;
    let params = DwDualParams::new(base.theta, beta, sigma_speed)?;
    let mut init = substream(seed, &[STREAM_DW, STREAM_INIT]);
    let mut z = gamma_draw(base.theta, beta, &mut init);
    let mut urn = Urn::new(base);
    let mut batches = Vec::with_capacity(schedule.len());
    for (i, &(t, _)) in schedule.iter().enumerate() {
        let mut rng = substream(seed, &[STREAM_DW, i as u64]);
        let n = poisson_draw(z, &mut rng);
        let mut obs = Vec::with_capacity(n as usize);
        for _ in 0..n {
            obs.push(urn.draw(&mut rng)?);
        }
        batches.push(SimBatch {
            t,
            obs,
            latent: Some(z),
        });
        if let Some(&(t_next, _)) = schedule.get(i + 1) {
            let sstar = dw_sstar(&params, t_next - t)?;
            let m = poisson_draw(z * sstar, &mut rng);
            let mut seeds = Vec::with_capacity(m as usize);
            for _ in 0..m {
                seeds.push(urn.draw(&mut rng)?);
            }
            urn.reset_to(&seeds)?;
            z = gamma_draw(base.theta + m as f64, beta + sstar, &mut rng);
        }
    }
    Ok(Dataset { batches })
}

/// Finite-dimensional WF hidden-Markov simulation: multinomial category
/// counts observed over an exactly simulated WF chain. Observations store
/// the per-category counts.
pub fn sim_wf_hmm(
    alpha: &[f64],
    sigma_speed: f64,
    schedule: &[(f64, u64)],
    seed: u64,
) -> Result<Dataset> {
    check_schedule(schedule)?;
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::invalid("alpha entries must be positive"));
    }
    let mut init = substream(seed, &[STREAM_WF, STREAM_INIT]);
    let mut x = dirichlet_draw(alpha, &mut init);
    let mut batches = Vec::with_capacity(schedule.len());
    for (i, &(t, n)) in schedule.iter().enumerate() {
        let mut rng = substream(seed, &[STREAM_WF, i as u64]);
        let counts = multinomial_draw(n, &x, &mut rng);
        batches.push(SimBatch {
            t,
            obs: counts.iter().map(|&c| c as f64).collect(),
            latent: None,
        });
        if let Some(&(t_next, _)) = schedule.get(i + 1) {
            x = sim_wf_transition(&x, t_next - t, alpha, sigma_speed, &mut rng)?;
        }
    }
    Ok(Dataset { batches })
}

/// One-dimensional CIR hidden-Markov simulation: each epoch carries `n` unit
/// Poisson exposures of the latent total, observed as per-exposure counts.
pub fn sim_cir_hmm(
    alpha: f64,
    beta: f64,
    sigma_speed: f64,
    schedule: &[(f64, u64)],
    seed: u64,
) -> Result<Dataset> {
    check_schedule(schedule)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive: {alpha}")));
    }
    let mut init = substream(seed, &[STREAM_CIR, STREAM_INIT]);
    let mut z = gamma_draw(alpha, beta, &mut init);
    let mut batches = Vec::with_capacity(schedule.len());
    for (i, &(t, n)) in schedule.iter().enumerate() {
        let mut rng = substream(seed, &[STREAM_CIR, i as u64]);
        let obs = (0..n)
            .map(|_| poisson_draw(z, &mut rng) as f64)
            .collect();
        batches.push(SimBatch {
            t,
            obs,
            latent: Some(z),
        });
        if let Some(&(t_next, _)) = schedule.get(i + 1) {
            z = sim_cir_transition(z, t_next - t, alpha, beta, sigma_speed, &mut rng)?;
        }
    }
    Ok(Dataset { batches })
}

#[derive(Clone, Copy, Debug)]
pub enum SimModel<'a> {
    Fv { base: BaseMeasure },
    Dw { base: BaseMeasure, beta: f64 },
    Wf { alpha: &'a [f64] },
    Cir { alpha: f64, beta: f64 },
}

pub struct SimConfig<'a> {
    pub model: SimModel<'a>,
    pub sigma_speed: f64,
    pub schedule: Vec<(f64, u64)>,
    pub seed: u64,
}

pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    match cfg.model {
        SimModel::Fv { base } => sim_fv_hmm(base, cfg.sigma_speed, &cfg.schedule, cfg.seed),
        SimModel::Dw { base, beta } => {
            sim_dw_hmm(base, beta, cfg.sigma_speed, &cfg.schedule, cfg.seed)
        }
        SimModel::Wf { alpha } => sim_wf_hmm(alpha, cfg.sigma_speed, &cfg.schedule, cfg.seed),
        SimModel::Cir { alpha, beta } => {
            sim_cir_hmm(alpha, beta, cfg.sigma_speed, &cfg.schedule, cfg.seed)
        }
    }
}

/// Moment-duality evaluation function: `h(x, m)` normalized so `h(x, 0) = 1`.
pub fn duality_h(x: &[f64], m: &[u64], alpha: &[f64]) -> f64 {
    let theta: f64 = alpha.iter().sum();
    let total: u64 = m.iter().sum();
    let mut logc = ln_gamma(theta + total as f64) - ln_gamma(theta);
    let mut prod = 1.0;
    for ((&xi, &mi), &ai) in x.iter().zip(m).zip(alpha) {
        logc -= ln_gamma(ai + mi as f64) - ln_gamma(ai);
        prod *= xi.powi(mi as i32);
    }
    logc.exp() * prod
}

#[derive(Clone, Debug)]
pub struct DualityReport {
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs_exact: f64,
    pub diff: f64,
    pub z_score: f64,
}

/// Monte Carlo check of the moment duality: the sample mean of
/// `h(X_t, m)` over exact WF draws against the exact death-chain
/// expectation of `h(x0, M_t)`.
pub fn mc_duality_check(
    x0: &[f64],
    m: &[u64],
    t: f64,
    alpha: &[f64],
    sigma_speed: f64,
    n_samples: u64,
    seed: u64,
) -> Result<DualityReport> {
    if n_samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    if m.len() != alpha.len() || x0.len() != alpha.len() {
        return Err(Error::invalid("dimension mismatch"));
    }
    let mut rng = substream(seed, &[STREAM_DUALITY]);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_samples {
        let xt = sim_wf_transition(x0, t, alpha, sigma_speed, &mut rng)?;
        let h = duality_h(&xt, m, alpha);
        sum += h;
        sumsq += h * h;
    }
    let nf = n_samples as f64;
    let lhs_mean = sum / nf;
    let var = ((sumsq - nf * lhs_mean * lhs_mean) / (nf - 1.0)).max(0.0);
    let lhs_se = (var / nf).sqrt();

    let theta: f64 = alpha.iter().sum();
    let params = FvDualParams::new(theta, sigma_speed)?;
    let mut cache = coeff_cache(&params, t);
    let m_mv = MultiplicityVector::from_dense(m);
    let mut rhs_exact = 0.0;
    for_each_leq(m, |n| {
        let n_mv = MultiplicityVector::from_dense(n);
        let p = crate::dual::fv_death_prob(&params, &mut cache, &m_mv, &n_mv, t)?;
        rhs_exact += p * duality_h(x0, n, alpha);
        Ok(())
    })?;

    let diff = lhs_mean - rhs_exact;
    let z_score = if lhs_se > 0.0 {
        diff / lhs_se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY * diff.signum()
    };
    Ok(DualityReport {
        lhs_mean,
        lhs_se,
        rhs_exact,
        diff,
        z_score,
    })
}

#[derive(Clone, Debug)]
pub struct ParticleStep {
    pub time: f64,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub min_ess: f64,
}

#[derive(Clone, Debug)]
pub struct ParticleReport {
    pub steps: Vec<ParticleStep>,
    pub warnings: Vec<String>,
}

fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let u0 = rng.random::<f64>();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0usize;
    for k in 0..n {
        let target = (k as f64 + u0) / n as f64;
        while target > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Bootstrap particle filter over exact WF transitions with multinomial
/// observation likelihoods; an independent oracle for `wf_filter`. Runs
/// independent replicates and reports the replicate-scatter standard error.
pub fn particle_oracle_wf(
    times: &[f64],
    batches: &[Vec<u64>],
    alpha: &[f64],
    sigma_speed: f64,
    n_particles: usize,
    seed: u64,
) -> Result<ParticleReport> {
    const REPLICATES: usize = 20;
    check_dataset_times(times, batches.len())?;
    let k = alpha.len();
    if batches.iter().any(|b| b.len() != k) {
        return Err(Error::invalid("count dimensions must match alpha"));
    }
    let n = (n_particles / REPLICATES).max(2);
    let mut warnings = Vec::new();
    // replicate -> step -> coordinate means
    let mut rep_means = vec![vec![vec![0.0; k]; times.len()]; REPLICATES];
    let mut min_ess = vec![f64::INFINITY; times.len()];
    for (r, rep) in rep_means.iter_mut().enumerate() {
        let mut rng = substream(seed, &[STREAM_PARTICLE, r as u64]);
        let mut parts: Vec<Vec<f64>> = (0..n).map(|_| dirichlet_draw(alpha, &mut rng)).collect();
        let mut prev_t = None;
        for (step, (&t, counts)) in times.iter().zip(batches).enumerate() {
            if let Some(pt) = prev_t {
                for p in parts.iter_mut() {
                    *p = sim_wf_transition(p, t - pt, alpha, sigma_speed, &mut rng)?;
                }
            }
            let logw: Vec<f64> = parts
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(counts)
                        .map(|(&x, &c)| {
                            if c == 0 {
                                0.0
                            } else {
                                c as f64 * x.ln()
                            }
                        })
                        .sum()
                })
                .collect();
            let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::invalid(
                    "all particles have zero likelihood; increase particle count",
                ));
            }
            let mut w: Vec<f64> = logw.iter().map(|&lw| (lw - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for wi in w.iter_mut() {
                *wi /= z;
            }
            let ess = 1.0 / w.iter().map(|&wi| wi * wi).sum::<f64>();
            if ess < n as f64 / 100.0 {
                warnings.push(format!(
                    "replicate {r} step {step}: effective sample size {ess:.1} below {}",
                    n as f64 / 100.0
                ));
            }
            min_ess[step] = min_ess[step].min(ess);
            for (p, &wi) in parts.iter().zip(&w) {
                for (acc, &x) in rep[step].iter_mut().zip(p) {
                    *acc += wi * x;
                }
            }
            let picks = systematic_resample(&w, &mut rng);
            parts = picks.iter().map(|&i| parts[i].clone()).collect();
            prev_t = Some(t);
        }
    }
    let rf = REPLICATES as f64;
    let steps = (0..times.len())
        .map(|step| {
            let mut mean = vec![0.0; k];
            for rep in &rep_means {
                for (m, &v) in mean.iter_mut().zip(&rep[step]) {
                    *m += v / rf;
                }
            }
            let mut se = vec![0.0; k];
            for rep in &rep_means {
                for ((s, &v), &m) in se.iter_mut().zip(&rep[step]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            for s in se.iter_mut() {
                *s = (*s / (rf * (rf - 1.0))).sqrt();
            }
            ParticleStep {
                time: times[step],
                mean,
                se,
                min_ess: min_ess[step],
            }
        })
        .collect();
    Ok(ParticleReport { steps, warnings })
}

#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    pub z_max: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug)]
pub struct GridStep {
    pub time: f64,
    pub mean: f64,
    pub var: f64,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub steps: Vec<GridStep>,
    pub warnings: Vec<String>,
}

/// Midpoint-grid forward filter for the 1-dim CIR model: propagation
/// integrates the exact Poisson-mixture-of-gammas transition density,
/// updates multiply the Poisson likelihood. An independent oracle for
/// `cir_filter`; accuracy is limited only by the quadrature. The grid is
/// uniform in sqrt(z): the density carries a z^(alpha-1) endpoint factor,
/// and the substitution turns its unbounded derivative at 0 into a bounded
/// one while concentrating points where the posterior is sharpest.
pub fn grid_oracle_cir(
    times: &[f64],
    batches: &[(u64, u64)],
    alpha: f64,
    beta: f64,
    sigma_speed: f64,
    grid: &GridSpec,
) -> Result<GridReport> {
    check_dataset_times(times, batches.len())?;
    if !(alpha > 0.0) || !(beta > 0.0) || grid.n_points < 10 || !(grid.z_max > 0.0) {
        return Err(Error::invalid("invalid grid oracle parameters"));
    }
    let params = DwDualParams::new(alpha, beta, sigma_speed)?;
    let n = grid.n_points;
    let hu = grid.z_max.sqrt() / n as f64;
    let mut z = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let u = (i as f64 + 0.5) * hu;
        z.push(u * u);
        w.push(2.0 * u * hu);
    }
    let ln_z: Vec<f64> = z.iter().map(|&v| v.ln()).collect();
    // stationary prior Ga(alpha, beta)
    let mut f: Vec<f64> = z
        .iter()
        .map(|&v| (alpha * beta.ln() - ln_gamma(alpha) + (alpha - 1.0) * v.ln() - beta * v).exp())
        .collect();
    normalize(&mut f, &w);
    let mut warnings = Vec::new();
    let mut steps = Vec::with_capacity(times.len());
    let mut prev_t = None;
    for (&t, &(n_exposures, y)) in times.iter().zip(batches) {
        if let Some(pt) = prev_t {
            let sstar = dw_sstar(&params, t - pt)?;
            f = propagate_grid(&f, &z, &ln_z, &w, alpha, beta, sstar);
            normalize(&mut f, &w);
        }
        if n_exposures > 0 {
            for (fi, (&zi, &lzi)) in f.iter_mut().zip(z.iter().zip(&ln_z)) {
                *fi *= (y as f64 * lzi - n_exposures as f64 * zi).exp();
            }
            let mass: f64 = f.iter().zip(&w).map(|(&v, &wi)| v * wi).sum();
            if mass <= 0.0 || !mass.is_finite() {
                return Err(Error::invalid("grid update lost all mass"));
            }
            normalize(&mut f, &w);
        } else if y > 0 {
            return Err(Error::invalid(format!("{y} counts need a nonzero batch")));
        }
        let cut = n - n / 100 - 1;
        let tail: f64 = f[cut..]
            .iter()
            .zip(&w[cut..])
            .map(|(&v, &wi)| v * wi)
            .sum();
        if tail > 1e-8 {
            warnings.push(format!(
                "boundary mass {tail:.3e} at t={t}; widen the grid"
            ));
        }
        let mean: f64 = f
            .iter()
            .zip(z.iter().zip(&w))
            .map(|(&fi, (&zi, &wi))| fi * zi * wi)
            .sum();
        let second: f64 = f
            .iter()
            .zip(z.iter().zip(&w))
            .map(|(&fi, (&zi, &wi))| fi * zi * zi * wi)
            .sum();
        steps.push(GridStep {
            time: t,
            mean,
            var: (second - mean * mean).max(0.0),
        });
        prev_t = Some(t);
    }
    Ok(GridReport { steps, warnings })
}

fn normalize(f: &mut [f64], w: &[f64]) {
    let mass: f64 = f.iter().zip(w).map(|(&v, &wi)| v * wi).sum();
    for v in f.iter_mut() {
        *v /= mass;
    }
}

fn propagate_grid(
    f: &[f64],
    z: &[f64],
    ln_z: &[f64],
    w: &[f64],
    alpha: f64,
    beta: f64,
    sstar: f64,
) -> Vec<f64> {
    let n = f.len();
    let lam_max = z[n - 1] * sstar;
    let m_max = (lam_max + 10.0 * lam_max.sqrt() + 40.0).ceil() as usize;
    // c_m = integral of f(z) Po(m; z S*) dz by per-point Poisson recurrence
    let mut c = vec![0.0; m_max + 1];
    for ((&fi, &zi), &wi) in f.iter().zip(z).zip(w) {
        let rate = zi * sstar;
        let mut pmf = (-rate).exp();
        let fh = fi * wi;
        for (m, cm) in c.iter_mut().enumerate() {
            *cm += fh * pmf;
            pmf *= rate / (m as f64 + 1.0);
        }
    }
    let total: f64 = c.iter().sum();
    // f'(z') = sum_m c_m Ga(z'; alpha + m, beta + S*) by a gamma-pdf
    // recurrence in m
    let rate = beta + sstar;
    let mut g: Vec<f64> = z
        .iter()
        .zip(ln_z)
        .map(|(&zj, &lzj)| (alpha * rate.ln() - ln_gamma(alpha) + (alpha - 1.0) * lzj - rate * zj).exp())
        .collect();
    let mut out = vec![0.0; n];
    for (m, &cm) in c.iter().enumerate() {
        if cm > total * 1e-18 {
            for (o, &gj) in out.iter_mut().zip(&g) {
                *o += cm * gj;
            }
        }
        let shape = alpha + m as f64;
        for (gj, &zj) in g.iter_mut().zip(z) {
            *gj *= rate * zj / shape;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::P0;
    use crate::parametric::{cir_filter, GammaMixture};

    fn base(theta: f64) -> BaseMeasure {
        BaseMeasure::new(theta, P0::Uniform { a: 0.0, b: 1.0 }).unwrap()
    }

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        let mut a = substream(7, &[1, 2]);
        let mut b = substream(7, &[1, 2]);
        let mut c = substream(7, &[2, 1]);
        let xa: f64 = a.random();
        let xb: f64 = b.random();
        let xc: f64 = c.random();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn urn_tie_probability_matches_prior() {
        // P(two prior draws tie) = 1/(theta+1)
        let theta = 1.5;
        let n = 40_000;
        let mut ties = 0;
        for s in 0..n {
            let mut urn = Urn::new(base(theta));
            let mut rng = substream(s, &[9]);
            let a = urn.draw(&mut rng).unwrap();
            let b = urn.draw(&mut rng).unwrap();
            if a == b {
                ties += 1;
            }
        }
        let p = 1.0 / (theta + 1.0);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (ties as f64 / n as f64 - p).abs() < 3.0 * se,
            "tie rate {} vs {p}",
            ties as f64 / n as f64
        );
    }

    #[test]
    fn wf_transition_identity_and_conditional_mean() {
        let alpha = [0.8, 1.2, 0.5];
        let x0 = [0.5, 0.2, 0.3];
        let mut rng = substream(3, &[0]);
        assert_eq!(
            sim_wf_transition(&x0, 0.0, &alpha, 1.0, &mut rng).unwrap(),
            x0.to_vec()
        );
        // E[X_dt | x0] = pi + (x0 - pi) exp(-theta sigma dt / 2)
        let theta: f64 = alpha.iter().sum();
        let dt = 0.6;
        let decay = (-theta * dt / 2.0).exp();
        let n = 40_000;
        let mut mean = [0.0f64; 3];
        let mut m2 = [0.0f64; 3];
        for _ in 0..n {
            let xt = sim_wf_transition(&x0, dt, &alpha, 1.0, &mut rng).unwrap();
            for j in 0..3 {
                mean[j] += xt[j];
                m2[j] += xt[j] * xt[j];
            }
        }
        for j in 0..3 {
            mean[j] /= n as f64;
            let var = (m2[j] / n as f64 - mean[j] * mean[j]).max(0.0);
            let se = (var / n as f64).sqrt();
            let pi = alpha[j] / theta;
            let expect = pi + (x0[j] - pi) * decay;
            assert!(
                (mean[j] - expect).abs() < 3.0 * se + 1e-12,
                "coord {j}: {} vs {expect}",
                mean[j]
            );
        }
    }

    #[test]
    fn wf_transition_long_horizon_is_stationary() {
        let alpha = [0.7, 0.4];
        let x0 = [0.99, 0.01];
        let theta: f64 = alpha.iter().sum();
        let mut rng = substream(11, &[0]);
        let n = 30_000;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for _ in 0..n {
            let xt = sim_wf_transition(&x0, 80.0, &alpha, 1.0, &mut rng).unwrap();
            mean += xt[0];
            m2 += xt[0] * xt[0];
        }
        mean /= n as f64;
        let var = m2 / n as f64 - mean * mean;
        let pi = alpha[0] / theta;
        let dvar = pi * (1.0 - pi) / (theta + 1.0);
        let se_mean = (dvar / n as f64).sqrt();
        assert!((mean - pi).abs() < 3.0 * se_mean, "{mean} vs {pi}");
        assert!((var - dvar).abs() < 0.03 * dvar, "{var} vs {dvar}");
    }

    #[test]
    fn cir_transition_conditional_mean_and_stationarity() {
        let (alpha, beta, dt) = (1.3, 0.9, 0.7);
        let mut rng = substream(5, &[0]);
        let decay = (-beta * dt / 2.0f64).exp();
        let z0 = 2.4;
        let n = 40_000;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for _ in 0..n {
            let z = sim_cir_transition(z0, dt, alpha, beta, 1.0, &mut rng).unwrap();
            mean += z;
            m2 += z * z;
        }
        mean /= n as f64;
        let var = (m2 / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        let expect = alpha / beta * (1.0 - decay) + z0 * decay;
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");

        // stationary start stays stationary in mean
        let mut smean = 0.0;
        for _ in 0..n {
            let z0 = gamma_draw(alpha, beta, &mut rng);
            smean += sim_cir_transition(z0, dt, alpha, beta, 1.0, &mut rng).unwrap();
        }
        smean /= n as f64;
        let sse = (alpha / (beta * beta) / n as f64).sqrt() * 2.0;
        assert!((smean - alpha / beta).abs() < 3.0 * sse, "{smean}");
    }

    #[test]
    fn cir_transition_from_zero() {
        let mut rng = substream(6, &[0]);
        let (alpha, beta, dt) = (0.9, 1.1, 0.5);
        let params = DwDualParams::new(alpha, beta, 1.0).unwrap();
        let sstar = dw_sstar(&params, dt).unwrap();
        let n = 30_000;
        let mut mean = 0.0;
        for _ in 0..n {
            mean += sim_cir_transition(0.0, dt, alpha, beta, 1.0, &mut rng).unwrap();
        }
        mean /= n as f64;
        let expect = alpha / (beta + sstar);
        let se = (alpha / ((beta + sstar) * (beta + sstar)) / n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn fv_hmm_expected_distinct_values() {
        let theta = 2.0;
        let n_obs = 6u64;
        let expect: f64 = (0..n_obs).map(|i| theta / (theta + i as f64)).sum();
        let reps = 4000;
        let mut total = 0.0;
        for s in 0..reps {
            let ds = sim_fv_hmm(base(theta), 1.0, &[(0.0, n_obs)], s).unwrap();
            let mut vals: Vec<u64> = ds.batches[0].obs.iter().map(|v| v.to_bits()).collect();
            vals.sort_unstable();
            vals.dedup();
            total += vals.len() as f64;
        }
        let mean = total / reps as f64;
        // distinct count lies in [1, 6]; crude bound on its sd
        let se = 1.5 / (reps as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn fv_hmm_epochs_decouple_at_long_gaps() {
        let ds = sim_fv_hmm(base(1.0), 1.0, &[(0.0, 5), (500.0, 5)], 42).unwrap();
        let first: Vec<u64> = ds.batches[0].obs.iter().map(|v| v.to_bits()).collect();
        let second = &ds.batches[1].obs;
        assert!(second.iter().all(|v| !first.contains(&v.to_bits())));
    }

    #[test]
    fn fv_hmm_short_gap_pools_batches() {
        // two epochs dt -> 0 behave like one pooled urn sample: compare the
        // mean number of distinct values over 2+2 draws with a pooled 4-draw
        let theta = 1.0;
        let expect: f64 = (0..4u64).map(|i| theta / (theta + i as f64)).sum();
        let reps = 4000;
        let mut total = 0.0;
        for s in 0..reps {
            let ds = sim_fv_hmm(base(theta), 1.0, &[(0.0, 2), (0.01, 2)], s).unwrap();
            let mut vals: Vec<u64> = ds
                .batches
                .iter()
                .flat_map(|b| b.obs.iter().map(|v| v.to_bits()))
                .collect();
            vals.sort_unstable();
            vals.dedup();
            total += vals.len() as f64;
        }
        let mean = total / reps as f64;
        let se = 1.2 / (reps as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn dw_hmm_latents_are_stationary() {
        let (theta, beta) = (1.8, 1.2);
        let reps = 3000;
        let mut sum = 0.0;
        let mut count = 0.0;
        for s in 0..reps {
            let ds = sim_dw_hmm(base(theta), beta, 1.0, &[(0.0, 0), (3.0, 0), (6.0, 0)], s).unwrap();
            for b in &ds.batches {
                sum += b.latent.unwrap();
                count += 1.0;
            }
        }
        let mean = sum / count;
        let expect = theta / beta;
        // latents within a path correlate; bound se by the path count
        let se = (theta / (beta * beta) / reps as f64).sqrt() * 2.0;
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn dw_hmm_counts_follow_latents() {
        let ds = sim_dw_hmm(base(2.0), 0.4, 1.0, &[(0.0, 0)], 7).unwrap();
        assert_eq!(ds.batches.len(), 1);
        assert!(ds.batches[0].latent.unwrap() > 0.0);
    }

    #[test]
    fn wf_hmm_counts_and_determinism() {
        let alpha = [1.0, 2.0, 0.5];
        let sched = [(0.0, 8), (0.5, 8), (1.5, 0)];
        let a = sim_wf_hmm(&alpha, 1.0, &sched, 99).unwrap();
        let b = sim_wf_hmm(&alpha, 1.0, &sched, 99).unwrap();
        assert_eq!(a, b);
        for batch in &a.batches {
            assert_eq!(batch.obs.len(), 3);
        }
        let sum: f64 = a.batches[0].obs.iter().sum();
        assert_eq!(sum, 8.0);
        assert_eq!(a.batches[2].obs.iter().sum::<f64>(), 0.0);
        let c = sim_wf_hmm(&alpha, 1.0, &sched, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cir_hmm_exposures() {
        let ds = sim_cir_hmm(1.5, 1.0, 1.0, &[(0.0, 3), (1.0, 0)], 5).unwrap();
        assert_eq!(ds.batches[0].obs.len(), 3);
        assert_eq!(ds.batches[1].obs.len(), 0);
        assert!(ds.batches[1].latent.is_some());
    }

    #[test]
    fn duality_exact_at_t_zero_and_m_zero() {
        let alpha = [1.0, 0.7];
        let x0 = [0.4, 0.6];
        let r = mc_duality_check(&x0, &[2, 1], 0.0, &alpha, 1.0, 500, 1).unwrap();
        assert!(r.diff.abs() < 1e-14);
        // identical samples leave only rounding noise in the variance
        assert!(r.z_score.abs() < 1e-6);
        let r0 = mc_duality_check(&x0, &[0, 0], 1.3, &alpha, 1.0, 500, 2).unwrap();
        assert!(r0.diff.abs() < 1e-14);
        assert!((r0.rhs_exact - 1.0).abs() < 1e-14);
    }

    #[test]
    fn duality_holds_at_random_config() {
        let alpha = [0.9, 1.4, 0.7];
        let x0 = [0.3, 0.45, 0.25];
        let r = mc_duality_check(&x0, &[1, 2, 0], 0.8, &alpha, 1.0, 60_000, 12).unwrap();
        assert!(r.z_score.abs() < 3.5, "z = {}", r.z_score);
    }

    #[test]
    fn particle_oracle_recovers_prior_without_observations() {
        let alpha = [1.2, 0.8];
        let report =
            particle_oracle_wf(&[0.0, 1.0], &vec![vec![0, 0]; 2], &alpha, 1.0, 4000, 3).unwrap();
        let theta: f64 = alpha.iter().sum();
        for step in &report.steps {
            for (j, (&m, &se)) in step.mean.iter().zip(&step.se).enumerate() {
                let pi = alpha[j] / theta;
                assert!((m - pi).abs() < 3.5 * se + 1e-9, "{m} vs {pi}");
            }
        }
        let again =
            particle_oracle_wf(&[0.0, 1.0], &vec![vec![0, 0]; 2], &alpha, 1.0, 4000, 3).unwrap();
        assert_eq!(report.steps[1].mean, again.steps[1].mean);
    }

    #[test]
    fn grid_oracle_single_batch_conjugacy() {
        let (alpha, beta) = (1.4, 0.8);
        let grid = GridSpec {
            z_max: 40.0,
            n_points: 3000,
        };
        let report = grid_oracle_cir(&[0.0], &[(2, 5)], alpha, beta, 1.0, &grid).unwrap();
        // exact posterior Ga(alpha + 5, beta + 2)
        let a = alpha + 5.0;
        let b = beta + 2.0;
        let step = &report.steps[0];
        assert!((step.mean - a / b).abs() / (a / b) < 1e-6, "{}", step.mean);
        assert!((step.var - a / (b * b)).abs() / (a / (b * b)) < 1e-5);
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    }

    #[test]
    fn grid_oracle_matches_cir_filter_and_converges() {
        let (alpha, beta) = (1.1, 0.9);
        let times = [0.0, 0.6, 1.4];
        let batches = [(1u64, 2u64), (1, 0), (2, 3)];
        let prior = GammaMixture::prior(vec![alpha], beta, 1.0).unwrap();
        let (_, recs) = cir_filter(&prior, &times, &batches, 0.0).unwrap();
        let mut errs = Vec::new();
        for n_points in [400usize, 800] {
            let grid = GridSpec {
                z_max: 30.0,
                n_points,
            };
            let report = grid_oracle_cir(&times, &batches, alpha, beta, 1.0, &grid).unwrap();
            let mut max_rel = 0.0f64;
            for (g, r) in report.steps.iter().zip(&recs) {
                max_rel = max_rel.max((g.mean - r.mean[0]).abs() / r.mean[0]);
            }
            errs.push(max_rel);
        }
        assert!(errs[1] < 1e-3, "fine-grid error {}", errs[1]);
        assert!(
            errs[0] / errs[1] > 2.0,
            "refinement ratio {:?} not first order",
            errs
        );
    }
}
