//! Death-process duals of the signal processes.
//!
//! The Fleming-Viot prediction kernel redistributes multiplicity mass through
//! a pure death chain on totals with rates `lambda_n = n(theta+n-1)/2`; the
//! Dawson-Watanabe side pairs a binomial thinning of particles with a
//! deterministic decay of the auxiliary rate offset `s`. The speed parameter
//! enters every formula only through the effective time `sigma * t`.

use crate::dd::Dd;
use crate::lattice::{binom_pmf, hypergeom_pmf, MultiplicityVector};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use std::collections::HashMap;

/// Parameters of the Fleming-Viot dual: total base-measure mass and the
/// speed multiplier applied to raw time gaps.
#[derive(Clone, Copy, Debug)]
pub struct FvDualParams {
    pub theta: f64,
    pub sigma_speed: f64,
}

impl FvDualParams {
    pub fn new(theta: f64, sigma_speed: f64) -> Result<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::invalid(format!("theta must be positive: {theta}")));
        }
        if !(sigma_speed > 0.0) || !sigma_speed.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_speed must be positive: {sigma_speed}"
            )));
        }
        Ok(Self { theta, sigma_speed })
    }
}

/// Parameters of the Dawson-Watanabe dual.
#[derive(Clone, Copy, Debug)]
pub struct DwDualParams {
    pub theta: f64,
    pub beta: f64,
    pub sigma_speed: f64,
}

impl DwDualParams {
    pub fn new(theta: f64, beta: f64, sigma_speed: f64) -> Result<Self> {
        FvDualParams::new(theta, sigma_speed)?;
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta must be positive: {beta}")));
        }
        Ok(Self {
            theta,
            beta,
            sigma_speed,
        })
    }
}

/// Which argument the thinning binomial is evaluated at.
///
/// `Survivor` weights the component keeping `|n|` of `|m|` particles by
/// `Bin(|n|; |m|, p(t))`, the form consistent with the one-dimensional CIR
/// kernel, the identity at `t = 0`, and ergodicity as `t` grows.
/// `PaperLiteral` evaluates the same binomial at the death count `|m|-|n|`
/// and is kept only for comparison runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinomialConvention {
    Survivor,
    PaperLiteral,
}

/// Death rate `lambda_n = n(theta+n-1)/2` of the block-counting chain.
pub fn lambda_rate(theta: f64, n: u64) -> f64 {
    let nf = n as f64;
    nf * (theta + nf - 1.0) / 2.0
}

/// Per-call cache of level coefficients, keyed by (total, dead) at one
/// fixed effective time. Prediction rows share coefficients across
/// components with equal totals.
#[derive(Debug)]
pub struct CoeffCache {
    theta: f64,
    t_eff: f64,
    map: HashMap<(u64, u64), f64>,
}

impl CoeffCache {
    pub fn new(theta: f64, t_eff: f64) -> Self {
        Self {
            theta,
            t_eff,
            map: HashMap::new(),
        }
    }

    pub fn level_prob(&mut self, total: u64, dead: u64) -> Result<f64> {
        debug_assert!(dead <= total);
        if self.t_eff == 0.0 {
            return Ok(if dead == 0 { 1.0 } else { 0.0 });
        }
        if let Some(&v) = self.map.get(&(total, dead)) {
            return Ok(v);
        }
        let v = if dead == 0 {
            (-lambda_rate(self.theta, total) * self.t_eff).exp()
        } else {
            block_coeff(self.theta, total, dead, self.t_eff)?
        };
        self.map.insert((total, dead), v);
        Ok(v)
    }
}

/// Outcome of one coefficient evaluation, exposing the stabilization path.
#[derive(Clone, Copy, Debug)]
pub struct BlockCoeffDetail {
    pub value: f64,
    /// Largest |term| over |sum| seen on the f64 path.
    pub term_ratio: f64,
    /// Whether evaluation escalated beyond plain f64.
    pub used_extended: bool,
    /// Value before the final clamp (from whichever path produced it).
    pub pre_clamp: f64,
}

const CLAMP_FLOOR: f64 = -1e-9;
const RATIO_LIMIT: f64 = 1e6;
// effective double-double ulp after error growth across the term products
const DD_EPS: f64 = 1e-28;
// absolute error budget per coefficient; beyond it the series is abandoned
// for the nonnegative series-free evaluation
const COEFF_ABS_TOL: f64 = 1e-12;

/// Probability that the block-counting chain started at `total` has lost
/// exactly `dead >= 1` blocks after effective time `t_eff`:
///
/// `C(total, total-dead) = (prod_{h<dead} lambda_{total-h}) * (-1)^dead *
///  sum_k exp(-lambda_{total-k} t) / prod_{h != k} (lambda_{total-k} - lambda_{total-h})`
///
/// The alternating sum cancels catastrophically for deep descents at small
/// times; terms are built as interleaved ratio products under compensated
/// summation, with an automatic double-double retry.
pub fn block_coeff(theta: f64, total: u64, dead: u64, t_eff: f64) -> Result<f64> {
    Ok(block_coeff_detailed(theta, total, dead, t_eff)?.value)
}

pub fn block_coeff_detailed(
    theta: f64,
    total: u64,
    dead: u64,
    t_eff: f64,
) -> Result<BlockCoeffDetail> {
    if dead == 0 || dead > total {
        return Err(Error::invalid(format!(
            "block coefficient needs 0 < dead <= total, got dead={dead} total={total}"
        )));
    }
    if !(t_eff >= 0.0) {
        return Err(Error::invalid(format!("negative time {t_eff}")));
    }
    let d = dead as usize;
    // lam[j] = lambda_{total - d + j}, j = 0..=d (ascending)
    let lam: Vec<f64> = (0..=d)
        .map(|j| lambda_rate(theta, total - dead + j as u64))
        .collect();

    let (sum, max_term) = alternating_sum_f64(&lam, t_eff);
    let ratio = max_term / sum.abs().max(f64::MIN_POSITIVE);
    let plain_ok = sum.is_finite() && ratio <= RATIO_LIMIT && sum >= CLAMP_FLOOR;
    if plain_ok {
        let value = if sum < 0.0 { 0.0 } else { sum };
        return Ok(BlockCoeffDetail {
            value,
            term_ratio: ratio,
            used_extended: false,
            pre_clamp: sum,
        });
    }

    let (refined, max_term_dd) = alternating_sum_dd(&lam, t_eff);
    let dd_ok = refined.is_finite()
        && refined >= CLAMP_FLOOR
        && max_term_dd * DD_EPS <= COEFF_ABS_TOL;
    if dd_ok {
        let value = if refined < 0.0 { 0.0 } else { refined };
        return Ok(BlockCoeffDetail {
            value,
            term_ratio: ratio,
            used_extended: true,
            pre_clamp: refined,
        });
    }

    // cancellation exceeds even double-double precision: evaluate the whole
    // descent row by uniformization, which involves only nonnegative terms
    let row = death_row_uniformized(theta, total, t_eff).map_err(|_| Error::Instability {
        total,
        dead,
        t: t_eff,
        value: refined,
    })?;
    let value = row[d];
    Ok(BlockCoeffDetail {
        value,
        term_ratio: ratio,
        used_extended: true,
        pre_clamp: value,
    })
}

/// Distribution of deaths from level `total` over `t_eff`, by uniformizing
/// the bidiagonal death generator. Entry `j` is the chance of exactly `j`
/// deaths. Cancellation-free; used when the partial-fraction series is
/// beyond rescue.
fn death_row_uniformized(theta: f64, total: u64, t_eff: f64) -> Result<Vec<f64>> {
    let n = total as usize;
    let gamma = lambda_rate(theta, total);
    let gt = gamma * t_eff;
    let mut v = vec![0.0f64; n + 1];
    v[0] = 1.0;
    let mut acc = vec![0.0f64; n + 1];
    let mut lw = -gt;
    let mut cum = 0.0;
    let mut k = 0u64;
    let cap = (gt + 14.0 * (gt + 1.0).sqrt() + 80.0) as u64;
    loop {
        let w = lw.exp();
        for (a, &x) in acc.iter_mut().zip(&v) {
            *a += w * x;
        }
        cum += w;
        if k as f64 >= gt && w <= 1e-17 * cum {
            return Ok(acc);
        }
        if k > cap {
            return Err(Error::invalid(format!(
                "uniformized death row left {} mass after {k} terms",
                1.0 - cum
            )));
        }
        let mut next = vec![0.0f64; n + 1];
        for (j, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let level = total - j as u64;
            let jump = if level == 0 {
                0.0
            } else {
                lambda_rate(theta, level) / gamma
            };
            next[j] += x * (1.0 - jump);
            if j < n {
                next[j + 1] += x * jump;
            }
        }
        v = next;
        k += 1;
        lw += gt.ln() - (k as f64).ln();
    }
}

/// f64 path: Neumaier-compensated alternating sum of partial-fraction terms.
fn alternating_sum_f64(lam: &[f64], t: f64) -> (f64, f64) {
    let d = lam.len() - 1;
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut max_term = 0.0f64;
    for k in 0..=d {
        // node lambda_{total-k} sits at slice position d-k
        let pk = d - k;
        let mut prod = (-lam[pk] * t).exp();
        let mut num_idx = d; // numerator factors are lam[1..=d], consumed high to low
        for h in 0..=d {
            if h == k {
                continue;
            }
            let ph = d - h;
            prod /= (lam[pk] - lam[ph]).abs();
            if num_idx >= 1 {
                prod *= lam[num_idx];
                num_idx -= 1;
            }
        }
        debug_assert_eq!(num_idx, 0);
        let term = if (d + k) % 2 == 0 { prod } else { -prod };
        max_term = max_term.max(prod);
        // Neumaier update
        let t1 = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t1) + term;
        } else {
            comp += (term - t1) + sum;
        }
        sum = t1;
    }
    (sum + comp, max_term)
}

/// Double-double retry of the same sum; also reports the largest |term|,
/// whose product with the double-double ulp bounds the absolute error.
fn alternating_sum_dd(lam: &[f64], t: f64) -> (f64, f64) {
    let d = lam.len() - 1;
    let lam_dd: Vec<Dd> = lam.iter().map(|&l| Dd::from_f64(l)).collect();
    let t_dd = Dd::from_f64(t);
    let mut sum = Dd::ZERO;
    let mut max_term = 0.0f64;
    for k in 0..=d {
        let pk = d - k;
        let mut prod = lam_dd[pk].mul(t_dd).neg().exp();
        let mut num_idx = d;
        for h in 0..=d {
            if h == k {
                continue;
            }
            let ph = d - h;
            let mut diff = lam_dd[pk].sub(lam_dd[ph]);
            if diff.hi < 0.0 {
                diff = diff.neg();
            }
            prod = prod.div(diff);
            if num_idx >= 1 {
                prod = prod.mul(lam_dd[num_idx]);
                num_idx -= 1;
            }
        }
        max_term = max_term.max(prod.to_f64().abs());
        if (d + k) % 2 == 1 {
            prod = prod.neg();
        }
        sum = sum.add(prod);
    }
    (sum.to_f64(), max_term)
}

/// Transition probability of the multiplicity death process from `m` to
/// `n <= m` over raw time `t`: the level coefficient times the multivariate
/// hypergeometric chance that exactly the lost coordinates died.
pub fn fv_death_prob(
    params: &FvDualParams,
    cache: &mut CoeffCache,
    m: &MultiplicityVector,
    n: &MultiplicityVector,
    t: f64,
) -> Result<f64> {
    debug_assert!(
        cache.theta == params.theta && (cache.t_eff - params.sigma_speed * t).abs() <= 1e-12,
        "cache built for different parameters"
    );
    if !n.leq(m) {
        return Ok(0.0);
    }
    let dead = m.total() - n.total();
    if m.total() == 0 {
        return Ok(1.0);
    }
    let level = cache.level_prob(m.total(), dead)?;
    if dead == 0 {
        return Ok(level);
    }
    let lost = m.sub(n).expect("n <= m");
    Ok(level * hypergeom_pmf(&lost, m)?)
}

/// Fresh cache for one effective time under these parameters.
pub fn coeff_cache(params: &FvDualParams, t: f64) -> CoeffCache {
    CoeffCache::new(params.theta, params.sigma_speed * t)
}

/// Distribution of the level chain after raw time `t` started from `total`:
/// entry `l` is the probability of holding `l` blocks.
pub fn fv_level_dist(params: &FvDualParams, total: u64, t: f64) -> Result<Vec<f64>> {
    let mut cache = coeff_cache(params, t);
    let mut out = vec![0.0; total as usize + 1];
    if t == 0.0 {
        out[total as usize] = 1.0;
        return Ok(out);
    }
    for l in 0..=total {
        out[l as usize] = cache.level_prob(total, total - l)?;
    }
    Ok(out)
}

const LINEAGE_START_CAP: u64 = 1 << 22;

/// Smallest power-of-two start level `K >= max(64, 200 / t_eff)`. The time
/// to descend from infinity to `K` is a sum of independent exponentials with
/// Chernoff tail `P(T > t) <= exp(0.7 K - K^2 t / 4)`, so `K t >= 200` puts
/// the truncation bias below `exp(-49 K)`.
pub fn lineage_start_level(t_eff: f64) -> Result<u64> {
    let needed = 200.0 / t_eff;
    if !(needed <= LINEAGE_START_CAP as f64) {
        return Err(Error::SupportCap {
            needed: needed as u128 + 1,
            cap: LINEAGE_START_CAP,
        });
    }
    let mut k: u64 = 64;
    while (k as f64) < needed {
        k *= 2;
    }
    Ok(k)
}

/// Draws the number of surviving blocks after raw time `t > 0` for the death
/// chain "started from infinity", by simulating the chain from an adaptively
/// high start level.
pub fn sample_lineage_count<R: Rng + ?Sized>(
    params: &FvDualParams,
    t: f64,
    rng: &mut R,
) -> Result<u64> {
    let t_eff = params.sigma_speed * t;
    if !(t_eff > 0.0) {
        return Err(Error::invalid(format!(
            "lineage sampling needs t > 0, got {t}"
        )));
    }
    let start = lineage_start_level(t_eff)?;
    Ok(run_death_chain(params.theta, start, t_eff, rng))
}

/// Simulates the pure death chain from `start` for effective time `t_eff`.
pub fn run_death_chain<R: Rng + ?Sized>(theta: f64, start: u64, t_eff: f64, rng: &mut R) -> u64 {
    let mut level = start;
    let mut elapsed = 0.0f64;
    while level > 0 {
        let e: f64 = Exp1.sample(rng);
        elapsed += e / lambda_rate(theta, level);
        if elapsed > t_eff {
            break;
        }
        level -= 1;
    }
    level
}

/// `S_t` in effective time: solves `dS/dt_eff = -S(beta+S)/2` from `s0`.
pub(crate) fn s_decay_raw(beta: f64, s0: f64, t_eff: f64) -> f64 {
    debug_assert!(s0 >= 0.0 && t_eff >= 0.0);
    let e = (-beta * t_eff / 2.0).exp();
    beta * s0 * e / ((beta + s0) - s0 * e)
}

/// `p(t_eff) = S_t / s0` in effective time, with `p := 0` at `s0 = 0`.
pub(crate) fn survival_prob_raw(beta: f64, s0: f64, t_eff: f64) -> f64 {
    if s0 == 0.0 {
        return 0.0;
    }
    let e = (-beta * t_eff / 2.0).exp();
    beta * e / ((beta + s0) - s0 * e)
}

/// Deterministic decay of the auxiliary offset: `S_t` solving
/// `dS/dt = -S(beta+S)/2` from `s0`, in effective time.
pub fn dw_s_decay(params: &DwDualParams, s0: f64, t: f64) -> f64 {
    s_decay_raw(params.beta, s0, params.sigma_speed * t)
}

/// Per-particle survival probability over raw time `t` from offset `s0`,
/// `p(t) = S_t / s0`, with `p := 0` at the degenerate offset `s0 = 0`.
pub fn dw_survival_prob(params: &DwDualParams, s0: f64, t: f64) -> f64 {
    survival_prob_raw(params.beta, s0, params.sigma_speed * t)
}

/// Immigration-side offset `S*_t = beta / (exp(beta t_eff / 2) - 1)`.
pub fn dw_sstar(params: &DwDualParams, t: f64) -> Result<f64> {
    let t_eff = params.sigma_speed * t;
    if !(t_eff > 0.0) {
        return Err(Error::invalid(format!("S* needs t > 0, got {t}")));
    }
    Ok(params.beta / (params.beta * t_eff / 2.0).exp_m1())
}

/// Transition probability of the Dawson-Watanabe multiplicity dual from `m`
/// to `n <= m` over raw time `t` at offset `s0`: binomial thinning of the
/// total times the hypergeometric split.
pub fn dw_death_prob(
    params: &DwDualParams,
    m: &MultiplicityVector,
    n: &MultiplicityVector,
    s0: f64,
    t: f64,
    convention: BinomialConvention,
) -> Result<f64> {
    if !n.leq(m) {
        return Ok(0.0);
    }
    if m.total() == 0 {
        return Ok(1.0);
    }
    let p = if t == 0.0 {
        1.0
    } else {
        dw_survival_prob(params, s0, t)
    };
    let arg = match convention {
        BinomialConvention::Survivor => n.total(),
        BinomialConvention::PaperLiteral => m.total() - n.total(),
    };
    Ok(binom_pmf(arg, m.total(), p) * hypergeom_pmf(n, m)?)
}
