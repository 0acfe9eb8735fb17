//! Finite-dimensional Wright-Fisher and Cox-Ingersoll-Ross filters.
//!
//! These are the projections of the measure-valued filters onto a partition:
//! mixtures of Dirichlet laws on the simplex and of independent-gamma laws on
//! the positive orthant, indexed by dense count vectors. They serve both as
//! standalone filters for categorical / Poisson-count data and as the
//! independent oracles for the projection-commutation checks.

use crate::dual::{s_decay_raw, survival_prob_raw, CoeffCache};
use crate::lattice::{binom_pmf, ln_binomial, DEFAULT_SUPPORT_CAP};
use crate::{Error, Result};
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeMap;

/// Mixture of Dirichlet distributions over dense count vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletMixture {
    pub alpha: Vec<f64>,
    pub sigma_speed: f64,
    pub components: BTreeMap<Vec<u64>, f64>,
}

/// Mixture of independent-gamma vectors sharing the rate `beta + s`.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaMixture {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub s: f64,
    pub sigma_speed: f64,
    pub components: BTreeMap<Vec<u64>, f64>,
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::invalid("alpha must be nonempty"));
    }
    if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive: {alpha:?}")));
    }
    Ok(())
}

fn check_components(components: &mut BTreeMap<Vec<u64>, f64>, k: usize) -> Result<()> {
    if components.is_empty() {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    let mut sum = 0.0;
    for (key, &w) in components.iter() {
        if key.len() != k {
            return Err(Error::invalid(format!(
                "component dimension {} does not match alpha dimension {k}",
                key.len()
            )));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!("bad component weight {w}")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("weights must sum to 1: {sum}")));
    }
    for w in components.values_mut() {
        *w /= sum;
    }
    Ok(())
}

fn check_speed(sigma_speed: f64) -> Result<()> {
    if !(sigma_speed > 0.0) || !sigma_speed.is_finite() {
        return Err(Error::invalid(format!(
            "sigma_speed must be positive: {sigma_speed}"
        )));
    }
    Ok(())
}

impl DirichletMixture {
    pub fn new(
        alpha: Vec<f64>,
        sigma_speed: f64,
        mut components: BTreeMap<Vec<u64>, f64>,
    ) -> Result<Self> {
        check_alpha(&alpha)?;
        check_speed(sigma_speed)?;
        check_components(&mut components, alpha.len())?;
        Ok(Self {
            alpha,
            sigma_speed,
            components,
        })
    }

    /// Stationary prior: the single Dirichlet(alpha) component.
    pub fn prior(alpha: Vec<f64>, sigma_speed: f64) -> Result<Self> {
        let k = alpha.len();
        let mut components = BTreeMap::new();
        components.insert(vec![0u64; k], 1.0);
        Self::new(alpha, sigma_speed, components)
    }

    pub fn theta(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Posterior mean and variance of each simplex coordinate.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.alpha.len();
        let theta = self.theta();
        let mut mean = vec![0.0; k];
        let mut second = vec![0.0; k];
        for (m, &w) in &self.components {
            let total: u64 = m.iter().sum();
            let big = theta + total as f64;
            for j in 0..k {
                let a = self.alpha[j] + m[j] as f64;
                mean[j] += w * a / big;
                second[j] += w * a * (a + 1.0) / (big * (big + 1.0));
            }
        }
        let var = second
            .iter()
            .zip(&mean)
            .map(|(s2, mu)| (s2 - mu * mu).max(0.0))
            .collect();
        (mean, var)
    }

    pub fn mean(&self) -> Vec<f64> {
        self.moments().0
    }
}

impl GammaMixture {
    pub fn new(
        alpha: Vec<f64>,
        beta: f64,
        s: f64,
        sigma_speed: f64,
        mut components: BTreeMap<Vec<u64>, f64>,
    ) -> Result<Self> {
        check_alpha(&alpha)?;
        check_speed(sigma_speed)?;
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta must be positive: {beta}")));
        }
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::invalid(format!("s must be nonnegative: {s}")));
        }
        check_components(&mut components, alpha.len())?;
        Ok(Self {
            alpha,
            beta,
            s,
            sigma_speed,
            components,
        })
    }

    /// Stationary prior: the single product-Gamma(alpha, beta) component.
    pub fn prior(alpha: Vec<f64>, beta: f64, sigma_speed: f64) -> Result<Self> {
        let k = alpha.len();
        let mut components = BTreeMap::new();
        components.insert(vec![0u64; k], 1.0);
        Self::new(alpha, beta, 0.0, sigma_speed, components)
    }

    pub fn theta(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Posterior mean and variance of each coordinate mass.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.alpha.len();
        let rate = self.beta + self.s;
        let mut mean = vec![0.0; k];
        let mut second = vec![0.0; k];
        for (m, &w) in &self.components {
            for j in 0..k {
                let a = self.alpha[j] + m[j] as f64;
                mean[j] += w * a / rate;
                second[j] += w * a * (a + 1.0) / (rate * rate);
            }
        }
        let var = second
            .iter()
            .zip(&mean)
            .map(|(s2, mu)| (s2 - mu * mu).max(0.0))
            .collect();
        (mean, var)
    }

    pub fn mean(&self) -> Vec<f64> {
        self.moments().0
    }
}

/// Applies `f` to every dense vector `n <= m`, ascending lexicographically.
/// Errors when the down-set cardinality exceeds the support cap.
pub(crate) fn for_each_leq(m: &[u64], mut f: impl FnMut(&[u64]) -> Result<()>) -> Result<()> {
    let card = m
        .iter()
        .fold(1u128, |acc, &c| acc.saturating_mul(c as u128 + 1));
    if card > DEFAULT_SUPPORT_CAP as u128 {
        return Err(Error::SupportCap {
            needed: card,
            cap: DEFAULT_SUPPORT_CAP,
        });
    }
    let k = m.len();
    let mut n = vec![0u64; k];
    loop {
        f(&n)?;
        let mut j = k;
        while j > 0 {
            if n[j - 1] < m[j - 1] {
                n[j - 1] += 1;
                for v in n[j..].iter_mut() {
                    *v = 0;
                }
                break;
            }
            j -= 1;
        }
        if j == 0 {
            return Ok(());
        }
    }
}

fn normalize(map: &mut BTreeMap<Vec<u64>, f64>) {
    let sum: f64 = map.values().sum();
    if sum > 0.0 {
        for w in map.values_mut() {
            *w /= sum;
        }
    }
}

/// Conjugate Bayes step for multinomial category counts. Each component `m`
/// moves to `m + counts`; its weight picks up the Dirichlet-multinomial
/// marginal of the counts (rising-factorial ratios, ordered-draw convention
/// without the multinomial coefficient). Returns the updated mixture and the
/// log marginal likelihood increment.
pub fn wf_update(mix: &DirichletMixture, counts: &[u64]) -> Result<(DirichletMixture, f64)> {
    let k = mix.alpha.len();
    if counts.len() != k {
        return Err(Error::invalid(format!(
            "counts dimension {} does not match alpha dimension {k}",
            counts.len()
        )));
    }
    let batch: u64 = counts.iter().sum();
    if batch == 0 {
        return Ok((mix.clone(), 0.0));
    }
    let theta = mix.theta();
    let mut entries: Vec<(Vec<u64>, f64)> = Vec::with_capacity(mix.components.len());
    for (m, &w) in &mix.components {
        let total: u64 = m.iter().sum();
        let mut logf = ln_gamma(theta + total as f64)
            - ln_gamma(theta + (total + batch) as f64);
        for j in 0..k {
            let a = mix.alpha[j] + m[j] as f64;
            logf += ln_gamma(a + counts[j] as f64) - ln_gamma(a);
        }
        let key: Vec<u64> = m.iter().zip(counts).map(|(&a, &b)| a + b).collect();
        entries.push((key, w.ln() + logf));
    }
    let max = entries
        .iter()
        .map(|(_, lw)| *lw)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut components = BTreeMap::new();
    let mut z = 0.0;
    for (key, lw) in entries {
        let w = (lw - max).exp();
        z += w;
        components.insert(key, w);
    }
    for w in components.values_mut() {
        *w /= z;
    }
    let increment = max + z.ln();
    Ok((
        DirichletMixture {
            alpha: mix.alpha.clone(),
            sigma_speed: mix.sigma_speed,
            components,
        },
        increment,
    ))
}

/// Forward propagation of a Dirichlet mixture by the Wright-Fisher
/// semigroup: each component spreads over its down-set with death-process
/// level weights times the multivariate hypergeometric split.
pub fn wf_predict(mix: &DirichletMixture, t: f64) -> Result<DirichletMixture> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("time must be nonnegative: {t}")));
    }
    if t == 0.0 {
        return Ok(mix.clone());
    }
    let theta = mix.theta();
    let mut cache = CoeffCache::new(theta, mix.sigma_speed * t);
    let mut out: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    for (m, &w) in &mix.components {
        let total: u64 = m.iter().sum();
        if total == 0 {
            *out.entry(m.clone()).or_insert(0.0) += w;
            continue;
        }
        let rows: Vec<Vec<f64>> = m
            .iter()
            .map(|&mj| (0..=mj).map(|v| ln_binomial(mj, v)).collect())
            .collect();
        let tot_row: Vec<f64> = (0..=total).map(|l| ln_binomial(total, l)).collect();
        for_each_leq(m, |n| {
            let live: u64 = n.iter().sum();
            let level = cache.level_prob(total, total - live)?;
            if level == 0.0 {
                return Ok(());
            }
            let mut lhyp = -tot_row[live as usize];
            for (j, &nj) in n.iter().enumerate() {
                lhyp += rows[j][nj as usize];
            }
            let p = w * level * lhyp.exp();
            if p > 0.0 {
                *out.entry(n.to_vec()).or_insert(0.0) += p;
            }
            Ok(())
        })?;
        if out.len() as u128 > DEFAULT_SUPPORT_CAP as u128 {
            return Err(Error::SupportCap {
                needed: out.len() as u128,
                cap: DEFAULT_SUPPORT_CAP,
            });
        }
    }
    normalize(&mut out);
    Ok(DirichletMixture {
        alpha: mix.alpha.clone(),
        sigma_speed: mix.sigma_speed,
        components: out,
    })
}

/// Conjugate Bayes step for a batch of `n` Poisson counts totalling `y`
/// (one-dimensional). Shapes gain `y`, the rate offset gains `n`; weights
/// pick up the Poisson-gamma marginal (factorial constants omitted: they are
/// shared by every component). Returns the mixture and the log increment.
pub fn cir_update(mix: &GammaMixture, n: u64, y: u64) -> Result<(GammaMixture, f64)> {
    if mix.alpha.len() != 1 {
        return Err(Error::invalid("cir_update is one-dimensional"));
    }
    if n == 0 && y > 0 {
        return Err(Error::invalid(format!("{y} counts need a nonzero batch")));
    }
    if n == 0 {
        return Ok((mix.clone(), 0.0));
    }
    let b = mix.beta + mix.s;
    let bn = b + n as f64;
    let mut entries: Vec<(Vec<u64>, f64)> = Vec::with_capacity(mix.components.len());
    for (m, &w) in &mix.components {
        let a = mix.alpha[0] + m[0] as f64;
        let logf =
            ln_gamma(a + y as f64) - ln_gamma(a) + a * b.ln() - (a + y as f64) * bn.ln();
        entries.push((vec![m[0] + y], w.ln() + logf));
    }
    let max = entries
        .iter()
        .map(|(_, lw)| *lw)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut components = BTreeMap::new();
    let mut z = 0.0;
    for (key, lw) in entries {
        let w = (lw - max).exp();
        z += w;
        components.insert(key, w);
    }
    for w in components.values_mut() {
        *w /= z;
    }
    Ok((
        GammaMixture {
            alpha: mix.alpha.clone(),
            beta: mix.beta,
            s: mix.s + n as f64,
            sigma_speed: mix.sigma_speed,
            components,
        },
        max + z.ln(),
    ))
}

/// Forward propagation of a one-dimensional gamma mixture by the CIR
/// semigroup: shape count `m` thins binomially with the survival
/// probability, the offset decays to `S_t`.
pub fn cir_predict(mix: &GammaMixture, t: f64) -> Result<GammaMixture> {
    if mix.alpha.len() != 1 {
        return Err(Error::invalid("cir_predict is one-dimensional"));
    }
    multi_cir_predict(mix, t)
}

/// Forward propagation of a K-dimensional independent-gamma mixture: every
/// count thins binomially and independently with the common survival
/// probability `p(t)`, and the shared offset decays to `S_t`. The product
/// of per-coordinate binomials equals the total-level binomial times the
/// multivariate hypergeometric split, which is how the measure-valued
/// prediction weights factorize; this independent route is the oracle for
/// that identity.
pub fn multi_cir_predict(mix: &GammaMixture, t: f64) -> Result<GammaMixture> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("time must be nonnegative: {t}")));
    }
    if t == 0.0 {
        return Ok(mix.clone());
    }
    let t_eff = mix.sigma_speed * t;
    let p = survival_prob_raw(mix.beta, mix.s, t_eff);
    let s_new = s_decay_raw(mix.beta, mix.s, t_eff);
    let mut out: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    for (m, &w) in &mix.components {
        for_each_leq(m, |n| {
            let mut prob = w;
            for (j, &nj) in n.iter().enumerate() {
                prob *= binom_pmf(nj, m[j], p);
            }
            if prob > 0.0 {
                *out.entry(n.to_vec()).or_insert(0.0) += prob;
            }
            Ok(())
        })?;
        if out.len() as u128 > DEFAULT_SUPPORT_CAP as u128 {
            return Err(Error::SupportCap {
                needed: out.len() as u128,
                cap: DEFAULT_SUPPORT_CAP,
            });
        }
    }
    normalize(&mut out);
    Ok(GammaMixture {
        alpha: mix.alpha.clone(),
        beta: mix.beta,
        s: s_new,
        sigma_speed: mix.sigma_speed,
        components: out,
    })
}

/// Per-step diagnostics of a parametric filter run.
#[derive(Clone, Debug)]
pub struct ParamStepRecord {
    pub time: f64,
    pub logml_increment: f64,
    pub components_before_prune: usize,
    pub components_after_prune: usize,
    pub cumulative_pruned_mass: f64,
    pub s: Option<f64>,
    pub weight_fullinfo: f64,
    pub weight_prior: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Weight of the maximal-count component (lattice-largest on total ties) and
/// of the origin component.
pub fn fullinfo_and_prior_weights(components: &BTreeMap<Vec<u64>, f64>) -> (f64, f64) {
    let mut best: Option<(u64, f64)> = None;
    let mut prior = 0.0;
    for (key, &w) in components {
        let total: u64 = key.iter().sum();
        if total == 0 {
            prior = w;
        }
        match best {
            Some((bt, _)) if bt > total => {}
            _ => best = Some((total, w)),
        }
    }
    (best.map_or(0.0, |(_, w)| w), prior)
}

/// Drops components below `eps` (never the heaviest), renormalizes, returns
/// the dropped mass.
pub(crate) fn prune_map<K: Ord + Clone>(map: &mut BTreeMap<K, f64>, eps: f64) -> f64 {
    if map.len() <= 1 {
        return 0.0;
    }
    let heaviest = map
        .iter()
        .fold((None::<K>, f64::NEG_INFINITY), |(bk, bw), (k, &w)| {
            if w > bw {
                (Some(k.clone()), w)
            } else {
                (bk, bw)
            }
        })
        .0
        .expect("nonempty");
    let mut dropped = 0.0;
    map.retain(|k, w| {
        if *w >= eps || *k == heaviest {
            true
        } else {
            dropped += *w;
            false
        }
    });
    let kept: f64 = map.values().sum();
    if kept > 0.0 {
        for w in map.values_mut() {
            *w /= kept;
        }
    }
    dropped
}

fn check_times(times: &[f64], n_batches: usize) -> Result<()> {
    if times.len() != n_batches {
        return Err(Error::invalid(format!(
            "{} times for {n_batches} batches",
            times.len()
        )));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("times must be finite"));
    }
    for w in times.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::NonMonotoneTimes {
                prev: w[0],
                next: w[1],
            });
        }
    }
    Ok(())
}

/// Filtering recursion for multinomial count batches: predict over each gap,
/// prune, update, call `on_step` with the post-update state, record.
pub fn wf_filter_with(
    prior: &DirichletMixture,
    times: &[f64],
    batches: &[Vec<u64>],
    prune_eps: f64,
    mut on_step: impl FnMut(&DirichletMixture, &ParamStepRecord) -> Result<()>,
) -> Result<(DirichletMixture, Vec<ParamStepRecord>)> {
    check_times(times, batches.len())?;
    let mut state = prior.clone();
    let mut records = Vec::with_capacity(times.len());
    let mut cum_pruned = 0.0;
    let mut prev_t = None;
    for (&t, batch) in times.iter().zip(batches) {
        let mut before = state.components.len();
        if let Some(pt) = prev_t {
            state = wf_predict(&state, t - pt)?;
            before = state.components.len();
            cum_pruned += prune_map(&mut state.components, prune_eps);
        }
        let after = state.components.len();
        let (next, increment) = wf_update(&state, batch)?;
        state = next;
        let (mean, variance) = state.moments();
        let (weight_fullinfo, weight_prior) = fullinfo_and_prior_weights(&state.components);
        let record = ParamStepRecord {
            time: t,
            logml_increment: increment,
            components_before_prune: before,
            components_after_prune: after,
            cumulative_pruned_mass: cum_pruned,
            s: None,
            weight_fullinfo,
            weight_prior,
            mean,
            variance,
        };
        on_step(&state, &record)?;
        records.push(record);
        prev_t = Some(t);
    }
    Ok((state, records))
}

pub fn wf_filter(
    prior: &DirichletMixture,
    times: &[f64],
    batches: &[Vec<u64>],
    prune_eps: f64,
) -> Result<(DirichletMixture, Vec<ParamStepRecord>)> {
    wf_filter_with(prior, times, batches, prune_eps, |_, _| Ok(()))
}

/// Filtering recursion for Poisson count batches `(n, y)`; emits the weight
/// trajectories of the full-information and prior components.
pub fn cir_filter_with(
    prior: &GammaMixture,
    times: &[f64],
    batches: &[(u64, u64)],
    prune_eps: f64,
    mut on_step: impl FnMut(&GammaMixture, &ParamStepRecord) -> Result<()>,
) -> Result<(GammaMixture, Vec<ParamStepRecord>)> {
    check_times(times, batches.len())?;
    let mut state = prior.clone();
    let mut records = Vec::with_capacity(times.len());
    let mut cum_pruned = 0.0;
    let mut prev_t = None;
    for (&t, &(n, y)) in times.iter().zip(batches) {
        let mut before = state.components.len();
        if let Some(pt) = prev_t {
            state = cir_predict(&state, t - pt)?;
            before = state.components.len();
            cum_pruned += prune_map(&mut state.components, prune_eps);
        }
        let after = state.components.len();
        let (next, increment) = cir_update(&state, n, y)?;
        state = next;
        let (mean, variance) = state.moments();
        let (weight_fullinfo, weight_prior) = fullinfo_and_prior_weights(&state.components);
        let record = ParamStepRecord {
            time: t,
            logml_increment: increment,
            components_before_prune: before,
            components_after_prune: after,
            cumulative_pruned_mass: cum_pruned,
            s: Some(state.s),
            weight_fullinfo,
            weight_prior,
            mean,
            variance,
        };
        on_step(&state, &record)?;
        records.push(record);
        prev_t = Some(t);
    }
    Ok((state, records))
}

pub fn cir_filter(
    prior: &GammaMixture,
    times: &[f64],
    batches: &[(u64, u64)],
    prune_eps: f64,
) -> Result<(GammaMixture, Vec<ParamStepRecord>)> {
    cir_filter_with(prior, times, batches, prune_eps, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn wf_update_beta_conjugacy() {
        let prior = DirichletMixture::prior(vec![1.5, 0.5], 1.0).unwrap();
        let (post, _) = wf_update(&prior, &[3, 2]).unwrap();
        assert_eq!(post.components.len(), 1);
        assert!(close(post.components[&vec![3, 2]], 1.0, 1e-15));
        // zero counts are the identity
        let (same, inc) = wf_update(&post, &[0, 0]).unwrap();
        assert_eq!(same.components, post.components);
        assert_eq!(inc, 0.0);
    }

    #[test]
    fn wf_update_reweights_by_dirichlet_multinomial() {
        // components {(0,0), (2,0)} with alpha=(1,1): one extra head gives
        // factors 1/2 and 3/4
        let mut comps = BTreeMap::new();
        comps.insert(vec![0, 0], 0.5);
        comps.insert(vec![2, 0], 0.5);
        let mix = DirichletMixture::new(vec![1.0, 1.0], 1.0, comps).unwrap();
        let (post, inc) = wf_update(&mix, &[1, 0]).unwrap();
        assert!(close(post.components[&vec![1, 0]], 0.4, 1e-12));
        assert!(close(post.components[&vec![3, 0]], 0.6, 1e-12));
        assert!(close(inc, (0.5f64 * 0.5 + 0.5 * 0.75).ln(), 1e-12));
    }

    #[test]
    fn wf_update_matches_simplex_quadrature() {
        // marginal of counts (2,1) under Beta components, checked against
        // Simpson integration of x^2 (1-x) over each component density
        let mut comps = BTreeMap::new();
        comps.insert(vec![0, 0], 0.3);
        comps.insert(vec![1, 2], 0.7);
        let alpha = [1.2, 0.8];
        let mix = DirichletMixture::new(alpha.to_vec(), 1.0, comps.clone()).unwrap();
        let (_, inc) = wf_update(&mix, &[2, 1]).unwrap();
        let mut quad = 0.0;
        for (m, w) in &comps {
            let (a, b) = (alpha[0] + m[0] as f64, alpha[1] + m[1] as f64);
            let lnorm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
            let n = 20_000;
            let h = 1.0 / n as f64;
            let f = |x: f64| {
                x.powf(a - 1.0 + 2.0) * (1.0 - x).powf(b - 1.0 + 1.0) * lnorm.exp()
            };
            let mut integral = 0.0;
            for i in 0..n {
                let x0 = i as f64 * h;
                integral += h / 6.0 * (f(x0) + 4.0 * f(x0 + h / 2.0) + f(x0 + h));
            }
            quad += w * integral;
        }
        assert!(
            close(inc.exp(), quad, 1e-8),
            "marginal {} quadrature {quad}",
            inc.exp()
        );
    }

    #[test]
    fn wf_predict_single_lineage() {
        let mut comps = BTreeMap::new();
        comps.insert(vec![1, 0], 1.0);
        let mix = DirichletMixture::new(vec![0.5, 0.5], 1.0, comps).unwrap();
        let t = 0.8;
        let out = wf_predict(&mix, t).unwrap();
        // theta = 1: lambda_1 = 1/2
        let keep = (-0.5 * t).exp();
        assert!(close(out.components[&vec![1, 0]], keep, 1e-12));
        assert!(close(out.components[&vec![0, 0]], 1.0 - keep, 1e-12));
    }

    #[test]
    fn wf_predict_stationary_and_normalized() {
        let prior = DirichletMixture::prior(vec![0.7, 0.3, 1.0], 2.0).unwrap();
        let out = wf_predict(&prior, 3.0).unwrap();
        assert_eq!(out.components, prior.components);
        let mut comps = BTreeMap::new();
        comps.insert(vec![2, 1, 0], 0.5);
        comps.insert(vec![0, 3, 1], 0.5);
        let mix = DirichletMixture::new(vec![0.7, 0.3, 1.0], 2.0, comps).unwrap();
        let out = wf_predict(&mix, 0.4).unwrap();
        let sum: f64 = out.components.values().sum();
        assert!(close(sum, 1.0, 1e-12));
    }

    #[test]
    fn wf_predict_semigroup() {
        let mut comps = BTreeMap::new();
        comps.insert(vec![3, 1], 0.6);
        comps.insert(vec![1, 1], 0.4);
        let mix = DirichletMixture::new(vec![1.0, 2.0], 1.5, comps).unwrap();
        let once = wf_predict(&mix, 0.9).unwrap();
        let twice = wf_predict(&wf_predict(&mix, 0.4).unwrap(), 0.5).unwrap();
        for (k, w) in &once.components {
            assert!(
                close(*w, twice.components[k], 1e-10),
                "{k:?}: {w} vs {}",
                twice.components[k]
            );
        }
    }

    #[test]
    fn cir_update_conjugacy_and_identity() {
        let prior = GammaMixture::prior(vec![2.0], 1.0, 1.0).unwrap();
        let (post, _) = cir_update(&prior, 3, 7).unwrap();
        assert_eq!(post.components.len(), 1);
        assert!(close(post.components[&vec![7]], 1.0, 1e-15));
        assert!(close(post.s, 3.0, 1e-15));
        let (same, inc) = cir_update(&post, 0, 0).unwrap();
        assert_eq!(same.components, post.components);
        assert_eq!(same.s, post.s);
        assert_eq!(inc, 0.0);
        assert!(cir_update(&post, 0, 2).is_err());
    }

    #[test]
    fn cir_update_increment_is_poisson_gamma_marginal() {
        // Ga(2,1): P(y=k in one draw) = NegBin; check y=1, n=1:
        // Gamma(3)/Gamma(2) * 1^2 / 2^3 = 2/8 = 1/4
        let prior = GammaMixture::prior(vec![2.0], 1.0, 1.0).unwrap();
        let (_, inc) = cir_update(&prior, 1, 1).unwrap();
        assert!(close(inc.exp(), 0.25, 1e-12));
    }

    #[test]
    fn cir_predict_two_term_expansion() {
        let mut comps = BTreeMap::new();
        comps.insert(vec![1], 1.0);
        let mix = GammaMixture::new(vec![1.5], 2.0, 1.0, 1.0, comps).unwrap();
        let t = 0.7;
        let out = cir_predict(&mix, t).unwrap();
        let e = (-mix.beta * t / 2.0).exp();
        let p = mix.beta * e / ((mix.beta + mix.s) - mix.s * e);
        assert!(close(out.components[&vec![1]], p, 1e-14));
        assert!(close(out.components[&vec![0]], 1.0 - p, 1e-14));
        assert!(close(out.s, p * mix.s, 1e-14));
    }

    #[test]
    fn cir_predict_stationary_and_ergodic() {
        let prior = GammaMixture::prior(vec![2.0], 1.5, 1.0).unwrap();
        let out = cir_predict(&prior, 5.0).unwrap();
        assert_eq!(out.components, prior.components);
        assert_eq!(out.s, 0.0);
        let mut comps = BTreeMap::new();
        comps.insert(vec![4], 1.0);
        let mix = GammaMixture::new(vec![2.0], 1.5, 3.0, 1.0, comps).unwrap();
        let far = cir_predict(&mix, 200.0).unwrap();
        assert!(far.components[&vec![0]] > 1.0 - 1e-12);
        assert!(far.s < 1e-12);
    }

    #[test]
    fn multi_cir_matches_tensor_of_one_dim_expansions() {
        let mut comps = BTreeMap::new();
        comps.insert(vec![1, 1], 1.0);
        let mix = GammaMixture::new(vec![0.5, 1.5], 2.0, 0.8, 1.0, comps).unwrap();
        let t = 0.6;
        let out = multi_cir_predict(&mix, t).unwrap();
        // tensor the two independent 1-dim expansions
        let mut one = BTreeMap::new();
        one.insert(vec![1], 1.0);
        let m1 = GammaMixture::new(vec![0.5], 2.0, 0.8, 1.0, one).unwrap();
        let exp1 = cir_predict(&m1, t).unwrap();
        assert_eq!(out.components.len(), 4);
        for (ka, wa) in &exp1.components {
            for (kb, wb) in &exp1.components {
                let key = vec![ka[0], kb[0]];
                assert!(close(out.components[&key], wa * wb, 1e-14));
            }
        }
        assert!(close(out.s, exp1.s, 1e-15));
    }

    #[test]
    fn multi_cir_matches_dw_death_prob() {
        use crate::dual::{dw_death_prob, BinomialConvention, DwDualParams};
        use crate::lattice::MultiplicityVector;
        let alpha = vec![0.5, 1.0, 1.5];
        let mut comps = BTreeMap::new();
        comps.insert(vec![2, 0, 3], 1.0);
        for &(t, s0) in &[(0.1, 0.5), (1.0, 2.0), (0.35, 1.2)] {
            let mix = GammaMixture::new(alpha.clone(), 1.3, s0, 0.8, comps.clone()).unwrap();
            let out = multi_cir_predict(&mix, t).unwrap();
            let params = DwDualParams::new(alpha.iter().sum(), 1.3, 0.8).unwrap();
            let m = MultiplicityVector::from_pairs(&[(0, 2), (2, 3)]);
            let mut total = 0.0;
            for (key, &w) in &out.components {
                let n = MultiplicityVector::from_dense(key);
                let direct = dw_death_prob(
                    &params,
                    &m,
                    &n,
                    s0,
                    t,
                    BinomialConvention::Survivor,
                )
                .unwrap();
                assert!(close(w, direct, 1e-12), "{key:?}: {w} vs {direct}");
                total += w;
            }
            assert!(close(total, 1.0, 1e-12));
        }
    }

    #[test]
    fn pooled_update_equals_two_updates() {
        let mut comps = BTreeMap::new();
        comps.insert(vec![1, 0], 0.5);
        comps.insert(vec![0, 2], 0.5);
        let mix = DirichletMixture::new(vec![1.0, 0.5], 1.0, comps).unwrap();
        let (a, i1) = wf_update(&mix, &[2, 1]).unwrap();
        let (a, i2) = wf_update(&a, &[0, 3]).unwrap();
        let (b, i) = wf_update(&mix, &[2, 4]).unwrap();
        assert!(close(i1 + i2, i, 1e-12));
        for (k, w) in &b.components {
            assert!(close(*w, a.components[k], 1e-12));
        }
        // same coherence for the gamma family
        let prior = GammaMixture::prior(vec![1.0], 2.0, 1.0).unwrap();
        let (c, j1) = cir_update(&prior, 2, 3).unwrap();
        let (c, j2) = cir_update(&c, 1, 4).unwrap();
        let (d, j) = cir_update(&prior, 3, 7).unwrap();
        assert!(close(j1 + j2, j, 1e-12));
        assert_eq!(c.components, d.components);
        assert!(close(c.s, d.s, 1e-15));
    }

    #[test]
    fn filters_record_trajectories() {
        let prior = GammaMixture::prior(vec![1.0], 1.0, 1.0).unwrap();
        let times = [0.0, 1.0, 2.0, 4.0];
        let batches = [(4u64, 9u64), (0, 0), (0, 0), (0, 0)];
        let (_, recs) = cir_filter(&prior, &times, &batches, 0.0).unwrap();
        assert_eq!(recs.len(), 4);
        // full-information weight decays after the single informative batch
        assert!(close(recs[0].weight_fullinfo, 1.0, 1e-15));
        assert!(recs[1].weight_fullinfo < 1.0);
        assert!(recs[2].weight_fullinfo < recs[1].weight_fullinfo);
        // prior weight grows back
        assert!(recs[3].weight_prior > recs[2].weight_prior);
        // s decays between updates and only the first batch adds to it
        assert!(recs[0].s.unwrap() == 4.0);
        assert!(recs[1].s.unwrap() < 4.0);
        assert!(recs[2].s.unwrap() < recs[1].s.unwrap());
        let err = cir_filter(&prior, &[1.0, 1.0], &[(1, 1), (1, 1)], 0.0);
        assert!(matches!(err, Err(Error::NonMonotoneTimes { .. })));
    }

    #[test]
    fn wf_filter_prunes_and_stays_normalized() {
        let prior = DirichletMixture::prior(vec![0.9, 0.7, 0.4], 1.0).unwrap();
        let times = [0.0, 0.5, 1.0];
        let batches = vec![vec![3, 1, 0], vec![0, 2, 2], vec![1, 1, 1]];
        let (state, recs) = wf_filter(&prior, &times, &batches, 1e-8).unwrap();
        let sum: f64 = state.components.values().sum();
        assert!(close(sum, 1.0, 1e-10));
        assert!(recs[2].components_before_prune >= recs[2].components_after_prune);
        assert!(recs[2].cumulative_pruned_mass >= 0.0);
        let (mean, var) = state.moments();
        assert!(close(mean.iter().sum::<f64>(), 1.0, 1e-10));
        assert!(var.iter().all(|&v| v > 0.0));
    }
}
