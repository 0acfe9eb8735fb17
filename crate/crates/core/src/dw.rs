//! Dawson-Watanabe filtering: Bayes updates for Poisson point-process
//! batches, dual-driven prediction with the decaying rate offset, and the
//! forward recursion.

use crate::dual::{s_decay_raw, survival_prob_raw, BinomialConvention, CoeffCache};
use crate::fv::{
    check_dataset_times, check_prune_eps, fullinfo_and_prior, logsumexp_normalize,
    propagate_components, urn_log_likelihood, FilterStepRecord,
};
use crate::lattice::MultiplicityVector;
use crate::measures::{prune_components, DwFilterState};
use crate::{Error, Result};
use statrs::function::gamma::ln_gamma;

/// Reweighting convention for the update step.
///
/// `FullMarginal` multiplies each component by the complete batch marginal:
/// the sample-size factor from the Ga(theta+|m|, beta+s) total-mass law and
/// the Poisson count likelihood, times the urn location factor. This makes
/// weights comparable across components with different totals.
/// `PaperLiteral` applies the urn location factor alone; the two coincide
/// whenever all components share one total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DwWeightMode {
    FullMarginal,
    PaperLiteral,
}

/// Conditions the state on one observation batch (one unit of exposure).
/// The rate offset `s` always gains 1, including for an empty batch, which
/// in `FullMarginal` mode is informative through the count likelihood.
pub fn dw_update(
    state: &DwFilterState,
    obs: &[f64],
    mode: DwWeightMode,
) -> Result<(DwFilterState, f64)> {
    let theta = state.base.theta;
    let b = state.beta + state.s;
    let n = obs.len() as u64;
    let mut atoms = state.atoms.clone();
    let mut indexed = Vec::with_capacity(obs.len());
    for &y in obs {
        let idx = atoms.intern(y)?;
        indexed.push((idx, state.base.p0.density(y)));
    }
    let obs_mults =
        MultiplicityVector::from_pairs(&indexed.iter().map(|&(i, _)| (i, 1)).collect::<Vec<_>>());
    let mut entries = Vec::with_capacity(state.components.len());
    for (m, &w) in &state.components {
        let mut logf = urn_log_likelihood(theta, m.total(), m, &indexed);
        if mode == DwWeightMode::FullMarginal {
            let big = theta + m.total() as f64;
            logf += ln_gamma(big + n as f64) - ln_gamma(big) + big * (b.ln() - (b + 1.0).ln())
                - n as f64 * (b + 1.0).ln();
        }
        entries.push((m.t_update(&obs_mults), w.ln() + logf));
    }
    let (components, increment) = logsumexp_normalize(entries)?;
    Ok((
        DwFilterState {
            base: state.base,
            beta: state.beta,
            s: state.s + 1.0,
            sigma_speed: state.sigma_speed,
            atoms,
            components,
        },
        increment,
    ))
}

/// Propagates the state forward by `dt`: counts thin binomially with the
/// survival probability from the current offset, locations split
/// hypergeometrically, and the offset decays to `S_dt`.
///
/// Under `PaperLiteral` the binomial is evaluated at the dead count instead
/// of the survivor count; that form is discontinuous at `dt = 0` (it sends
/// all mass to the origin), which is why `Survivor` is the default.
pub fn dw_predict(
    state: &DwFilterState,
    dt: f64,
    convention: BinomialConvention,
) -> Result<DwFilterState> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time must be nonnegative: {dt}")));
    }
    if dt == 0.0 && convention == BinomialConvention::Survivor {
        return Ok(state.clone());
    }
    let t_eff = state.sigma_speed * dt;
    let p = if dt == 0.0 {
        1.0
    } else {
        survival_prob_raw(state.beta, state.s, t_eff)
    };
    let survivor = convention == BinomialConvention::Survivor;
    // the level weights come from the binomial override, so the cache's own
    // coefficients are never consulted
    let mut cache = CoeffCache::new(state.base.theta, 0.0);
    let components = propagate_components(&state.components, &mut cache, Some((p, survivor)))?;
    Ok(DwFilterState {
        base: state.base,
        beta: state.beta,
        s: s_decay_raw(state.beta, state.s, t_eff),
        sigma_speed: state.sigma_speed,
        atoms: state.atoms.clone(),
        components,
    })
}

/// Runs the filtering recursion; `s` follows a sawtooth path, jumping by one
/// at every update and decaying between batches. Empty batches are valid
/// records, not gaps.
pub fn dw_filter_with(
    prior: &DwFilterState,
    times: &[f64],
    batches: &[Vec<f64>],
    prune_eps: f64,
    mode: DwWeightMode,
    convention: BinomialConvention,
    mut on_step: impl FnMut(&DwFilterState, &FilterStepRecord) -> Result<()>,
) -> Result<(DwFilterState, Vec<FilterStepRecord>)> {
    check_dataset_times(times, batches.len())?;
    check_prune_eps(prune_eps)?;
    let mut state = prior.clone();
    let mut records = Vec::with_capacity(times.len());
    let mut cum_pruned = 0.0;
    let mut prev_t = None;
    for (&t, batch) in times.iter().zip(batches) {
        let mut before = state.components.len();
        if let Some(pt) = prev_t {
            state = dw_predict(&state, t - pt, convention)?;
            before = state.components.len();
            cum_pruned += prune_components(&mut state.components, prune_eps);
        }
        let after = state.components.len();
        let (next, increment) = dw_update(&state, batch, mode)?;
        state = next;
        let (weight_fullinfo, weight_prior) = fullinfo_and_prior(&state.components);
        let record = FilterStepRecord {
            time: t,
            logml_increment: increment,
            components_before_prune: before,
            components_after_prune: after,
            cumulative_pruned_mass: cum_pruned,
            s: Some(state.s),
            weight_fullinfo,
            weight_prior,
        };
        on_step(&state, &record)?;
        records.push(record);
        prev_t = Some(t);
    }
    Ok((state, records))
}

pub fn dw_filter(
    prior: &DwFilterState,
    times: &[f64],
    batches: &[Vec<f64>],
    prune_eps: f64,
    mode: DwWeightMode,
    convention: BinomialConvention,
) -> Result<(DwFilterState, Vec<FilterStepRecord>)> {
    dw_filter_with(prior, times, batches, prune_eps, mode, convention, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Partition;
    use crate::measures::{project_state_dw, BaseMeasure, DwFilterState, P0};
    use crate::parametric::{cir_filter, cir_predict, cir_update, multi_cir_predict, GammaMixture};

    fn prior(theta: f64, beta: f64) -> DwFilterState {
        DwFilterState::prior(
            BaseMeasure::new(theta, P0::Uniform { a: 0.0, b: 1.0 }).unwrap(),
            beta,
            1.0,
        )
        .unwrap()
    }

    fn mv(pairs: &[(u32, u64)]) -> MultiplicityVector {
        MultiplicityVector::from_pairs(pairs)
    }

    #[test]
    fn update_from_prior_is_conjugate() {
        for mode in [DwWeightMode::FullMarginal, DwWeightMode::PaperLiteral] {
            let (post, _) = dw_update(&prior(1.0, 2.0), &[0.3, 0.3, 0.7], mode).unwrap();
            assert_eq!(post.s, 1.0);
            assert_eq!(post.components.len(), 1);
            assert!((post.components[&mv(&[(0, 2), (1, 1)])] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn total_mass_posterior_after_one_batch() {
        let st = prior(1.5, 2.0);
        let (post, _) = dw_update(&st, &[0.1, 0.2, 0.3], DwWeightMode::FullMarginal).unwrap();
        let part = Partition::new(vec![0, 0, 0], 1).unwrap();
        let mix = project_state_dw(&post, &part, &[1.0]).unwrap();
        // Ga(theta + 3, beta + 1)
        assert_eq!(mix.components.len(), 1);
        assert!((mix.components[&vec![3]] - 1.0).abs() < 1e-15);
        assert!((mix.alpha[0] - 1.5).abs() < 1e-15);
        assert!((mix.s - 1.0).abs() < 1e-15);
        let (mean, _) = mix.moments();
        assert!((mean[0] - 4.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn modes_agree_on_equal_totals() {
        let mut st = prior(1.0, 1.0);
        st.atoms.intern(0.2).unwrap();
        st.atoms.intern(0.8).unwrap();
        st.components.clear();
        st.components.insert(mv(&[(0, 2)]), 0.6);
        st.components.insert(mv(&[(1, 2)]), 0.4);
        st.s = 0.7;
        let (a, _) = dw_update(&st, &[0.2, 0.5], DwWeightMode::FullMarginal).unwrap();
        let (b, _) = dw_update(&st, &[0.2, 0.5], DwWeightMode::PaperLiteral).unwrap();
        for (k, w) in &a.components {
            assert!((w - b.components[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_counts_in_full_marginal_mode() {
        let mut st = prior(1.0, 1.0);
        st.atoms.intern(0.2).unwrap();
        st.components.clear();
        st.components.insert(mv(&[(0, 3)]), 0.5);
        st.components.insert(mv(&[]), 0.5);
        st.s = 0.5;
        let (lit, inc_lit) = dw_update(&st, &[], DwWeightMode::PaperLiteral).unwrap();
        assert_eq!(lit.s, 1.5);
        assert!((lit.components[&mv(&[(0, 3)])] - 0.5).abs() < 1e-15);
        assert!((inc_lit - 0.0).abs() < 1e-15);
        let (full, inc_full) = dw_update(&st, &[], DwWeightMode::FullMarginal).unwrap();
        // factor (b/(b+1))^(theta+|m|) favors the lighter component
        let b = 1.5f64;
        let f3 = (b / (b + 1.0)).powf(4.0);
        let f0 = (b / (b + 1.0)).powf(1.0);
        assert!((full.components[&mv(&[])] - f0 / (f0 + f3)).abs() < 1e-12);
        assert!((inc_full - (0.5 * (f0 + f3)).ln()).abs() < 1e-12);
    }

    #[test]
    fn predict_identity_and_worked_thinning() {
        let mut st = prior(1.0, 1.0);
        st.atoms.intern(0.2).unwrap();
        st.atoms.intern(0.8).unwrap();
        st.components.clear();
        st.components.insert(mv(&[(0, 2), (1, 1)]), 1.0);
        st.s = 1.0;
        let same = dw_predict(&st, 0.0, BinomialConvention::Survivor).unwrap();
        assert_eq!(same.components, st.components);
        assert_eq!(same.s, st.s);
        // t = 2 ln 2 gives survival probability 1/3 at beta = s0 = 1
        let t = 2.0 * 2.0f64.ln();
        let out = dw_predict(&st, t, BinomialConvention::Survivor).unwrap();
        assert!((out.components[&mv(&[(0, 1), (1, 1)])] - 4.0 / 27.0).abs() < 1e-12);
        let sum: f64 = out.components.values().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paper_literal_convention_flips_the_binomial() {
        let mut st = prior(1.0, 1.0);
        st.atoms.intern(0.2).unwrap();
        st.components.clear();
        st.components.insert(mv(&[(0, 2)]), 1.0);
        st.s = 1.0;
        let t = 2.0 * 2.0f64.ln();
        let surv = dw_predict(&st, t, BinomialConvention::Survivor).unwrap();
        let lit = dw_predict(&st, t, BinomialConvention::PaperLiteral).unwrap();
        // p = 1/3: survivor weight of keeping both is p^2; literal assigns
        // the dead-count binomial instead
        assert!((surv.components[&mv(&[(0, 2)])] - 1.0 / 9.0).abs() < 1e-12);
        assert!((lit.components[&mv(&[(0, 2)])] - 4.0 / 9.0).abs() < 1e-12);
        // and the literal form is discontinuous at dt = 0
        let lit0 = dw_predict(&st, 0.0, BinomialConvention::PaperLiteral).unwrap();
        assert!((lit0.components[&mv(&[])] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn long_horizon_reaches_prior() {
        let mut st = prior(1.0, 2.0);
        st.atoms.intern(0.2).unwrap();
        st.components.clear();
        st.components.insert(mv(&[(0, 4)]), 1.0);
        st.s = 3.0;
        let out = dw_predict(&st, 100.0, BinomialConvention::Survivor).unwrap();
        assert!(out.components[&mv(&[])] > 1.0 - 1e-9);
        assert!(out.s < 1e-9);
    }

    #[test]
    fn projection_commutes_with_propagation() {
        let mut st = prior(2.0, 1.3);
        for v in [0.1, 0.4, 0.8] {
            st.atoms.intern(v).unwrap();
        }
        st.components.clear();
        st.components.insert(mv(&[(0, 2), (1, 1)]), 0.55);
        st.components.insert(mv(&[(2, 3)]), 0.45);
        st.s = 0.9;
        let part = Partition::new(vec![0, 1, 0], 2).unwrap();
        let masses = [0.3, 0.7];
        let t = 0.7;
        let a = project_state_dw(
            &dw_predict(&st, t, BinomialConvention::Survivor).unwrap(),
            &part,
            &masses,
        )
        .unwrap();
        let b = multi_cir_predict(&project_state_dw(&st, &part, &masses).unwrap(), t).unwrap();
        assert!((a.s - b.s).abs() < 1e-14);
        assert_eq!(a.components.len(), b.components.len());
        for (k, w) in &a.components {
            assert!(
                (w - b.components[k]).abs() < 1e-12,
                "{k:?}: {w} vs {}",
                b.components[k]
            );
        }
    }

    #[test]
    fn total_mass_matches_cir_filter_on_single_batch_runs() {
        // one informative batch, then empty batches: the projected total
        // mass filter and the count-only CIR filter coincide exactly
        let st = prior(1.2, 1.0);
        let times = [0.0, 0.8, 1.7, 3.0];
        let batches = vec![vec![0.3, 0.3, 0.9], vec![], vec![], vec![]];
        let part = Partition::new(vec![0, 0], 1).unwrap();
        let (dw_final, dw_recs) = dw_filter(
            &st,
            &times,
            &batches,
            0.0,
            DwWeightMode::FullMarginal,
            BinomialConvention::Survivor,
        )
        .unwrap();
        let cir_prior = GammaMixture::prior(vec![1.2], 1.0, 1.0).unwrap();
        let counts: Vec<(u64, u64)> = batches.iter().map(|b| (1, b.len() as u64)).collect();
        let (cir_final, cir_recs) = cir_filter(&cir_prior, &times, &counts, 0.0).unwrap();
        let proj = project_state_dw(&dw_final, &part, &[1.0]).unwrap();
        assert!((proj.s - cir_final.s).abs() < 1e-12);
        let mut level: std::collections::BTreeMap<u64, f64> = Default::default();
        for (m, w) in &proj.components {
            *level.entry(m[0]).or_insert(0.0) += w;
        }
        for (k, w) in &cir_final.components {
            assert!(
                (level[&k[0]] - w).abs() < 1e-10,
                "level {}: {} vs {w}",
                k[0],
                level[&k[0]]
            );
        }
        // log-marginal increments agree after the first batch up to the
        // location density constant of the first update
        for (r_dw, r_cir) in dw_recs.iter().zip(&cir_recs).skip(1) {
            assert!((r_dw.logml_increment - r_cir.logml_increment).abs() < 1e-10);
        }
    }

    #[test]
    fn filter_traces_sawtooth_offset() {
        let st = prior(1.0, 1.0);
        let times = [0.0, 1.0, 2.0];
        let batches = vec![vec![0.4], vec![0.4, 0.6], vec![]];
        let (_, recs) = dw_filter(
            &st,
            &times,
            &batches,
            0.0,
            DwWeightMode::FullMarginal,
            BinomialConvention::Survivor,
        )
        .unwrap();
        assert_eq!(recs[0].s, Some(1.0));
        // s decays between updates and jumps by one at each, climbing toward
        // the fixed point of decay-then-bump (about 1.59 at beta = dt = 1)
        let s1 = recs[1].s.unwrap();
        assert!(s1 > 1.0 && s1 < 2.0);
        let s2 = recs[2].s.unwrap();
        assert!(s2 > s1 && s2 < 1.6);
    }

    #[test]
    fn empty_batch_update_commutes_with_total_mass_filter() {
        // two components with different totals: the empty-batch reweighting
        // equals a zero-count CIR exposure on the projected mixture
        let mut st = prior(0.8, 1.4);
        st.atoms.intern(0.3).unwrap();
        st.atoms.intern(0.6).unwrap();
        st.components.clear();
        st.components.insert(mv(&[(0, 1), (1, 2)]), 0.35);
        st.components.insert(mv(&[(0, 1)]), 0.65);
        st.s = 0.4;
        let part = Partition::new(vec![0, 0], 1).unwrap();
        let (updated, _) = dw_update(&st, &[], DwWeightMode::FullMarginal).unwrap();
        let a = project_state_dw(&updated, &part, &[1.0]).unwrap();
        let (b, _) = cir_update(&project_state_dw(&st, &part, &[1.0]).unwrap(), 1, 0).unwrap();
        assert!((a.s - b.s).abs() < 1e-14);
        for (k, w) in &a.components {
            assert!((w - b.components[k]).abs() < 1e-12);
        }
        // predict-level commutation also holds for this mixture
        let t = 0.9;
        let c = project_state_dw(
            &dw_predict(&st, t, BinomialConvention::Survivor).unwrap(),
            &part,
            &[1.0],
        )
        .unwrap();
        let d = cir_predict(&project_state_dw(&st, &part, &[1.0]).unwrap(), t).unwrap();
        for (k, w) in &c.components {
            assert!((w - d.components[k]).abs() < 1e-12);
        }
    }
}
