//! Acceptance suites: each check exercises one verifiable claim about the
//! filters against an independent oracle or an exact structural identity,
//! and reports a machine-readable pass/fail with details.

use crate::dual::{
    block_coeff_detailed, coeff_cache, dw_s_decay, fv_level_dist, BinomialConvention,
    DwDualParams, FvDualParams,
};
use crate::dw::dw_predict;
use crate::fv::{fv_filter, fv_predict};
use crate::lattice::{hypergeom_pmf, hypergeom_pmf_exact, MultiplicityVector, Partition};
use crate::measures::{
    project_state_dw, project_state_fv, BaseMeasure, DwFilterState, FvFilterState, P0,
};
use crate::oracle::{death_generator, expm, rk4};
use crate::parametric::{
    cir_filter, multi_cir_predict, wf_filter, wf_predict, DirichletMixture, GammaMixture,
};
use crate::sim::{
    grid_oracle_cir, mc_duality_check, particle_oracle_wf, sim_cir_hmm, sim_fv_hmm, sim_wf_hmm,
    substream, GridSpec,
};
use crate::{Error, Result};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Duality,
    Projection,
    Oracle,
    Stability,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "duality" => Ok(Suite::Duality),
            "projection" => Ok(Suite::Projection),
            "oracle" => Ok(Suite::Oracle),
            "stability" => Ok(Suite::Stability),
            other => Err(Error::invalid(format!(
                "unknown suite '{other}' (expected duality|projection|oracle|stability)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Duality => "duality",
            Suite::Projection => "projection",
            Suite::Oracle => "oracle",
            Suite::Stability => "stability",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub details: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<Check>,
}

pub fn run_suite(suite: Suite, seed: u64) -> SuiteReport {
    let checks = match suite {
        Suite::Oracle => vec![
            run_check("1-death-kernels-vs-expm", || check_death_kernels()),
            run_check("5-s-ode-rk4", || check_s_ode(seed)),
            run_check("6-cir-vs-grid-oracle", || check_grid_oracle(seed)),
            run_check("7-wf-vs-particle-oracle", || check_particle_oracle(seed)),
            run_check("9-figure-reproduction", || check_figures()),
        ],
        Suite::Projection => vec![
            run_check("2-hypergeometric-merging", || check_hypergeom_merging(seed)),
            run_check("3-fv-wf-commutation", || check_fv_wf_commutation(seed)),
            run_check("4-dw-vs-product-cir", || check_dw_cir_propagation(seed)),
        ],
        Suite::Duality => vec![run_check("8-duality-monte-carlo", || check_duality(seed))],
        Suite::Stability => vec![
            run_check("10-extended-precision", || check_extended_precision()),
            run_check("11-performance-bounds", || check_performance(seed)),
        ],
    };
    SuiteReport {
        suite: suite.name().to_string(),
        seed,
        pass: checks.iter().all(|c| c.pass),
        checks,
    }
}

fn run_check(name: &str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match body() {
        Ok((pass, details)) => Check {
            name: name.to_string(),
            pass,
            details,
        },
        Err(e) => Check {
            name: name.to_string(),
            pass: false,
            details: format!("error: {e}"),
        },
    }
}

// --- oracle suite ----------------------------------------------------------

fn check_death_kernels() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut max_err = 0.0f64;
    let mut max_row = 0.0f64;
    let mut max_ck = 0.0f64;
    for theta in [0.5, 1.0, 3.0] {
        let params = FvDualParams::new(theta, 1.0)?;
        let q = death_generator(theta, 12);
        for t in [0.01, 0.1, 1.0, 10.0] {
            let p_oracle = expm(&q, t)?;
            for total in 1u64..=12 {
                let dist = fv_level_dist(&params, total, t)?;
                let row_sum: f64 = dist.iter().sum();
                max_row = max_row.max((row_sum - 1.0).abs());
                for (level, &d) in dist.iter().enumerate() {
                    max_err = max_err.max((d - p_oracle[total as usize][level]).abs());
                }
            }
        }
        for (t1, t2) in [(0.01, 0.1), (0.1, 1.0), (1.0, 1.0)] {
            let mut cache2 = coeff_cache(&params, t2);
            for total in [6u64, 12] {
                let d1 = fv_level_dist(&params, total, t1)?;
                let direct = fv_level_dist(&params, total, t1 + t2)?;
                for level_n in 0..=total {
                    let mut composite = 0.0;
                    for level_k in level_n..=total {
                        composite +=
                            d1[level_k as usize] * cache2.level_prob(level_k, level_k - level_n)?;
                    }
                    max_ck = max_ck.max((composite - direct[level_n as usize]).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = max_err <= 1e-8 && max_row <= 1e-10 && max_ck <= 1e-8 && elapsed < 10.0;
    Ok((
        pass,
        format!(
            "max kernel err {max_err:.2e} (<=1e-8), row sum err {max_row:.2e} (<=1e-10), \
             Chapman-Kolmogorov err {max_ck:.2e} (<=1e-8), {elapsed:.2}s (<10s)"
        ),
    ))
}

fn check_s_ode(seed: u64) -> Result<(bool, String)> {
    let mut rng = substream(seed, &[105]);
    let mut max_err = 0.0f64;
    let mut max_semi = 0.0f64;
    for _ in 0..50 {
        let beta = rng.random_range(0.2..3.0);
        let s0 = rng.random_range(0.0..5.0);
        let t = rng.random_range(0.05..10.0);
        let params = DwDualParams::new(1.0, beta, 1.0)?;
        let closed = dw_s_decay(&params, s0, t);
        let integrated = rk4(|_, s| -s * (s + beta) / 2.0, s0, 0.0, t, 20_000);
        max_err = max_err.max((closed - integrated).abs());
        let t1 = t * rng.random::<f64>();
        let composed = dw_s_decay(&params, dw_s_decay(&params, s0, t1), t - t1);
        max_semi = max_semi.max((closed - composed).abs());
    }
    let pass = max_err <= 1e-8 && max_semi <= 1e-10;
    Ok((
        pass,
        format!("max RK4 err {max_err:.2e} (<=1e-8), semigroup err {max_semi:.2e} (<=1e-10)"),
    ))
}

fn check_grid_oracle(seed: u64) -> Result<(bool, String)> {
    let start = Instant::now();
    let (alpha, beta) = (1.2, 0.8);
    let schedule: Vec<(f64, u64)> = (0..10).map(|i| (i as f64 * 0.5, 2)).collect();
    let ds = sim_cir_hmm(alpha, beta, 1.0, &schedule, seed ^ 0x6A09)?;
    let times: Vec<f64> = ds.batches.iter().map(|b| b.t).collect();
    let batches: Vec<(u64, u64)> = ds
        .batches
        .iter()
        .map(|b| (b.obs.len() as u64, b.obs.iter().sum::<f64>() as u64))
        .collect();
    let prior = GammaMixture::prior(vec![alpha], beta, 1.0)?;
    let (_, recs) = cir_filter(&prior, &times, &batches, 0.0)?;
    let grid = GridSpec {
        z_max: 40.0,
        n_points: 2000,
    };
    let report = grid_oracle_cir(&times, &batches, alpha, beta, 1.0, &grid)?;
    let mut max_rel = 0.0f64;
    for (g, r) in report.steps.iter().zip(&recs) {
        max_rel = max_rel.max((g.mean - r.mean[0]).abs() / r.mean[0].abs());
        max_rel = max_rel.max((g.var - r.variance[0]).abs() / r.variance[0].abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = max_rel <= 1e-3 && report.warnings.is_empty() && elapsed < 30.0;
    Ok((
        pass,
        format!(
            "10 steps, 2000-point grid: max rel err {max_rel:.2e} (<=1e-3), \
             {} warnings, {elapsed:.2}s (<30s)",
            report.warnings.len()
        ),
    ))
}

fn check_particle_oracle(seed: u64) -> Result<(bool, String)> {
    let start = Instant::now();
    let alpha = vec![0.8, 1.5, 0.7];
    let schedule: Vec<(f64, u64)> = (0..10).map(|i| (i as f64 * 0.8, 10)).collect();
    let ds = sim_wf_hmm(&alpha, 1.0, &schedule, seed ^ 0xBB67)?;
    let times: Vec<f64> = ds.batches.iter().map(|b| b.t).collect();
    let batches: Vec<Vec<u64>> = ds
        .batches
        .iter()
        .map(|b| b.obs.iter().map(|&v| v as u64).collect())
        .collect();
    let prior = DirichletMixture::prior(alpha.clone(), 1.0)?;
    let (_, recs) = wf_filter(&prior, &times, &batches, 1e-10)?;
    let run_once = |particle_seed: u64| -> Result<(f64, usize)> {
        let report = particle_oracle_wf(&times, &batches, &alpha, 1.0, 200_000, particle_seed)?;
        let mut max_z = 0.0f64;
        for (step, rec) in report.steps.iter().zip(&recs) {
            for ((&pf, &se), &exact) in step.mean.iter().zip(&step.se).zip(&rec.mean) {
                max_z = max_z.max((pf - exact).abs() / se.max(1e-300));
            }
        }
        Ok((max_z, report.warnings.len()))
    };
    let (max_z, n_warn) = run_once(seed ^ 0x3C6E)?;
    // a single excursion just past 3 is Monte Carlo noise (30 statistics,
    // replicate-estimated SE); real filter bias survives a fresh-seed rerun
    let mut rerun = String::new();
    let mut pass = max_z <= 3.0;
    if !pass && max_z <= 3.5 {
        let (z2, _) = run_once(seed ^ 0x95E2)?;
        pass = z2 <= 3.0;
        rerun = format!(", borderline rerun max |z| {z2:.2}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass = pass && elapsed < 300.0;
    Ok((
        pass,
        format!(
            "K=3, 10 steps, 200000 particles: max |z| {max_z:.2} (<=3){rerun}, \
             {n_warn} degeneracy warnings, {elapsed:.1}s (<300s)"
        ),
    ))
}

fn check_figures() -> Result<(bool, String)> {
    // one batch then silence: the full-information weight decays from 1 and
    // the prior weight returns to 1
    let beta = 1.0;
    let prior = GammaMixture::prior(vec![1.0], beta, 1.0)?;
    let times: Vec<f64> = (0..26).map(|i| 2.0 * i as f64).collect();
    let mut batches = vec![(0u64, 0u64); 26];
    batches[0] = (1, 3);
    let (_, recs) = cir_filter(&prior, &times, &batches, 0.0)?;
    let mut monotone = (recs[0].weight_fullinfo - 1.0).abs() < 1e-12;
    for w in recs.windows(2) {
        monotone &= w[1].weight_fullinfo <= w[0].weight_fullinfo + 1e-12;
    }
    let last = recs.last().expect("nonempty");
    let decayed = last.weight_fullinfo < 0.01 && last.weight_prior > 0.99;

    // multi-batch run: s jumps by one at each update and decays in between
    let times2: Vec<f64> = (0..7).map(|i| i as f64).collect();
    let batches2: Vec<(u64, u64)> = [2u64, 0, 1, 3, 0, 1, 0].iter().map(|&y| (1, y)).collect();
    let (_, recs2) = cir_filter(&prior, &times2, &batches2, 0.0)?;
    let params = DwDualParams::new(1.0, beta, 1.0)?;
    let mut sawtooth = (recs2[0].s.unwrap() - 1.0).abs() < 1e-12;
    for w in recs2.windows(2) {
        let (s_prev, s_next) = (w[0].s.unwrap(), w[1].s.unwrap());
        let expected = dw_s_decay(&params, s_prev, w[1].time - w[0].time) + 1.0;
        sawtooth &= (s_next - expected).abs() < 1e-12;
        sawtooth &= s_next > 1.0 && s_next - 1.0 < s_prev;
    }
    let pass = monotone && decayed && sawtooth;
    Ok((
        pass,
        format!(
            "fullinfo 1 -> {:.2e} monotone={monotone}, prior {:.6} (> 0.99), sawtooth={sawtooth}",
            last.weight_fullinfo, last.weight_prior
        ),
    ))
}

// --- projection suite ------------------------------------------------------

fn random_counts(rng: &mut ChaCha8Rng, k_atoms: usize, max_total: u64) -> MultiplicityVector {
    loop {
        let mut pairs = Vec::new();
        let mut left = max_total;
        for i in 0..k_atoms {
            let c = rng.random_range(0..=left.min(4));
            if c > 0 {
                pairs.push((i as u32, c));
                left -= c;
            }
        }
        if !pairs.is_empty() {
            return MultiplicityVector::from_pairs(&pairs);
        }
    }
}

fn random_partition(rng: &mut ChaCha8Rng, k_atoms: usize) -> (Partition, Vec<f64>) {
    let n_cells = rng.random_range(1..=k_atoms as u32);
    let cell_of: Vec<u32> = (0..k_atoms).map(|_| rng.random_range(0..n_cells)).collect();
    let mut masses: Vec<f64> = (0..n_cells).map(|_| 0.1 + rng.random::<f64>()).collect();
    let sum: f64 = masses.iter().sum();
    masses.iter_mut().for_each(|m| *m /= sum);
    (Partition::new(cell_of, n_cells).expect("valid partition"), masses)
}

fn check_hypergeom_merging(seed: u64) -> Result<(bool, String)> {
    let mut rng = substream(seed, &[102]);
    let mut max_err = 0.0f64;
    let mut cases = 0u64;
    for _ in 0..200 {
        let k_atoms = rng.random_range(1..=5usize);
        let m = random_counts(&mut rng, k_atoms, 10);
        let (part, _) = random_partition(&mut rng, k_atoms);
        let m_proj = m.project(&part)?;
        let mut grouped: std::collections::BTreeMap<MultiplicityVector, f64> = Default::default();
        for n in m.down_set(u64::MAX >> 1)? {
            let lost = m.sub(&n).expect("down-set member");
            if lost.total() == 0 {
                continue;
            }
            *grouped.entry(n.project(&part)?).or_insert(0.0) += hypergeom_pmf(&lost, &m)?;
        }
        for (c_proj, p) in grouped {
            let lost_proj = m_proj.sub(&c_proj).expect("projection preserves order");
            let direct = hypergeom_pmf(&lost_proj, &m_proj)?;
            max_err = max_err.max((p - direct).abs());
            if let Some(exact) = hypergeom_pmf_exact(&lost_proj, &m_proj) {
                max_err = max_err.max((direct - exact).abs());
            }
            cases += 1;
        }
    }
    let pass = max_err <= 1e-12;
    Ok((
        pass,
        format!("{cases} merged cells over 200 random partitions: max err {max_err:.2e} (<=1e-12)"),
    ))
}

fn random_fv_state(rng: &mut ChaCha8Rng, k_atoms: usize, max_total: u64) -> Result<FvFilterState> {
    let theta = rng.random_range(0.4..3.0);
    let base = BaseMeasure::new(theta, P0::Uniform { a: 0.0, b: 1.0 })?;
    let mut st = FvFilterState::prior(base, 1.0)?;
    for i in 0..k_atoms {
        st.atoms.intern(0.13 * (i as f64 + 1.0))?;
    }
    st.components.clear();
    for _ in 0..rng.random_range(1..=3usize) {
        let key = random_counts(rng, k_atoms, max_total);
        *st.components.entry(key).or_insert(0.0) += 0.1 + rng.random::<f64>();
    }
    let sum: f64 = st.components.values().sum();
    for w in st.components.values_mut() {
        *w /= sum;
    }
    Ok(st)
}

fn check_fv_wf_commutation(seed: u64) -> Result<(bool, String)> {
    let mut rng = substream(seed, &[103]);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let k_atoms = rng.random_range(1..=4usize);
        let st = random_fv_state(&mut rng, k_atoms, 10)?;
        let (part, masses) = random_partition(&mut rng, k_atoms);
        let t = rng.random_range(0.05..2.0);
        let a = project_state_fv(&fv_predict(&st, t)?, &part, &masses)?;
        let b = wf_predict(&project_state_fv(&st, &part, &masses)?, t)?;
        for (key, &wa) in &a.components {
            let wb = b.components.get(key).copied().unwrap_or(0.0);
            max_err = max_err.max((wa - wb).abs());
        }
        for (key, &wb) in &b.components {
            if !a.components.contains_key(key) {
                max_err = max_err.max(wb.abs());
            }
        }
    }
    let pass = max_err <= 1e-10;
    Ok((
        pass,
        format!("100 random states: max weight discrepancy {max_err:.2e} (<=1e-10)"),
    ))
}

fn check_dw_cir_propagation(seed: u64) -> Result<(bool, String)> {
    let mut rng = substream(seed, &[104]);
    let mut max_err = 0.0f64;
    let mut identity_exact = true;
    let mut max_residual = 0.0f64;
    let mut max_s = 0.0f64;
    for _ in 0..100 {
        let k_atoms = rng.random_range(1..=4usize);
        let beta = rng.random_range(0.3..2.5);
        let s0 = rng.random_range(0.0..4.0);
        let t = rng.random_range(0.05..3.0);
        let fv = random_fv_state(&mut rng, k_atoms, 8)?;
        let st = DwFilterState {
            base: fv.base,
            beta,
            s: s0,
            sigma_speed: 1.0,
            atoms: fv.atoms.clone(),
            components: fv.components.clone(),
        };
        let part = Partition::new((0..k_atoms as u32).collect(), k_atoms as u32)?;
        let mut masses: Vec<f64> = (0..k_atoms).map(|_| 0.2 + rng.random::<f64>()).collect();
        let sum: f64 = masses.iter().sum();
        masses.iter_mut().for_each(|m| *m /= sum);

        let a = project_state_dw(
            &dw_predict(&st, t, BinomialConvention::Survivor)?,
            &part,
            &masses,
        )?;
        let b = multi_cir_predict(&project_state_dw(&st, &part, &masses)?, t)?;
        max_err = max_err.max((a.s - b.s).abs());
        for (key, &wa) in &a.components {
            let wb = b.components.get(key).copied().unwrap_or(0.0);
            max_err = max_err.max((wa - wb).abs());
        }
        for (key, &wb) in &b.components {
            if !a.components.contains_key(key) {
                max_err = max_err.max(wb.abs());
            }
        }

        let same = dw_predict(&st, 0.0, BinomialConvention::Survivor)?;
        identity_exact &= same.components == st.components && same.s == st.s;

        let far = dw_predict(&st, 100.0 / beta, BinomialConvention::Survivor)?;
        let residual: f64 = far
            .components
            .iter()
            .filter(|(m, _)| m.total() > 0)
            .map(|(_, &w)| w)
            .sum();
        max_residual = max_residual.max(residual);
        max_s = max_s.max(far.s);
    }
    let pass = max_err <= 1e-10 && identity_exact && max_residual < 1e-6 && max_s < 1e-6;
    Ok((
        pass,
        format!(
            "100 random (t, s0, beta): max discrepancy {max_err:.2e} (<=1e-10), \
             t=0 identity exact={identity_exact}, t=100/beta residual {max_residual:.2e} \
             and S_t {max_s:.2e} (<1e-6)"
        ),
    ))
}

// --- duality suite ---------------------------------------------------------

fn check_duality(seed: u64) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut borderline = 0u32;
    let mut failures = 0u32;
    for i in 0..20u64 {
        let mut rng = substream(seed, &[108, i]);
        let k = 2 + (i % 2) as usize;
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..2.0)).collect();
        let mut x0: Vec<f64> = (0..k).map(|_| 0.05 + rng.random::<f64>()).collect();
        let sum: f64 = x0.iter().sum();
        x0.iter_mut().for_each(|v| *v /= sum);
        let mut m = vec![0u64; k];
        for _ in 0..rng.random_range(1..=3u64) {
            m[rng.random_range(0..k)] += 1;
        }
        let t = rng.random_range(0.8..2.5);
        let r = mc_duality_check(&x0, &m, t, &alpha, 1.0, 100_000, seed.wrapping_add(31 * i))?;
        let mut z = r.z_score.abs();
        if z > 3.0 {
            // one borderline rerun with a fresh seed
            borderline += 1;
            let r2 = mc_duality_check(
                &x0,
                &m,
                t,
                &alpha,
                1.0,
                100_000,
                seed.wrapping_add(31 * i) ^ 0xA54F_F53A,
            )?;
            z = r2.z_score.abs();
            if z > 3.0 {
                failures += 1;
            }
        }
        worst = worst.max(z);
    }
    let pass = failures == 0 && borderline <= 1;
    Ok((
        pass,
        format!(
            "20 configs, N=100000: worst |z| {worst:.2} (<=3), {borderline} borderline rerun(s), \
             {failures} failure(s)"
        ),
    ))
}

// --- stability suite -------------------------------------------------------

fn check_extended_precision() -> Result<(bool, String)> {
    let mut min_pre_clamp = f64::INFINITY;
    let mut extended_used = 0u64;
    let mut total_coeffs = 0u64;
    let mut max_row = 0.0f64;
    for theta in [0.5, 1.0, 3.0] {
        let params = FvDualParams::new(theta, 1.0)?;
        for t in [1e-3, 1e-2] {
            for dead in 1u64..=40 {
                let detail = block_coeff_detailed(theta, 40, dead, t)?;
                min_pre_clamp = min_pre_clamp.min(detail.pre_clamp);
                extended_used += detail.used_extended as u64;
                total_coeffs += 1;
            }
            let dist = fv_level_dist(&params, 40, t)?;
            if dist.iter().any(|&v| v < 0.0) {
                return Ok((false, "negative weight after clamping".to_string()));
            }
            let sum: f64 = dist.iter().sum();
            max_row = max_row.max((sum - 1.0).abs());
        }
    }
    let pass = min_pre_clamp >= -1e-9 && max_row <= 1e-9;
    Ok((
        pass,
        format!(
            "|m|=40: min pre-clamp {min_pre_clamp:.2e} (>=-1e-9), extended path on \
             {extended_used}/{total_coeffs} coefficients, max simplex defect {max_row:.2e}"
        ),
    ))
}

fn check_performance(seed: u64) -> Result<(bool, String)> {
    let base = BaseMeasure::new(1.0, P0::Uniform { a: 0.0, b: 1.0 })?;
    let schedule: Vec<(f64, u64)> = (0..10).map(|i| (i as f64 * 0.5, 10)).collect();
    let ds = sim_fv_hmm(base, 1.0, &schedule, seed ^ 0x510E)?;
    let times: Vec<f64> = ds.batches.iter().map(|b| b.t).collect();
    let batches: Vec<Vec<f64>> = ds.batches.iter().map(|b| b.obs.clone()).collect();
    let prior = FvFilterState::prior(base, 1.0)?;
    let start = Instant::now();
    let (state, recs) = fv_filter(&prior, &times, &batches, 1e-6)?;
    let elapsed = start.elapsed().as_secs_f64();
    let peak = recs
        .iter()
        .map(|r| r.components_before_prune)
        .max()
        .unwrap_or(0);
    let pruned = recs.last().map_or(0.0, |r| r.cumulative_pruned_mass);
    let norm: f64 = state.components.values().sum();
    let pass =
        elapsed < 10.0 && peak <= 100_000 && pruned < 1e-3 && (norm - 1.0).abs() < 1e-9;
    Ok((
        pass,
        format!(
            "10 epochs x 10 obs, prune 1e-6: {elapsed:.2}s (<10s), peak {peak} components \
             (<=100000), pruned mass {pruned:.2e} (<1e-3)"
        ),
    ))
}
