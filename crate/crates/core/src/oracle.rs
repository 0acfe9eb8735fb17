//! Independent numerical oracles: matrix exponentials of Markov generators
//! via uniformization and a classical RK4 integrator. These deliberately
//! avoid the closed forms they are used to verify.

use crate::dual::lambda_rate;
use crate::{Error, Result};

/// Generator of the block-counting death chain on levels `0..=m_max`:
/// level `l` falls to `l-1` at rate `l (theta + l - 1) / 2`.
pub fn death_generator(theta: f64, m_max: u64) -> Vec<Vec<f64>> {
    let n = m_max as usize + 1;
    let mut q = vec![vec![0.0; n]; n];
    for l in 1..n {
        let rate = lambda_rate(theta, l as u64);
        q[l][l] = -rate;
        q[l][l - 1] = rate;
    }
    q
}

fn check_generator(q: &[Vec<f64>]) -> Result<f64> {
    let n = q.len();
    let mut gamma = 0.0f64;
    for (i, row) in q.iter().enumerate() {
        if row.len() != n {
            return Err(Error::invalid("generator must be square"));
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if i != j && v < 0.0 {
                return Err(Error::invalid("off-diagonal rates must be nonnegative"));
            }
            sum += v;
        }
        if sum.abs() > 1e-9 * (1.0 + q[i][i].abs()) {
            return Err(Error::invalid(format!("row {i} does not sum to zero")));
        }
        gamma = gamma.max(-q[i][i]);
    }
    Ok(gamma)
}

/// Poisson-weight accumulation over powers of the uniformized transition
/// matrix. `each` receives the weight w_k = Po(k; gamma t), folds the current
/// power into the sum, and advances the power by one. Every quantity involved
/// is nonnegative, so no cancellation occurs.
fn uniformized_sum(gamma_t: f64, mut each: impl FnMut(f64)) -> Result<()> {
    let mut lw = -gamma_t;
    let mut cum = 0.0;
    let mut k = 0u64;
    let cap = (gamma_t + 14.0 * (gamma_t + 1.0).sqrt() + 80.0) as u64;
    loop {
        let w = lw.exp();
        each(w);
        cum += w;
        // past the mode the weights decay geometrically, so a negligible
        // current weight bounds the whole remaining tail
        if k as f64 >= gamma_t && w <= 1e-17 * cum {
            return Ok(());
        }
        if k > cap {
            return Err(Error::invalid(format!(
                "uniformization series left {} mass after {k} terms",
                1.0 - cum
            )));
        }
        k += 1;
        lw += gamma_t.ln() - (k as f64).ln();
    }
}

/// `exp(t Q)` for a conservative generator `Q`, by uniformization.
pub fn expm(q: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
    let gamma = check_generator(q)?;
    let n = q.len();
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("time must be nonnegative: {t}")));
    }
    let mut id = vec![vec![0.0; n]; n];
    for (i, row) in id.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if gamma * t == 0.0 {
        return Ok(id);
    }
    // P = I + Q / gamma
    let mut p = q.to_vec();
    for (i, row) in p.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v /= gamma;
            if i == j {
                *v += 1.0;
            }
        }
    }
    let mut power = id.clone();
    let mut acc = vec![vec![0.0; n]; n];
    uniformized_sum(gamma * t, |w| {
        for (ar, pr) in acc.iter_mut().zip(&power) {
            for (a, &v) in ar.iter_mut().zip(pr) {
                *a += w * v;
            }
        }
        power = mat_mul(&power, &p);
    })?;
    Ok(acc)
}

/// `v0 exp(t Q)` without forming the full exponential; linear in the number
/// of nonzero rates per step, which keeps large truncated chains tractable.
pub fn expm_action(q: &[Vec<f64>], v0: &[f64], t: f64) -> Result<Vec<f64>> {
    let gamma = check_generator(q)?;
    let n = q.len();
    if v0.len() != n {
        return Err(Error::invalid("vector length must match generator size"));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("time must be nonnegative: {t}")));
    }
    if gamma * t == 0.0 {
        return Ok(v0.to_vec());
    }
    let sparse: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|j| {
            (0..n)
                .filter_map(|i| {
                    let v = if i == j {
                        1.0 + q[i][j] / gamma
                    } else {
                        q[i][j] / gamma
                    };
                    (v != 0.0).then_some((i, v))
                })
                .collect()
        })
        .collect();
    let mut v = v0.to_vec();
    let mut acc = vec![0.0; n];
    uniformized_sum(gamma * t, |w| {
        for (a, &x) in acc.iter_mut().zip(&v) {
            *a += w * x;
        }
        let mut next = vec![0.0; n];
        for (j, col) in sparse.iter().enumerate() {
            for &(i, p) in col {
                next[j] += v[i] * p;
            }
        }
        v = next;
    })?;
    Ok(acc)
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for (or, ar) in out.iter_mut().zip(a) {
        for (k, &av) in ar.iter().enumerate() {
            if av != 0.0 {
                for (o, &bv) in or.iter_mut().zip(&b[k]) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Classical fourth-order Runge-Kutta for a scalar ODE `y' = f(t, y)`.
pub fn rk4(f: impl Fn(f64, f64) -> f64, y0: f64, t0: f64, t1: f64, n_steps: usize) -> f64 {
    assert!(n_steps > 0 && t1 >= t0);
    let h = (t1 - t0) / n_steps as f64;
    let mut y = y0;
    let mut t = t0;
    for _ in 0..n_steps {
        let k1 = f(t, y);
        let k2 = f(t + h / 2.0, y + h / 2.0 * k1);
        let k3 = f(t + h / 2.0, y + h / 2.0 * k2);
        let k4 = f(t + h, y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += h;
    }
    y
}
