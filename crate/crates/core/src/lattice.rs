//! Sparse multiplicity vectors over a countable atom registry and the
//! lattice operations the filters are built on.
//!
//! A multiplicity vector stores strictly positive counts keyed by atom index.
//! The partial order is componentwise; prediction supports live in down-sets
//! of the current mixture support. Enumeration order is lexicographic in the
//! dense sense (compare counts at atom 0, then 1, ...), so every map keyed by
//! `MultiplicityVector` iterates deterministically and output files are
//! reproducible.

use crate::{Error, Result};
use statrs::function::gamma::ln_gamma;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

/// Default cap on enumerated down-set cardinality.
pub const DEFAULT_SUPPORT_CAP: u64 = 10_000_000;

/// Sparse vector of strictly positive atom counts with cached total.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct MultiplicityVector {
    counts: BTreeMap<u32, u64>,
    total: u64,
}

impl MultiplicityVector {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Builds from (atom, count) pairs, dropping zero counts and summing repeats.
    pub fn from_pairs(pairs: &[(u32, u64)]) -> Self {
        let mut counts = BTreeMap::new();
        for &(idx, c) in pairs {
            if c > 0 {
                *counts.entry(idx).or_insert(0) += c;
            }
        }
        let total = counts.values().sum();
        Self { counts, total }
    }

    /// Builds from a dense count vector indexed by atom.
    pub fn from_dense(dense: &[u64]) -> Self {
        let pairs: Vec<(u32, u64)> = dense
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i as u32, c))
            .collect();
        Self::from_pairs(&pairs)
    }

    /// Dense counts over `0..len`; atoms beyond `len` must be absent.
    pub fn to_dense(&self, len: usize) -> Result<Vec<u64>> {
        let mut out = vec![0u64; len];
        for (&idx, &c) in &self.counts {
            let i = idx as usize;
            if i >= len {
                return Err(Error::UnmappedAtom(idx));
            }
            out[i] = c;
        }
        Ok(out)
    }

    pub fn get(&self, idx: u32) -> u64 {
        self.counts.get(&idx).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_zero(&self) -> bool {
        self.total == 0
    }

    /// Number of distinct atoms carried.
    pub fn n_atoms(&self) -> usize {
        self.counts.len()
    }

    /// (atom, count) pairs in ascending atom order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&i, &c)| (i, c))
    }

    pub fn max_atom(&self) -> Option<u32> {
        self.counts.keys().next_back().copied()
    }

    /// Componentwise partial order.
    pub fn leq(&self, other: &Self) -> bool {
        if self.total > other.total {
            return false;
        }
        self.counts.iter().all(|(i, &c)| other.get(*i) >= c)
    }

    /// Componentwise sum; the count-update map of a conjugate Bayes step.
    pub fn add(&self, other: &Self) -> Self {
        let mut counts = self.counts.clone();
        for (&i, &c) in &other.counts {
            *counts.entry(i).or_insert(0) += c;
        }
        Self {
            counts,
            total: self.total + other.total,
        }
    }

    /// Count-update map: folds a batch's observation multiplicities into the
    /// component, appending counts at atoms it has not seen.
    pub fn t_update(&self, obs_mults: &Self) -> Self {
        self.add(obs_mults)
    }

    /// Componentwise difference, defined when `other <= self`.
    pub fn sub(&self, other: &Self) -> Option<Self> {
        if !other.leq(self) {
            return None;
        }
        let mut counts = self.counts.clone();
        for (&i, &c) in &other.counts {
            let e = counts.get_mut(&i).unwrap();
            *e -= c;
            if *e == 0 {
                counts.remove(&i);
            }
        }
        Some(Self {
            counts,
            total: self.total - other.total,
        })
    }

    /// Cardinality of the down-set {n : n <= self}.
    pub fn down_set_card(&self) -> u128 {
        self.counts
            .values()
            .fold(1u128, |acc, &c| acc.saturating_mul(c as u128 + 1))
    }

    /// Enumerates {n : n <= self} in ascending dense-lexicographic order.
    ///
    /// Errors with [`Error::SupportCap`] when the down-set has more than
    /// `cap` elements.
    pub fn down_set(&self, cap: u64) -> Result<Vec<Self>> {
        let card = self.down_set_card();
        if card > cap as u128 {
            return Err(Error::SupportCap { needed: card, cap });
        }
        let atoms: Vec<u32> = self.counts.keys().copied().collect();
        let maxes: Vec<u64> = self.counts.values().copied().collect();
        let k = atoms.len();
        let mut cur = vec![0u64; k];
        let mut out = Vec::with_capacity(card as usize);
        loop {
            let pairs: Vec<(u32, u64)> = atoms
                .iter()
                .zip(cur.iter())
                .filter(|(_, &c)| c > 0)
                .map(|(&a, &c)| (a, c))
                .collect();
            out.push(Self::from_pairs(&pairs));
            // odometer: last atom fastest, so output is dense-lex ascending
            let mut pos = k;
            loop {
                if pos == 0 {
                    return Ok(out);
                }
                pos -= 1;
                if cur[pos] < maxes[pos] {
                    cur[pos] += 1;
                    break;
                }
                cur[pos] = 0;
            }
        }
    }

    /// Projects counts onto partition cells, yielding a vector over cell indices.
    pub fn project(&self, part: &Partition) -> Result<Self> {
        let mut pairs: Vec<(u32, u64)> = Vec::with_capacity(self.counts.len());
        for (&idx, &c) in &self.counts {
            pairs.push((part.cell_of(idx)?, c));
        }
        Ok(Self::from_pairs(&pairs))
    }
}

impl Ord for MultiplicityVector {
    /// Dense lexicographic order by atom index with implicit zeros.
    fn cmp(&self, other: &Self) -> Ordering {
        let mut a = self.counts.iter().peekable();
        let mut b = other.counts.iter().peekable();
        loop {
            match (a.peek(), b.peek()) {
                (None, None) => return Ordering::Equal,
                (Some(_), None) => return Ordering::Greater,
                (None, Some(_)) => return Ordering::Less,
                (Some(&(&ia, &ca)), Some(&(&ib, &cb))) => match ia.cmp(&ib) {
                    // smaller index means the other side holds a zero there
                    Ordering::Less => return Ordering::Greater,
                    Ordering::Greater => return Ordering::Less,
                    Ordering::Equal => match ca.cmp(&cb) {
                        Ordering::Equal => {
                            a.next();
                            b.next();
                        }
                        ord => return ord,
                    },
                },
            }
        }
    }
}

impl PartialOrd for MultiplicityVector {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Union of down-sets of several vectors, deduplicated, dense-lex ascending.
pub fn down_set_union<'a, I>(vectors: I, cap: u64) -> Result<Vec<MultiplicityVector>>
where
    I: IntoIterator<Item = &'a MultiplicityVector>,
{
    let mut set: BTreeSet<MultiplicityVector> = BTreeSet::new();
    for m in vectors {
        let card = m.down_set_card();
        if card > cap as u128 {
            return Err(Error::SupportCap { needed: card, cap });
        }
        for n in m.down_set(cap)? {
            set.insert(n);
            if set.len() as u64 > cap {
                return Err(Error::SupportCap {
                    needed: set.len() as u128,
                    cap,
                });
            }
        }
    }
    Ok(set.into_iter().collect())
}

/// Surjective map from atom indices onto `0..n_cells`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    cell_of: Vec<u32>,
    n_cells: u32,
}

impl Partition {
    /// `cell_of[atom]` gives the cell of each atom index below `cell_of.len()`.
    pub fn new(cell_of: Vec<u32>, n_cells: u32) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::invalid("partition needs at least one cell"));
        }
        if let Some(&bad) = cell_of.iter().find(|&&c| c >= n_cells) {
            return Err(Error::invalid(format!(
                "cell index {bad} out of range for {n_cells} cells"
            )));
        }
        Ok(Self { cell_of, n_cells })
    }

    pub fn n_cells(&self) -> u32 {
        self.n_cells
    }

    pub fn n_atoms_mapped(&self) -> usize {
        self.cell_of.len()
    }

    pub fn cell_of(&self, atom: u32) -> Result<u32> {
        self.cell_of
            .get(atom as usize)
            .copied()
            .ok_or(Error::UnmappedAtom(atom))
    }
}

/// log C(n, k); zero when k == 0 or k == n.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    if k == 0 || k == n {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// C(n, k) in exact integer arithmetic; `None` on u128 overflow.
pub fn binomial_exact(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return None;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128; // exact: C(n,i+1) divides the running product
    }
    Some(acc)
}

/// Binomial pmf `P(X = k)` for `X ~ Bin(n, p)`.
pub fn binom_pmf(k: u64, n: u64, p: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p));
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

/// Multivariate hypergeometric pmf of drawing `sub` when removing `|sub|`
/// items uniformly without replacement from `m`:
/// `prod_j C(m_j, sub_j) / C(|m|, |sub|)`.
///
/// Symmetric between the removed and the surviving part. Exact integer
/// arithmetic while the binomials fit; log-gamma route beyond.
pub fn hypergeom_pmf(sub: &MultiplicityVector, m: &MultiplicityVector) -> Result<f64> {
    if !sub.leq(m) {
        return Err(Error::invalid("hypergeometric pmf needs sub <= m"));
    }
    if let Some(v) = hypergeom_pmf_exact(sub, m) {
        return Ok(v);
    }
    hypergeom_pmf_ln(sub, m)
}

/// Log-gamma evaluation of the same pmf; assumes `sub <= m`.
fn hypergeom_pmf_ln(sub: &MultiplicityVector, m: &MultiplicityVector) -> Result<f64> {
    let mut ln = -ln_binomial(m.total(), sub.total());
    for (idx, c) in sub.iter() {
        ln += ln_binomial(m.get(idx), c);
    }
    Ok(ln.exp())
}

/// Exact-arithmetic hypergeometric pmf, valid while products fit in u128
/// (always the case for |m| <= 20). Cross-check path for the log-gamma route.
pub fn hypergeom_pmf_exact(sub: &MultiplicityVector, m: &MultiplicityVector) -> Option<f64> {
    if !sub.leq(m) {
        return None;
    }
    let mut num: u128 = 1;
    for (idx, c) in sub.iter() {
        num = num.checked_mul(binomial_exact(m.get(idx), c)?)?;
    }
    let den = binomial_exact(m.total(), sub.total())?;
    if num > (1u128 << 53) || den > (1u128 << 53) {
        return None;
    }
    Some(num as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(pairs: &[(u32, u64)]) -> MultiplicityVector {
        MultiplicityVector::from_pairs(pairs)
    }

    #[test]
    fn canonical_form_drops_zeros() {
        let m = mv(&[(3, 0), (1, 2), (7, 1)]);
        assert_eq!(m.total(), 3);
        assert_eq!(m.n_atoms(), 2);
        assert_eq!(m.get(3), 0);
        assert_eq!(m, mv(&[(7, 1), (1, 2)]));
    }

    #[test]
    fn partial_order_and_arithmetic() {
        let m = mv(&[(0, 2), (1, 1)]);
        let n = mv(&[(0, 1)]);
        assert!(n.leq(&m));
        assert!(!m.leq(&n));
        let incomparable = mv(&[(2, 1)]);
        assert!(!incomparable.leq(&m));
        assert!(!m.leq(&incomparable));
        assert_eq!(m.sub(&n).unwrap(), mv(&[(0, 1), (1, 1)]));
        assert_eq!(n.add(&mv(&[(0, 1), (1, 1)])), m);
        assert!(m.sub(&incomparable).is_none());
    }

    #[test]
    fn down_set_of_two_one() {
        let m = mv(&[(0, 2), (1, 1)]);
        let d = m.down_set(1000).unwrap();
        assert_eq!(d.len(), 6);
        let expect = [
            mv(&[]),
            mv(&[(1, 1)]),
            mv(&[(0, 1)]),
            mv(&[(0, 1), (1, 1)]),
            mv(&[(0, 2)]),
            mv(&[(0, 2), (1, 1)]),
        ];
        assert_eq!(d, expect.to_vec());
        // ascending dense-lex order
        for w in d.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn down_set_cap_is_a_distinct_error() {
        let m = mv(&[(0, 99), (1, 99), (2, 99)]);
        match m.down_set(1000) {
            Err(Error::SupportCap { needed, cap }) => {
                assert_eq!(needed, 1_000_000);
                assert_eq!(cap, 1000);
            }
            other => panic!("expected SupportCap, got {other:?}"),
        }
    }

    #[test]
    fn down_set_union_dedups() {
        let a = mv(&[(0, 1), (1, 1)]);
        let b = mv(&[(0, 2)]);
        let u = down_set_union([&a, &b], 100).unwrap();
        assert_eq!(u.len(), 5); // {0, e0, e1, e0+e1, 2e0}, zero counted once
        for w in u.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn projection_merges_counts() {
        let m = mv(&[(0, 2), (1, 1), (3, 4)]);
        let part = Partition::new(vec![0, 1, 1, 0], 2).unwrap();
        let p = m.project(&part).unwrap();
        assert_eq!(p, mv(&[(0, 6), (1, 1)]));
        assert_eq!(p.total(), m.total());
        let unmapped = mv(&[(9, 1)]);
        assert!(matches!(
            unmapped.project(&part),
            Err(Error::UnmappedAtom(9))
        ));
    }

    #[test]
    fn spec_projection_example() {
        let m = mv(&[(0, 2), (1, 1), (2, 3)]);
        let part = Partition::new(vec![0, 0, 1], 2).unwrap();
        assert_eq!(m.project(&part).unwrap(), mv(&[(0, 3), (1, 3)]));
    }

    #[test]
    fn hypergeom_matches_hand_values() {
        // remove one of three items from m=(2,1): chance the removed one is
        // the singleton atom is 1/3
        let m = mv(&[(0, 2), (1, 1)]);
        let i = mv(&[(1, 1)]);
        assert!((hypergeom_pmf(&i, &m).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // survivors form (1,1): C(2,1)C(1,1)/C(3,2) = 2/3
        let n = mv(&[(0, 1), (1, 1)]);
        assert!((hypergeom_pmf(&n, &m).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hypergeom_normalizes_per_level() {
        let m = mv(&[(0, 3), (1, 2), (2, 2)]);
        for level in 0..=m.total() {
            let mut sum = 0.0;
            for n in m.down_set(10_000).unwrap() {
                if n.total() == level {
                    sum += hypergeom_pmf(&n, &m).unwrap();
                }
            }
            assert!((sum - 1.0).abs() < 1e-13, "level {level}: {sum}");
        }
    }

    #[test]
    fn hypergeom_log_route_matches_exact_route() {
        let m = mv(&[(0, 8), (1, 5), (2, 4), (3, 3)]);
        for n in m.down_set(100_000).unwrap() {
            let a = hypergeom_pmf_ln(&n, &m).unwrap();
            let b = hypergeom_pmf_exact(&n, &m).unwrap();
            assert!((a - b).abs() <= 5e-13 * b.max(1e-300), "{n:?}: {a} vs {b}");
        }
    }

    #[test]
    fn binomial_exact_values() {
        assert_eq!(binomial_exact(20, 10), Some(184_756));
        assert_eq!(binomial_exact(0, 0), Some(1));
        assert_eq!(binomial_exact(64, 32).is_some(), true);
        assert!((ln_binomial(20, 10).exp() - 184_756.0).abs() < 1e-7);
    }

    #[test]
    fn binom_pmf_edges_and_mass() {
        assert_eq!(binom_pmf(0, 5, 0.0), 1.0);
        assert_eq!(binom_pmf(5, 5, 1.0), 1.0);
        assert_eq!(binom_pmf(2, 5, 1.0), 0.0);
        let total: f64 = (0..=7).map(|k| binom_pmf(k, 7, 0.37)).sum();
        assert!((total - 1.0).abs() < 1e-13);
    }

    #[test]
    fn dense_roundtrip() {
        let m = mv(&[(0, 2), (2, 5)]);
        let d = m.to_dense(3).unwrap();
        assert_eq!(d, vec![2, 0, 5]);
        assert_eq!(MultiplicityVector::from_dense(&d), m);
        assert!(m.to_dense(2).is_err());
    }
}
