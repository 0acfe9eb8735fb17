//! Double-double arithmetic for the cancellation-prone death coefficients.
//!
//! A value is an unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`, giving
//! roughly 32 significant decimal digits. Only the operations needed by the
//! alternating partial-fraction sums are provided.

/// Unevaluated pair `hi + lo`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    // requires |a| >= |b|
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let err = a.mul_add(b, -p);
    (p, err)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    /// ln 2 to double-double precision.
    pub const LN2: Dd = Dd {
        hi: 6.931471805599453e-1,
        lo: 2.3190468138462996e-17,
    };

    #[inline]
    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    #[inline]
    pub fn new(hi: f64, lo: f64) -> Dd {
        let (s, e) = quick_two_sum(hi, lo);
        Dd { hi: s, lo: e }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    #[inline]
    pub fn add(self, o: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, o.hi);
        let (t1, t2) = two_sum(self.lo, o.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (s1, s2) = quick_two_sum(s1, s2 + t2);
        Dd { hi: s1, lo: s2 }
    }

    #[inline]
    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    #[inline]
    pub fn mul(self, o: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, o.hi);
        let p2 = p2 + self.hi * o.lo + self.lo * o.hi;
        let (s, e) = quick_two_sum(p1, p2);
        Dd { hi: s, lo: e }
    }

    #[inline]
    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f64(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f64(q2));
        let q3 = r.hi / o.hi;
        let (s, e) = quick_two_sum(q1, q2);
        Dd { hi: s, lo: e }.add(Dd::from_f64(q3))
    }

    #[inline]
    pub fn mul_f64(self, x: f64) -> Dd {
        let (p1, p2) = two_prod(self.hi, x);
        let p2 = p2 + self.lo * x;
        let (s, e) = quick_two_sum(p1, p2);
        Dd { hi: s, lo: e }
    }

    /// Multiply by an exact power of two; exact except at the range limits.
    fn mul_pow2(self, k: i32) -> Dd {
        // split so each factor stays a normal power of two
        let (k1, k2) = if k > 1000 {
            (1000, k - 1000)
        } else if k < -1000 {
            (-1000, k + 1000)
        } else {
            (k, 0)
        };
        let f1 = (2f64).powi(k1);
        let f2 = (2f64).powi(k2);
        Dd {
            hi: self.hi * f1 * f2,
            lo: self.lo * f1 * f2,
        }
    }

    /// exp(self) with roughly 1e-30 relative accuracy on the range used here.
    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        let k = (self.hi / Dd::LN2.hi).round();
        let r = self.sub(Dd::LN2.mul_f64(k));
        // |r| <= ln2/2; Taylor series converges fast. The factorial factor must
        // come in as a division by the exact integer: multiplying by the
        // rounded f64 reciprocal 1/i instead injects an O(u) coefficient error
        // that survives into the result as a ~1e-19 bias.
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for i in 1..40u32 {
            term = term.mul(r).div(Dd::from_f64(f64::from(i)));
            sum = sum.add(term);
            if term.hi.abs() < 1.0e-35 * sum.hi.abs() {
                break;
            }
        }
        sum.mul_pow2(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_identities() {
        let a = Dd::from_f64(1.0).div(Dd::from_f64(3.0));
        let b = a.mul_f64(3.0);
        assert!((b.to_f64() - 1.0).abs() < 1e-31);
        let c = a.add(a).add(a).sub(Dd::ONE);
        assert!(c.hi.abs() < 1e-31);
    }

    #[test]
    fn mul_recovers_lost_bits() {
        // (1 + 2^-60)^2 = 1 + 2^-59 + 2^-120; f64 alone would drop the middle term
        let x = Dd::new(1.0, (2f64).powi(-60));
        let y = x.mul(x);
        let expected_lo = (2f64).powi(-59);
        assert!((y.hi - 1.0).abs() < 1e-300);
        assert!((y.lo - expected_lo).abs() < 1e-33);
    }

    #[test]
    fn exp_matches_f64_at_f64_precision() {
        for &x in &[0.0, -0.5, -1.0, -7.25, -30.0, 3.5, -200.0] {
            let e = Dd::from_f64(x).exp().to_f64();
            let rel = (e - x.exp()).abs() / x.exp();
            assert!(rel < 1e-15, "x={x} dd={e} f64={}", x.exp());
        }
    }

    #[test]
    fn exp_addition_law_beyond_f64() {
        // e^a * e^-a = 1 must hold to double-double accuracy
        for &a in &[0.3, 1.7, 12.0, 55.0] {
            let p = Dd::from_f64(a).exp().mul(Dd::from_f64(-a).exp());
            assert!((p.to_f64() - 1.0).abs() < 1e-28, "a={a} p={:?}", p);
        }
    }

    #[test]
    fn exp_matches_pinned_references() {
        // [DERIVED] 60-digit values rounded to hi + lo pairs. One-sided checks
        // like these catch sign-symmetric error terms that the addition-law
        // identity cancels away.
        let cases = [
            (-0.2875, 0.7501365667709818, 1.590766891046978e-17),
            (-0.84, 0.43171052342907973, -2.2476908185078074e-17),
            (12.7, 327747.9018738116, -2.17319538621043e-11),
            (-30.0, 9.357622968840175e-14, -2.1170146272646406e-30),
            (0.0078125, 1.007843097206448, -6.872774751042842e-17),
        ];
        for &(x, hi, lo) in &cases {
            let e = Dd::from_f64(x).exp();
            let rel = e.sub(Dd::new(hi, lo)).to_f64().abs() / hi.abs();
            assert!(rel < 1e-29, "x={x} rel={rel:e}");
        }
    }

    #[test]
    fn exp_extreme_arguments() {
        assert_eq!(Dd::from_f64(-800.0).exp().to_f64(), 0.0);
        assert!(Dd::from_f64(-700.0).exp().to_f64() > 0.0);
    }
}
