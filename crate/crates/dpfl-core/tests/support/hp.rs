//! Minimal arbitrary-precision real arithmetic for oracle checks: fixed
//! point with 70 decimal digits over BigInt, with exp/ln/sqrt via Taylor
//! series and Newton iteration. Entirely independent of the f64 formula
//! implementations it is used to check.

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};

/// Working precision in decimal digits (target checks are at 1e-10 relative
/// against >= 50-digit values; the extra digits absorb range reduction).
const DIGITS: u32 = 70;

fn unit() -> BigInt {
    BigInt::from(10u32).pow(DIGITS)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Hp(BigInt);

impl Hp {
    pub fn zero() -> Hp {
        Hp(BigInt::zero())
    }

    pub fn one() -> Hp {
        Hp(unit())
    }

    pub fn from_int(n: i64) -> Hp {
        Hp(BigInt::from(n) * unit())
    }

    /// Exact conversion of the f64 (a dyadic rational) up to the fixed-point
    /// truncation at 10^-70.
    pub fn from_f64(x: f64) -> Hp {
        assert!(x.is_finite(), "oracle inputs must be finite");
        if x == 0.0 {
            return Hp::zero();
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let biased = ((bits >> 52) & 0x7ff) as i64;
        let fraction = bits & 0xf_ffff_ffff_ffff;
        let (mantissa, exponent) = if biased == 0 {
            (BigInt::from(fraction), -1074i64)
        } else {
            (BigInt::from(fraction | (1u64 << 52)), biased - 1075)
        };
        let scaled = mantissa * unit() * sign;
        if exponent >= 0 {
            Hp(scaled << exponent as u32)
        } else {
            Hp(scaled >> (-exponent) as u32)
        }
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::INFINITY) / 1e70
    }

    pub fn abs(&self) -> Hp {
        Hp(self.0.abs())
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn add(&self, rhs: &Hp) -> Hp {
        Hp(&self.0 + &rhs.0)
    }

    pub fn sub(&self, rhs: &Hp) -> Hp {
        Hp(&self.0 - &rhs.0)
    }

    pub fn mul(&self, rhs: &Hp) -> Hp {
        Hp((&self.0 * &rhs.0) / unit())
    }

    pub fn div(&self, rhs: &Hp) -> Hp {
        assert!(!rhs.0.is_zero(), "oracle division by zero");
        Hp((&self.0 * unit()) / &rhs.0)
    }

    pub fn min(self, rhs: Hp) -> Hp {
        if self.0 <= rhs.0 {
            self
        } else {
            rhs
        }
    }

    pub fn max(self, rhs: Hp) -> Hp {
        if self.0 >= rhs.0 {
            self
        } else {
            rhs
        }
    }

    /// exp by argument halving and Taylor summation: exp(x) = exp(x/2^k)^{2^k}.
    pub fn exp(&self) -> Hp {
        let mut halvings = 0u32;
        let mut reduced = self.clone();
        let half = Hp(unit() / 2);
        while reduced.abs().0 > half.0 {
            reduced = Hp(reduced.0 / 2);
            halvings += 1;
            assert!(halvings < 64, "exp argument out of oracle range");
        }
        // Taylor: sum x^i / i! until terms vanish at this precision.
        let mut sum = Hp::one();
        let mut term = Hp::one();
        for i in 1..500 {
            term = term.mul(&reduced);
            term = Hp(term.0 / i);
            if term.0.is_zero() {
                break;
            }
            sum = sum.add(&term);
        }
        for _ in 0..halvings {
            sum = sum.mul(&sum);
        }
        sum
    }

    /// ln via atanh series after scaling into [3/4, 3/2) by powers of two:
    /// ln(x) = 2 atanh((x-1)/(x+1)) + n ln 2.
    pub fn ln(&self) -> Hp {
        assert!(self.0.is_positive(), "oracle ln of a nonpositive value");
        let mut value = self.clone();
        let mut exponent: i64 = 0;
        let lower = Hp(unit() * 3 / 4);
        let upper = Hp(unit() * 3 / 2);
        while value.0 >= upper.0 {
            value = Hp(value.0 / 2);
            exponent += 1;
        }
        while value.0 < lower.0 {
            value = Hp(value.0 * 2);
            exponent -= 1;
        }
        let mut result = atanh_series(&value);
        if exponent != 0 {
            let ln2 = atanh_series(&Hp(unit() * 2)); // ln(2)
            result = result.add(&Hp(ln2.0 * exponent));
        }
        result
    }

    /// sqrt via integer Newton iteration on the scaled value.
    pub fn sqrt(&self) -> Hp {
        assert!(!self.0.is_negative(), "oracle sqrt of a negative value");
        if self.0.is_zero() {
            return Hp::zero();
        }
        let target = &self.0 * unit();
        let mut guess: BigInt = BigInt::from(1) << ((target.bits() / 2 + 1) as u32);
        loop {
            let next = (&guess + &target / &guess) / 2;
            let step: BigInt = &next - &guess;
            if step.abs() <= BigInt::from(1) {
                return Hp(next);
            }
            guess = next;
        }
    }
}

/// 2 atanh((x-1)/(x+1)) = ln(x) for x > 0.
fn atanh_series(x: &Hp) -> Hp {
    let one = Hp::one();
    let ratio = x.sub(&one).div(&x.add(&one));
    let ratio_sq = ratio.mul(&ratio);
    let mut term = ratio.clone();
    let mut sum = Hp::zero();
    for i in 0..800u32 {
        let contribution = Hp(term.0.clone() / (2 * i + 1));
        if contribution.0.is_zero() {
            break;
        }
        sum = sum.add(&contribution);
        term = term.mul(&ratio_sq);
    }
    Hp(sum.0 * 2)
}

#[cfg(test)]
mod self_checks {
    use super::*;

    #[test]
    fn oracle_arithmetic_matches_known_constants() {
        // ln 2 and e to 30+ digits.
        let ln2 = Hp::from_int(2).ln();
        assert!(
            (ln2.to_f64() - std::f64::consts::LN_2).abs() < 1e-15,
            "{}",
            ln2.to_f64()
        );
        let e = Hp::one().exp();
        assert!((e.to_f64() - std::f64::consts::E).abs() < 1e-15);
        let root = Hp::from_int(2).sqrt();
        assert!((root.to_f64() - std::f64::consts::SQRT_2).abs() < 1e-15);
        // Round trip of a dyadic f64 is exact.
        let x = 0.578125f64;
        assert_eq!(Hp::from_f64(x).to_f64(), x);
        // exp(ln(x)) = x.
        let y = Hp::from_f64(3.75);
        let back = y.ln().exp();
        assert!((back.to_f64() - 3.75).abs() < 1e-14);
    }
}
