//! Exact rational numbers.
//!
//! Values live in an `i128` fast path and are promoted to arbitrary
//! precision only when an intermediate result overflows. A value is stored
//! in the small form whenever its reduced numerator and denominator both fit
//! in `i128`, so structural equality is value equality.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone)]
enum Repr {
    // den > 0, gcd(num, den) == 1
    Small { num: i128, den: i128 },
    Big(Box<BigRational>),
}

#[derive(Clone)]
pub struct Rational(Repr);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid rational literal `{0}`")]
pub struct ParseRationalError(pub String);

impl Rational {
    pub const ZERO: Rational = Rational(Repr::Small { num: 0, den: 1 });
    pub const ONE: Rational = Rational(Repr::Small { num: 1, den: 1 });

    pub fn new(num: i128, den: i128) -> Rational {
        assert!(den != 0, "zero denominator");
        let g = num.gcd(&den);
        let (mut n, mut d) = (num / g, den / g);
        if d < 0 {
            match (n.checked_neg(), d.checked_neg()) {
                (Some(nn), Some(nd)) => {
                    n = nn;
                    d = nd;
                }
                _ => return Rational::from_big(BigRational::new(BigInt::from(num), BigInt::from(den))),
            }
        }
        Rational(Repr::Small { num: n, den: d })
    }

    pub fn from_integer(v: i128) -> Rational {
        Rational(Repr::Small { num: v, den: 1 })
    }

    fn from_big(b: BigRational) -> Rational {
        // BigRational is kept reduced with a positive denominator.
        match (b.numer().to_i128(), b.denom().to_i128()) {
            (Some(num), Some(den)) => Rational(Repr::Small { num, den }),
            _ => Rational(Repr::Big(Box::new(b))),
        }
    }

    fn to_big(&self) -> BigRational {
        match &self.0 {
            Repr::Small { num, den } => BigRational::new_raw(BigInt::from(*num), BigInt::from(*den)),
            Repr::Big(b) => (**b).clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.0, Repr::Small { num: 0, .. })
    }

    pub fn is_negative(&self) -> bool {
        match &self.0 {
            Repr::Small { num, .. } => *num < 0,
            Repr::Big(b) => b.is_negative(),
        }
    }

    pub fn is_positive(&self) -> bool {
        !self.is_zero() && !self.is_negative()
    }

    pub fn is_integer(&self) -> bool {
        match &self.0 {
            Repr::Small { den, .. } => *den == 1,
            Repr::Big(b) => b.is_integer(),
        }
    }

    /// True when the value needed arbitrary precision.
    pub fn is_big(&self) -> bool {
        matches!(self.0, Repr::Big(_))
    }

    pub fn numer_denom_i128(&self) -> Option<(i128, i128)> {
        match &self.0 {
            Repr::Small { num, den } => Some((*num, *den)),
            Repr::Big(_) => None,
        }
    }

    pub fn recip(&self) -> Rational {
        assert!(!self.is_zero(), "reciprocal of zero");
        match &self.0 {
            Repr::Small { num, den } => Rational::new(*den, *num),
            Repr::Big(b) => Rational::from_big(b.recip()),
        }
    }

    pub fn floor(&self) -> Rational {
        match &self.0 {
            Repr::Small { num, den } => Rational::from_integer(num.div_floor(den)),
            Repr::Big(b) => Rational::from_big(b.floor()),
        }
    }

    pub fn ceil(&self) -> Rational {
        match &self.0 {
            Repr::Small { num, den } => {
                Rational::from_integer(num.div_floor(den) + i128::from(num.mod_floor(den) != 0))
            }
            Repr::Big(b) => Rational::from_big(b.ceil()),
        }
    }

    /// Nearest integer, halves rounded up.
    pub fn round_half_up(&self) -> Rational {
        (self + &Rational::new(1, 2)).floor()
    }

    pub fn to_i128(&self) -> Option<i128> {
        match &self.0 {
            Repr::Small { num, den: 1 } => Some(*num),
            _ => None,
        }
    }

    pub fn to_u64(&self) -> Option<u64> {
        self.to_i128().and_then(|v| u64::try_from(v).ok())
    }

    pub fn to_f64(&self) -> f64 {
        match &self.0 {
            Repr::Small { num, den } => {
                if num.unsigned_abs() < (1u128 << 53) && (*den as u128) < (1u128 << 53) {
                    *num as f64 / *den as f64
                } else {
                    self.to_big().to_f64().unwrap_or(f64::NAN)
                }
            }
            Repr::Big(b) => b.to_f64().unwrap_or(f64::NAN),
        }
    }

    /// Nearest rational with the given denominator (halves rounded up).
    pub fn from_f64_snapped(x: f64, den: i128) -> Rational {
        assert!(x.is_finite(), "non-finite value");
        Rational::new((x * den as f64).round() as i128, den)
    }

    pub fn min(self, other: Rational) -> Rational {
        if other < self {
            other
        } else {
            self
        }
    }

    pub fn max(self, other: Rational) -> Rational {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn abs(&self) -> Rational {
        if self.is_negative() {
            -self
        } else {
            self.clone()
        }
    }

    fn small_add(a: i128, b: i128, c: i128, d: i128) -> Option<Rational> {
        let g = b.gcd(&d);
        let (bg, dg) = (b / g, d / g);
        let num = a.checked_mul(dg)?.checked_add(c.checked_mul(bg)?)?;
        let den = bg.checked_mul(d)?;
        Some(Rational::new(num, den))
    }

    fn small_mul(a: i128, b: i128, c: i128, d: i128) -> Option<Rational> {
        let g1 = a.gcd(&d).max(1);
        let g2 = c.gcd(&b).max(1);
        let num = (a / g1).checked_mul(c / g2)?;
        let den = (b / g2).checked_mul(d / g1)?;
        Some(Rational::new(num, den))
    }
}

impl Default for Rational {
    fn default() -> Self {
        Rational::ZERO
    }
}

impl From<i64> for Rational {
    fn from(v: i64) -> Self {
        Rational::from_integer(v as i128)
    }
}

impl From<u64> for Rational {
    fn from(v: u64) -> Self {
        Rational::from_integer(v as i128)
    }
}

impl From<u32> for Rational {
    fn from(v: u32) -> Self {
        Rational::from_integer(v as i128)
    }
}

impl PartialEq for Rational {
    fn eq(&self, other: &Self) -> bool {
        match (&self.0, &other.0) {
            (Repr::Small { num: a, den: b }, Repr::Small { num: c, den: d }) => a == c && b == d,
            (Repr::Big(x), Repr::Big(y)) => x == y,
            _ => false,
        }
    }
}

impl Eq for Rational {}

impl Hash for Rational {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match &self.0 {
            Repr::Small { num, den } => {
                0u8.hash(state);
                num.hash(state);
                den.hash(state);
            }
            Repr::Big(b) => {
                1u8.hash(state);
                b.hash(state);
            }
        }
    }
}

impl Ord for Rational {
    fn cmp(&self, other: &Self) -> Ordering {
        if let (Repr::Small { num: a, den: b }, Repr::Small { num: c, den: d }) = (&self.0, &other.0) {
            if b == d {
                return a.cmp(c);
            }
            if let (Some(l), Some(r)) = (a.checked_mul(*d), c.checked_mul(*b)) {
                return l.cmp(&r);
            }
        }
        self.to_big().cmp(&other.to_big())
    }
}

impl PartialOrd for Rational {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<'a> Add<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn add(self, rhs: &Rational) -> Rational {
        if let (Repr::Small { num: a, den: b }, Repr::Small { num: c, den: d }) = (&self.0, &rhs.0) {
            if let Some(r) = Rational::small_add(*a, *b, *c, *d) {
                return r;
            }
        }
        Rational::from_big(self.to_big() + rhs.to_big())
    }
}

impl<'a> Sub<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn sub(self, rhs: &Rational) -> Rational {
        self + &(-rhs)
    }
}

impl<'a> Mul<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn mul(self, rhs: &Rational) -> Rational {
        if let (Repr::Small { num: a, den: b }, Repr::Small { num: c, den: d }) = (&self.0, &rhs.0) {
            if let Some(r) = Rational::small_mul(*a, *b, *c, *d) {
                return r;
            }
        }
        Rational::from_big(self.to_big() * rhs.to_big())
    }
}

impl<'a> Div<&'a Rational> for &'a Rational {
    type Output = Rational;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: &Rational) -> Rational {
        self * &rhs.recip()
    }
}

impl Neg for &Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        match &self.0 {
            Repr::Small { num, den } => match num.checked_neg() {
                Some(n) => Rational(Repr::Small { num: n, den: *den }),
                None => Rational::from_big(-self.to_big()),
            },
            Repr::Big(b) => Rational::from_big(-(**b).clone()),
        }
    }
}

impl Neg for Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        -&self
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr<Rational> for Rational {
            type Output = Rational;
            fn $m(self, rhs: Rational) -> Rational {
                (&self).$m(&rhs)
            }
        }
        impl<'a> $tr<&'a Rational> for Rational {
            type Output = Rational;
            fn $m(self, rhs: &Rational) -> Rational {
                (&self).$m(rhs)
            }
        }
        impl<'a> $tr<Rational> for &'a Rational {
            type Output = Rational;
            fn $m(self, rhs: Rational) -> Rational {
                self.$m(&rhs)
            }
        }
    };
}

forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);
forward_owned!(Div, div);

impl std::iter::Sum for Rational {
    fn sum<I: Iterator<Item = Rational>>(iter: I) -> Rational {
        iter.fold(Rational::ZERO, |acc, x| acc + x)
    }
}

impl<'a> std::iter::Sum<&'a Rational> for Rational {
    fn sum<I: Iterator<Item = &'a Rational>>(iter: I) -> Rational {
        iter.fold(Rational::ZERO, |acc, x| acc + x)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Repr::Small { num, den: 1 } => write!(f, "{num}"),
            Repr::Small { num, den } => write!(f, "{num}/{den}"),
            Repr::Big(b) if b.denom().is_one() => write!(f, "{}", b.numer()),
            Repr::Big(b) => write!(f, "{}/{}", b.numer(), b.denom()),
        }
    }
}

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

fn parse_bigint(s: &str) -> Option<BigInt> {
    if s.is_empty() {
        return None;
    }
    s.parse::<BigInt>().ok()
}

/// Accepts `n`, `n/d` and plain decimals such as `0.35` or `-1.5e-3`.
impl FromStr for Rational {
    type Err = ParseRationalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseRationalError(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n = parse_bigint(n.trim()).ok_or_else(err)?;
            let d = parse_bigint(d.trim()).ok_or_else(err)?;
            if d.is_zero() {
                return Err(err());
            }
            return Ok(Rational::from_big(BigRational::new(n, d)));
        }
        let (mantissa, exp) = match t.find(['e', 'E']) {
            Some(i) => (&t[..i], t[i + 1..].parse::<i32>().map_err(|_| err())?),
            None => (t, 0),
        };
        let (neg, body) = match mantissa.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
        };
        let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
            return Err(err());
        }
        let digits = format!("{int_part}{frac_part}");
        let mut num = parse_bigint(&digits).ok_or_else(err)?;
        if neg {
            num = -num;
        }
        let scale = exp - frac_part.len() as i32;
        let ten = BigInt::from(10);
        let value = if scale >= 0 {
            BigRational::from_integer(num * num_traits::pow(ten, scale as usize))
        } else {
            BigRational::new(num, num_traits::pow(ten, (-scale) as usize))
        };
        Ok(Rational::from_big(value))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Lit {
            Text(String),
            Int(i64),
            Float(f64),
        }
        match Lit::deserialize(deserializer)? {
            Lit::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Lit::Int(v) => Ok(Rational::from(v)),
            // shortest round-trip decimal, so 0.3 becomes 3/10
            Lit::Float(v) if v.is_finite() => format!("{v}").parse().map_err(serde::de::Error::custom),
            Lit::Float(v) => Err(serde::de::Error::custom(format!("non-finite number {v}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn reduced_on_construction() {
        assert_eq!(r(2, 4), r(1, 2));
        assert_eq!(r(3, -6), r(-1, 2));
        assert_eq!(r(0, 7), Rational::ZERO);
    }

    #[test]
    fn basic_ops() {
        assert_eq!(r(1, 2) + r(1, 3), r(5, 6));
        assert_eq!(r(1, 2) - r(1, 2), Rational::ZERO);
        assert_eq!(r(3, 4) * r(2, 3), r(1, 2));
        assert_eq!(r(1, 4) / r(1, 2), r(1, 2));
        assert!(r(1, 3) < r(1, 2));
    }

    #[test]
    fn floor_ceil_round() {
        assert_eq!(r(7, 2).floor(), Rational::from(3i64));
        assert_eq!(r(7, 2).ceil(), Rational::from(4i64));
        assert_eq!(r(-7, 2).floor(), Rational::from(-4i64));
        assert_eq!(r(-7, 2).ceil(), Rational::from(-3i64));
        assert_eq!(r(70, 3).round_half_up(), Rational::from(23i64));
        assert_eq!(r(5, 2).round_half_up(), Rational::from(3i64));
        assert_eq!(Rational::from(4i64).ceil(), Rational::from(4i64));
    }

    #[test]
    fn overflow_promotes_and_demotes() {
        let big = r(i128::MAX, 3);
        let sum = &big + &big;
        assert!(sum.is_big());
        let back = &sum - &big;
        assert_eq!(back, big);
        assert!(!back.is_big());
        let tiny = r(1, i128::MAX) * r(1, 7);
        assert!(tiny.is_big());
        assert!(tiny.is_positive());
        assert!(tiny < r(1, i128::MAX));
    }

    #[test]
    fn parse_forms() {
        assert_eq!("3/10".parse::<Rational>().unwrap(), r(3, 10));
        assert_eq!("0.3".parse::<Rational>().unwrap(), r(3, 10));
        assert_eq!("-1.25".parse::<Rational>().unwrap(), r(-5, 4));
        assert_eq!("2".parse::<Rational>().unwrap(), r(2, 1));
        assert_eq!("1e-3".parse::<Rational>().unwrap(), r(1, 1000));
        assert!("1/0".parse::<Rational>().is_err());
        assert!("abc".parse::<Rational>().is_err());
        assert!(".".parse::<Rational>().is_err());
    }

    #[test]
    fn serde_text_and_numbers() {
        let v: Rational = serde_json::from_str("0.3").unwrap();
        assert_eq!(v, r(3, 10));
        let v: Rational = serde_json::from_str("\"41/2\"").unwrap();
        assert_eq!(v, r(41, 2));
        assert_eq!(serde_json::to_string(&r(41, 2)).unwrap(), "\"41/2\"");
    }

    fn arb_rational() -> impl Strategy<Value = Rational> {
        (-1_000_000i128..1_000_000, 1i128..=1_000_000).prop_map(|(n, d)| Rational::new(n, d))
    }

    proptest! {
        #[test]
        fn addition_is_associative(a in arb_rational(), b in arb_rational(), c in arb_rational()) {
            prop_assert_eq!((&a + &b) + &c, &a + &(&b + &c));
        }

        #[test]
        fn multiplication_is_associative(a in arb_rational(), b in arb_rational(), c in arb_rational()) {
            prop_assert_eq!((&a * &b) * &c, &a * &(&b * &c));
        }

        #[test]
        fn display_parse_round_trip(a in arb_rational()) {
            prop_assert_eq!(a.to_string().parse::<Rational>().unwrap(), a);
        }
    }
}
