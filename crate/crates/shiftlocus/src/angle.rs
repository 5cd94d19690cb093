//! Exact circle angles and escape heights.
//!
//! Angles live on `R/Z`, measured in turns, and are kept as reduced
//! rationals normalized to `[0, 1)`. Heights are positive rationals; the
//! dynamically meaningful questions about a height (which annular band does
//! it fall in, does it sit exactly on a band boundary) reduce to comparing
//! `h^2` against odd powers of `q`, which we do in big integers so no
//! intermediate can overflow.

use num_bigint::BigInt;
use num_rational::Rational64;
use num_traits::{One, Signed, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

/// An external angle in turns, normalized to `[0, 1)`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Angle(Rational64);

impl Angle {
    /// Wraps a rational number of turns into `[0, 1)`.
    pub fn new(r: Rational64) -> Self {
        let mut v = r - r.floor();
        if v < Rational64::zero() {
            // r.floor() is exact, so this only triggers on pathological
            // inputs; normalize anyway.
            v += Rational64::one();
        }
        Angle(v)
    }

    pub fn from_ratio(num: i64, den: i64) -> Self {
        assert!(den != 0, "angle denominator must be nonzero");
        Angle::new(Rational64::new(num, den))
    }

    pub fn zero() -> Self {
        Angle(Rational64::zero())
    }

    pub fn value(self) -> Rational64 {
        self.0
    }

    pub fn numer(self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(self) -> i64 {
        *self.0.denom()
    }

    pub fn as_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// Image under angle `q`-tupling, `theta -> q * theta mod 1`.
    pub fn image(self, q: u32) -> Self {
        Angle::new(self.0 * Rational64::from_integer(q as i64))
    }

    /// The `q` preimages under angle `q`-tupling, in increasing order.
    ///
    /// The `j`-th preimage `(theta + j) / q` lies in `[j/q, (j+1)/q)`, so
    /// ascending `j` already gives ascending angles.
    pub fn preimages(self, q: u32) -> Vec<Angle> {
        let q_r = Rational64::from_integer(q as i64);
        (0..q as i64)
            .map(|j| Angle::new((self.0 + Rational64::from_integer(j)) / q_r))
            .collect()
    }

    /// Counterclockwise distance from `self` to `other`, in `[0, 1)`.
    pub fn dist_ccw(self, other: Angle) -> Rational64 {
        let d = other.0 - self.0;
        if d < Rational64::zero() {
            d + Rational64::one()
        } else {
            d
        }
    }

    /// Adds a rational number of turns.
    pub fn offset(self, d: Rational64) -> Self {
        Angle::new(self.0 + d)
    }

    /// Whether `self` lies strictly inside the open arc from `a`
    /// counterclockwise to `b`. When `a == b` the arc is the full circle
    /// punctured at `a`.
    pub fn in_open_arc(self, a: Angle, b: Angle) -> bool {
        let to_self = a.dist_ccw(self);
        if to_self.is_zero() {
            return false;
        }
        let to_b = a.dist_ccw(b);
        if to_b.is_zero() {
            // full circle minus the point a
            true
        } else {
            to_self < to_b
        }
    }
}

impl fmt::Display for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl fmt::Debug for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Angle({})", self)
    }
}

fn parse_ratio(s: &str) -> Result<Rational64, String> {
    let s = s.trim();
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s, "1"),
    };
    let num: i64 = num
        .parse()
        .map_err(|_| format!("bad numerator in {s:?}"))?;
    let den: i64 = den
        .parse()
        .map_err(|_| format!("bad denominator in {s:?}"))?;
    if den == 0 {
        return Err(format!("zero denominator in {s:?}"));
    }
    Ok(Rational64::new(num, den))
}

impl FromStr for Angle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_ratio(s).map(Angle::new)
    }
}

impl Serialize for Angle {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Angle {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// A positive escape height (a value of the exponential Green's function).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Height(Rational64);

impl Height {
    pub fn new(r: Rational64) -> Self {
        assert!(r > Rational64::zero(), "heights must be positive");
        Height(r)
    }

    pub fn from_ratio(num: i64, den: i64) -> Self {
        Height::new(Rational64::new(num, den))
    }

    pub fn one() -> Self {
        Height(Rational64::one())
    }

    pub fn value(self) -> Rational64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// Height of a preimage leaf: `h / q`.
    pub fn div_q(self, q: u32) -> Self {
        Height(self.0 / Rational64::from_integer(q as i64))
    }

    /// Height of the image leaf: `h * q`.
    pub fn mul_q(self, q: u32) -> Self {
        Height(self.0 * Rational64::from_integer(q as i64))
    }

    /// Compares `self^2` with `q^m` (signed `m`) exactly.
    pub fn cmp_sq_pow(self, q: u32, m: i64) -> Ordering {
        // h^2 = p^2 / r^2 vs q^m: cross-multiply in BigInt.
        let p = BigInt::from(*self.0.numer());
        let r = BigInt::from(*self.0.denom());
        let qb = BigInt::from(q);
        let (lhs, rhs) = if m >= 0 {
            (&p * &p, &r * &r * qb.pow(m as u32))
        } else {
            (&p * &p * qb.pow((-m) as u32), &r * &r)
        };
        lhs.cmp(&rhs)
    }

    /// Whether `self` equals `q^{n + 1/2}` for some integer `n`, i.e. sits
    /// exactly on a band boundary.
    pub fn on_band_boundary(self, q: u32) -> bool {
        // h = q^{n+1/2} iff h^2 = q^{2n+1}; h^2 is a power of q with odd
        // exponent iff numerator and denominator of h^2 are powers of q
        // whose exponent difference is odd.
        let p2 = BigInt::from(*self.0.numer()).pow(2);
        let r2 = BigInt::from(*self.0.denom()).pow(2);
        match (pow_of(&p2, q), pow_of(&r2, q)) {
            (Some(a), Some(b)) => (a as i64 - b as i64) % 2 != 0,
            _ => false,
        }
    }

    /// The band index `n` with `q^{n - 1/2} < h < q^{n + 1/2}`, or `None`
    /// when `h` sits exactly on a boundary.
    pub fn band(self, q: u32) -> Option<i64> {
        if self.on_band_boundary(q) {
            return None;
        }
        // log_q h rounded to nearest integer, then correct by exact checks.
        let logq = self.0.to_f64_lossy().ln() / (q as f64).ln();
        let mut n = logq.round() as i64;
        loop {
            let below = self.cmp_sq_pow(q, 2 * n - 1); // want Greater
            let above = self.cmp_sq_pow(q, 2 * n + 1); // want Less
            match (below, above) {
                (Ordering::Greater, Ordering::Less) => return Some(n),
                (Ordering::Less, _) | (Ordering::Equal, _) => n -= 1,
                (_, Ordering::Greater) | (_, Ordering::Equal) => n += 1,
            }
        }
    }

    /// Whether `self / other` is an exact (possibly negative) power of `q`.
    pub fn ratio_is_power_of_q(self, other: Height, q: u32) -> bool {
        let r = self.0 / other.0;
        // reduced p/s is q^k iff both p and s are pure powers of q
        let p = BigInt::from(*r.numer());
        let s = BigInt::from(*r.denom());
        pow_of(&p, q).is_some() && pow_of(&s, q).is_some()
    }
}

/// If `v` is a pure power of `q` (including `q^0 = 1`), returns the
/// exponent.
fn pow_of(v: &BigInt, q: u32) -> Option<u32> {
    if !v.is_positive() {
        return None;
    }
    let qb = BigInt::from(q);
    let mut v = v.clone();
    let mut k = 0u32;
    while v > BigInt::one() {
        if !(&v % &qb).is_zero() {
            return None;
        }
        v /= &qb;
        k += 1;
    }
    Some(k)
}

trait ToF64Lossy {
    fn to_f64_lossy(&self) -> f64;
}

impl ToF64Lossy for Rational64 {
    fn to_f64_lossy(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

impl fmt::Display for Height {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl fmt::Debug for Height {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Height({})", self)
    }
}

impl FromStr for Height {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let r = parse_ratio(s)?;
        if r <= Rational64::zero() {
            return Err(format!("height must be positive, got {s:?}"));
        }
        Ok(Height(r))
    }
}

impl Serialize for Height {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Height {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_wraps_into_unit_interval() {
        assert_eq!(Angle::from_ratio(5, 4), Angle::from_ratio(1, 4));
        assert_eq!(Angle::from_ratio(-1, 4), Angle::from_ratio(3, 4));
        assert_eq!(Angle::from_ratio(8, 4), Angle::zero());
        assert_eq!(Angle::from_ratio(-7, 3), Angle::from_ratio(2, 3));
    }

    #[test]
    fn image_and_preimages_are_inverse() {
        let a = Angle::from_ratio(5, 18);
        assert_eq!(a.image(3), Angle::from_ratio(5, 6));
        for q in [2u32, 3, 4, 5] {
            let pre = a.preimages(q);
            assert_eq!(pre.len(), q as usize);
            for p in &pre {
                assert_eq!(p.image(q), a);
            }
            // ascending and pairwise distinct
            for w in pre.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn ccw_distance_and_arcs() {
        let a = Angle::from_ratio(3, 4);
        let b = Angle::from_ratio(1, 4);
        assert_eq!(a.dist_ccw(b), Rational64::new(1, 2));
        assert_eq!(b.dist_ccw(a), Rational64::new(1, 2));
        assert!(Angle::zero().in_open_arc(a, b));
        assert!(!Angle::from_ratio(1, 2).in_open_arc(a, b));
        assert!(!a.in_open_arc(a, b));
        assert!(!b.in_open_arc(a, b));
        // degenerate arc = full circle minus the endpoint
        assert!(b.in_open_arc(a, a));
        assert!(!a.in_open_arc(a, a));
    }

    #[test]
    fn parse_and_display_round_trip() {
        let a: Angle = "7/18".parse().unwrap();
        assert_eq!(a, Angle::from_ratio(7, 18));
        assert_eq!(a.to_string(), "7/18");
        assert_eq!(Angle::zero().to_string(), "0/1");
        let h: Height = "1/3".parse().unwrap();
        assert_eq!(h, Height::from_ratio(1, 3));
        assert!("0/5".parse::<Height>().is_err());
        assert!("-1/5".parse::<Height>().is_err());
        assert!("1/0".parse::<Angle>().is_err());
        // angles reduce and normalize on parse
        assert_eq!("10/4".parse::<Angle>().unwrap().to_string(), "1/2");
    }

    #[test]
    fn bands_and_boundaries() {
        let q = 3;
        // q^{-1/2} < 1 < q^{1/2}: band 0
        assert_eq!(Height::one().band(q), Some(0));
        assert_eq!(Height::from_ratio(9, 1).band(q), Some(2));
        assert_eq!(Height::from_ratio(1, 9).band(q), Some(-2));
        assert_eq!(Height::from_ratio(5, 1).band(q), Some(1));
        assert_eq!(Height::from_ratio(1, 5).band(q), Some(-1));
        // for odd q the boundaries q^{n+1/2} are irrational, so every
        // rational height gets a band
        assert!(!Height::from_ratio(3, 1).on_band_boundary(q));
        assert_eq!(Height::from_ratio(3, 1).band(q), Some(1));

        // q = 4: boundaries 4^{n+1/2} = 2^{2n+1} are rational.
        assert!(Height::from_ratio(2, 1).on_band_boundary(4));
        assert_eq!(Height::from_ratio(2, 1).band(4), None);
        assert!(Height::from_ratio(1, 2).on_band_boundary(4));
        assert_eq!(Height::from_ratio(3, 1).band(4), Some(1));
        assert_eq!(Height::from_ratio(1, 1).band(4), Some(0));
    }

    #[test]
    fn power_ratio_detection() {
        let q = 3;
        let h1 = Height::from_ratio(2, 3);
        let h2 = Height::from_ratio(2, 27);
        assert!(h1.ratio_is_power_of_q(h2, q));
        assert!(h2.ratio_is_power_of_q(h1, q));
        assert!(h1.ratio_is_power_of_q(h1, q));
        let h3 = Height::from_ratio(1, 2);
        assert!(!h1.ratio_is_power_of_q(h3, q));
        // ratio 2/5: not a power
        assert!(!Height::from_ratio(2, 1).ratio_is_power_of_q(Height::from_ratio(5, 1), 3));
    }

    #[test]
    fn sq_pow_comparisons_handle_deep_denominators() {
        // h = q^{-13} scale values stay exact
        let h = Height::from_ratio(1, 1_594_323); // 3^13
        assert_eq!(h.band(3), Some(-13));
        assert_eq!(h.cmp_sq_pow(3, -27), Ordering::Greater);
        assert_eq!(h.cmp_sq_pow(3, -26), Ordering::Equal);
        assert_eq!(h.cmp_sq_pow(3, -25), Ordering::Less);
    }
}
