//! One-dimensional Sobol sequences over integer block indices.
//!
//! Points are held as integer numerators over `2^DIRECTION_BITS`, so scaling
//! by a power-of-two block count is an exact shift and the stratification
//! properties of the sequence survive bit-for-bit.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arith::distinct_prime_factors;
use crate::error::{Error, Result};

/// Number of fractional bits carried by every direction number.
pub const DIRECTION_BITS: u32 = 52;

pub const MAX_DEGREE: u32 = 32;

/// A primitive polynomial over GF(2), stored with bit `k` holding the
/// coefficient of `x^k` (the leading and constant terms are always set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct PrimitivePolynomial {
    bits: u64,
}

impl PrimitivePolynomial {
    /// Validates `bits` as a primitive polynomial.
    pub fn from_bits(bits: u64) -> Result<Self> {
        if bits < 2 {
            return Err(Error::InvalidParameter(format!(
                "{bits:#b} has no positive degree"
            )));
        }
        let degree = 63 - bits.leading_zeros();
        if degree > MAX_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "degree {degree} exceeds {MAX_DEGREE}"
            )));
        }
        if !is_primitive(bits, degree) {
            return Err(Error::InvalidParameter(format!(
                "{bits:#b} is not primitive over GF(2)"
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn degree(&self) -> u32 {
        63 - self.bits.leading_zeros()
    }

    /// Coefficients `a_1 ..= a_{d-1}`, where `a_k` multiplies `x^{d-k}`.
    pub fn coefficients(&self) -> Vec<u8> {
        let d = self.degree();
        (1..d).map(|k| ((self.bits >> (d - k)) & 1) as u8).collect()
    }
}

impl TryFrom<u64> for PrimitivePolynomial {
    type Error = Error;

    fn try_from(bits: u64) -> Result<Self> {
        Self::from_bits(bits)
    }
}

impl From<PrimitivePolynomial> for u64 {
    fn from(p: PrimitivePolynomial) -> u64 {
        p.bits
    }
}

impl fmt::Display for PrimitivePolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for k in (0..=self.degree()).rev() {
            if (self.bits >> k) & 1 == 0 {
                continue;
            }
            if !first {
                f.write_str("+")?;
            }
            first = false;
            match k {
                0 => f.write_str("1")?,
                1 => f.write_str("x")?,
                _ => write!(f, "x^{k}")?,
            }
        }
        Ok(())
    }
}

/// Accepts `x^3+x+1` (any term order, optional spaces) or a
/// binary literal `0b1011`.
impl std::str::FromStr for PrimitivePolynomial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Some(bin) = s.strip_prefix("0b") {
            let bits = u64::from_str_radix(bin, 2)
                .map_err(|_| Error::InvalidParameter(format!("bad binary polynomial {s:?}")))?;
            return Self::from_bits(bits);
        }
        let mut bits = 0u64;
        for term in s.split('+') {
            let k = match term {
                "1" => 0,
                "x" | "X" => 1,
                t => t
                    .strip_prefix("x^")
                    .or_else(|| t.strip_prefix("X^"))
                    .and_then(|e| e.parse::<u32>().ok())
                    .filter(|&e| e <= MAX_DEGREE)
                    .ok_or_else(|| Error::InvalidParameter(format!("bad polynomial term {t:?}")))?,
            };
            if bits >> k & 1 == 1 {
                return Err(Error::InvalidParameter(format!("term {term:?} repeated")));
            }
            bits |= 1 << k;
        }
        Self::from_bits(bits)
    }
}

fn gf2_mulmod(mut a: u64, mut b: u64, modulus: u64, degree: u32) -> u64 {
    let mut acc = 0u64;
    while b != 0 {
        if b & 1 == 1 {
            acc ^= a;
        }
        b >>= 1;
        a <<= 1;
        if (a >> degree) & 1 == 1 {
            a ^= modulus;
        }
    }
    acc
}

fn gf2_x_pow(exp: u64, modulus: u64, degree: u32) -> u64 {
    let mut base = if degree == 1 { 2 ^ modulus } else { 2 };
    let mut acc = 1u64;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc = gf2_mulmod(acc, base, modulus, degree);
        }
        base = gf2_mulmod(base, base, modulus, degree);
        e >>= 1;
    }
    acc
}

/// `x` has multiplicative order exactly `2^d - 1` modulo the polynomial.
fn is_primitive(bits: u64, degree: u32) -> bool {
    if bits & 1 == 0 {
        return false;
    }
    let order = (1u64 << degree) - 1;
    if gf2_x_pow(order, bits, degree) != 1 {
        return false;
    }
    distinct_prime_factors(order)
        .into_iter()
        .all(|r| gf2_x_pow(order / r, bits, degree) != 1)
}

/// Lazily walks the primitive polynomials of one degree in ascending bit order.
pub fn primitive_polynomials(degree: u32) -> Result<impl Iterator<Item = PrimitivePolynomial>> {
    if degree == 0 || degree > MAX_DEGREE {
        return Err(Error::InvalidParameter(format!(
            "degree must lie in 1..={MAX_DEGREE}, got {degree}"
        )));
    }
    let middle = 1u64 << (degree - 1);
    Ok((0..middle).filter_map(move |mid| {
        let bits = (1u64 << degree) | (mid << 1) | 1;
        is_primitive(bits, degree).then_some(PrimitivePolynomial { bits })
    }))
}

pub fn enumerate_primitive_polynomials(degree: u32) -> Result<Vec<PrimitivePolynomial>> {
    Ok(primitive_polynomials(degree)?.collect())
}

/// Position `index` (0-based) in the ascending enumeration.
pub fn nth_primitive_polynomial(degree: u32, index: usize) -> Result<PrimitivePolynomial> {
    primitive_polynomials(degree)?.nth(index).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "degree {degree} has fewer than {} primitive polynomials",
            index + 1
        ))
    })
}

/// Parameters shared between the coordinator and every auditor that must
/// regenerate the same challenge sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SobolKey {
    pub poly: PrimitivePolynomial,
    pub init_m: Vec<u64>,
    pub skip: u64,
    pub leap: u64,
    pub constant: u64,
    pub seq_len: u64,
}

impl SobolKey {
    pub fn new(
        poly: PrimitivePolynomial,
        init_m: Vec<u64>,
        skip: u64,
        leap: u64,
        constant: u64,
        seq_len: u64,
    ) -> Result<Self> {
        let key = Self {
            poly,
            init_m,
            skip,
            leap,
            constant,
            seq_len,
        };
        key.validate()?;
        Ok(key)
    }

    /// Random polynomial of `degree`, random odd initial values, no skip or leap.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        degree: u32,
        constant: u64,
        seq_len: u64,
    ) -> Result<Self> {
        let polys = enumerate_primitive_polynomials(degree)?;
        let poly = polys[rng.gen_range(0..polys.len())];
        let init_m = (1..=degree)
            .map(|i| {
                let half = 1u64 << (i - 1);
                2 * rng.gen_range(0..half) + 1
            })
            .collect();
        Self::new(poly, init_m, 0, 0, constant, seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.poly.degree() as usize;
        if self.init_m.len() != d {
            return Err(Error::InvalidKey(format!(
                "expected {d} initial values, got {}",
                self.init_m.len()
            )));
        }
        for (i, &m) in self.init_m.iter().enumerate() {
            let bound = 1u64 << (i + 1);
            if m % 2 == 0 || m >= bound {
                return Err(Error::InvalidKey(format!(
                    "m_{} = {m} must be odd and below {bound}",
                    i + 1
                )));
            }
        }
        if !self.constant.is_power_of_two() || self.constant > (1u64 << DIRECTION_BITS) {
            return Err(Error::InvalidKey(format!(
                "constant {} must be a power of two no larger than 2^{DIRECTION_BITS}",
                self.constant
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::InvalidKey("sequence length must be positive".into()));
        }
        if self.skip == 0 && self.leap == 0 && self.seq_len > self.constant {
            return Err(Error::InvalidKey(format!(
                "sequence length {} exceeds the {} distinct blocks",
                self.seq_len, self.constant
            )));
        }
        let last = self
            .leap
            .checked_add(1)
            .and_then(|stride| (self.seq_len - 1).checked_mul(stride))
            .and_then(|span| span.checked_add(self.skip));
        match last {
            Some(n) if n < (1u64 << DIRECTION_BITS) => Ok(()),
            _ => Err(Error::InvalidKey(format!(
                "sequence needs more than {DIRECTION_BITS} direction bits"
            ))),
        }
    }

    fn scale_shift(&self) -> u32 {
        DIRECTION_BITS - self.constant.trailing_zeros()
    }
}

/// `v_i = m / 2^i`, exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionNumber {
    pub i: u32,
    pub m: u64,
}

impl DirectionNumber {
    pub fn as_f64(&self) -> f64 {
        self.m as f64 / (1u64 << self.i) as f64
    }

    /// Numerator over `2^DIRECTION_BITS`.
    pub fn scaled(&self) -> u64 {
        self.m << (DIRECTION_BITS - self.i)
    }
}

pub fn direction_numbers(key: &SobolKey, count: usize) -> Result<Vec<DirectionNumber>> {
    key.validate()?;
    let d = key.poly.degree() as usize;
    if count < d || count > DIRECTION_BITS as usize {
        return Err(Error::InvalidParameter(format!(
            "direction number count must lie in {d}..={DIRECTION_BITS}, got {count}"
        )));
    }
    let a = key.poly.coefficients();
    let mut m: Vec<u64> = key.init_m.clone();
    for i in d..count {
        let mut next = m[i - d] ^ (m[i - d] << d);
        for (k, &a_k) in a.iter().enumerate() {
            let k = k + 1;
            if a_k == 1 {
                next ^= m[i - k] << k;
            }
        }
        m.push(next);
    }
    Ok(m
        .into_iter()
        .enumerate()
        .map(|(i, m)| DirectionNumber { i: i as u32 + 1, m })
        .collect())
}

/// Ordered block indices in `[0, constant)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSequence {
    pub indices: Vec<u64>,
}

impl BlockSequence {
    pub fn new(indices: Vec<u64>) -> Self {
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.indices
    }

    pub fn iter(&self) -> std::slice::Iter<'_, u64> {
        self.indices.iter()
    }
}

impl From<Vec<u64>> for BlockSequence {
    fn from(indices: Vec<u64>) -> Self {
        Self { indices }
    }
}

impl<'a> IntoIterator for &'a BlockSequence {
    type Item = &'a u64;
    type IntoIter = std::slice::Iter<'a, u64>;

    fn into_iter(self) -> Self::IntoIter {
        self.indices.iter()
    }
}

/// Streaming Gray-code generator. Yields raw points `x^0, x^1, ...` as
/// numerators over `2^DIRECTION_BITS`.
#[derive(Debug, Clone)]
pub struct SobolGenerator {
    directions: Vec<u64>,
    n: u64,
    x: u64,
}

impl SobolGenerator {
    pub fn new(key: &SobolKey) -> Result<Self> {
        let dirs = direction_numbers(key, DIRECTION_BITS as usize)?;
        Ok(Self {
            directions: dirs.iter().map(DirectionNumber::scaled).collect(),
            n: 0,
            x: 0,
        })
    }

    /// Direct form: XOR of the direction numbers selected by the Gray code of `n`.
    pub fn point_at(&self, n: u64) -> u64 {
        let mut gray = n ^ (n >> 1);
        let mut x = 0u64;
        let mut i = 0;
        while gray != 0 {
            if gray & 1 == 1 {
                x ^= self.directions[i];
            }
            gray >>= 1;
            i += 1;
        }
        x
    }
}

impl Iterator for SobolGenerator {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        if self.n >= 1u64 << DIRECTION_BITS {
            return None;
        }
        let out = self.x;
        // c = 1-based position of the rightmost zero bit of n
        let c = self.n.trailing_ones() as usize;
        if c < self.directions.len() {
            self.x ^= self.directions[c];
        }
        self.n += 1;
        Some(out)
    }
}

pub fn generate(key: &SobolKey) -> Result<BlockSequence> {
    let gen = SobolGenerator::new(key)?;
    let shift = key.scale_shift();
    let stride = key.leap + 1;
    let indices = gen
        .skip(key.skip as usize)
        .step_by(stride as usize)
        .take(key.seq_len as usize)
        .map(|x| x >> shift)
        .collect();
    Ok(BlockSequence { indices })
}
