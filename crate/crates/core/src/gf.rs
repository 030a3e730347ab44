//! Arithmetic over a prime field GF(q), dense univariate polynomials, and the
//! two heavy operations reconciliation needs: rational-function interpolation
//! and root finding by random splitting.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arith::{is_prime, mul_mod, pow_mod};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FieldElement {
    value: u64,
    modulus: u64,
}

impl FieldElement {
    pub fn new(value: u64, modulus: u64) -> Self {
        Self {
            value: value % modulus,
            modulus,
        }
    }

    /// Maps a signed integer onto its residue, so `-1` becomes `q - 1`.
    pub fn from_i64(value: i64, modulus: u64) -> Self {
        let m = modulus as i128;
        let v = (value as i128).rem_euclid(m) as u64;
        Self { value: v, modulus }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    /// Representative in `(-q/2, q/2]`.
    pub fn centered(&self) -> i64 {
        if self.value > self.modulus / 2 {
            -((self.modulus - self.value) as i64)
        } else {
            self.value as i64
        }
    }

    pub fn pow(&self, exp: u64) -> Self {
        Self::new(pow_mod(self.value, exp, self.modulus), self.modulus)
    }

    pub fn inverse(&self) -> Option<Self> {
        (self.value != 0).then(|| self.pow(self.modulus - 2))
    }

    pub fn checked_div(&self, rhs: Self) -> Option<Self> {
        rhs.inverse().map(|inv| *self * inv)
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl Add for FieldElement {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        debug_assert_eq!(self.modulus, rhs.modulus);
        Self::new(add_mod(self.value, rhs.value, self.modulus), self.modulus)
    }
}

impl Sub for FieldElement {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        debug_assert_eq!(self.modulus, rhs.modulus);
        Self::new(sub_mod(self.value, rhs.value, self.modulus), self.modulus)
    }
}

impl Mul for FieldElement {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        debug_assert_eq!(self.modulus, rhs.modulus);
        Self::new(mul_mod(self.value, rhs.value, self.modulus), self.modulus)
    }
}

impl Neg for FieldElement {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(sub_mod(0, self.value, self.modulus), self.modulus)
    }
}

fn add_mod(a: u64, b: u64, q: u64) -> u64 {
    let s = a as u128 + b as u128;
    (s % q as u128) as u64
}

fn sub_mod(a: u64, b: u64, q: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        q - (b - a)
    }
}

fn inv_mod(a: u64, q: u64) -> u64 {
    pow_mod(a, q - 2, q)
}

/// Dense polynomial over GF(q), lowest-degree coefficient first, with no
/// trailing zeros. The zero polynomial has no coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldPoly {
    coeffs: Vec<u64>,
    modulus: u64,
}

impl FieldPoly {
    pub fn new(modulus: u64, coeffs: Vec<u64>) -> Self {
        let mut p = Self {
            coeffs: coeffs.into_iter().map(|c| c % modulus).collect(),
            modulus,
        };
        p.trim();
        p
    }

    pub fn from_i64(modulus: u64, coeffs: &[i64]) -> Self {
        Self::new(
            modulus,
            coeffs
                .iter()
                .map(|&c| FieldElement::from_i64(c, modulus).value())
                .collect(),
        )
    }

    pub fn zero(modulus: u64) -> Self {
        Self {
            coeffs: Vec::new(),
            modulus,
        }
    }

    pub fn one(modulus: u64) -> Self {
        Self::new(modulus, vec![1])
    }

    /// `Z - root`.
    pub fn linear(modulus: u64, root: u64) -> Self {
        Self::new(modulus, vec![sub_mod(0, root % modulus, modulus), 1])
    }

    /// Monic polynomial with exactly the given roots (with multiplicity).
    pub fn from_roots(modulus: u64, roots: &[u64]) -> Self {
        roots
            .iter()
            .fold(Self::one(modulus), |acc, &r| &acc * &Self::linear(modulus, r))
    }

    fn trim(&mut self) {
        while self.coeffs.last() == Some(&0) {
            self.coeffs.pop();
        }
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn coeffs(&self) -> &[u64] {
        &self.coeffs
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn degree(&self) -> Option<usize> {
        self.coeffs.len().checked_sub(1)
    }

    pub fn leading(&self) -> u64 {
        self.coeffs.last().copied().unwrap_or(0)
    }

    pub fn is_monic(&self) -> bool {
        self.leading() == 1
    }

    pub fn monic(&self) -> Self {
        if self.is_zero() || self.is_monic() {
            return self.clone();
        }
        let inv = inv_mod(self.leading(), self.modulus);
        self.scale(inv)
    }

    pub fn scale(&self, c: u64) -> Self {
        Self::new(
            self.modulus,
            self.coeffs
                .iter()
                .map(|&a| mul_mod(a, c % self.modulus, self.modulus))
                .collect(),
        )
    }

    pub fn eval(&self, x: u64) -> u64 {
        let x = x % self.modulus;
        self.coeffs
            .iter()
            .rev()
            .fold(0, |acc, &c| add_mod(mul_mod(acc, x, self.modulus), c, self.modulus))
    }

    pub fn derivative(&self) -> Self {
        Self::new(
            self.modulus,
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, &c)| mul_mod(c, i as u64 % self.modulus, self.modulus))
                .collect(),
        )
    }

    fn check_modulus(&self, other: &Self) -> Result<()> {
        if self.modulus != other.modulus {
            return Err(Error::InvalidParameter(format!(
                "modulus mismatch: {} vs {}",
                self.modulus, other.modulus
            )));
        }
        Ok(())
    }

    pub fn div_rem(&self, divisor: &Self) -> Result<(Self, Self)> {
        self.check_modulus(divisor)?;
        let Some(dd) = divisor.degree() else {
            return Err(Error::InvalidParameter("division by the zero polynomial".into()));
        };
        let q = self.modulus;
        let mut rem = self.coeffs.clone();
        let Some(nd) = self.degree() else {
            return Ok((Self::zero(q), Self::zero(q)));
        };
        if nd < dd {
            return Ok((Self::zero(q), self.clone()));
        }
        let inv_lead = inv_mod(divisor.leading(), q);
        let mut quot = vec![0u64; nd - dd + 1];
        for i in (0..=nd - dd).rev() {
            let c = mul_mod(rem[i + dd], inv_lead, q);
            quot[i] = c;
            if c == 0 {
                continue;
            }
            for (j, &b) in divisor.coeffs.iter().enumerate() {
                rem[i + j] = sub_mod(rem[i + j], mul_mod(c, b, q), q);
            }
        }
        rem.truncate(dd);
        Ok((Self::new(q, quot), Self::new(q, rem)))
    }

    pub fn rem(&self, divisor: &Self) -> Result<Self> {
        Ok(self.div_rem(divisor)?.1)
    }

    /// `self^exp mod modulus_poly` by square-and-multiply.
    pub fn pow_mod(&self, mut exp: u64, modulus_poly: &Self) -> Result<Self> {
        let mut base = self.rem(modulus_poly)?;
        let mut acc = Self::one(self.modulus).rem(modulus_poly)?;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = (&acc * &base).rem(modulus_poly)?;
            }
            base = (&base * &base).rem(modulus_poly)?;
            exp >>= 1;
        }
        Ok(acc)
    }
}

impl fmt::Display for FieldPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return f.write_str("0");
        }
        let mut first = true;
        for (k, &c) in self.coeffs.iter().enumerate().rev() {
            if c == 0 {
                continue;
            }
            if !first {
                f.write_str(" + ")?;
            }
            first = false;
            match (k, c) {
                (0, c) => write!(f, "{c}")?,
                (1, 1) => f.write_str("Z")?,
                (1, c) => write!(f, "{c}Z")?,
                (k, 1) => write!(f, "Z^{k}")?,
                (k, c) => write!(f, "{c}Z^{k}")?,
            }
        }
        Ok(())
    }
}

impl Add for &FieldPoly {
    type Output = FieldPoly;
    fn add(self, rhs: &FieldPoly) -> FieldPoly {
        debug_assert_eq!(self.modulus, rhs.modulus);
        let q = self.modulus;
        let n = self.coeffs.len().max(rhs.coeffs.len());
        let coeffs = (0..n)
            .map(|i| {
                let a = self.coeffs.get(i).copied().unwrap_or(0);
                let b = rhs.coeffs.get(i).copied().unwrap_or(0);
                add_mod(a, b, q)
            })
            .collect();
        FieldPoly::new(q, coeffs)
    }
}

impl Sub for &FieldPoly {
    type Output = FieldPoly;
    fn sub(self, rhs: &FieldPoly) -> FieldPoly {
        debug_assert_eq!(self.modulus, rhs.modulus);
        let q = self.modulus;
        let n = self.coeffs.len().max(rhs.coeffs.len());
        let coeffs = (0..n)
            .map(|i| {
                let a = self.coeffs.get(i).copied().unwrap_or(0);
                let b = rhs.coeffs.get(i).copied().unwrap_or(0);
                sub_mod(a, b, q)
            })
            .collect();
        FieldPoly::new(q, coeffs)
    }
}

impl Mul for &FieldPoly {
    type Output = FieldPoly;
    fn mul(self, rhs: &FieldPoly) -> FieldPoly {
        debug_assert_eq!(self.modulus, rhs.modulus);
        let q = self.modulus;
        if self.is_zero() || rhs.is_zero() {
            return FieldPoly::zero(q);
        }
        let mut out = vec![0u64; self.coeffs.len() + rhs.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a == 0 {
                continue;
            }
            for (j, &b) in rhs.coeffs.iter().enumerate() {
                out[i + j] = add_mod(out[i + j], mul_mod(a, b, q), q);
            }
        }
        FieldPoly::new(q, out)
    }
}

/// Monic greatest common divisor by the Euclidean algorithm.
pub fn poly_gcd(f: &FieldPoly, g: &FieldPoly) -> Result<FieldPoly> {
    f.check_modulus(g)?;
    let mut a = f.clone();
    let mut b = g.clone();
    while !b.is_zero() {
        let r = a.rem(&b)?;
        a = b;
        b = r;
    }
    Ok(a.monic())
}

pub fn is_square_free(f: &FieldPoly) -> Result<bool> {
    if f.is_zero() {
        return Err(Error::InvalidParameter(
            "square-freeness of the zero polynomial is undefined".into(),
        ));
    }
    let g = poly_gcd(f, &f.derivative())?;
    Ok(g.degree() == Some(0))
}

/// True iff `f` divides `Z^q - Z`, i.e. is a product of distinct monic
/// linear factors.
pub fn splits_into_linear(f: &FieldPoly) -> Result<bool> {
    let Some(deg) = f.degree() else {
        return Err(Error::InvalidParameter("zero polynomial".into()));
    };
    if deg == 0 {
        return Ok(true);
    }
    let f = f.monic();
    let q = f.modulus();
    let z = FieldPoly::new(q, vec![0, 1]);
    let zq = z.pow_mod(q, &f)?;
    let g = poly_gcd(&f, &(&zq - &z))?;
    Ok(g == f)
}

/// Recovers every root of a monic, square-free, fully split polynomial.
///
/// Splits with `gcd(f, (Z - a)^((q-1)/2) - 1)` for uniformly random `a`;
/// after `64 * deg(f)` unproductive draws the input is reported as not
/// splittable.
pub fn find_roots<R: Rng + ?Sized>(f: &FieldPoly, rng: &mut R) -> Result<Vec<FieldElement>> {
    let Some(deg) = f.degree() else {
        return Err(Error::InvalidParameter("zero polynomial".into()));
    };
    let q = f.modulus();
    let f = f.monic();
    let mut roots = Vec::with_capacity(deg);
    if q == 2 {
        for x in 0..2 {
            if f.eval(x) == 0 {
                roots.push(x);
            }
        }
        let expect = FieldPoly::from_roots(2, &roots);
        if expect != f {
            return Err(Error::NotFullySplittable(f.to_string()));
        }
    } else {
        let mut budget = 64 * deg.max(1);
        let mut pending = vec![f.clone()];
        while let Some(g) = pending.pop() {
            match g.degree() {
                Some(0) => continue,
                Some(1) => {
                    roots.push(sub_mod(0, g.coeffs[0], q));
                    continue;
                }
                _ => {}
            }
            loop {
                if budget == 0 {
                    return Err(Error::NotFullySplittable(format!(
                        "factor {g} did not split within the attempt budget"
                    )));
                }
                budget -= 1;
                let a = rng.gen_range(0..q);
                let shifted = FieldPoly::new(q, vec![sub_mod(0, a, q), 1]);
                let h = shifted.pow_mod((q - 1) / 2, &g)?;
                let h = &h - &FieldPoly::one(q);
                let d = poly_gcd(&g, &h)?;
                let dd = d.degree().unwrap_or(0);
                if dd > 0 && Some(dd) < g.degree() {
                    let (other, _) = g.div_rem(&d)?;
                    pending.push(d);
                    pending.push(other.monic());
                    break;
                }
            }
        }
    }
    roots.sort_unstable();
    if roots.len() != deg || roots.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::NotFullySplittable(format!(
            "{f} yielded {} roots for degree {deg}",
            roots.len()
        )));
    }
    Ok(roots.into_iter().map(|r| FieldElement::new(r, q)).collect())
}

/// Ratio of two monic polynomials in lowest terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalFunction {
    pub numerator: FieldPoly,
    pub denominator: FieldPoly,
}

impl RationalFunction {
    /// `None` when the denominator vanishes at `z`.
    pub fn eval(&self, z: u64) -> Option<u64> {
        let q = self.numerator.modulus();
        let den = self.denominator.eval(z);
        (den != 0).then(|| mul_mod(self.numerator.eval(z), inv_mod(den, q), q))
    }

    pub fn reduce(&self) -> Result<Self> {
        let g = poly_gcd(&self.numerator, &self.denominator)?;
        Ok(Self {
            numerator: self.numerator.div_rem(&g)?.0.monic(),
            denominator: self.denominator.div_rem(&g)?.0.monic(),
        })
    }
}

impl fmt::Display for RationalFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) / ({})", self.numerator, self.denominator)
    }
}

/// Degree bounds `(numerator, denominator)` for a difference bound `m_bar`
/// and cardinality difference `d`.
pub fn degree_bounds(m_bar: usize, d: i64) -> Result<(usize, usize)> {
    let m = m_bar as i64;
    let num = (m + d).div_euclid(2);
    let den = (m - d).div_euclid(2);
    if num < 0 || den < 0 {
        return Err(Error::ReconciliationBoundExceeded(format!(
            "cardinality difference {d} exceeds the bound {m_bar}"
        )));
    }
    Ok((num as usize, den as usize))
}

/// Fits monic `P/Q` with `deg P = floor((m_bar+d)/2)` and
/// `deg Q = floor((m_bar-d)/2)` through the samples by Gaussian elimination,
/// then reduces to lowest terms.
pub fn interpolate_rational(
    q: u64,
    samples: &[(FieldElement, FieldElement)],
    m_bar: usize,
    d: i64,
) -> Result<RationalFunction> {
    if samples.len() != m_bar {
        return Err(Error::InvalidParameter(format!(
            "expected {m_bar} samples, got {}",
            samples.len()
        )));
    }
    if samples
        .iter()
        .any(|(z, v)| z.modulus() != q || v.modulus() != q)
    {
        return Err(Error::InvalidParameter("samples span several fields".into()));
    }
    let mut points: Vec<u64> = samples.iter().map(|(z, _)| z.value()).collect();
    points.sort_unstable();
    if points.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidParameter("sample points must be distinct".into()));
    }
    let (num_deg, den_deg) = degree_bounds(m_bar, d)?;
    let unknowns = num_deg + den_deg;

    // Row: sum_j p_j z^j - f * sum_j q_j z^j = f z^den_deg - z^num_deg
    let mut rows: Vec<Vec<u64>> = samples
        .iter()
        .map(|(z, f)| {
            let (z, f) = (z.value(), f.value());
            let mut row = Vec::with_capacity(unknowns + 1);
            for j in 0..num_deg {
                row.push(pow_mod(z, j as u64, q));
            }
            for j in 0..den_deg {
                row.push(sub_mod(0, mul_mod(f, pow_mod(z, j as u64, q), q), q));
            }
            let rhs = sub_mod(
                mul_mod(f, pow_mod(z, den_deg as u64, q), q),
                pow_mod(z, num_deg as u64, q),
                q,
            );
            row.push(rhs);
            row
        })
        .collect();

    let solution = solve_mod(&mut rows, unknowns, q).ok_or_else(|| {
        Error::ReconciliationBoundExceeded(format!(
            "inconsistent system for degrees ({num_deg}, {den_deg})"
        ))
    })?;

    let mut num = solution[..num_deg].to_vec();
    num.push(1);
    let mut den = solution[num_deg..].to_vec();
    den.push(1);
    RationalFunction {
        numerator: FieldPoly::new(q, num),
        denominator: FieldPoly::new(q, den),
    }
    .reduce()
}

/// Gaussian elimination over GF(q) on an augmented matrix. Free variables are
/// set to zero; returns `None` if the system is inconsistent.
fn solve_mod(rows: &mut [Vec<u64>], unknowns: usize, q: u64) -> Option<Vec<u64>> {
    let mut pivot_cols = Vec::new();
    let mut r = 0;
    for col in 0..unknowns {
        let Some(p) = (r..rows.len()).find(|&i| rows[i][col] != 0) else {
            continue;
        };
        rows.swap(r, p);
        let inv = inv_mod(rows[r][col], q);
        for v in rows[r].iter_mut() {
            *v = mul_mod(*v, inv, q);
        }
        let pivot_row = rows[r].clone();
        for (i, row) in rows.iter_mut().enumerate() {
            if i == r || row[col] == 0 {
                continue;
            }
            let factor = row[col];
            for j in col..=unknowns {
                row[j] = sub_mod(row[j], mul_mod(factor, pivot_row[j], q), q);
            }
        }
        pivot_cols.push(col);
        r += 1;
        if r == rows.len() {
            break;
        }
    }
    if rows[r..].iter().any(|row| row[unknowns] != 0) {
        return None;
    }
    let mut x = vec![0u64; unknowns];
    for (i, &col) in pivot_cols.iter().enumerate() {
        x[col] = rows[i][unknowns];
    }
    Some(x)
}

/// Checks that `q` can serve as a field modulus.
pub fn ensure_prime(q: u64) -> Result<()> {
    if is_prime(q) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{q} is not prime")))
    }
}
