//! Set reconciliation by characteristic-polynomial interpolation.
//!
//! Each party evaluates `χ_S(Z) = ∏(Z − s)` at `m̄` agreed points and sends
//! those values together with `|S|`. The receiver divides the remote values
//! by its own, interpolates the ratio as a reduced rational function, and
//! reads the symmetric difference off the roots: the numerator vanishes on
//! elements only the remote side has, the denominator on elements only the
//! local side has.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arith::{is_prime, next_prime_above};
use crate::error::{Error, Result};
use crate::gf::{
    find_roots, interpolate_rational, is_square_free, splits_into_linear, FieldElement,
    RationalFunction,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconConfig {
    m_bar: usize,
    q: u64,
    eval_points: Vec<FieldElement>,
}

impl ReconConfig {
    /// Uses the evaluation points `-1, -2, …, -m_bar` (mod q).
    pub fn new(m_bar: usize, q: u64) -> Result<Self> {
        let points: Vec<i64> = (1..=m_bar as i64).map(|k| -k).collect();
        Self::with_points(m_bar, q, &points)
    }

    pub fn with_points(m_bar: usize, q: u64, points: &[i64]) -> Result<Self> {
        if m_bar == 0 {
            return Err(Error::InvalidParameter("m_bar must be positive".into()));
        }
        if !is_prime(q) {
            return Err(Error::InvalidParameter(format!("modulus {q} is not prime")));
        }
        if q <= m_bar as u64 {
            return Err(Error::InvalidParameter(format!(
                "modulus {q} leaves no room for {m_bar} evaluation points"
            )));
        }
        if points.len() != m_bar {
            return Err(Error::InvalidParameter(format!(
                "{} evaluation points supplied for m_bar = {m_bar}",
                points.len()
            )));
        }
        let eval_points: Vec<FieldElement> = points
            .iter()
            .map(|&p| FieldElement::from_i64(p, q))
            .collect();
        let distinct: BTreeSet<u64> = eval_points.iter().map(|p| p.value()).collect();
        if distinct.len() != m_bar {
            return Err(Error::InvalidParameter(
                "evaluation points must be distinct modulo q".into(),
            ));
        }
        Ok(Self {
            m_bar,
            q,
            eval_points,
        })
    }

    /// Smallest prime field with `q > 2^b + m_bar`, so every `b`-bit element
    /// stays clear of the default evaluation points.
    pub fn for_bit_length(b: u32, m_bar: usize) -> Result<Self> {
        if b >= 62 {
            return Err(Error::InvalidParameter(format!(
                "element bit length {b} is too large"
            )));
        }
        let floor = (1u64 << b) + m_bar as u64;
        let q = next_prime_above(floor)
            .ok_or_else(|| Error::InvalidParameter("no prime above bound".into()))?;
        Self::new(m_bar, q)
    }

    pub fn m_bar(&self) -> usize {
        self.m_bar
    }

    pub fn modulus(&self) -> u64 {
        self.q
    }

    pub fn eval_points(&self) -> &[FieldElement] {
        &self.eval_points
    }

    /// Same field, twice the difference bound, default points.
    pub fn doubled(&self) -> Result<Self> {
        Self::new(self.m_bar * 2, self.q)
    }

    fn check_element(&self, s: u64) -> Result<()> {
        if s >= self.q {
            return Err(Error::InvalidParameter(format!(
                "element {s} is not below the modulus {}",
                self.q
            )));
        }
        if self.eval_points.iter().any(|p| p.value() == s) {
            return Err(Error::InvalidParameter(format!(
                "element {s} coincides with an evaluation point"
            )));
        }
        Ok(())
    }
}

/// The single message one party sends: `m̄` evaluations plus its cardinality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharPolyEvaluations {
    pub pairs: Vec<(FieldElement, FieldElement)>,
    pub cardinality: u64,
}

#[derive(Serialize, Deserialize)]
struct WireMessage {
    cardinality: u32,
    pairs: Vec<(i64, u64)>,
}

impl CharPolyEvaluations {
    pub fn values(&self) -> Vec<u64> {
        self.pairs.iter().map(|(_, v)| v.value()).collect()
    }

    fn to_wire(&self) -> Result<WireMessage> {
        let cardinality = u32::try_from(self.cardinality)
            .map_err(|_| Error::InvalidParameter("cardinality exceeds u32".into()))?;
        Ok(WireMessage {
            cardinality,
            pairs: self
                .pairs
                .iter()
                .map(|(z, v)| (z.centered(), v.value()))
                .collect(),
        })
    }

    fn from_wire(msg: WireMessage, q: u64) -> Result<Self> {
        let pairs = msg
            .pairs
            .into_iter()
            .map(|(z, v)| {
                if v >= q {
                    Err(Error::InvalidInput(format!("value {v} not below modulus {q}")))
                } else {
                    Ok((FieldElement::from_i64(z, q), FieldElement::new(v, q)))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            pairs,
            cardinality: msg.cardinality as u64,
        })
    }

    /// Canonical JSON: `{"cardinality":6,"pairs":[[-1,70],…]}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_wire()?)?)
    }

    pub fn from_json(text: &str, q: u64) -> Result<Self> {
        Self::from_wire(serde_json::from_str(text)?, q)
    }

    /// Little-endian layout: body length (u32), cardinality (u32), pair count
    /// (u32), then each pair as point (i64) and value (u64).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let wire = self.to_wire()?;
        let body_len = 8 + 16 * wire.pairs.len();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.extend_from_slice(&wire.cardinality.to_le_bytes());
        out.extend_from_slice(&(wire.pairs.len() as u32).to_le_bytes());
        for (z, v) in &wire.pairs {
            out.extend_from_slice(&z.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], q: u64) -> Result<Self> {
        let truncated = || Error::InvalidInput("truncated evaluation message".into());
        let word = |at: usize| -> Result<[u8; 4]> {
            bytes
                .get(at..at + 4)
                .and_then(|s| s.try_into().ok())
                .ok_or_else(truncated)
        };
        let body_len = u32::from_le_bytes(word(0)?) as usize;
        if bytes.len() != 4 + body_len {
            return Err(Error::InvalidInput(format!(
                "length prefix {body_len} does not match {} payload bytes",
                bytes.len().saturating_sub(4)
            )));
        }
        let cardinality = u32::from_le_bytes(word(4)?);
        let count = u32::from_le_bytes(word(8)?) as usize;
        if body_len != 8 + 16 * count {
            return Err(Error::InvalidInput("pair count disagrees with length".into()));
        }
        let pairs = bytes[12..]
            .chunks_exact(16)
            .map(|c| {
                let z = i64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
                let v = u64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
                (z, v)
            })
            .collect();
        Self::from_wire(WireMessage { cardinality, pairs }, q)
    }
}

pub fn char_poly_eval(set: &BTreeSet<u64>, config: &ReconConfig) -> Result<CharPolyEvaluations> {
    for &s in set {
        config.check_element(s)?;
    }
    let q = config.q;
    let pairs = config
        .eval_points
        .iter()
        .map(|&z| {
            let v = set
                .iter()
                .fold(FieldElement::new(1, q), |acc, &s| acc * (z - FieldElement::new(s, q)));
            (z, v)
        })
        .collect();
    Ok(CharPolyEvaluations {
        pairs,
        cardinality: set.len() as u64,
    })
}

/// Result of one reconciliation, including the intermediate ratio values and
/// interpolated function for callers that want to display them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconciliation {
    pub ratios: Vec<FieldElement>,
    pub function: RationalFunction,
    pub only_remote: BTreeSet<u64>,
    pub only_local: BTreeSet<u64>,
}

/// Recovers `(remote ∖ local, local ∖ remote)`.
pub fn reconcile(
    local: &BTreeSet<u64>,
    remote: &CharPolyEvaluations,
    config: &ReconConfig,
) -> Result<(BTreeSet<u64>, BTreeSet<u64>)> {
    let r = reconcile_detailed(local, remote, config, &mut default_rng(config))?;
    Ok((r.only_remote, r.only_local))
}

pub fn reconcile_with_rng<R: Rng + ?Sized>(
    local: &BTreeSet<u64>,
    remote: &CharPolyEvaluations,
    config: &ReconConfig,
    rng: &mut R,
) -> Result<(BTreeSet<u64>, BTreeSet<u64>)> {
    let r = reconcile_detailed(local, remote, config, rng)?;
    Ok((r.only_remote, r.only_local))
}

fn default_rng(config: &ReconConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(config.q ^ ((config.m_bar as u64) << 32))
}

pub fn reconcile_detailed<R: Rng + ?Sized>(
    local: &BTreeSet<u64>,
    remote: &CharPolyEvaluations,
    config: &ReconConfig,
    rng: &mut R,
) -> Result<Reconciliation> {
    let q = config.q;
    let points: Vec<u64> = remote.pairs.iter().map(|(z, _)| z.value()).collect();
    let expected: Vec<u64> = config.eval_points.iter().map(|z| z.value()).collect();
    if points != expected || remote.pairs.iter().any(|(_, v)| v.modulus() != q) {
        return Err(Error::Protocol(
            "remote evaluations were taken at different points or over another field".into(),
        ));
    }
    let mine = char_poly_eval(local, config)?;
    let ratios = remote
        .pairs
        .iter()
        .zip(&mine.pairs)
        .map(|((_, theirs), (_, ours))| {
            if theirs.value() == 0 {
                return Err(Error::InvalidInput(
                    "remote set contains an evaluation point".into(),
                ));
            }
            Ok(theirs.checked_div(*ours).expect("local values are non-zero"))
        })
        .collect::<Result<Vec<_>>>()?;

    let d = remote.cardinality as i64 - local.len() as i64;
    let samples: Vec<_> = config
        .eval_points
        .iter()
        .copied()
        .zip(ratios.iter().copied())
        .collect();
    let function = interpolate_rational(q, &samples, config.m_bar, d)?;

    let only_remote = roots_as_set(&function.numerator, rng)?;
    let only_local = roots_as_set(&function.denominator, rng)?;

    let exceeded = |why: &str| Err(Error::ReconciliationBoundExceeded(why.to_string()));
    if !only_local.is_subset(local) {
        return exceeded("denominator root outside the local set");
    }
    if !only_remote.is_disjoint(local) {
        return exceeded("numerator root already present locally");
    }
    if local.len() as i64 - only_local.len() as i64 + only_remote.len() as i64
        != remote.cardinality as i64
    {
        return exceeded("recovered difference disagrees with the remote cardinality");
    }
    Ok(Reconciliation {
        ratios,
        function,
        only_remote,
        only_local,
    })
}

fn roots_as_set<R: Rng + ?Sized>(
    poly: &crate::gf::FieldPoly,
    rng: &mut R,
) -> Result<BTreeSet<u64>> {
    if poly.degree() == Some(0) {
        return Ok(BTreeSet::new());
    }
    let fail = |what: &str| {
        Err(Error::ReconciliationBoundExceeded(format!(
            "{what} {poly} does not factor over the universe"
        )))
    };
    if !is_square_free(poly)? || !splits_into_linear(poly)? {
        return fail("factor");
    }
    match find_roots(poly, rng) {
        Ok(roots) => Ok(roots.into_iter().map(|r| r.value()).collect()),
        Err(Error::NotFullySplittable(_)) => fail("factor"),
        Err(e) => Err(e),
    }
}

/// Reconciles with a doubling difference bound until it succeeds or the bound
/// would exceed `max_m_bar`. `remote_evals` is asked for a fresh message for
/// each configuration tried. Returns the successful configuration as well.
pub fn reconcile_with_retry<F>(
    local: &BTreeSet<u64>,
    mut remote_evals: F,
    config: &ReconConfig,
    max_m_bar: usize,
) -> Result<(BTreeSet<u64>, BTreeSet<u64>, ReconConfig)>
where
    F: FnMut(&ReconConfig) -> Result<CharPolyEvaluations>,
{
    let mut cfg = config.clone();
    loop {
        let evals = remote_evals(&cfg)?;
        match reconcile(local, &evals, &cfg) {
            Ok((r, l)) => return Ok((r, l, cfg)),
            Err(Error::ReconciliationBoundExceeded(why)) => {
                if cfg.m_bar * 2 > max_m_bar {
                    return Err(Error::ReconciliationBoundExceeded(why));
                }
                cfg = cfg.doubled()?;
            }
            Err(e) => return Err(e),
        }
    }
}

/// The remote party's set, rebuilt from the local set and the two differences.
pub fn reconstruct_remote(
    local: &BTreeSet<u64>,
    only_remote: &BTreeSet<u64>,
    only_local: &BTreeSet<u64>,
) -> BTreeSet<u64> {
    local
        .difference(only_local)
        .chain(only_remote.iter())
        .copied()
        .collect()
}
