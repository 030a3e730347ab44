//! Task distribution keys: bit masks tiled along the shared block sequence.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arith::gcd;
use crate::error::{Error, Result};
use crate::sobol::BlockSequence;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskDistributionKey {
    bits: Vec<bool>,
    pub owner: usize,
}

impl TaskDistributionKey {
    pub fn new(bits: Vec<bool>, owner: usize) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::InvalidParameter(
                "a task distribution key needs at least one set bit".into(),
            ));
        }
        Ok(Self { bits, owner })
    }

    pub fn parse(s: &str, owner: usize) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidInput(format!(
                    "{other:?} in key {s:?} is not a binary digit"
                ))),
            })
            .collect::<Result<_>>()?;
        Self::new(bits, owner)
    }

    /// A key of `len` bits with `ones` set bits at uniformly random positions.
    pub fn random<R: Rng + ?Sized>(len: usize, ones: usize, owner: usize, rng: &mut R) -> Result<Self> {
        if ones == 0 || ones > len {
            return Err(Error::InvalidParameter(format!(
                "cannot place {ones} ones in a {len}-bit key"
            )));
        }
        let mut bits = vec![false; len];
        for p in rand::seq::index::sample(rng, len, ones) {
            bits[p] = true;
        }
        Self::new(bits, owner)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_set(&self, pos: usize) -> bool {
        self.bits[pos]
    }

    /// Copy of this key padded with zero bits up to `len`.
    pub fn extended(&self, len: usize) -> Self {
        let mut bits = self.bits.clone();
        if len > bits.len() {
            bits.resize(len, false);
        }
        Self {
            bits,
            owner: self.owner,
        }
    }
}

impl fmt::Display for TaskDistributionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for TaskDistributionKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, 0)
    }
}

/// Where the extra ones of an overlapping key set go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPlacement {
    /// Every extra one lands on a different position, one already owned by
    /// another key; keys receive extras in turn.
    #[default]
    Shared,
    /// Keys receive extras in turn, each at an independently chosen position
    /// owned by another key; two keys may pick the same position.
    PerKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdkMode {
    NonOverlapping,
    Overlapping { pct: u32, placement: OverlapPlacement },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TdkSet {
    pub keys: Vec<TaskDistributionKey>,
    pub mode: TdkMode,
    /// `n × t` before any coprimality adjustment.
    pub base_len: usize,
}

impl TdkSet {
    pub fn key_len(&self) -> usize {
        self.keys.first().map_or(0, TaskDistributionKey::len)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Number of keys covering each position.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.key_len()];
        for k in &self.keys {
            for (i, &b) in k.bits().iter().enumerate() {
                c[i] += b as usize;
            }
        }
        c
    }

    pub fn strings(&self) -> Vec<String> {
        self.keys.iter().map(ToString::to_string).collect()
    }
}

/// `len` if it is coprime to `seq_len`, else the smallest larger integer that is.
pub fn adjust_length(len: usize, seq_len: u64) -> usize {
    let mut k = len.max(1);
    while gcd(k as u64, seq_len) != 1 {
        k += 1;
    }
    k
}

/// `n` keys with `t` ones each, carved from one random permutation of the
/// `n × t` base positions, then padded to the coprime-adjusted length.
pub fn generate_nonoverlapping<R: Rng + ?Sized>(
    n: usize,
    t: usize,
    seq_len: u64,
    rng: &mut R,
) -> Result<TdkSet> {
    let base = n.checked_mul(t).filter(|&b| b > 0).ok_or_else(|| {
        Error::InvalidParameter(format!("need n ≥ 1 and t ≥ 1, got n = {n}, t = {t}"))
    })?;
    generate_nonoverlapping_with_len(n, t, adjust_length(base, seq_len), rng)
}

/// As [`generate_nonoverlapping`] but with an explicit key length `len ≥ n × t`.
pub fn generate_nonoverlapping_with_len<R: Rng + ?Sized>(
    n: usize,
    t: usize,
    len: usize,
    rng: &mut R,
) -> Result<TdkSet> {
    if n == 0 || t == 0 {
        return Err(Error::InvalidParameter(format!(
            "need n ≥ 1 and t ≥ 1, got n = {n}, t = {t}"
        )));
    }
    let base = n * t;
    if len < base {
        return Err(Error::InvalidParameter(format!(
            "key length {len} cannot hold {n} × {t} disjoint ones"
        )));
    }
    let mut perm: Vec<usize> = (0..base).collect();
    perm.shuffle(rng);
    let keys = perm
        .chunks(t)
        .enumerate()
        .map(|(owner, group)| {
            let mut bits = vec![false; len];
            for &p in group {
                bits[p] = true;
            }
            TaskDistributionKey::new(bits, owner)
        })
        .collect::<Result<_>>()?;
    Ok(TdkSet {
        keys,
        mode: TdkMode::NonOverlapping,
        base_len: base,
    })
}

/// Adds `⌈pct × len / 100⌉` extra ones, each at a position another key
/// already covers, handing them to keys in round-robin order.
pub fn generate_overlapping<R: Rng + ?Sized>(
    base: &TdkSet,
    pct: u32,
    placement: OverlapPlacement,
    rng: &mut R,
) -> Result<TdkSet> {
    if base.mode != TdkMode::NonOverlapping {
        return Err(Error::InvalidParameter(
            "overlap is applied to a non-overlapping key set".into(),
        ));
    }
    if pct > 100 {
        return Err(Error::InvalidParameter(format!("overlap {pct}% exceeds 100%")));
    }
    let len = base.key_len();
    let extras = (pct as usize * len).div_ceil(100);
    let mut keys = base.keys.clone();
    let n = keys.len();
    if extras > 0 && n < 2 {
        return Err(Error::InvalidParameter("overlap needs at least two keys".into()));
    }
    let owner_of: Vec<Option<usize>> = (0..len)
        .map(|p| keys.iter().position(|k| k.is_set(p)))
        .collect();
    let covered: Vec<usize> = (0..len).filter(|&p| owner_of[p].is_some()).collect();

    let capacity = match placement {
        OverlapPlacement::Shared => covered.len(),
        OverlapPlacement::PerKey => covered.len() * (n - 1),
    };
    if extras > capacity {
        return Err(Error::InvalidParameter(format!(
            "{extras} extra ones requested but only {capacity} placements exist"
        )));
    }

    let mut used = vec![false; len];
    let mut turn = 0usize;
    for _ in 0..extras {
        // Advance to the next key that still has a legal position.
        let mut candidates = Vec::new();
        for _ in 0..n {
            let k = turn % n;
            turn += 1;
            candidates = covered
                .iter()
                .copied()
                .filter(|&p| !keys[k].is_set(p))
                .filter(|&p| placement == OverlapPlacement::PerKey || !used[p])
                .collect();
            if !candidates.is_empty() {
                let p = *candidates.choose(rng).expect("non-empty");
                keys[k].bits[p] = true;
                used[p] = true;
                break;
            }
        }
        if candidates.is_empty() {
            return Err(Error::InvalidParameter(
                "ran out of positions for overlap".into(),
            ));
        }
    }
    Ok(TdkSet {
        keys,
        mode: TdkMode::Overlapping { pct, placement },
        base_len: base.base_len,
    })
}

/// Sequence positions selected by tiling `key` from position 0.
pub fn interpret_positions(key: &TaskDistributionKey, seq_len: usize) -> Vec<usize> {
    let l = key.len();
    (0..seq_len).filter(|&i| key.bits[i % l]).collect()
}

pub fn interpret(key: &TaskDistributionKey, seq: &BlockSequence) -> BlockSequence {
    let l = key.len();
    seq.iter()
        .enumerate()
        .filter(|(i, _)| key.bits[i % l])
        .map(|(_, &b)| b)
        .collect::<Vec<_>>()
        .into()
}

/// Counts of `blocks` falling into each of `segments` equal slices of
/// `[0, constant)`.
pub fn segment_counts(blocks: &[u64], constant: u64, segments: usize) -> Vec<usize> {
    let mut counts = vec![0; segments];
    for &b in blocks {
        let s = ((b as u128 * segments as u128) / constant as u128) as usize;
        counts[s.min(segments - 1)] += 1;
    }
    counts
}

/// max/min of segment counts; infinite if a segment is empty.
pub fn max_min_ratio(counts: &[usize]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if min == 0 {
        f64::INFINITY
    } else {
        max as f64 / min as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PAPER_SEQ: [u64; 9] = [1216, 5312, 3264, 7360, 704, 4800, 2752, 6848, 1728];

    fn key(s: &str) -> TaskDistributionKey {
        s.parse().unwrap()
    }

    #[test]
    fn interpretation_examples() {
        let seq = BlockSequence::from(PAPER_SEQ.to_vec());
        assert_eq!(interpret(&key("10101"), &seq).indices, [1216, 3264, 704, 4800, 6848]);
        assert_eq!(interpret(&key("01010"), &seq).indices, [5312, 7360, 2752, 1728]);
        assert_eq!(interpret(&key("111"), &seq), seq);
        assert_eq!(interpret(&key("1"), &BlockSequence::default()).len(), 0);
    }

    #[test]
    fn length_adjustment() {
        assert_eq!(adjust_length(16, 1 << 20), 17);
        assert_eq!(adjust_length(17, 1 << 12), 17);
        assert_eq!(adjust_length(90, 838_860), 91);
        assert_eq!(adjust_length(90, 209_715), 91);
        assert_eq!(adjust_length(1, 64), 1);
        assert_eq!(adjust_length(6, 35), 6);
        assert_eq!(adjust_length(14, 30), 17);
    }

    #[test]
    fn nonoverlapping_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = generate_nonoverlapping(4, 4, 1 << 20, &mut rng).unwrap();
        assert_eq!(set.key_len(), 17);
        assert_eq!(set.base_len, 16);
        assert!(set.keys.iter().all(|k| k.ones() == 4));
        let cov = set.coverage();
        assert_eq!(&cov[..16], &[1; 16]);
        assert_eq!(cov[16], 0);
        let single = generate_nonoverlapping(1, 1, 1 << 20, &mut rng).unwrap();
        assert_eq!(single.strings(), ["1"]);
        assert!(generate_nonoverlapping(0, 3, 8, &mut rng).is_err());
    }

    #[test]
    fn overlap_like_the_example() {
        let base: Vec<TaskDistributionKey> = [
            "1010000000001001",
            "0100011000100000",
            "0000100101000100",
            "0001000010010010",
        ]
        .iter()
        .enumerate()
        .map(|(i, s)| TaskDistributionKey::parse(s, i).unwrap())
        .collect();
        let set = TdkSet {
            keys: base,
            mode: TdkMode::NonOverlapping,
            base_len: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let over = generate_overlapping(&set, 20, OverlapPlacement::Shared, &mut rng).unwrap();
        let extra: Vec<usize> = over
            .keys
            .iter()
            .zip(&set.keys)
            .map(|(a, b)| a.ones() - b.ones())
            .collect();
        assert_eq!(extra, [1, 1, 1, 1]);
        let cov = over.coverage();
        assert_eq!(cov.iter().filter(|&&c| c == 2).count(), 4);
        assert!(cov.iter().all(|&c| c >= 1));
        let same = generate_overlapping(&set, 0, OverlapPlacement::Shared, &mut rng).unwrap();
        assert_eq!(same.keys, set.keys);
        assert!(generate_overlapping(&over, 10, OverlapPlacement::Shared, &mut rng).is_err());
        assert!(generate_overlapping(&set, 100, OverlapPlacement::PerKey, &mut rng).is_ok());
    }

    #[test]
    fn segment_helpers() {
        assert_eq!(segment_counts(&[0, 15, 16, 63], 64, 4), [2, 1, 0, 1]);
        assert!(max_min_ratio(&[2, 1, 0, 1]).is_infinite());
        assert_eq!(max_min_ratio(&[4, 2, 3, 2]), 2.0);
    }

    proptest! {
        #[test]
        fn nonoverlapping_partitions_positions(n in 1usize..12, t in 1usize..6, log in 4u32..21, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = generate_nonoverlapping(n, t, 1u64 << log, &mut rng).unwrap();
            prop_assert_eq!(gcd(set.key_len() as u64, 1u64 << log), 1);
            let cov = set.coverage();
            prop_assert!(cov[..n * t].iter().all(|&c| c == 1));
            prop_assert!(cov[n * t..].iter().all(|&c| c == 0));
            // With the unadjusted length every sequence position is taken exactly once.
            let exact = generate_nonoverlapping_with_len(n, t, n * t, &mut rng).unwrap();
            let seq_len = 3 * n * t + 1;
            let mut hits = vec![0; seq_len];
            for k in &exact.keys {
                for p in interpret_positions(k, seq_len) {
                    hits[p] += 1;
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }

        #[test]
        fn overlap_counts(n in 2usize..8, t in 1usize..6, pct in 0u32..60, seed in any::<u64>(), per_key in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = generate_nonoverlapping_with_len(n, t, n * t, &mut rng).unwrap();
            let placement = if per_key { OverlapPlacement::PerKey } else { OverlapPlacement::Shared };
            let extras = (pct as usize * n * t).div_ceil(100);
            match generate_overlapping(&base, pct, placement, &mut rng) {
                Ok(over) => {
                    let before: usize = base.coverage().iter().sum();
                    let after: usize = over.coverage().iter().sum();
                    prop_assert_eq!(after - before, extras);
                    for (a, b) in over.keys.iter().zip(&base.keys) {
                        for p in 0..a.len() {
                            prop_assert!(!b.is_set(p) || a.is_set(p));
                        }
                    }
                    // Every extra one creates exactly one new shared (key, position) pair.
                    let shared: usize = over.coverage().iter().map(|&c| c.saturating_sub(1)).sum();
                    prop_assert_eq!(shared, extras);
                }
                Err(_) => prop_assert!(extras > n * t),
            }
        }
    }
}
