//! String reconciliation over modified de Bruijn graphs.
//!
//! A binary string is decorated with a sentinel at each end and shredded into
//! overlapping pieces of the mask length. The pieces form a multigraph on
//! `(l_m − 1)`-grams whose Eulerian trails from the start gram to the end gram
//! spell every string with the same piece multiset; a single index into the
//! deterministic enumeration of those trails pins the original string. Two
//! hosts reconcile their piece multisets (hashed to integer sets) with
//! [`crate::setrecon`], exchange the differing pieces and their indices, and
//! each decodes the other's string.
//!
//! Trails are ordered by depth-first exploration taking the `1` edge before
//! the `0` edge before the sentinel edge, with parallel copies of a piece
//! treated as distinguishable and tried in ascending slot order. Indices are
//! computed by ranking against BEST-theorem trail counts, so strings far too
//! long to enumerate still get exact indices.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::setrecon::{char_poly_eval, reconcile_detailed, CharPolyEvaluations, ReconConfig, Reconciliation};

/// Graphs with more raw Eulerian cycles than this refuse to be enumerated.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    Zero,
    One,
    Sentinel,
}

impl Symbol {
    pub fn as_char(self) -> char {
        match self {
            Symbol::Zero => '0',
            Symbol::One => '1',
            Symbol::Sentinel => '$',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        match c {
            '0' => Ok(Symbol::Zero),
            '1' => Ok(Symbol::One),
            '$' => Ok(Symbol::Sentinel),
            other => Err(Error::InvalidInput(format!("unexpected symbol {other:?}"))),
        }
    }

    /// Position in the edge exploration order.
    fn explore_rank(self) -> u8 {
        match self {
            Symbol::One => 0,
            Symbol::Zero => 1,
            Symbol::Sentinel => 2,
        }
    }
}

fn symbols_to_string(symbols: &[Symbol]) -> String {
    symbols.iter().map(|s| s.as_char()).collect()
}

fn parse_symbols(s: &str) -> Result<Vec<Symbol>> {
    s.chars().map(Symbol::from_char).collect()
}

/// Parses a sentinel-free binary string.
fn parse_binary(s: &str) -> Result<Vec<Symbol>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(Symbol::Zero),
            '1' => Ok(Symbol::One),
            '$' => Err(Error::InvalidInput("the sentinel may not occur in the string".into())),
            other => Err(Error::InvalidInput(format!("{other:?} is not a binary digit"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Piece(Vec<Symbol>);

impl Piece {
    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Piece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&symbols_to_string(&self.0))
    }
}

impl FromStr for Piece {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(Piece(parse_symbols(s)?))
    }
}

impl Serialize for Piece {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Piece {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PieceEntry {
    pub piece: Piece,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PieceMultiset {
    mask_len: usize,
    counts: BTreeMap<Piece, u64>,
}

impl PieceMultiset {
    pub fn from_entries<I>(mask_len: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Piece, u64)>,
    {
        let mut counts = BTreeMap::new();
        for (piece, count) in entries {
            if piece.len() != mask_len {
                return Err(Error::MalformedMultiset(format!(
                    "piece {piece} does not have length {mask_len}"
                )));
            }
            if count > 0 {
                *counts.entry(piece).or_insert(0) += count;
            }
        }
        Ok(Self { mask_len, counts })
    }

    pub fn mask_len(&self) -> usize {
        self.mask_len
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, piece: &Piece) -> u64 {
        self.counts.get(piece).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Piece, u64)> {
        self.counts.iter().map(|(p, &c)| (p, c))
    }

    pub fn entries(&self) -> Vec<PieceEntry> {
        self.iter()
            .map(|(p, c)| PieceEntry {
                piece: p.clone(),
                count: c,
            })
            .collect()
    }

    /// Replaces whole `(piece, count)` entries: every removed entry must be
    /// present with exactly that count.
    pub fn apply_difference(&self, remove: &[PieceEntry], add: &[PieceEntry]) -> Result<Self> {
        let mut counts = self.counts.clone();
        for e in remove {
            if counts.get(&e.piece) != Some(&e.count) {
                return Err(Error::MalformedMultiset(format!(
                    "cannot remove {}×{}: not held with that count",
                    e.count, e.piece
                )));
            }
            counts.remove(&e.piece);
        }
        let mut out = Self {
            mask_len: self.mask_len,
            counts,
        };
        for e in add {
            if e.piece.len() != self.mask_len || e.count == 0 {
                return Err(Error::MalformedMultiset(format!("bad entry {}×{}", e.count, e.piece)));
            }
            if out.counts.insert(e.piece.clone(), e.count).is_some() {
                return Err(Error::MalformedMultiset(format!(
                    "piece {} added while still present",
                    e.piece
                )));
            }
        }
        Ok(out)
    }
}

impl fmt::Display for PieceMultiset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        let mut first = true;
        for (p, c) in self.iter() {
            for _ in 0..c {
                if !first {
                    f.write_str(", ")?;
                }
                first = false;
                write!(f, "{p}")?;
            }
        }
        f.write_str("}")
    }
}

/// Decorates `s` as `$s$` and slides a window of width `mask_len` over it.
pub fn shred(s: &str, mask_len: usize) -> Result<PieceMultiset> {
    if mask_len < 2 {
        return Err(Error::InvalidParameter("mask length must be at least 2".into()));
    }
    let body = parse_binary(s)?;
    if body.len() + 1 < mask_len {
        return Err(Error::InvalidParameter(format!(
            "string of length {} is shorter than mask length − 1 = {}",
            body.len(),
            mask_len - 1
        )));
    }
    let decorated = decorate(&body);
    PieceMultiset::from_entries(
        mask_len,
        decorated.windows(mask_len).map(|w| (Piece(w.to_vec()), 1)),
    )
}

fn decorate(body: &[Symbol]) -> Vec<Symbol> {
    let mut v = Vec::with_capacity(body.len() + 2);
    v.push(Symbol::Sentinel);
    v.extend_from_slice(body);
    v.push(Symbol::Sentinel);
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub label: Symbol,
    pub multiplicity: u64,
}

#[derive(Debug, Clone)]
pub struct ModifiedDeBruijnGraph {
    mask_len: usize,
    vertices: Vec<Vec<Symbol>>,
    edges: Vec<Edge>,
    /// Outgoing edge ids per vertex, in exploration order.
    out: Vec<Vec<usize>>,
    start: usize,
    end: usize,
}

pub fn build_graph(ms: &PieceMultiset) -> Result<ModifiedDeBruijnGraph> {
    let l = ms.mask_len();
    if l < 2 {
        return Err(Error::MalformedMultiset("mask length below 2".into()));
    }
    let malformed = |m: String| Err(Error::MalformedMultiset(m));
    let mut grams = BTreeSet::new();
    let mut start_piece = None;
    let mut end_piece = None;
    for (p, c) in ms.iter() {
        let sym = p.symbols();
        let sentinels = sym.iter().filter(|&&s| s == Symbol::Sentinel).count();
        let leading = sym[0] == Symbol::Sentinel;
        let trailing = sym[l - 1] == Symbol::Sentinel;
        match (sentinels, leading, trailing) {
            (0, _, _) => {}
            (1, true, false) => {
                if start_piece.replace(p.clone()).is_some() || c != 1 {
                    return malformed("more than one leading boundary piece".into());
                }
            }
            (1, false, true) => {
                if end_piece.replace(p.clone()).is_some() || c != 1 {
                    return malformed("more than one trailing boundary piece".into());
                }
            }
            _ => return malformed(format!("piece {p} has a misplaced sentinel")),
        }
        grams.insert(sym[..l - 1].to_vec());
        grams.insert(sym[1..].to_vec());
    }
    let (Some(sp), Some(ep)) = (start_piece, end_piece) else {
        return malformed("missing boundary piece".into());
    };
    let vertices: Vec<Vec<Symbol>> = grams.into_iter().collect();
    let id = |g: &[Symbol]| vertices.binary_search_by(|v| v.as_slice().cmp(g)).expect("gram present");
    let start = id(&sp.symbols()[..l - 1]);
    let end = id(&ep.symbols()[1..]);

    let mut edges = Vec::with_capacity(ms.distinct());
    let mut out = vec![Vec::new(); vertices.len()];
    let mut balance = vec![0i64; vertices.len()];
    for (p, c) in ms.iter() {
        let sym = p.symbols();
        let from = id(&sym[..l - 1]);
        let to = id(&sym[1..]);
        out[from].push(edges.len());
        edges.push(Edge {
            from,
            to,
            label: sym[l - 1],
            multiplicity: c,
        });
        balance[from] += c as i64;
        balance[to] -= c as i64;
    }
    balance[end] += 1;
    balance[start] -= 1;
    if let Some(v) = balance.iter().position(|&b| b != 0) {
        return malformed(format!(
            "vertex {} is unbalanced",
            symbols_to_string(&vertices[v])
        ));
    }
    for list in &mut out {
        list.sort_by_key(|&e| edges[e].label.explore_rank());
    }

    // Every vertex must be reachable from the start along real edges.
    let mut seen = vec![false; vertices.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(v) = stack.pop() {
        for &e in &out[v] {
            let t = edges[e].to;
            if !seen[t] {
                seen[t] = true;
                stack.push(t);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return malformed("pieces do not form a connected graph".into());
    }

    Ok(ModifiedDeBruijnGraph {
        mask_len: l,
        vertices,
        edges,
        out,
        start,
        end,
    })
}

fn factorial(n: u64) -> BigUint {
    (2..=n).fold(BigUint::one(), |acc, k| acc * k)
}

/// Fraction-free Gaussian elimination.
fn bareiss_det(mut m: Vec<Vec<BigInt>>) -> BigInt {
    let n = m.len();
    if n == 0 {
        return BigInt::one();
    }
    let mut negate = false;
    let mut prev = BigInt::one();
    for k in 0..n - 1 {
        if m[k][k].is_zero() {
            let Some(p) = (k + 1..n).find(|&i| !m[i][k].is_zero()) else {
                return BigInt::zero();
            };
            m.swap(k, p);
            negate = !negate;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let v = (&m[i][j] * &m[k][k] - &m[i][k] * &m[k][j]) / &prev;
                m[i][j] = v;
            }
        }
        prev = m[k][k].clone();
    }
    let d = m[n - 1][n - 1].clone();
    if negate {
        -d
    } else {
        d
    }
}

impl ModifiedDeBruijnGraph {
    pub fn mask_len(&self) -> usize {
        self.mask_len
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex_label(&self, v: usize) -> String {
        symbols_to_string(&self.vertices[v])
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// Real edges only, counting parallel copies.
    pub fn edge_count(&self) -> u64 {
        self.edges.iter().map(|e| e.multiplicity).sum()
    }

    /// In- and out-degree per vertex, including the artificial edge.
    pub fn degrees(&self) -> Vec<(u64, u64)> {
        let mut d = vec![(0u64, 0u64); self.vertices.len()];
        for e in &self.edges {
            d[e.from].1 += e.multiplicity;
            d[e.to].0 += e.multiplicity;
        }
        d[self.end].1 += 1;
        d[self.start].0 += 1;
        d
    }

    /// Number of trails from `from` to the end vertex that use every
    /// remaining edge exactly once, with parallel copies distinguishable.
    /// Equals the Eulerian circuit count of the remaining edges closed by an
    /// artificial edge back to `from`.
    fn completions(&self, remaining: &[u64], from: usize) -> BigUint {
        let n = self.vertices.len();
        let mut adj = vec![vec![0u64; n]; n];
        let mut any = false;
        for (e, &r) in self.edges.iter().zip(remaining) {
            if r > 0 {
                adj[e.from][e.to] += r;
                any = true;
            }
        }
        if !any {
            return if from == self.end {
                BigUint::one()
            } else {
                BigUint::zero()
            };
        }
        adj[self.end][from] += 1;
        best_circuits(&adj)
    }

    fn full_remaining(&self) -> Vec<u64> {
        self.edges.iter().map(|e| e.multiplicity).collect()
    }

    /// `(raw, distinct)`: raw counts trails with parallel copies
    /// distinguishable; distinct divides out their permutations.
    pub fn count_cycles_best(&self) -> (BigUint, BigUint) {
        let raw = self.completions(&self.full_remaining(), self.start);
        let perms = self
            .edges
            .iter()
            .fold(BigUint::one(), |acc, e| acc * factorial(e.multiplicity));
        let distinct = &raw / perms;
        (raw, distinct)
    }

    /// Every raw Eulerian cycle, decoded to its decorated string, in
    /// enumeration order.
    pub fn enumerate_cycles(&self) -> Result<Vec<String>> {
        let (raw, _) = self.count_cycles_best();
        if raw > BigUint::from(ENUMERATION_LIMIT) {
            return Err(Error::TooManyCycles {
                count: raw.to_string(),
                limit: ENUMERATION_LIMIT,
            });
        }
        let mut remaining = self.full_remaining();
        let mut path = self.vertices[self.start].clone();
        let mut out = Vec::with_capacity(raw.to_usize().unwrap_or(0));
        self.backtrack(self.start, &mut remaining, self.edge_count(), &mut path, &mut out);
        Ok(out)
    }

    fn backtrack(
        &self,
        v: usize,
        remaining: &mut [u64],
        left: u64,
        path: &mut Vec<Symbol>,
        out: &mut Vec<String>,
    ) {
        if left == 0 {
            if v == self.end {
                out.push(symbols_to_string(path));
            }
            return;
        }
        for &e in &self.out[v] {
            let copies = remaining[e];
            if copies == 0 {
                continue;
            }
            // Each unused parallel copy leads to an identical subtree.
            let before = out.len();
            remaining[e] -= 1;
            path.push(self.edges[e].label);
            self.backtrack(self.edges[e].to, remaining, left - 1, path, out);
            path.pop();
            remaining[e] += 1;
            let produced = out.len() - before;
            for _ in 1..copies {
                out.extend_from_within(before..before + produced);
            }
        }
    }

    /// Smallest 1-based enumeration index whose cycle spells `decorated`.
    pub fn rank(&self, decorated: &str) -> Result<BigUint> {
        let symbols = parse_symbols(decorated)?;
        let l = self.mask_len;
        let not_in_graph = || {
            Err(Error::InvalidInput(format!(
                "{decorated} is not an Eulerian cycle of this graph"
            )))
        };
        if symbols.len() < l || symbols[..l - 1] != self.vertices[self.start][..] {
            return not_in_graph();
        }
        let mut remaining = self.full_remaining();
        let mut index = BigUint::one();
        let mut v = self.start;
        for &next in &symbols[l - 1..] {
            let mut chosen = None;
            for &e in &self.out[v] {
                if remaining[e] == 0 {
                    continue;
                }
                if self.edges[e].label == next {
                    chosen = Some(e);
                    break;
                }
                remaining[e] -= 1;
                let c = self.completions(&remaining, self.edges[e].to);
                remaining[e] += 1;
                index += c * remaining[e];
            }
            let Some(e) = chosen else {
                return not_in_graph();
            };
            remaining[e] -= 1;
            v = self.edges[e].to;
        }
        if v != self.end || remaining.iter().any(|&r| r != 0) {
            return not_in_graph();
        }
        Ok(index)
    }

    /// Decorated string of the cycle at a 1-based enumeration index.
    pub fn unrank(&self, index: &BigUint) -> Result<String> {
        let (raw, _) = self.count_cycles_best();
        if index.is_zero() || *index > raw {
            return Err(Error::AmbiguousIndex {
                index: index.to_string(),
                count: raw.to_string(),
            });
        }
        let mut remaining = self.full_remaining();
        let mut left = index - 1u32;
        let mut v = self.start;
        let mut path = self.vertices[self.start].clone();
        for _ in 0..self.edge_count() {
            let mut chosen = None;
            for &e in &self.out[v] {
                let copies = remaining[e];
                if copies == 0 {
                    continue;
                }
                remaining[e] -= 1;
                let c = self.completions(&remaining, self.edges[e].to);
                remaining[e] += 1;
                let block = &c * copies;
                if left < block {
                    left %= c;
                    chosen = Some(e);
                    break;
                }
                left -= block;
            }
            let e = chosen.expect("index within the raw count always finds an edge");
            remaining[e] -= 1;
            path.push(self.edges[e].label);
            v = self.edges[e].to;
        }
        Ok(symbols_to_string(&path))
    }
}

/// BEST theorem: Eulerian circuits of a balanced multigraph given by its
/// adjacency counts (circuits counted once each, parallel edges
/// distinguishable). Zero when unbalanced or disconnected.
fn best_circuits(adj: &[Vec<u64>]) -> BigUint {
    let n = adj.len();
    let outdeg: Vec<u64> = adj.iter().map(|row| row.iter().sum()).collect();
    let indeg: Vec<u64> = (0..n).map(|j| adj.iter().map(|row| row[j]).sum()).collect();
    if outdeg != indeg {
        return BigUint::zero();
    }
    let active: Vec<usize> = (0..n).filter(|&v| outdeg[v] > 0).collect();
    // Laplacian restricted to active vertices, minus the first row/column.
    let minor: Vec<Vec<BigInt>> = active[1..]
        .iter()
        .map(|&i| {
            active[1..]
                .iter()
                .map(|&j| {
                    if i == j {
                        BigInt::from(outdeg[i] - adj[i][i])
                    } else {
                        -BigInt::from(adj[i][j])
                    }
                })
                .collect()
        })
        .collect();
    let delta = bareiss_det(minor);
    if !delta.is_positive() {
        return BigUint::zero();
    }
    let delta = delta.to_biguint().expect("positive");
    active
        .iter()
        .fold(delta, |acc, &v| acc * factorial(outdeg[v] - 1))
}

/// How distinct pieces (with their occurrence counts) map to integers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PieceEncoding {
    pub sentinel_bits: String,
    pub count_bits: u32,
    /// Prefix a `1` so leading zeros of the piece survive.
    pub marker: bool,
    pub modulus: Option<u64>,
}

impl Default for PieceEncoding {
    fn default() -> Self {
        Self {
            sentinel_bits: "1000101".into(),
            count_bits: 16,
            marker: true,
            modulus: None,
        }
    }
}

impl PieceEncoding {
    /// The lossy demonstration encoding: two count bits and reduction mod 47.
    pub fn paper_parity() -> Self {
        Self {
            sentinel_bits: "1000101".into(),
            count_bits: 2,
            marker: false,
            modulus: Some(47),
        }
    }

    /// Largest bit length of an encoded value for the given mask length.
    pub fn value_bits(&self, mask_len: usize) -> u32 {
        if let Some(m) = self.modulus {
            return 64 - (m - 1).leading_zeros();
        }
        let piece = mask_len - 1 + self.sentinel_bits.len().max(1);
        (piece as u32) + self.count_bits + self.marker as u32
    }

    /// Rejects sentinel patterns under which a leading-sentinel piece and a
    /// trailing-sentinel piece could encode to the same bits.
    pub fn check_decodable(&self, mask_len: usize) -> Result<()> {
        let p = &self.sentinel_bits;
        if p.len() < 2 || p.chars().any(|c| c != '0' && c != '1') {
            return Err(Error::InvalidParameter(format!(
                "sentinel pattern {p:?} must be at least two binary digits"
            )));
        }
        if mask_len < 2 {
            return Err(Error::InvalidParameter("mask length below 2".into()));
        }
        let k = mask_len - 1;
        if k >= p.len() {
            return Err(Error::InvalidParameter(format!(
                "sentinel pattern {p} must be longer than the mask length − 1 = {k}"
            )));
        }
        let border = p.len() - k;
        if p[..border] == p[p.len() - border..] {
            return Err(Error::InvalidParameter(format!(
                "sentinel pattern {p} has period {k}, so boundary pieces are ambiguous"
            )));
        }
        if self.count_bits == 0 || self.value_bits(mask_len) > 63 {
            return Err(Error::InvalidParameter(
                "encoded pieces do not fit in 63 bits".into(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, piece: &Piece, count: u64) -> Result<u64> {
        if count == 0 || (self.count_bits < 64 && count >> self.count_bits != 0) {
            return Err(Error::InvalidParameter(format!(
                "count {count} of piece {piece} does not fit in {} bits",
                self.count_bits
            )));
        }
        let mut bits = String::new();
        if self.marker {
            bits.push('1');
        }
        for s in piece.symbols() {
            match s {
                Symbol::Zero => bits.push('0'),
                Symbol::One => bits.push('1'),
                Symbol::Sentinel => bits.push_str(&self.sentinel_bits),
            }
        }
        bits.push_str(&format!("{count:0width$b}", width = self.count_bits as usize));
        let raw = BigUint::parse_bytes(bits.as_bytes(), 2)
            .ok_or_else(|| Error::InvalidParameter("empty encoding".into()))?;
        let value = match self.modulus {
            Some(m) => raw % m,
            None => raw,
        };
        value.to_u64().ok_or_else(|| {
            Error::InvalidParameter(format!("encoding of {piece} exceeds 64 bits"))
        })
    }
}

/// Hashed piece set with the table needed to map values back to entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashedPieces {
    pub table: BTreeMap<u64, PieceEntry>,
}

impl HashedPieces {
    pub fn values(&self) -> BTreeSet<u64> {
        self.table.keys().copied().collect()
    }

    pub fn entries_for(&self, values: &BTreeSet<u64>) -> Result<Vec<PieceEntry>> {
        values
            .iter()
            .map(|v| {
                self.table.get(v).cloned().ok_or_else(|| {
                    Error::Protocol(format!("value {v} does not belong to this piece set"))
                })
            })
            .collect()
    }
}

pub fn multiset_to_set(ms: &PieceMultiset, encoding: &PieceEncoding) -> Result<HashedPieces> {
    if encoding.modulus.is_none() {
        encoding.check_decodable(ms.mask_len())?;
    }
    let mut table: BTreeMap<u64, PieceEntry> = BTreeMap::new();
    for (piece, count) in ms.iter() {
        let value = encoding.encode(piece, count)?;
        let entry = PieceEntry {
            piece: piece.clone(),
            count,
        };
        if let Some(prev) = table.get(&value) {
            return Err(Error::HashCollision {
                first: format!("{}×{}", prev.count, prev.piece),
                second: format!("{}×{}", count, piece),
                value,
            });
        }
        table.insert(value, entry);
    }
    Ok(HashedPieces { table })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    A,
    B,
}

/// One message on the reconciliation channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionMessage {
    /// Characteristic-polynomial evaluations of the sender's piece set.
    Evaluations { cardinality: u64, pairs: Vec<(i64, u64)> },
    /// Hashed values whose pieces the receiver is asked to reveal.
    Request { values: Vec<u64> },
    /// Pieces present only on the sender's side.
    Pieces { pieces: Vec<PieceEntry> },
    /// Cycle index of the sender's string, as a decimal string.
    Index { index: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub messages: Vec<(Party, SessionMessage)>,
}

impl Transcript {
    pub fn send(&mut self, from: Party, msg: SessionMessage) {
        self.messages.push((from, msg));
    }

    pub fn eval_pairs(&self) -> usize {
        self.count(|m| match m {
            SessionMessage::Evaluations { pairs, .. } => pairs.len(),
            _ => 0,
        })
    }

    pub fn piece_entries(&self) -> usize {
        self.count(|m| match m {
            SessionMessage::Pieces { pieces } => pieces.len(),
            _ => 0,
        })
    }

    pub fn requested_values(&self) -> usize {
        self.count(|m| match m {
            SessionMessage::Request { values } => values.len(),
            _ => 0,
        })
    }

    pub fn indices(&self) -> usize {
        self.count(|m| matches!(m, SessionMessage::Index { .. }) as usize)
    }

    fn count(&self, f: impl Fn(&SessionMessage) -> usize) -> usize {
        self.messages.iter().map(|(_, m)| f(m)).sum()
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Everything one host derives from its own string.
#[derive(Debug, Clone)]
pub struct HostState {
    pub decorated: String,
    pub multiset: PieceMultiset,
    pub graph: ModifiedDeBruijnGraph,
    pub index: BigUint,
    pub hashed: HashedPieces,
}

impl HostState {
    pub fn new(s: &str, mask_len: usize, encoding: &PieceEncoding) -> Result<Self> {
        let multiset = shred(s, mask_len)?;
        let graph = build_graph(&multiset)?;
        let decorated = format!("${s}$");
        let index = graph.rank(&decorated)?;
        let hashed = multiset_to_set(&multiset, encoding)?;
        Ok(Self {
            decorated,
            multiset,
            graph,
            index,
            hashed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StringReconOutcome {
    pub a: HostState,
    pub b: HostState,
    pub reconciliation: Reconciliation,
    pub a_learns: String,
    pub b_learns: String,
    pub transcript: Transcript,
}

fn strip(decorated: &str) -> String {
    decorated.trim_matches('$').to_string()
}

fn evaluations_message(e: &CharPolyEvaluations) -> SessionMessage {
    SessionMessage::Evaluations {
        cardinality: e.cardinality,
        pairs: e.pairs.iter().map(|(z, v)| (z.centered(), v.value())).collect(),
    }
}

fn decode_with(ms: &PieceMultiset, index: &str) -> Result<String> {
    let index: BigUint = index
        .parse()
        .map_err(|_| Error::Protocol(format!("malformed index {index:?}")))?;
    Ok(strip(&build_graph(ms)?.unrank(&index)?))
}

/// Both hosts learn each other's string. Host B performs the interpolation
/// and factoring; host A only evaluates and looks pieces up.
pub fn string_recon(
    host_a: &str,
    host_b: &str,
    mask_len: usize,
    encoding: &PieceEncoding,
    config: &ReconConfig,
) -> Result<StringReconOutcome> {
    let a = HostState::new(host_a, mask_len, encoding)?;
    let b = HostState::new(host_b, mask_len, encoding)?;
    let mut transcript = Transcript::default();

    let evals_a = char_poly_eval(&a.hashed.values(), config)?;
    transcript.send(Party::A, evaluations_message(&evals_a));

    let mut rng = ChaCha8Rng::seed_from_u64(config.modulus());
    let recon = reconcile_detailed(&b.hashed.values(), &evals_a, config, &mut rng)?;
    let only_a = &recon.only_remote;
    let only_b = &recon.only_local;

    let b_pieces = b.hashed.entries_for(only_b)?;
    transcript.send(Party::B, SessionMessage::Request { values: only_a.iter().copied().collect() });
    transcript.send(Party::B, SessionMessage::Pieces { pieces: b_pieces.clone() });
    transcript.send(Party::B, SessionMessage::Index { index: b.index.to_string() });

    let a_pieces = a.hashed.entries_for(only_a)?;
    transcript.send(Party::A, SessionMessage::Pieces { pieces: a_pieces.clone() });
    transcript.send(Party::A, SessionMessage::Index { index: a.index.to_string() });

    let ms_b_at_a = a.multiset.apply_difference(&a_pieces, &b_pieces)?;
    let ms_a_at_b = b.multiset.apply_difference(&b_pieces, &a_pieces)?;
    let a_learns = decode_with(&ms_b_at_a, &b.index.to_string())?;
    let b_learns = decode_with(&ms_a_at_b, &a.index.to_string())?;

    Ok(StringReconOutcome {
        a,
        b,
        reconciliation: recon,
        a_learns,
        b_learns,
        transcript,
    })
}

/// Options shared by the coordinator and every SUBTPA for key distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistributionParams {
    pub mask_len: usize,
    pub encoding: PieceEncoding,
}

impl Default for DistributionParams {
    fn default() -> Self {
        Self {
            mask_len: 3,
            encoding: PieceEncoding::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Distribution {
    pub key: String,
    pub m_bar: usize,
    pub transcript: Transcript,
}

/// Delivers `coordinator_keys[subtpa_id]` to a SUBTPA that holds only
/// `common_key`. The coordinator (party A) sends piece-set evaluations, the
/// difference bound, its key's cycle index and, on request, its differing
/// pieces; the SUBTPA (party B) interpolates, factors and decodes.
pub fn distribute_tdk(
    coordinator_keys: &[String],
    common_key: &str,
    subtpa_id: usize,
    params: &DistributionParams,
) -> Result<Distribution> {
    let key = coordinator_keys.get(subtpa_id).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "no key for SUBTPA {subtpa_id} among {}",
            coordinator_keys.len()
        ))
    })?;
    let enc = &params.encoding;
    let l = params.mask_len;

    // Coordinator side: bookkeeping on both piece sets it already knows.
    let coord = HostState::new(key, l, enc)?;
    let coord_common = multiset_to_set(&shred(common_key, l)?, enc)?;
    let diff = coord
        .hashed
        .values()
        .symmetric_difference(&coord_common.values())
        .count();
    let m_bar = diff.max(1);
    let config = ReconConfig::for_bit_length(enc.value_bits(l), m_bar)?;
    let mut transcript = Transcript::default();
    let evals = char_poly_eval(&coord.hashed.values(), &config)?;
    transcript.send(Party::A, evaluations_message(&evals));
    transcript.send(Party::A, SessionMessage::Index { index: coord.index.to_string() });

    // SUBTPA side.
    let own_ms = shred(common_key, l)?;
    let own = multiset_to_set(&own_ms, enc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(subtpa_id as u64);
    let recon = reconcile_detailed(&own.values(), &evals, &config, &mut rng)?;
    transcript.send(
        Party::B,
        SessionMessage::Request { values: recon.only_remote.iter().copied().collect() },
    );

    let pieces = coord.hashed.entries_for(&recon.only_remote)?;
    transcript.send(Party::A, SessionMessage::Pieces { pieces: pieces.clone() });

    let removed = own.entries_for(&recon.only_local)?;
    let rebuilt = own_ms.apply_difference(&removed, &pieces)?;
    let learned = decode_with(&rebuilt, &coord.index.to_string())?;
    Ok(Distribution {
        key: learned,
        m_bar,
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const SIGMA_A: &str = "10010101";
    const SIGMA_B: &str = "101101001";

    fn pieces(ms: &PieceMultiset) -> Vec<String> {
        let mut v: Vec<String> = ms
            .iter()
            .flat_map(|(p, c)| std::iter::repeat_n(p.to_string(), c as usize))
            .collect();
        v.sort();
        v
    }

    fn sorted(xs: &[&str]) -> Vec<String> {
        let mut v: Vec<String> = xs.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    }

    #[test]
    fn shredding_examples() {
        assert_eq!(
            pieces(&shred(SIGMA_A, 3).unwrap()),
            sorted(&["$10", "100", "001", "010", "101", "010", "101", "01$"])
        );
        assert_eq!(
            pieces(&shred(SIGMA_B, 3).unwrap()),
            sorted(&["$10", "101", "011", "110", "101", "010", "100", "001", "01$"])
        );
        assert_eq!(pieces(&shred("10", 3).unwrap()), sorted(&["$10", "10$"]));
        assert!(matches!(shred("10$1", 3), Err(Error::InvalidInput(_))));
        assert!(shred("1", 3).is_err());
    }

    #[test]
    fn host_b_cycles() {
        let g = build_graph(&shred(SIGMA_B, 3).unwrap()).unwrap();
        let cycles = g.enumerate_cycles().unwrap();
        assert_eq!(cycles.len(), 12);
        assert_eq!(cycles[0], "$101101001$");
        assert_eq!(cycles[4], "$101101001$");
        assert_eq!(cycles[8], "$100110101$");
        assert_eq!(cycles[9], "$100110101$");
        assert_eq!(cycles[10], "$100101101$");
        assert_eq!(cycles[11], "$100101101$");
        let (raw, distinct) = g.count_cycles_best();
        assert_eq!(raw, BigUint::from(12u32));
        assert_eq!(distinct, BigUint::from(6u32));
        let unique: BTreeSet<_> = cycles.iter().collect();
        assert_eq!(unique.len(), 6);
        assert_eq!(g.rank("$101101001$").unwrap(), BigUint::one());
    }

    #[test]
    fn host_a_cycles() {
        let g = build_graph(&shred(SIGMA_A, 3).unwrap()).unwrap();
        let cycles = g.enumerate_cycles().unwrap();
        let listed = [
            "$10101001$", "$10100101$", "$10101001$", "$10100101$", "$10101001$",
            "$10100101$", "$10101001$", "$10100101$", "$10010101$", "$10010101$",
            "$10010101$", "$10010101$",
        ];
        assert_eq!(cycles, listed);
        assert_eq!(g.rank("$10010101$").unwrap(), BigUint::from(9u32));
        assert_eq!(g.count_cycles_best().1, BigUint::from(3u32));
    }

    #[test]
    fn minimal_graph() {
        let ms = shred("1", 2).unwrap();
        let g = build_graph(&ms).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.enumerate_cycles().unwrap(), ["$1$"]);
        let ms = shred("10", 3).unwrap();
        let g = build_graph(&ms).unwrap();
        assert_eq!(g.vertex_count(), 3);
        assert_eq!(g.enumerate_cycles().unwrap(), ["$10$"]);
        let (raw, distinct) = g.count_cycles_best();
        assert_eq!((raw, distinct), (BigUint::one(), BigUint::one()));
    }

    #[test]
    fn malformed_multisets() {
        let ms = shred(SIGMA_A, 3).unwrap();
        let broken = ms
            .apply_difference(
                &[PieceEntry { piece: "100".parse().unwrap(), count: 1 }],
                &[],
            )
            .unwrap();
        assert!(matches!(build_graph(&broken), Err(Error::MalformedMultiset(_))));
        let no_start = PieceMultiset::from_entries(3, [("101".parse().unwrap(), 1)]).unwrap();
        assert!(build_graph(&no_start).is_err());
    }

    #[test]
    fn paper_parity_hashing() {
        let enc = PieceEncoding::paper_parity();
        let a = multiset_to_set(&shred(SIGMA_A, 3).unwrap(), &enc).unwrap();
        let b = multiset_to_set(&shred(SIGMA_B, 3).unwrap(), &enc).unwrap();
        assert_eq!(a.values(), [32, 17, 5, 10, 22, 37].into_iter().collect());
        assert_eq!(b.values(), [32, 22, 13, 25, 9, 17, 5, 37].into_iter().collect());
        let empty = PieceMultiset::from_entries(3, []).unwrap();
        assert!(multiset_to_set(&empty, &enc).unwrap().values().is_empty());
    }

    #[test]
    fn parity_collisions_are_reported() {
        // Seven distinct pieces cannot fit into three residues.
        let enc = PieceEncoding { count_bits: 2, marker: false, modulus: Some(3), ..PieceEncoding::default() };
        let ms = shred(SIGMA_B, 3).unwrap();
        assert!(matches!(multiset_to_set(&ms, &enc), Err(Error::HashCollision { .. })));
    }

    #[test]
    fn injective_encoding() {
        let enc = PieceEncoding::default();
        enc.check_decodable(3).unwrap();
        let v = enc.encode(&"$10".parse().unwrap(), 1).unwrap();
        // marker 1, sentinel 1000101, bits 10, then a 16-bit count of 1
        let (marker, sentinel, bits) = (1u64, 0b100_0101u64, 0b10u64);
        assert_eq!(v, (((marker << 7 | sentinel) << 2 | bits) << 16) | 1);
        assert!(enc.check_decodable(8).is_err());
        let periodic = PieceEncoding { sentinel_bits: "1010".into(), ..enc.clone() };
        assert!(periodic.check_decodable(3).is_err());
        assert!(enc.encode(&"101".parse().unwrap(), 1 << 16).is_err());
    }

    #[test]
    fn worked_string_reconciliation() {
        let cfg = ReconConfig::new(5, 83).unwrap();
        let out = string_recon(SIGMA_A, SIGMA_B, 3, &PieceEncoding::paper_parity(), &cfg).unwrap();
        assert_eq!(out.a_learns, SIGMA_B);
        assert_eq!(out.b_learns, SIGMA_A);
        assert_eq!(out.a.index, BigUint::from(9u32));
        assert_eq!(out.b.index, BigUint::one());
        let only_a: Vec<u64> = out.reconciliation.only_remote.iter().copied().collect();
        let only_b: Vec<u64> = out.reconciliation.only_local.iter().copied().collect();
        assert_eq!(only_a, [10]);
        assert_eq!(only_b, [9, 13, 25]);
        let t = &out.transcript;
        assert_eq!(t.eval_pairs(), 5);
        assert_eq!(t.piece_entries(), 4);
        assert_eq!(t.indices(), 2);
    }

    #[test]
    fn identical_strings_exchange_no_pieces() {
        let enc = PieceEncoding::default();
        let cfg = ReconConfig::for_bit_length(enc.value_bits(3), 4).unwrap();
        let out = string_recon(SIGMA_B, SIGMA_B, 3, &enc, &cfg).unwrap();
        assert_eq!(out.transcript.piece_entries(), 0);
        assert_eq!(out.a_learns, SIGMA_B);
    }

    #[test]
    fn ranking_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let len = rng.gen_range(2..14);
            let s: String = (0..len).map(|_| if rng.gen_bool(0.5) { '1' } else { '0' }).collect();
            let l = rng.gen_range(2..5).min(len + 1);
            let g = build_graph(&shred(&s, l).unwrap()).unwrap();
            let (raw, distinct) = g.count_cycles_best();
            if raw > BigUint::from(20_000u32) {
                continue;
            }
            let cycles = g.enumerate_cycles().unwrap();
            assert_eq!(BigUint::from(cycles.len()), raw);
            let unique: BTreeSet<_> = cycles.iter().collect();
            assert_eq!(BigUint::from(unique.len()), distinct);
            for (i, c) in cycles.iter().enumerate() {
                let idx = BigUint::from(i + 1);
                assert_eq!(&g.unrank(&idx).unwrap(), c);
                let first = cycles.iter().position(|x| x == c).unwrap() + 1;
                assert_eq!(g.rank(c).unwrap(), BigUint::from(first));
            }
            assert!(matches!(g.unrank(&(raw + 1u32)), Err(Error::AmbiguousIndex { .. })));
        }
    }

    #[test]
    fn enumeration_guard() {
        let s: String = (0..200).map(|i| if i % 3 == 0 { '1' } else { '0' }).collect();
        let g = build_graph(&shred(&s, 3).unwrap()).unwrap();
        assert!(matches!(g.enumerate_cycles(), Err(Error::TooManyCycles { .. })));
        let idx = g.rank(&format!("${s}$")).unwrap();
        assert_eq!(g.unrank(&idx).unwrap(), format!("${s}$"));
    }

    #[test]
    fn distribution_of_example_keys() {
        let keys: Vec<String> = [
            "1001000000100010",
            "0100100100000100",
            "0010010010001000",
            "0000001001010001",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let common = "1101001110010111";
        for i in 0..keys.len() {
            let d = distribute_tdk(&keys, common, i, &DistributionParams::default()).unwrap();
            assert_eq!(d.key, keys[i]);
        }
        let same = vec![common.to_string()];
        let d = distribute_tdk(&same, common, 0, &DistributionParams::default()).unwrap();
        assert_eq!(d.transcript.piece_entries(), 0);
        assert_eq!(d.key, common);
    }

    #[test]
    fn transcript_serializes() {
        let cfg = ReconConfig::new(5, 83).unwrap();
        let out = string_recon(SIGMA_A, SIGMA_B, 3, &PieceEncoding::paper_parity(), &cfg).unwrap();
        let lines = out.transcript.to_json_lines().unwrap();
        assert!(lines.contains(r#""kind":"index","index":"9""#));
        assert!(lines.contains(r#"{"piece":"110","count":1}"#));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rank_unrank_inverse(s in "[01]{3,80}", l in 2usize..6) {
            prop_assume!(s.len() + 1 >= l);
            let g = build_graph(&shred(&s, l).unwrap()).unwrap();
            let decorated = format!("${s}$");
            let idx = g.rank(&decorated).unwrap();
            prop_assert_eq!(g.unrank(&idx).unwrap(), decorated);
        }
    }
}
