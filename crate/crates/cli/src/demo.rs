//! The small, self-contained subcommands: sequence generation, root finding
//! and the end-to-end reconciliation walk-through. Each renders to a
//! `String` so the output can be tested verbatim.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use distaudit::gf::{find_roots, is_square_free, splits_into_linear, FieldPoly};
use distaudit::setrecon::{char_poly_eval, ReconConfig};
use distaudit::sobol::{generate, PrimitivePolynomial, SobolKey};
use distaudit::strrecon::{string_recon, HostState, PieceEncoding};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct SobolArgs {
    pub poly: String,
    pub init: Vec<u64>,
    pub constant: u64,
    pub count: u64,
    pub skip: u64,
    pub leap: u64,
    pub json: bool,
}

pub fn gen_sobol(a: &SobolArgs) -> Result<String> {
    let poly: PrimitivePolynomial = a.poly.parse().with_context(|| format!("polynomial {:?}", a.poly))?;
    let key = SobolKey::new(poly, a.init.clone(), a.skip, a.leap, a.constant, a.count)?;
    let seq = generate(&key)?;
    let mut out = if a.json {
        serde_json::to_string(&seq.indices)?
    } else {
        seq.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    };
    out.push('\n');
    Ok(out)
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn gf_roots(q: u64, coeffs: Option<&[i64]>, roots: Option<&[u64]>, seed: u64) -> Result<String> {
    distaudit::gf::ensure_prime(q)?;
    let f = match (coeffs, roots) {
        (Some(c), None) => FieldPoly::from_i64(q, c),
        (None, Some(r)) => FieldPoly::from_roots(q, r),
        _ => bail!("give exactly one of --coeffs or --roots"),
    };
    if f.degree().is_none() {
        bail!("the zero polynomial has no well-defined roots");
    }
    let mut out = String::new();
    writeln!(out, "f(Z) = {f} over GF({q})")?;
    let square_free = is_square_free(&f)?;
    let splits = splits_into_linear(&f)?;
    writeln!(out, "square-free: {}", if square_free { "yes" } else { "no" })?;
    writeln!(out, "splits into linear factors: {}", if splits { "yes" } else { "no" })?;
    if square_free && splits {
        let roots = find_roots(&f, &mut ChaCha8Rng::seed_from_u64(seed))?;
        writeln!(out, "roots: {}", join(roots.iter().map(|r| r.value()), " "))?;
    } else {
        writeln!(out, "roots: rejected (needs distinct linear factors)")?;
    }
    Ok(out)
}

pub struct ReconArgs {
    pub a: String,
    pub b: String,
    pub mask_len: usize,
    pub q: Option<u64>,
    pub m_bar: usize,
    pub paper_encoding: bool,
}

fn describe_host(out: &mut String, name: &str, h: &HostState) -> Result<()> {
    writeln!(out, "host {name}: {}", h.decorated)?;
    writeln!(out, "  pieces: {}", h.multiset)?;
    writeln!(out, "  hashed set:")?;
    for (v, e) in &h.hashed.table {
        writeln!(out, "    {v:>6}  {} × {}", e.piece, e.count)?;
    }
    let g = &h.graph;
    writeln!(
        out,
        "  graph: {} vertices, start {}, end {}",
        g.vertex_count(),
        g.vertex_label(g.start()),
        g.vertex_label(g.end())
    )?;
    for e in g.edges() {
        writeln!(
            out,
            "    {} -{}-> {}  ×{}",
            g.vertex_label(e.from),
            e.label.as_char(),
            g.vertex_label(e.to),
            e.multiplicity
        )?;
    }
    let (raw, distinct) = g.count_cycles_best();
    let perms: BigUint = g.edges().iter().map(|e| factorial(e.multiplicity)).product();
    let cycles = g.enumerate_cycles()?;
    writeln!(
        out,
        "  Eulerian cycles: BEST distinct {distinct} × ∏a_ij! {perms} = {raw}; enumerated {}",
        cycles.len()
    )?;
    for (i, c) in cycles.iter().enumerate() {
        let mark = if *c == h.decorated { "  <- own string" } else { "" };
        writeln!(out, "    {i:>3}  {c}{mark}")?;
    }
    writeln!(out, "  index: {}", h.index)?;
    Ok(())
}

fn factorial(n: u64) -> BigUint {
    (1..=n).map(BigUint::from).product()
}

pub fn recon_demo(a: &ReconArgs) -> Result<String> {
    let enc = if a.paper_encoding { PieceEncoding::paper_parity() } else { PieceEncoding::default() };
    let cfg = match a.q {
        Some(q) => ReconConfig::new(a.m_bar, q)?,
        None => ReconConfig::for_bit_length(enc.value_bits(a.mask_len), a.m_bar)?,
    };
    let outcome = string_recon(&a.a, &a.b, a.mask_len, &enc, &cfg)?;
    let mut out = String::new();

    writeln!(out, "== Hosts (mask length {})", a.mask_len)?;
    describe_host(&mut out, "A", &outcome.a)?;
    describe_host(&mut out, "B", &outcome.b)?;

    let sa: BTreeSet<u64> = outcome.a.hashed.values();
    let sb: BTreeSet<u64> = outcome.b.hashed.values();
    writeln!(out)?;
    writeln!(out, "== Set reconciliation over GF({}), m̄ = {}", cfg.modulus(), cfg.m_bar())?;
    writeln!(out, "S_A = {{{}}}", join(&sa, ", "))?;
    writeln!(out, "S_B = {{{}}}", join(&sb, ", "))?;
    let ea = char_poly_eval(&sa, &cfg)?;
    let eb = char_poly_eval(&sb, &cfg)?;
    writeln!(out, "{:>4}  {:>8}  {:>8}  {:>8}", "z", "χ_A(z)", "χ_B(z)", "ratio")?;
    for (((z, va), (_, vb)), r) in ea.pairs.iter().zip(&eb.pairs).zip(&outcome.reconciliation.ratios) {
        writeln!(out, "{:>4}  {:>8}  {:>8}  {:>8}", z.centered(), va.value(), vb.value(), r.value())?;
    }
    writeln!(out, "rational function: {}", outcome.reconciliation.function)?;
    writeln!(out, "Δ_A = {{{}}}", join(&outcome.reconciliation.only_remote, ", "))?;
    writeln!(out, "Δ_B = {{{}}}", join(&outcome.reconciliation.only_local, ", "))?;

    writeln!(out)?;
    writeln!(out, "== Messages")?;
    for (from, msg) in &outcome.transcript.messages {
        writeln!(out, "{} → {}: {}", party(*from), party(other(*from)), serde_json::to_string(msg)?)?;
    }
    writeln!(out)?;
    writeln!(out, "A learns: {}", outcome.a_learns)?;
    writeln!(out, "B learns: {}", outcome.b_learns)?;
    if outcome.a_learns != a.b || outcome.b_learns != a.a {
        bail!("reconciliation finished with the wrong strings");
    }
    Ok(out)
}

fn party(p: distaudit::strrecon::Party) -> &'static str {
    match p {
        distaudit::strrecon::Party::A => "A",
        distaudit::strrecon::Party::B => "B",
    }
}

fn other(p: distaudit::strrecon::Party) -> distaudit::strrecon::Party {
    match p {
        distaudit::strrecon::Party::A => distaudit::strrecon::Party::B,
        distaudit::strrecon::Party::B => distaudit::strrecon::Party::A,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sobol(poly: &str, init: &[u64]) -> String {
        gen_sobol(&SobolArgs {
            poly: poly.into(),
            init: init.to_vec(),
            constant: 64,
            count: 13,
            skip: 0,
            leap: 0,
            json: false,
        })
        .unwrap()
    }

    #[test]
    fn sobol_lines() {
        assert_eq!(sobol("x^3+x+1", &[1, 3, 7]), "0,32,16,48,8,40,24,56,44,12,60,28,36\n");
        assert!(gen_sobol(&SobolArgs {
            poly: "x^3+x^2+x+1".into(),
            init: vec![1, 3, 7],
            constant: 64,
            count: 13,
            skip: 0,
            leap: 0,
            json: true
        })
        .is_err());
    }

    #[test]
    fn roots_report() {
        let out = gf_roots(83, None, Some(&[9, 13, 25]), 0).unwrap();
        assert!(out.ends_with("roots: 9 13 25\n"), "{out}");
        let out = gf_roots(83, Some(&[1, 0, 1]), None, 0).unwrap();
        assert!(out.contains("splits into linear factors: no"));
        let out = gf_roots(83, None, Some(&[5, 5]), 0).unwrap();
        assert!(out.contains("square-free: no"));
        assert!(gf_roots(84, Some(&[1, 1]), None, 0).is_err());
    }

    #[test]
    fn walkthrough_covers_every_stage() {
        let out = recon_demo(&ReconArgs {
            a: "10010101".into(),
            b: "101101001".into(),
            mask_len: 3,
            q: Some(83),
            m_bar: 5,
            paper_encoding: true,
        })
        .unwrap();
        for needle in [
            "S_A = {5, 10, 17, 22, 32, 37}",
            "  -1        70        67         6",
            "rational function: (Z + 73) / (Z^3 + 36Z^2 + 3Z + 63)",
            "Δ_A = {10}",
            "Δ_B = {9, 13, 25}",
            "A learns: 101101001",
            "B learns: 10010101",
            "index: 9",
        ] {
            assert!(out.contains(needle), "missing {needle:?} in\n{out}");
        }
        assert_eq!(out.matches("enumerated 12").count(), 2);
    }
}
