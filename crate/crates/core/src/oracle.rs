//! Brute-force ground truth for tiny instances.
//!
//! Every length-`n` sequence is scored by step-by-step longest-suffix
//! prediction in exact rational arithmetic, filtered by the constraints and
//! normalized by the accepted mass.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constraints::{
    compile_forbidden, validate_sequence, Acceptor, Constraints, PositionalMask,
};
use crate::corpus::{Corpus, CountTable};
use crate::error::{Error, Result};
use crate::Symbol;

pub const DEFAULT_BUDGET: u128 = 1_000_000;

/// Exact conditional distribution and accepted mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    pub entries: BTreeMap<Vec<Symbol>, BigRational>,
    pub z: BigRational,
    /// Mass of all enumerated sequences, accepted or not.
    pub total: BigRational,
}

impl ExactDistribution {
    pub fn z_f64(&self) -> f64 {
        to_f64(&self.z)
    }

    pub fn to_f64(&self) -> BTreeMap<Vec<Symbol>, f64> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), to_f64(v)))
            .collect()
    }
}

pub fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `P(y | history)` under longest-suffix backoff, as a rational.
fn step_probability(
    counts: &CountTable,
    max_order: usize,
    history: &[Symbol],
    y: Symbol,
) -> BigRational {
    for j in (0..=max_order.min(history.len())).rev() {
        if let Some(row) = counts.get(&history[history.len() - j..]) {
            let total: u64 = row.values().sum();
            if total > 0 {
                let n = row.get(&y).copied().unwrap_or(0);
                return BigRational::new(BigInt::from(n), BigInt::from(total));
            }
        }
    }
    BigRational::zero()
}

/// `P_vo(x | prefix)` by direct backoff simulation.
pub fn sequence_probability(
    counts: &CountTable,
    max_order: usize,
    prefix: &[Symbol],
    x: &[Symbol],
) -> BigRational {
    let mut history = prefix.to_vec();
    let mut p = BigRational::from_integer(BigInt::from(1));
    for &y in x {
        let s = step_probability(counts, max_order, &history, y);
        if s.is_zero() {
            return s;
        }
        p *= s;
        history.push(y);
    }
    p
}

/// Enumerates `alphabet^n` and returns the exact conditional distribution.
pub fn enumerate_conditional(
    counts: &CountTable,
    max_order: usize,
    acceptor: &Acceptor,
    mask: &PositionalMask,
    prefix: &[Symbol],
    budget: u128,
) -> Result<ExactDistribution> {
    let n = mask.horizon();
    let alphabet: Vec<Symbol> = counts.alphabet().iter().copied().collect();
    let v = alphabet.len() as u128;
    let needed = v.checked_pow(n as u32).unwrap_or(u128::MAX);
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let firsts: Vec<Symbol> = if n == 0 { Vec::new() } else { alphabet.clone() };
    let parts: Vec<(Vec<(Vec<Symbol>, BigRational)>, BigRational)> = firsts
        .par_iter()
        .map(|&y0| {
            let mut accepted = Vec::new();
            let mut total = BigRational::zero();
            let mut x = vec![y0; n];
            let mut idx = vec![0usize; n];
            loop {
                for (i, &j) in idx.iter().enumerate().skip(1) {
                    x[i] = alphabet[j];
                }
                let p = sequence_probability(counts, max_order, prefix, &x);
                if !p.is_zero() {
                    total += &p;
                    if validate_sequence(&x, acceptor, mask) {
                        accepted.push((x.clone(), p));
                    }
                }
                // Odometer over positions 1..n.
                let mut i = n;
                loop {
                    if i <= 1 {
                        return (accepted, total);
                    }
                    i -= 1;
                    idx[i] += 1;
                    if idx[i] < alphabet.len() {
                        break;
                    }
                    idx[i] = 0;
                }
            }
        })
        .collect();
    let mut z = BigRational::zero();
    let mut total = BigRational::zero();
    let mut entries = BTreeMap::new();
    for (acc, t) in parts {
        total += t;
        for (x, p) in acc {
            z += &p;
            entries.insert(x, p);
        }
    }
    if !z.is_zero() {
        for p in entries.values_mut() {
            *p /= &z;
        }
    }
    Ok(ExactDistribution { entries, z, total })
}

/// `½ Σ |p − q|` over the union support.
pub fn tv_distance(p: &BTreeMap<Vec<Symbol>, f64>, q: &BTreeMap<Vec<Symbol>, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, &a) in p {
        sum += (a - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, &b) in q {
        if !p.contains_key(k) {
            sum += b.abs();
        }
    }
    0.5 * sum
}

/// Relative frequencies of the given samples.
pub fn empirical_distribution(samples: &[Vec<Symbol>]) -> BTreeMap<Vec<Symbol>, f64> {
    let mut counts: BTreeMap<Vec<Symbol>, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.clone()).or_insert(0) += 1;
    }
    let n = samples.len() as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
}

/// A seeded enumerable problem for oracle cross-checks.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub corpus: Corpus,
    pub counts: CountTable,
    pub max_order: usize,
    pub prefix: Vec<Symbol>,
    pub constraints: Constraints,
    pub patterns: Vec<Vec<Symbol>>,
}

/// A few short random sequences over `0..v`, plus one sequence containing
/// every symbol so the alphabet is exactly `0..v`.
pub fn tiny_corpus<R: Rng + ?Sized>(rng: &mut R, v: u32) -> Corpus {
    let count = rng.gen_range(1..=4);
    let mut seqs = Vec::new();
    for _ in 0..count {
        let len = rng.gen_range(2..=8);
        let seq: Vec<Symbol> = (0..len).map(|_| rng.gen_range(0..v)).collect();
        seqs.push((rng.gen_range(1..=5), seq));
    }
    seqs.push((1, (0..v).collect()));
    Corpus::new(seqs).expect("nonempty")
}

/// `|V| ≤ 5`, `K ≤ 3`, `n ≤ 5`, random anchors and/or one or two forbidden
/// substrings, random prefix of length at most 2.
pub fn tiny_instance(seed: u64) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.gen_range(2..=5u32);
    let max_order = rng.gen_range(1..=3);
    let n = rng.gen_range(1..=5);
    let corpus = tiny_corpus(&mut rng, v);
    let counts = CountTable::from_corpus(&corpus, max_order).expect("positive order");
    let alphabet: BTreeSet<Symbol> = counts.alphabet().clone();
    let symbols: Vec<Symbol> = alphabet.iter().copied().collect();
    let plen = rng.gen_range(0..=2);
    let prefix: Vec<Symbol> = (0..plen)
        .map(|_| *symbols.choose(&mut rng).unwrap())
        .collect();

    let mode = rng.gen_range(0..3);
    let mut mask = PositionalMask::permissive(n);
    if mode != 1 {
        for _ in 0..rng.gen_range(1..=2) {
            let t = rng.gen_range(0..n);
            let size = rng.gen_range(1..=symbols.len());
            let allowed: BTreeSet<Symbol> =
                symbols.choose_multiple(&mut rng, size).copied().collect();
            // A disjoint second anchor on the same position is dropped.
            let _ = mask.restrict(t, &allowed);
        }
    }
    let mut patterns = Vec::new();
    if mode != 0 {
        for _ in 0..rng.gen_range(1..=2) {
            let len = rng.gen_range(1..=3);
            patterns.push(
                (0..len)
                    .map(|_| *symbols.choose(&mut rng).unwrap())
                    .collect(),
            );
        }
    }
    let acceptor = if patterns.is_empty() {
        Acceptor::accept_all(&alphabet)
    } else {
        compile_forbidden(&patterns, &alphabet).expect("nonempty patterns")
    };
    TinyInstance {
        corpus,
        counts,
        max_order,
        prefix,
        constraints: Constraints { acceptor, mask },
        patterns,
    }
}
