//! Integer-symbol corpora and continuation count tables.
//!
//! A corpus is a multiset of symbol sequences. The count table stores, for
//! every context of length `0..=K` that occurs in the corpus followed by at
//! least one symbol, the multiplicity-weighted continuation counts `N(c, y)`.
//! Every length is counted at every position, so the key set is suffix-closed
//! by construction.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Symbol;

/// Continuation counts of one context, keyed by symbol.
pub type Row = BTreeMap<Symbol, u64>;

/// A multiset of nonempty symbol sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    sequences: Vec<(u64, Vec<Symbol>)>,
    alphabet: BTreeSet<Symbol>,
}

impl Corpus {
    pub fn new(sequences: Vec<(u64, Vec<Symbol>)>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut alphabet = BTreeSet::new();
        for (i, (mult, seq)) in sequences.iter().enumerate() {
            if *mult == 0 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "multiplicity must be positive".into(),
                });
            }
            if seq.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty sequence".into(),
                });
            }
            alphabet.extend(seq.iter().copied());
        }
        Ok(Corpus {
            sequences,
            alphabet,
        })
    }

    /// Parses the line format `[<mult>*] <int> <int> ...`.
    ///
    /// Blank lines and lines starting with `#` are skipped. Line numbers in
    /// errors are 1-based and count every physical line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sequences = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r').trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let (mult, body) = match line.split_once('*') {
                Some((m, rest)) => {
                    let m = m.trim();
                    let mult: i64 = m
                        .parse()
                        .map_err(|_| err(format!("malformed multiplicity {m:?}")))?;
                    if mult <= 0 {
                        return Err(err(format!("multiplicity must be positive, got {mult}")));
                    }
                    (mult as u64, rest)
                }
                None => (1, line),
            };
            let mut seq = Vec::new();
            for tok in body.split_whitespace() {
                let sym: Symbol = tok
                    .parse()
                    .map_err(|_| err(format!("malformed symbol {tok:?}")))?;
                seq.push(sym);
            }
            if seq.is_empty() {
                return Err(err("no symbols after multiplicity".into()));
            }
            sequences.push((mult, seq));
        }
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Corpus::new(sequences)
    }

    pub fn sequences(&self) -> &[(u64, Vec<Symbol>)] {
        &self.sequences
    }

    pub fn alphabet(&self) -> &BTreeSet<Symbol> {
        &self.alphabet
    }

    /// Multiplicity-weighted number of tokens.
    pub fn event_count(&self) -> u64 {
        self.sequences.iter().map(|(m, s)| m * s.len() as u64).sum()
    }

    /// Distinct contiguous `m`-grams occurring in any sequence.
    pub fn ngrams(&self, m: usize) -> BTreeSet<Vec<Symbol>> {
        let mut out = BTreeSet::new();
        if m == 0 {
            return out;
        }
        for (_, seq) in &self.sequences {
            for w in seq.windows(m) {
                out.insert(w.to_vec());
            }
        }
        out
    }

    /// Renders the corpus back to the line format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (m, seq) in &self.sequences {
            if *m != 1 {
                out.push_str(&format!("{m}* "));
            }
            let body: Vec<String> = seq.iter().map(|s| s.to_string()).collect();
            out.push_str(&body.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Read access to a table of continuation counts.
///
/// Implemented by the stored [`CountTable`] and by the lazily evaluated
/// augmented table in [`crate::augmentation`].
pub trait CountSource: Sync {
    fn max_order(&self) -> usize;

    /// Symbols that may be emitted or appear in contexts.
    fn alphabet(&self) -> Cow<'_, BTreeSet<Symbol>>;

    /// Whether `context` is a stored context (has at least one continuation).
    fn contains(&self, context: &[Symbol]) -> bool;

    /// Continuation counts of `context`, or `None` when it is not stored.
    fn row(&self, context: &[Symbol]) -> Option<Cow<'_, Row>>;

    /// Every stored context, in lexicographic order.
    fn contexts(&self) -> Vec<Vec<Symbol>>;
}

/// Suffix-closed continuation counts for contexts of length `0..=K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    max_order: usize,
    alphabet: BTreeSet<Symbol>,
    rows: BTreeMap<Vec<Symbol>, Row>,
}

impl CountTable {
    /// Counts every context length `0..=min(t, K)` at every position `t`.
    pub fn from_corpus(corpus: &Corpus, max_order: usize) -> Result<Self> {
        if max_order == 0 {
            return Err(Error::ZeroOrder);
        }
        let mut rows: BTreeMap<Vec<Symbol>, Row> = BTreeMap::new();
        for (mult, seq) in corpus.sequences() {
            for t in 0..seq.len() {
                let y = seq[t];
                for k in 0..=t.min(max_order) {
                    *rows
                        .entry(seq[t - k..t].to_vec())
                        .or_default()
                        .entry(y)
                        .or_insert(0) += mult;
                }
            }
        }
        Ok(CountTable {
            max_order,
            alphabet: corpus.alphabet().clone(),
            rows,
        })
    }

    /// Assembles a table from explicit rows, checking every table invariant.
    pub fn from_rows(
        max_order: usize,
        alphabet: BTreeSet<Symbol>,
        rows: BTreeMap<Vec<Symbol>, Row>,
    ) -> Result<Self> {
        if max_order == 0 {
            return Err(Error::ZeroOrder);
        }
        let table = CountTable {
            max_order,
            alphabet,
            rows,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        if !self.rows.contains_key(&[][..]) {
            return Err(Error::InvalidModel("missing empty context".into()));
        }
        for (ctx, row) in &self.rows {
            if ctx.len() > self.max_order {
                return Err(Error::InvalidModel(format!(
                    "context {ctx:?} longer than K = {}",
                    self.max_order
                )));
            }
            if row.is_empty() || row.values().any(|&c| c == 0) {
                return Err(Error::InvalidModel(format!(
                    "context {ctx:?} has an empty row or zero count"
                )));
            }
            for &s in ctx.iter().chain(row.keys()) {
                if !self.alphabet.contains(&s) {
                    return Err(Error::InvalidModel(format!(
                        "symbol {s} outside the declared alphabet"
                    )));
                }
            }
            if !ctx.is_empty() {
                let suffix = &ctx[1..];
                match self.rows.get(suffix) {
                    Some(srow) if srow.values().sum::<u64>() >= row.values().sum::<u64>() => {}
                    _ => {
                        return Err(Error::InvalidModel(format!(
                            "table is not suffix-closed at {ctx:?}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn alphabet(&self) -> &BTreeSet<Symbol> {
        &self.alphabet
    }

    pub fn rows(&self) -> &BTreeMap<Vec<Symbol>, Row> {
        &self.rows
    }

    pub fn get(&self, context: &[Symbol]) -> Option<&Row> {
        self.rows.get(context)
    }

    pub fn count(&self, context: &[Symbol], y: Symbol) -> u64 {
        self.rows
            .get(context)
            .and_then(|r| r.get(&y).copied())
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Canonical single-line JSON document (plus trailing newline).
    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            k: self.max_order,
            alphabet: self.alphabet.iter().copied().collect(),
            counts: self
                .rows
                .iter()
                .flat_map(|(ctx, row)| row.iter().map(move |(&y, &n)| (ctx.clone(), y, n)))
                .collect(),
        };
        let mut s = serde_json::to_string(&doc).expect("model document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)
            .map_err(|e| Error::InvalidModel(format!("malformed model document: {e}")))?;
        let mut rows: BTreeMap<Vec<Symbol>, Row> = BTreeMap::new();
        for (ctx, y, n) in doc.counts {
            if rows.entry(ctx.clone()).or_default().insert(y, n).is_some() {
                return Err(Error::InvalidModel(format!(
                    "duplicate entry for context {ctx:?}, symbol {y}"
                )));
            }
        }
        CountTable::from_rows(doc.k, doc.alphabet.into_iter().collect(), rows)
    }
}

impl CountSource for CountTable {
    fn max_order(&self) -> usize {
        self.max_order
    }

    fn alphabet(&self) -> Cow<'_, BTreeSet<Symbol>> {
        Cow::Borrowed(&self.alphabet)
    }

    fn contains(&self, context: &[Symbol]) -> bool {
        self.rows.contains_key(context)
    }

    fn row(&self, context: &[Symbol]) -> Option<Cow<'_, Row>> {
        self.rows.get(context).map(Cow::Borrowed)
    }

    fn contexts(&self) -> Vec<Vec<Symbol>> {
        self.rows.keys().cloned().collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    #[serde(rename = "K")]
    k: usize,
    alphabet: Vec<Symbol>,
    counts: Vec<(Vec<Symbol>, Symbol, u64)>,
}

/// Seeded synthetic corpus: a random walk on a sparse first-order chain.
///
/// Every symbol `s` gets `branching` distinct successors with random integer
/// weights, always including `s + 1 (mod |V|)` so the chain is irreducible,
/// and one sequence of `tokens` symbols is drawn from the chain.
pub fn synthetic_corpus(tokens: usize, alphabet_size: u32, branching: usize, seed: u64) -> Corpus {
    assert!(tokens >= 1 && alphabet_size >= 1 && branching >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols: Vec<Symbol> = (0..alphabet_size).collect();
    let succ: Vec<Vec<(Symbol, u32)>> = (0..alphabet_size)
        .map(|s| {
            let ring = (s + 1) % alphabet_size;
            let others: Vec<Symbol> = symbols.iter().copied().filter(|&y| y != ring).collect();
            let b = branching.min(symbols.len()) - 1;
            std::iter::once(ring)
                .chain(others.choose_multiple(&mut rng, b).copied())
                .map(|y| (y, rng.gen_range(1..=8)))
                .collect()
        })
        .collect();
    let mut seq = Vec::with_capacity(tokens);
    let mut cur: Symbol = rng.gen_range(0..alphabet_size);
    seq.push(cur);
    while seq.len() < tokens {
        let options = &succ[cur as usize];
        let total: u32 = options.iter().map(|o| o.1).sum();
        let mut u = rng.gen_range(0..total);
        for &(s, w) in options {
            if u < w {
                cur = s;
                break;
            }
            u -= w;
        }
        seq.push(cur);
    }
    Corpus::new(vec![(1, seq)]).expect("synthetic corpus is nonempty")
}
