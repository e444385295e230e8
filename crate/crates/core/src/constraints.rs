//! Regular and positional constraints.
//!
//! Regular constraints are deterministic acceptors with partial transitions:
//! an undefined transition rejects. Forbidden-substring and MAXORDER
//! constraints compile to an Aho–Corasick automaton whose pattern-completing
//! transitions all lead to one dead state without outgoing transitions.
//! Positional constraints stay out of the acceptor as per-position masks.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::Symbol;

pub type AcceptorState = u32;

const NO_TRANSITION: u32 = u32::MAX;

/// Deterministic finite acceptor with partial transitions.
///
/// Transitions are stored densely by symbol index for the acceptor's own
/// alphabet; symbols outside that alphabet have no transitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Acceptor {
    alphabet: Vec<Symbol>,
    sym_index: HashMap<Symbol, usize>,
    table: Vec<u32>,
    accepting: Vec<bool>,
    start: AcceptorState,
}

impl Acceptor {
    /// Builds an acceptor from explicit transitions `(from, symbol, to)`.
    pub fn new(
        state_count: usize,
        start: AcceptorState,
        accepting: impl IntoIterator<Item = AcceptorState>,
        transitions: &[(AcceptorState, Symbol, AcceptorState)],
    ) -> Result<Self> {
        if state_count == 0 {
            return Err(Error::InvalidAcceptor(
                "acceptor needs at least one state".into(),
            ));
        }
        if start as usize >= state_count {
            return Err(Error::InvalidAcceptor(format!(
                "start {start} out of range for {state_count} states"
            )));
        }
        let alphabet: BTreeSet<Symbol> = transitions.iter().map(|t| t.1).collect();
        let mut acc = Acceptor::empty(state_count, start, alphabet.into_iter().collect());
        for q in accepting {
            if q as usize >= state_count {
                return Err(Error::InvalidAcceptor(format!(
                    "accepting state {q} out of range"
                )));
            }
            acc.accepting[q as usize] = true;
        }
        for &(from, y, to) in transitions {
            if from as usize >= state_count || to as usize >= state_count {
                return Err(Error::InvalidAcceptor(format!(
                    "transition ({from}, {y}, {to}) has an endpoint out of range"
                )));
            }
            let slot = acc.slot(from, y).expect("symbol indexed");
            let cur = acc.table[slot];
            if cur != NO_TRANSITION && cur != to {
                return Err(Error::InvalidAcceptor(format!(
                    "nondeterministic transitions from {from} on {y}"
                )));
            }
            acc.table[slot] = to;
        }
        Ok(acc)
    }

    fn empty(state_count: usize, start: AcceptorState, alphabet: Vec<Symbol>) -> Self {
        let sym_index = alphabet.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Acceptor {
            table: vec![NO_TRANSITION; state_count * alphabet.len()],
            alphabet,
            sym_index,
            accepting: vec![false; state_count],
            start,
        }
    }

    /// Single accepting state with a self-loop on every symbol of `alphabet`.
    pub fn accept_all(alphabet: &BTreeSet<Symbol>) -> Self {
        let mut a = Acceptor::empty(1, 0, alphabet.iter().copied().collect());
        a.accepting[0] = true;
        a.table.iter_mut().for_each(|t| *t = 0);
        a
    }

    /// Single non-accepting state without transitions.
    pub fn accept_nothing() -> Self {
        Acceptor::empty(1, 0, Vec::new())
    }

    /// Position automaton for a mask: state `t` reads position `t`, only the
    /// final state `n` accepts.
    pub fn from_mask(mask: &PositionalMask, alphabet: &BTreeSet<Symbol>) -> Self {
        let n = mask.horizon();
        let mut a = Acceptor::empty(n + 1, 0, alphabet.iter().copied().collect());
        a.accepting[n] = true;
        for t in 0..n {
            for &y in alphabet {
                if mask.allows(t, y) {
                    let slot = a.slot(t as u32, y).unwrap();
                    a.table[slot] = t as u32 + 1;
                }
            }
        }
        a
    }

    #[inline]
    fn slot(&self, q: AcceptorState, y: Symbol) -> Option<usize> {
        self.sym_index
            .get(&y)
            .map(|&i| q as usize * self.alphabet.len() + i)
    }

    pub fn state_count(&self) -> usize {
        self.accepting.len()
    }

    pub fn start(&self) -> AcceptorState {
        self.start
    }

    pub fn alphabet(&self) -> &[Symbol] {
        &self.alphabet
    }

    pub fn is_accepting(&self, q: AcceptorState) -> bool {
        self.accepting[q as usize]
    }

    pub fn accepting_states(&self) -> impl Iterator<Item = AcceptorState> + '_ {
        self.accepting
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| i as AcceptorState)
    }

    /// `δ(q, y)`, or `None` when undefined.
    #[inline]
    pub fn step(&self, q: AcceptorState, y: Symbol) -> Option<AcceptorState> {
        let slot = self.slot(q, y)?;
        match self.table[slot] {
            NO_TRANSITION => None,
            t => Some(t),
        }
    }

    /// Runs the acceptor from `from` over `seq`.
    pub fn run_from(&self, from: AcceptorState, seq: &[Symbol]) -> Option<AcceptorState> {
        seq.iter().try_fold(from, |q, &y| self.step(q, y))
    }

    pub fn accepts(&self, seq: &[Symbol]) -> bool {
        self.run_from(self.start, seq)
            .is_some_and(|q| self.is_accepting(q))
    }

    pub fn transitions(&self) -> Vec<(AcceptorState, Symbol, AcceptorState)> {
        let mut out = Vec::new();
        for q in 0..self.state_count() as u32 {
            for &y in &self.alphabet {
                if let Some(t) = self.step(q, y) {
                    out.push((q, y, t));
                }
            }
        }
        out
    }

    /// Keeps only states reachable from the start, renumbered in BFS order.
    pub fn trim(&self) -> Acceptor {
        let mut ids: HashMap<AcceptorState, AcceptorState> = HashMap::new();
        let mut order = vec![self.start];
        ids.insert(self.start, 0);
        let mut i = 0;
        while i < order.len() {
            let q = order[i];
            for &y in &self.alphabet {
                if let Some(t) = self.step(q, y) {
                    if let std::collections::hash_map::Entry::Vacant(e) = ids.entry(t) {
                        e.insert(order.len() as u32);
                        order.push(t);
                    }
                }
            }
            i += 1;
        }
        let mut out = Acceptor::empty(order.len(), 0, self.alphabet.clone());
        for (new, &old) in order.iter().enumerate() {
            out.accepting[new] = self.accepting[old as usize];
            for &y in &self.alphabet {
                if let Some(t) = self.step(old, y) {
                    let slot = out.slot(new as u32, y).unwrap();
                    out.table[slot] = ids[&t];
                }
            }
        }
        out
    }

    /// Reachable part of the synchronous product (language intersection).
    pub fn product(&self, other: &Acceptor) -> Acceptor {
        let alphabet: Vec<Symbol> = self
            .alphabet
            .iter()
            .copied()
            .filter(|y| other.sym_index.contains_key(y))
            .collect();
        let mut ids: HashMap<(u32, u32), u32> = HashMap::new();
        let mut order = vec![(self.start, other.start)];
        ids.insert(order[0], 0);
        let mut trans = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let (a, b) = order[i];
            for &y in &alphabet {
                if let (Some(ta), Some(tb)) = (self.step(a, y), other.step(b, y)) {
                    let next = ids.len() as u32;
                    let id = *ids.entry((ta, tb)).or_insert_with(|| {
                        order.push((ta, tb));
                        next
                    });
                    trans.push((i as u32, y, id));
                }
            }
            i += 1;
        }
        let mut out = Acceptor::empty(order.len(), 0, alphabet);
        for (i, &(a, b)) in order.iter().enumerate() {
            out.accepting[i] = self.is_accepting(a) && other.is_accepting(b);
        }
        for (q, y, t) in trans {
            let slot = out.slot(q, y).unwrap();
            out.table[slot] = t;
        }
        out
    }

    /// Complement relative to `alphabet^*`: totalizes with a sink, then flips
    /// acceptance.
    pub fn complement(&self, alphabet: &BTreeSet<Symbol>) -> Acceptor {
        let mut symbols: BTreeSet<Symbol> = alphabet.clone();
        symbols.extend(self.alphabet.iter().copied());
        let n = self.state_count();
        let sink = n as u32;
        let mut out = Acceptor::empty(n + 1, self.start, symbols.iter().copied().collect());
        for q in 0..=n as u32 {
            out.accepting[q as usize] = if q == sink {
                true
            } else {
                !self.is_accepting(q)
            };
            for &y in &symbols {
                let t = if q == sink {
                    sink
                } else {
                    self.step(q, y).unwrap_or(sink)
                };
                let slot = out.slot(q, y).unwrap();
                out.table[slot] = t;
            }
        }
        // Symbols outside `alphabet` are rejected by the complement as well.
        let keep: Vec<Symbol> = symbols
            .into_iter()
            .filter(|y| alphabet.contains(y))
            .collect();
        out.restrict_alphabet(&keep).trim()
    }

    fn restrict_alphabet(&self, keep: &[Symbol]) -> Acceptor {
        let mut out = Acceptor::empty(self.state_count(), self.start, keep.to_vec());
        out.accepting = self.accepting.clone();
        for q in 0..self.state_count() as u32 {
            for &y in keep {
                if let Some(t) = self.step(q, y) {
                    let slot = out.slot(q, y).unwrap();
                    out.table[slot] = t;
                }
            }
        }
        out
    }

    pub fn to_doc(&self) -> DfaDoc {
        DfaDoc {
            states: self.state_count(),
            start: self.start,
            accepting: self.accepting_states().collect(),
            transitions: self.transitions(),
        }
    }

    pub fn from_doc(doc: &DfaDoc) -> Result<Acceptor> {
        Acceptor::new(
            doc.states,
            doc.start,
            doc.accepting.iter().copied(),
            &doc.transitions,
        )
    }
}

/// ε-free nondeterministic acceptor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Nfa {
    pub state_count: usize,
    pub starts: Vec<AcceptorState>,
    pub accepting: BTreeSet<AcceptorState>,
    pub transitions: Vec<(AcceptorState, Symbol, AcceptorState)>,
}

impl From<&Acceptor> for Nfa {
    fn from(a: &Acceptor) -> Self {
        Nfa {
            state_count: a.state_count(),
            starts: vec![a.start()],
            accepting: a.accepting_states().collect(),
            transitions: a.transitions(),
        }
    }
}

impl Nfa {
    pub fn accepts(&self, seq: &[Symbol]) -> bool {
        let mut cur: BTreeSet<AcceptorState> = self.starts.iter().copied().collect();
        for &y in seq {
            cur = self
                .transitions
                .iter()
                .filter(|(q, s, _)| *s == y && cur.contains(q))
                .map(|t| t.2)
                .collect();
        }
        cur.iter().any(|q| self.accepting.contains(q))
    }
}

/// Subset construction over the reachable subsets. The empty subset is not
/// materialized; it becomes an undefined transition.
pub fn determinize(nfa: &Nfa) -> Acceptor {
    let symbols: BTreeSet<Symbol> = nfa.transitions.iter().map(|t| t.1).collect();
    let mut delta: HashMap<(AcceptorState, Symbol), BTreeSet<AcceptorState>> = HashMap::new();
    for &(q, y, t) in &nfa.transitions {
        delta.entry((q, y)).or_default().insert(t);
    }
    let start: BTreeSet<AcceptorState> = nfa.starts.iter().copied().collect();
    let mut ids: BTreeMap<BTreeSet<AcceptorState>, u32> = BTreeMap::new();
    let mut order = vec![start.clone()];
    ids.insert(start, 0);
    let mut trans = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let set = order[i].clone();
        for &y in &symbols {
            let target: BTreeSet<AcceptorState> = set
                .iter()
                .filter_map(|q| delta.get(&(*q, y)))
                .flatten()
                .copied()
                .collect();
            if target.is_empty() {
                continue;
            }
            let next = ids.len() as u32;
            let id = *ids.entry(target.clone()).or_insert_with(|| {
                order.push(target);
                next
            });
            trans.push((i as u32, y, id));
        }
        i += 1;
    }
    let accepting = order
        .iter()
        .enumerate()
        .filter(|(_, s)| s.iter().any(|q| nfa.accepting.contains(q)))
        .map(|(i, _)| i as u32);
    let mut acc = Acceptor::new(order.len(), 0, accepting, &trans)
        .expect("subset construction is deterministic");
    // Keep symbols without any transition in the alphabet for consistency.
    if acc.alphabet.len() != symbols.len() {
        acc = acc.restrict_alphabet(&symbols.into_iter().collect::<Vec<_>>());
    }
    acc
}

/// Aho–Corasick acceptor that rejects every sequence containing a pattern.
///
/// States are the trie nodes that do not complete a pattern (closed under
/// failure links), plus one dead state when some pattern is reachable. The
/// dead state has no outgoing transitions.
pub fn compile_forbidden(
    patterns: &[Vec<Symbol>],
    alphabet: &BTreeSet<Symbol>,
) -> Result<Acceptor> {
    if patterns.iter().any(|p| p.is_empty()) {
        return Err(Error::EmptyPattern);
    }
    let mut symbols = alphabet.clone();
    for p in patterns {
        symbols.extend(p.iter().copied());
    }
    let symbols: Vec<Symbol> = symbols.into_iter().collect();

    let mut goto: Vec<HashMap<Symbol, usize>> = vec![HashMap::new()];
    let mut out = vec![false];
    for p in patterns {
        let mut node = 0;
        for &y in p {
            node = match goto[node].get(&y) {
                Some(&n) => n,
                None => {
                    goto.push(HashMap::new());
                    out.push(false);
                    let n = goto.len() - 1;
                    goto[node].insert(y, n);
                    n
                }
            };
        }
        out[node] = true;
    }

    // Failure links and the full transition function, in BFS order.
    let nodes = goto.len();
    let width = symbols.len();
    let mut fail = vec![0usize; nodes];
    let mut delta = vec![0usize; nodes * width];
    let mut queue = VecDeque::new();
    for (i, &y) in symbols.iter().enumerate() {
        match goto[0].get(&y) {
            Some(&n) => {
                delta[i] = n;
                fail[n] = 0;
                queue.push_back(n);
            }
            None => delta[i] = 0,
        }
    }
    while let Some(u) = queue.pop_front() {
        out[u] = out[u] || out[fail[u]];
        for (i, &y) in symbols.iter().enumerate() {
            match goto[u].get(&y) {
                Some(&v) => {
                    fail[v] = delta[fail[u] * width + i];
                    delta[u * width + i] = v;
                    queue.push_back(v);
                }
                None => delta[u * width + i] = delta[fail[u] * width + i],
            }
        }
    }

    // Renumber live nodes reachable from the root; all output nodes collapse
    // into the dead state.
    let mut ids: HashMap<usize, u32> = HashMap::from([(0, 0)]);
    let mut order = vec![0usize];
    let mut trans: Vec<(u32, usize, Option<usize>)> = Vec::new();
    let mut any_dead = false;
    let mut i = 0;
    while i < order.len() {
        let u = order[i];
        for k in 0..width {
            let v = delta[u * width + k];
            if out[v] {
                any_dead = true;
                trans.push((i as u32, k, None));
            } else {
                if let std::collections::hash_map::Entry::Vacant(e) = ids.entry(v) {
                    e.insert(order.len() as u32);
                    order.push(v);
                }
                trans.push((i as u32, k, Some(v)));
            }
        }
        i += 1;
    }
    let live = order.len();
    let dead = live as u32;
    let state_count = live + usize::from(any_dead);
    let mut acc = Acceptor::empty(state_count, 0, symbols);
    for q in 0..live {
        acc.accepting[q] = true;
    }
    for (q, k, v) in trans {
        acc.table[q as usize * width + k] = match v {
            Some(v) => ids[&v],
            None => dead,
        };
    }
    Ok(acc)
}

/// Forbids every `m`-gram that occurs in `corpus`.
pub fn compile_maxorder(
    corpus: &Corpus,
    m: usize,
    alphabet: &BTreeSet<Symbol>,
) -> Result<Acceptor> {
    if m == 0 {
        return Err(Error::InvalidAcceptor(
            "MAXORDER length must be at least 1".into(),
        ));
    }
    let grams: Vec<Vec<Symbol>> = corpus.ngrams(m).into_iter().collect();
    compile_forbidden(&grams, alphabet)
}

/// Per-position allowed-symbol sets; an absent position allows everything.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionalMask {
    masks: Vec<Option<BTreeSet<Symbol>>>,
}

impl PositionalMask {
    pub fn permissive(horizon: usize) -> Self {
        PositionalMask {
            masks: vec![None; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.masks.len()
    }

    /// Restricts position `t` to `allowed`, intersecting with any existing set.
    pub fn restrict(&mut self, t: usize, allowed: &BTreeSet<Symbol>) -> Result<()> {
        if t >= self.masks.len() {
            return Err(Error::InfeasibleSpec(format!(
                "position {t} outside horizon {}",
                self.masks.len()
            )));
        }
        let merged = match &self.masks[t] {
            Some(cur) => cur.intersection(allowed).copied().collect(),
            None => allowed.clone(),
        };
        if merged.is_empty() {
            return Err(Error::InfeasibleSpec(format!(
                "position {t} allows no symbol"
            )));
        }
        self.masks[t] = Some(merged);
        Ok(())
    }

    #[inline]
    pub fn allows(&self, t: usize, y: Symbol) -> bool {
        match self.masks.get(t) {
            Some(Some(set)) => set.contains(&y),
            _ => true,
        }
    }

    pub fn allowed(&self, t: usize) -> Option<&BTreeSet<Symbol>> {
        self.masks.get(t).and_then(|m| m.as_ref())
    }

    /// Pointwise intersection of two masks of the same horizon.
    pub fn intersect(&self, other: &PositionalMask) -> Result<PositionalMask> {
        if self.horizon() != other.horizon() {
            return Err(Error::InfeasibleSpec("mask horizons differ".into()));
        }
        let mut out = self.clone();
        for t in 0..other.horizon() {
            if let Some(set) = other.allowed(t) {
                out.restrict(t, set)?;
            }
        }
        Ok(out)
    }
}

/// True iff every position is admitted by the mask, every transition is
/// defined and the final state accepts.
pub fn validate_sequence(x: &[Symbol], acceptor: &Acceptor, mask: &PositionalMask) -> bool {
    x.len() == mask.horizon()
        && x.iter().enumerate().all(|(t, &y)| mask.allows(t, y))
        && acceptor.accepts(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub pos: usize,
    pub allowed: Vec<Symbol>,
}

/// Inline acceptor document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfaDoc {
    pub states: usize,
    pub start: AcceptorState,
    pub accepting: Vec<AcceptorState>,
    pub transitions: Vec<(AcceptorState, Symbol, AcceptorState)>,
}

/// Declarative constraint set as read from a JSON document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConstraintSpec {
    pub horizon: usize,
    #[serde(default)]
    pub anchors: Vec<Anchor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_allowed: Option<Vec<Symbol>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forbidden_substrings: Option<Vec<Vec<Symbol>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maxorder: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dfa: Option<DfaDoc>,
}

/// Regular part and positional part of a compiled constraint set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraints {
    pub acceptor: Acceptor,
    pub mask: PositionalMask,
}

impl Constraints {
    /// No constraint beyond the horizon.
    pub fn unconstrained(horizon: usize, alphabet: &BTreeSet<Symbol>) -> Self {
        Constraints {
            acceptor: Acceptor::accept_all(alphabet),
            mask: PositionalMask::permissive(horizon),
        }
    }

    pub fn horizon(&self) -> usize {
        self.mask.horizon()
    }

    pub fn validate(&self, x: &[Symbol]) -> bool {
        validate_sequence(x, &self.acceptor, &self.mask)
    }
}

impl ConstraintSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InfeasibleSpec(format!("malformed constraint document: {e}")))
    }

    /// Compiles the DFA parts (forbidden substrings, MAXORDER, inline DFA)
    /// into one product acceptor and the positional parts into a mask.
    /// MAXORDER needs the training corpus.
    pub fn compile(
        &self,
        alphabet: &BTreeSet<Symbol>,
        corpus: Option<&Corpus>,
    ) -> Result<Constraints> {
        let mask = build_masks(self)?;
        let mut acceptor = Acceptor::accept_all(alphabet);
        if let Some(patterns) = &self.forbidden_substrings {
            acceptor = acceptor.product(&compile_forbidden(patterns, alphabet)?);
        }
        if let Some(m) = self.maxorder {
            let corpus = corpus.ok_or_else(|| {
                Error::InfeasibleSpec("MAXORDER constraint requires the training corpus".into())
            })?;
            acceptor = acceptor.product(&compile_maxorder(corpus, m, alphabet)?);
        }
        if let Some(doc) = &self.dfa {
            acceptor = acceptor.product(&Acceptor::from_doc(doc)?);
        }
        Ok(Constraints { acceptor, mask })
    }
}

/// Anchors and the final-position set become mask entries.
pub fn build_masks(spec: &ConstraintSpec) -> Result<PositionalMask> {
    if spec.horizon == 0 {
        return Err(Error::InfeasibleSpec("horizon must be at least 1".into()));
    }
    let mut mask = PositionalMask::permissive(spec.horizon);
    for a in &spec.anchors {
        if a.allowed.is_empty() {
            return Err(Error::InfeasibleSpec(format!(
                "anchor at position {} has an empty allowed set",
                a.pos
            )));
        }
        mask.restrict(a.pos, &a.allowed.iter().copied().collect())?;
    }
    if let Some(fin) = &spec.final_allowed {
        if fin.is_empty() {
            return Err(Error::InfeasibleSpec("final_allowed is empty".into()));
        }
        mask.restrict(spec.horizon - 1, &fin.iter().copied().collect())?;
    }
    Ok(mask)
}
