//! Virtual reversible augmentation.
//!
//! A [`TransformGroup`] is a finite set of invertible symbol maps extended
//! symbolwise to contexts. [`VirtualCountTable`] answers count queries for the
//! augmented corpus by inverse lookup,
//! `N_G(s, y) = Σ_g N(g⁻¹ s, g⁻¹ y)`, without storing transformed copies.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::Constraints;
use crate::context::{ContextGraph, SourcePolicy};
use crate::corpus::{Corpus, CountSource, CountTable, Row};
use crate::error::{Error, Result};
use crate::inference::{start_state, BackwardOptions, BackwardTable};
use crate::orderstack::{MassMode, OrderPolicy, OrderStack};
use crate::Symbol;

/// An invertible symbol map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transform {
    /// `y ↦ y + amount`.
    Shift(i64),
    /// Listed pairs; unlisted symbols map to themselves.
    Explicit {
        forward: BTreeMap<Symbol, Symbol>,
        inverse: BTreeMap<Symbol, Symbol>,
    },
}

impl Transform {
    pub fn explicit(pairs: &[(Symbol, Symbol)]) -> Result<Self> {
        let mut forward = BTreeMap::new();
        let mut inverse = BTreeMap::new();
        for &(a, b) in pairs {
            if forward.insert(a, b).is_some_and(|old| old != b) {
                return Err(Error::InvalidGroup(format!("symbol {a} mapped twice")));
            }
            if inverse.insert(b, a).is_some_and(|old| old != a) {
                return Err(Error::InvalidGroup(format!("symbol {b} has two preimages")));
            }
        }
        Ok(Transform::Explicit { forward, inverse })
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Transform::Shift(d) => *d == 0,
            Transform::Explicit { forward, .. } => forward.iter().all(|(a, b)| a == b),
        }
    }

    /// `g(y)`, or `None` when the image leaves the symbol range.
    pub fn apply(&self, y: Symbol) -> Option<Symbol> {
        match self {
            Transform::Shift(d) => u32::try_from(y as i64 + d).ok(),
            Transform::Explicit { forward, inverse } => match forward.get(&y) {
                Some(&z) => Some(z),
                // An unlisted symbol is fixed unless it is some listed image.
                None if inverse.contains_key(&y) => None,
                None => Some(y),
            },
        }
    }

    /// `g⁻¹(y)`, or `None` when `y` has no preimage.
    pub fn invert(&self, y: Symbol) -> Option<Symbol> {
        match self {
            Transform::Shift(d) => u32::try_from(y as i64 - d).ok(),
            Transform::Explicit { forward, inverse } => match inverse.get(&y) {
                Some(&z) => Some(z),
                None if forward.contains_key(&y) => None,
                None => Some(y),
            },
        }
    }

    pub fn apply_seq(&self, seq: &[Symbol]) -> Option<Vec<Symbol>> {
        seq.iter().map(|&y| self.apply(y)).collect()
    }

    pub fn invert_seq(&self, seq: &[Symbol]) -> Option<Vec<Symbol>> {
        seq.iter().map(|&y| self.invert(y)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum GroupDoc {
    Shift { amounts: Vec<i64> },
    Explicit { maps: Vec<Vec<(Symbol, Symbol)>> },
}

/// Finite list of invertible transforms containing the identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformGroup {
    transforms: Vec<Transform>,
}

impl TransformGroup {
    pub fn new(transforms: Vec<Transform>) -> Result<Self> {
        if !transforms.iter().any(Transform::is_identity) {
            return Err(Error::InvalidGroup(
                "the identity transform is required".into(),
            ));
        }
        for (i, a) in transforms.iter().enumerate() {
            if transforms[..i].contains(a) {
                return Err(Error::InvalidGroup(format!(
                    "transform {i} is listed twice"
                )));
            }
        }
        Ok(TransformGroup { transforms })
    }

    pub fn identity() -> Self {
        TransformGroup {
            transforms: vec![Transform::Shift(0)],
        }
    }

    pub fn shifts(amounts: &[i64]) -> Result<Self> {
        TransformGroup::new(amounts.iter().map(|&d| Transform::Shift(d)).collect())
    }

    /// Parses `{"kind":"shift","amounts":[..]}` or
    /// `{"kind":"explicit","maps":[[[from,to],..],..]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GroupDoc = serde_json::from_str(text)
            .map_err(|e| Error::InvalidGroup(format!("group spec: {e}")))?;
        match doc {
            GroupDoc::Shift { amounts } => TransformGroup::shifts(&amounts),
            GroupDoc::Explicit { maps } => TransformGroup::new(
                maps.iter()
                    .map(|m| Transform::explicit(m))
                    .collect::<Result<Vec<_>>>()?,
            ),
        }
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

/// `∪_g g(alphabet)`, checking that every transform is defined and injective
/// on the closure and that `g⁻¹ ∘ g` is the identity there.
pub fn close_alphabet(
    alphabet: &BTreeSet<Symbol>,
    group: &TransformGroup,
) -> Result<BTreeSet<Symbol>> {
    let mut closure = BTreeSet::new();
    for g in group.transforms() {
        for &y in alphabet {
            let z = g
                .apply(y)
                .ok_or_else(|| Error::InvalidGroup(format!("{g:?} is undefined on symbol {y}")))?;
            closure.insert(z);
        }
    }
    for g in group.transforms() {
        let mut images = BTreeSet::new();
        for &y in alphabet {
            let z = g.apply(y).expect("checked above");
            if !images.insert(z) {
                return Err(Error::InvalidGroup(format!(
                    "{g:?} is not injective: collision at {z}"
                )));
            }
            if g.invert(z) != Some(y) {
                return Err(Error::InvalidGroup(format!("{g:?} is not inverted at {y}")));
            }
        }
    }
    Ok(closure)
}

/// The corpus with every transformed copy of every sequence.
pub fn materialize(corpus: &Corpus, group: &TransformGroup) -> Result<Corpus> {
    close_alphabet(corpus.alphabet(), group)?;
    let mut sequences = Vec::with_capacity(corpus.sequences().len() * group.len());
    for g in group.transforms() {
        for (mult, seq) in corpus.sequences() {
            sequences.push((*mult, g.apply_seq(seq).expect("closure checked")));
        }
    }
    Corpus::new(sequences)
}

/// Augmented counts computed on demand from a base table.
#[derive(Debug)]
pub struct VirtualCountTable {
    base: CountTable,
    group: TransformGroup,
    alphabet: BTreeSet<Symbol>,
    cache: RwLock<HashMap<Vec<Symbol>, Option<Row>>>,
    computed: AtomicUsize,
}

impl VirtualCountTable {
    pub fn new(base: CountTable, group: TransformGroup) -> Result<Self> {
        let alphabet = close_alphabet(base.alphabet(), &group)?;
        Ok(VirtualCountTable {
            base,
            group,
            alphabet,
            cache: RwLock::new(HashMap::new()),
            computed: AtomicUsize::new(0),
        })
    }

    pub fn base(&self) -> &CountTable {
        &self.base
    }

    pub fn group(&self) -> &TransformGroup {
        &self.group
    }

    /// Distinct rows evaluated so far.
    pub fn rows_computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    /// `N_G(s, ·)` by inverse lookup; empty when no preimage is stored.
    pub fn virtual_row(&self, context: &[Symbol]) -> Row {
        self.lookup(context).unwrap_or_default()
    }

    fn lookup(&self, context: &[Symbol]) -> Option<Row> {
        if let Some(r) = self.cache.read().unwrap().get(context) {
            return r.clone();
        }
        let mut row = Row::new();
        for g in self.group.transforms() {
            let Some(pre) = g.invert_seq(context) else {
                continue;
            };
            if let Some(base_row) = self.base.get(&pre) {
                for (&y, &n) in base_row {
                    let z = g.apply(y).expect("closure checked");
                    *row.entry(z).or_insert(0) += n;
                }
            }
        }
        let row = (!row.is_empty()).then_some(row);
        let mut cache = self.cache.write().unwrap();
        if !cache.contains_key(context) {
            self.computed.fetch_add(1, Ordering::Relaxed);
            cache.insert(context.to_vec(), row.clone());
        }
        row
    }

    /// Events the virtual table stores (the base corpus) and the events an
    /// explicit materialization would store.
    pub fn stored_events(corpus: &Corpus, group: &TransformGroup) -> (u64, u64) {
        let base = corpus.event_count();
        (base, base * group.len() as u64)
    }
}

impl CountSource for VirtualCountTable {
    fn max_order(&self) -> usize {
        self.base.max_order()
    }

    fn alphabet(&self) -> Cow<'_, BTreeSet<Symbol>> {
        Cow::Borrowed(&self.alphabet)
    }

    fn contains(&self, context: &[Symbol]) -> bool {
        context.is_empty()
            || self.group.transforms().iter().any(|g| {
                g.invert_seq(context)
                    .is_some_and(|pre| self.base.get(&pre).is_some())
            })
    }

    fn row(&self, context: &[Symbol]) -> Option<Cow<'_, Row>> {
        self.lookup(context).map(Cow::Owned)
    }

    fn contexts(&self) -> Vec<Vec<Symbol>> {
        let mut out = BTreeSet::new();
        for g in self.group.transforms() {
            for ctx in self.base.rows().keys() {
                out.insert(g.apply_seq(ctx).expect("closure checked"));
            }
        }
        out.into_iter().collect()
    }
}

/// Which quantity the equivalence check compares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckPolicy {
    /// Partition function of the fixed top-order source.
    Fixed,
    /// Policy success mass of an order stack.
    Stack(OrderPolicy),
}

/// Result of running the virtual and materialized pipelines side by side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub transforms: usize,
    pub stored_events_virtual: u64,
    pub stored_events_materialized: u64,
    pub rows_compared: usize,
    pub max_row_difference: u64,
    pub first_mismatch: Option<Vec<Symbol>>,
    pub max_edge_ulps: u64,
    pub full_graph_states: usize,
    pub lazy_graph_states: usize,
    pub virtual_rows_computed: usize,
    pub full_product_edges: usize,
    pub lazy_product_edges: usize,
    pub mass_kind: String,
    pub mass_virtual: f64,
    pub mass_materialized: f64,
    pub mass_difference: f64,
    pub start_order_masses_match: bool,
    pub bp_seconds_virtual: f64,
    pub bp_seconds_materialized: f64,
    pub passed: bool,
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64).abs_diff(b.to_bits() as i64)
}

/// Compares counts, graph weights and the constrained mass between the
/// virtual table and an explicit materialization.
pub fn check_equivalence(
    corpus: &Corpus,
    max_order: usize,
    group: &TransformGroup,
    source_policy: SourcePolicy,
    constraints: &Constraints,
    prefix: &[Symbol],
    policy: CheckPolicy,
) -> Result<EquivalenceReport> {
    let base = CountTable::from_corpus(corpus, max_order)?;
    let virt = VirtualCountTable::new(base, group.clone())?;
    let mat = CountTable::from_corpus(&materialize(corpus, group)?, max_order)?;

    let mut rows_compared = 0;
    let mut max_row_difference = 0u64;
    let mut first_mismatch = None;
    let virt_contexts = virt.contexts();
    let mat_contexts: Vec<Vec<Symbol>> = mat.rows().keys().cloned().collect();
    if virt_contexts != mat_contexts {
        let diff = mat_contexts
            .iter()
            .find(|c| !virt_contexts.contains(c))
            .or_else(|| virt_contexts.iter().find(|c| !mat_contexts.contains(c)))
            .cloned();
        first_mismatch = diff;
    }
    for (ctx, row) in mat.rows() {
        rows_compared += 1;
        let vrow = virt.virtual_row(ctx);
        let keys: BTreeSet<&Symbol> = row.keys().chain(vrow.keys()).collect();
        for y in keys {
            let d = row
                .get(y)
                .copied()
                .unwrap_or(0)
                .abs_diff(vrow.get(y).copied().unwrap_or(0));
            if d > 0 && first_mismatch.is_none() {
                first_mismatch = Some(ctx.clone());
            }
            max_row_difference = max_row_difference.max(d);
        }
    }

    // Full graphs on both sources: identical states, targets and weights.
    let g_virt = ContextGraph::build(&virt, max_order, source_policy)?;
    let g_mat = ContextGraph::build(&mat, max_order, source_policy)?;
    let mut max_edge_ulps = 0u64;
    let mut graphs_match = g_virt.state_count() == g_mat.state_count();
    for s in g_mat.states() {
        let ctx = g_mat.context(s);
        let Some(sv) = g_virt.state(ctx) else {
            graphs_match = false;
            continue;
        };
        let (ev, em) = (g_virt.edges(sv), g_mat.edges(s));
        if ev.len() != em.len() {
            graphs_match = false;
            continue;
        }
        for (a, b) in ev.iter().zip(em) {
            if a.symbol != b.symbol || g_virt.context(a.target) != g_mat.context(b.target) {
                graphs_match = false;
            }
            max_edge_ulps = max_edge_ulps.max(ulps(a.prob, b.prob));
        }
    }

    // Fresh virtual table for the lazy run so row counts reflect only it.
    let lazy_source = VirtualCountTable::new(virt.base().clone(), group.clone())?;
    let acc = &constraints.acceptor;
    let mask = &constraints.mask;
    let n = mask.horizon();
    let (
        mass_kind,
        mass_virtual,
        mass_materialized,
        start_match,
        lazy_states,
        full_edges,
        lazy_edges,
        tv,
        tm,
    );
    match policy {
        CheckPolicy::Fixed => {
            let clock = Instant::now();
            let lazy = ContextGraph::build_reachable(
                &lazy_source,
                max_order,
                source_policy,
                prefix,
                acc.start(),
                n,
                |t, q, e| {
                    if mask.allows(t, e.symbol) {
                        acc.step(q, e.symbol)
                    } else {
                        None
                    }
                },
            )?;
            let s0 = start_state(&lazy, acc, prefix, false)?;
            let bv = BackwardTable::build(&lazy, acc, mask, s0, BackwardOptions::default())?;
            tv = clock.elapsed().as_secs_f64();
            let clock = Instant::now();
            let s1 = start_state(&g_mat, acc, prefix, false)?;
            let bm = BackwardTable::build(&g_mat, acc, mask, s1, BackwardOptions::default())?;
            tm = clock.elapsed().as_secs_f64();
            mass_kind = "partition_function";
            mass_virtual = bv.partition().z();
            mass_materialized = bm.partition().z();
            let fv = bv.first_step_scores();
            let fm = bm.first_step_scores();
            start_match = fv.len() == fm.len()
                && fv
                    .iter()
                    .zip(&fm)
                    .all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
            lazy_states = lazy.state_count();
            full_edges = bm.stats().reach_edges;
            lazy_edges = bv.stats().reach_edges;
        }
        CheckPolicy::Stack(order_policy) => {
            let clock = Instant::now();
            let sv = OrderStack::prepare(&lazy_source, max_order, source_policy, constraints)?;
            let mv =
                sv.success_mass(&order_policy, prefix, MassMode::ExactDp { budget: 1 << 22 })?;
            tv = clock.elapsed().as_secs_f64();
            let clock = Instant::now();
            let sm = OrderStack::prepare(&mat, max_order, source_policy, constraints)?;
            let mm =
                sm.success_mass(&order_policy, prefix, MassMode::ExactDp { budget: 1 << 22 })?;
            tm = clock.elapsed().as_secs_f64();
            mass_kind = "success_mass";
            mass_virtual = mv.mass;
            mass_materialized = mm.mass;
            let q0 = acc.start();
            let (stv, stm) = (sv.start_states(prefix), sm.start_states(prefix));
            start_match = (1..=max_order).all(|k| {
                let a = sv.log_beta(k, 0, stv[k - 1], q0);
                let b = sm.log_beta(k, 0, stm[k - 1], q0);
                a.to_bits() == b.to_bits()
            });
            lazy_states = sv.graph(max_order).state_count();
            let top = |s: &OrderStack| {
                s.memo(max_order)
                    .touched_edges(s.graph(max_order), acc, mask)
                    .0
            };
            lazy_edges = top(&sv);
            full_edges = top(&sm);
        }
    }
    let mass_difference = (mass_virtual - mass_materialized).abs();
    let (ev, em) = VirtualCountTable::stored_events(corpus, group);
    let passed = first_mismatch.is_none()
        && max_row_difference == 0
        && max_edge_ulps == 0
        && graphs_match
        && mass_difference == 0.0
        && start_match;
    Ok(EquivalenceReport {
        transforms: group.len(),
        stored_events_virtual: ev,
        stored_events_materialized: em,
        rows_compared,
        max_row_difference,
        first_mismatch,
        max_edge_ulps,
        full_graph_states: g_mat.state_count(),
        lazy_graph_states: lazy_states,
        virtual_rows_computed: lazy_source.rows_computed(),
        full_product_edges: full_edges,
        lazy_product_edges: lazy_edges,
        mass_kind: mass_kind.into(),
        mass_virtual,
        mass_materialized,
        mass_difference,
        start_order_masses_match: start_match,
        bp_seconds_virtual: tv,
        bp_seconds_materialized: tm,
        passed,
    })
}
