//! Sparse context graphs.
//!
//! States are the stored contexts of a [`CountSource`] up to an order cutoff.
//! Emitting `y` from state `s` moves to `canon(s, y)`, the longest stored
//! suffix of `s·y`, so each `(state, symbol)` pair has at most one edge. The
//! edge weight is the source policy's predictive probability at `s`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::corpus::{CountSource, CountTable, Row};
use crate::error::{Error, Result};
use crate::Symbol;

pub type StateId = u32;

/// One emission `state --symbol/prob--> target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub symbol: Symbol,
    pub target: StateId,
    pub prob: f64,
}

/// How the mixing weight of an interpolated row is computed from its counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    /// `n₊(s) / (n₊(s) + Σ_y N(s, y))`, with `n₊` the number of distinct continuations.
    WittenBell,
    /// The same weight for every non-root context.
    Constant(f64),
}

impl LambdaRule {
    fn weight(&self, row: &Row) -> f64 {
        match *self {
            LambdaRule::WittenBell => {
                let distinct = row.len() as f64;
                let total = row.values().sum::<u64>() as f64;
                distinct / (distinct + total)
            }
            LambdaRule::Constant(l) => l,
        }
    }
}

/// Interpolated smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolation {
    pub lambda: LambdaRule,
    /// Additive pseudo-count applied to every alphabet symbol at the root.
    pub root_additive: f64,
}

impl Default for Interpolation {
    fn default() -> Self {
        Interpolation {
            lambda: LambdaRule::WittenBell,
            root_additive: 0.0,
        }
    }
}

/// Edge-weighting rule of a context graph.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SourcePolicy {
    /// Maximum-likelihood row of the state itself.
    #[default]
    LongestSuffixMle,
    Interpolated(Interpolation),
}

impl SourcePolicy {
    fn validate(&self) -> Result<()> {
        if let SourcePolicy::Interpolated(ip) = self {
            if let LambdaRule::Constant(l) = ip.lambda {
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::InvalidPolicy(format!("lambda {l} outside [0, 1]")));
                }
            }
            if !(ip.root_additive >= 0.0 && ip.root_additive.is_finite()) {
                return Err(Error::InvalidPolicy(format!(
                    "root pseudo-count {} must be finite and nonnegative",
                    ip.root_additive
                )));
            }
        }
        Ok(())
    }
}

/// Longest suffix of `s·y` with length at most `cutoff` that `source` stores.
///
/// The empty context is the fallback, so the result is always defined.
pub fn canon(source: &dyn CountSource, cutoff: usize, s: &[Symbol], y: Symbol) -> Vec<Symbol> {
    let mut cat = Vec::with_capacity(s.len() + 1);
    cat.extend_from_slice(s);
    cat.push(y);
    let max_len = cutoff.min(cat.len());
    for len in (1..=max_len).rev() {
        let cand = &cat[cat.len() - len..];
        if source.contains(cand) {
            return cand.to_vec();
        }
    }
    Vec::new()
}

/// Variable-order prediction: the normalized row of the longest suffix of
/// `history` (length at most `cutoff`) with nonzero support.
///
/// Returns the order used (suffix length, 0 at the root) and the distribution
/// in ascending symbol order.
pub fn predict_longest_suffix(
    counts: &CountTable,
    cutoff: usize,
    history: &[Symbol],
) -> Result<(usize, Vec<(Symbol, f64)>)> {
    for j in (0..=cutoff.min(history.len())).rev() {
        let ctx = &history[history.len() - j..];
        if let Some(row) = counts.get(ctx) {
            let total: u64 = row.values().sum();
            if total > 0 {
                let dist = row
                    .iter()
                    .map(|(&y, &n)| (y, n as f64 / total as f64))
                    .collect();
                return Ok((j, dist));
            }
        }
    }
    Err(Error::NoDistribution)
}

fn mle_row(row: &Row) -> BTreeMap<Symbol, f64> {
    let total = row.values().sum::<u64>() as f64;
    row.iter().map(|(&y, &n)| (y, n as f64 / total)).collect()
}

/// Interpolated predictive row
/// `P(y|s) = λ(s)·P̂(y|s) + (1 − λ(s))·P(y|suffix(s))`.
///
/// The root row is the unigram MLE, or the additively smoothed unigram row
/// over the source alphabet when `root_additive > 0`.
pub fn interpolated_row(
    source: &dyn CountSource,
    s: &[Symbol],
    params: &Interpolation,
) -> Result<BTreeMap<Symbol, f64>> {
    let mut memo = HashMap::new();
    interpolated_row_memo(source, s, params, &mut memo)
}

fn interpolated_row_memo(
    source: &dyn CountSource,
    s: &[Symbol],
    params: &Interpolation,
    memo: &mut HashMap<Vec<Symbol>, BTreeMap<Symbol, f64>>,
) -> Result<BTreeMap<Symbol, f64>> {
    if let Some(r) = memo.get(s) {
        return Ok(r.clone());
    }
    let out = if s.is_empty() {
        let root = source.row(&[]).ok_or(Error::NoDistribution)?;
        if root.is_empty() {
            return Err(Error::NoDistribution);
        }
        if params.root_additive > 0.0 {
            let alphabet = source.alphabet();
            let delta = params.root_additive;
            let total = root.values().sum::<u64>() as f64 + delta * alphabet.len() as f64;
            alphabet
                .iter()
                .map(|&y| {
                    (
                        y,
                        (root.get(&y).copied().unwrap_or(0) as f64 + delta) / total,
                    )
                })
                .collect()
        } else {
            mle_row(&root)
        }
    } else {
        let lower = interpolated_row_memo(source, &s[1..], params, memo)?;
        match source.row(s) {
            None => lower,
            Some(row) => {
                let lambda = params.lambda.weight(&row);
                let own = mle_row(&row);
                let mut mixed: BTreeMap<Symbol, f64> = lower
                    .iter()
                    .map(|(&y, &p)| (y, (1.0 - lambda) * p))
                    .collect();
                for (y, p) in own {
                    *mixed.entry(y).or_insert(0.0) += lambda * p;
                }
                mixed.retain(|_, p| *p > 0.0);
                mixed
            }
        }
    };
    memo.insert(s.to_vec(), out.clone());
    Ok(out)
}

/// Sparse deterministic context automaton with policy edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextGraph {
    cutoff: usize,
    states: Vec<Vec<Symbol>>,
    index: HashMap<Vec<Symbol>, StateId>,
    offsets: Vec<usize>,
    edges: Vec<Edge>,
    expanded: Vec<bool>,
    complete: bool,
    root: StateId,
}

impl ContextGraph {
    /// Full graph over every stored context of length at most `cutoff`.
    pub fn build(source: &dyn CountSource, cutoff: usize, policy: SourcePolicy) -> Result<Self> {
        if cutoff == 0 {
            return Err(Error::ZeroOrder);
        }
        let mut b = GraphBuilder::new(source, cutoff, policy)?;
        for ctx in source.contexts() {
            if ctx.len() <= cutoff {
                b.intern(&ctx);
            }
        }
        let n = b.states.len();
        for id in 0..n {
            b.expand(id as StateId)?;
        }
        debug_assert_eq!(b.states.len(), n, "canon targets are stored contexts");
        Ok(b.finish(true))
    }

    /// Graph restricted to the states reached while expanding from `start`
    /// for `depth` steps. Frontier items carry a tag (an acceptor state);
    /// `admit(t, tag, edge)` returns the successor tag or rejects the edge.
    /// Rows are requested from `source` only for expanded states.
    pub fn build_reachable<F>(
        source: &dyn CountSource,
        cutoff: usize,
        policy: SourcePolicy,
        start: &[Symbol],
        start_tag: u32,
        depth: usize,
        mut admit: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, u32, &Edge) -> Option<u32>,
    {
        if cutoff == 0 {
            return Err(Error::ZeroOrder);
        }
        let mut b = GraphBuilder::new(source, cutoff, policy)?;
        let start_ctx = start_context(source, cutoff, start);
        let s0 = b.intern(&start_ctx);
        let mut layer: Vec<(StateId, u32)> = vec![(s0, start_tag)];
        for t in 0..depth {
            let mut next = std::collections::BTreeSet::new();
            for &(s, tag) in &layer {
                b.expand(s)?;
                let row = b.rows[s as usize].clone().expect("expanded");
                for e in &row {
                    if let Some(next_tag) = admit(t, tag, e) {
                        next.insert((e.target, next_tag));
                    }
                }
            }
            layer = next.into_iter().collect();
        }
        Ok(b.finish(false))
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn root(&self) -> StateId {
        self.root
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Number of states whose outgoing row has been computed.
    pub fn expanded_count(&self) -> usize {
        self.expanded.iter().filter(|&&e| e).count()
    }

    pub fn is_expanded(&self, s: StateId) -> bool {
        self.expanded[s as usize]
    }

    /// Whether the graph holds every stored context up to its cutoff.
    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn context(&self, s: StateId) -> &[Symbol] {
        &self.states[s as usize]
    }

    pub fn state(&self, context: &[Symbol]) -> Option<StateId> {
        self.index.get(context).copied()
    }

    /// Outgoing edges of `s` in ascending symbol order.
    pub fn edges(&self, s: StateId) -> &[Edge] {
        let s = s as usize;
        &self.edges[self.offsets[s]..self.offsets[s + 1]]
    }

    pub fn edge(&self, s: StateId, y: Symbol) -> Option<&Edge> {
        let es = self.edges(s);
        es.binary_search_by_key(&y, |e| e.symbol)
            .ok()
            .map(|i| &es[i])
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        0..self.states.len() as StateId
    }

    /// `canon(s, y)` resolved against this graph's states. Only meaningful on
    /// complete graphs, where the state set is the full stored-context set.
    pub fn canon(&self, s: StateId, y: Symbol) -> StateId {
        debug_assert!(self.complete);
        if let Some(e) = self.edge(s, y) {
            return e.target;
        }
        let ctx = &self.states[s as usize];
        let mut cat = Vec::with_capacity(ctx.len() + 1);
        cat.extend_from_slice(ctx);
        cat.push(y);
        for len in (1..=self.cutoff.min(cat.len())).rev() {
            if let Some(&id) = self.index.get(&cat[cat.len() - len..]) {
                return id;
            }
        }
        self.root
    }

    /// State for the longest stored suffix of `prefix` (complete graphs).
    pub fn start_state(&self, prefix: &[Symbol]) -> StateId {
        for len in (1..=self.cutoff.min(prefix.len())).rev() {
            if let Some(&id) = self.index.get(&prefix[prefix.len() - len..]) {
                return id;
            }
        }
        self.root
    }

    /// Canonical text listing `state -> symbol : next_state @ prob`.
    pub fn dump(&self) -> String {
        let mut order: Vec<StateId> = self.states().collect();
        order.sort_by(|a, b| self.context(*a).cmp(self.context(*b)));
        let mut out = String::new();
        for s in order {
            for e in self.edges(s) {
                writeln!(
                    out,
                    "{} -> {} : {} @ {:.16e}",
                    fmt_context(self.context(s)),
                    e.symbol,
                    fmt_context(self.context(e.target)),
                    e.prob
                )
                .unwrap();
            }
        }
        out
    }
}

/// Longest stored suffix of `prefix` with length at most `cutoff`.
pub fn start_context(source: &dyn CountSource, cutoff: usize, prefix: &[Symbol]) -> Vec<Symbol> {
    for len in (1..=cutoff.min(prefix.len())).rev() {
        let cand = &prefix[prefix.len() - len..];
        if source.contains(cand) {
            return cand.to_vec();
        }
    }
    Vec::new()
}

pub fn fmt_context(ctx: &[Symbol]) -> String {
    let parts: Vec<String> = ctx.iter().map(|s| s.to_string()).collect();
    format!("({})", parts.join(" "))
}

/// The order-1 maximum-likelihood chain over the same counts.
pub fn first_order_project(counts: &CountTable) -> Result<ContextGraph> {
    ContextGraph::build(counts, 1, SourcePolicy::LongestSuffixMle)
}

struct GraphBuilder<'a> {
    source: &'a dyn CountSource,
    cutoff: usize,
    policy: SourcePolicy,
    states: Vec<Vec<Symbol>>,
    index: HashMap<Vec<Symbol>, StateId>,
    rows: Vec<Option<Vec<Edge>>>,
    interp_memo: HashMap<Vec<Symbol>, BTreeMap<Symbol, f64>>,
}

impl<'a> GraphBuilder<'a> {
    fn new(source: &'a dyn CountSource, cutoff: usize, policy: SourcePolicy) -> Result<Self> {
        policy.validate()?;
        Ok(GraphBuilder {
            source,
            cutoff,
            policy,
            states: Vec::new(),
            index: HashMap::new(),
            rows: Vec::new(),
            interp_memo: HashMap::new(),
        })
    }

    fn intern(&mut self, ctx: &[Symbol]) -> StateId {
        if let Some(&id) = self.index.get(ctx) {
            return id;
        }
        let id = self.states.len() as StateId;
        self.states.push(ctx.to_vec());
        self.index.insert(ctx.to_vec(), id);
        self.rows.push(None);
        id
    }

    fn distribution(&mut self, ctx: &[Symbol]) -> Result<BTreeMap<Symbol, f64>> {
        match self.policy {
            SourcePolicy::LongestSuffixMle => {
                let row = self.source.row(ctx).ok_or_else(|| {
                    Error::InvalidModel(format!("context {ctx:?} has no stored row"))
                })?;
                Ok(mle_row(&row))
            }
            SourcePolicy::Interpolated(params) => {
                interpolated_row_memo(self.source, ctx, &params, &mut self.interp_memo)
            }
        }
    }

    fn expand(&mut self, id: StateId) -> Result<()> {
        if self.rows[id as usize].is_some() {
            return Ok(());
        }
        let ctx = self.states[id as usize].clone();
        let dist = self.distribution(&ctx)?;
        let sum: f64 = dist.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { context: ctx, sum });
        }
        let mut row = Vec::with_capacity(dist.len());
        for (y, p) in dist {
            if p <= 0.0 {
                continue;
            }
            let next = canon(self.source, self.cutoff, &ctx, y);
            let target = self.intern(&next);
            row.push(Edge {
                symbol: y,
                target,
                prob: p,
            });
        }
        self.rows[id as usize] = Some(row);
        Ok(())
    }

    fn finish(self, complete: bool) -> ContextGraph {
        let mut offsets = Vec::with_capacity(self.states.len() + 1);
        let mut edges = Vec::new();
        let mut expanded = Vec::with_capacity(self.states.len());
        offsets.push(0);
        for row in &self.rows {
            if let Some(r) = row {
                edges.extend_from_slice(r);
            }
            expanded.push(row.is_some());
            offsets.push(edges.len());
        }
        let root = self.index.get(&[][..]).copied();
        let mut states = self.states;
        let mut index = self.index;
        let root = match root {
            Some(r) => r,
            None => {
                let id = states.len() as StateId;
                states.push(Vec::new());
                index.insert(Vec::new(), id);
                offsets.push(edges.len());
                expanded.push(false);
                id
            }
        };
        ContextGraph {
            cutoff: self.cutoff,
            states,
            index,
            offsets,
            edges,
            expanded,
            complete,
            root,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;

    const INTEGER_EXAMPLE: &str =
        "10* 0 1 2 4\n10* 0 1 3 5\n1* 0 1 3 4\n1000* 6 2 5\n1000* 6 3 4\n";

    fn example_counts() -> CountTable {
        CountTable::from_corpus(&Corpus::parse(INTEGER_EXAMPLE).unwrap(), 2).unwrap()
    }

    #[test]
    fn canon_on_integer_example() {
        let t = example_counts();
        assert_eq!(canon(&t, 2, &[0, 1], 2), vec![1, 2]);
        assert_eq!(canon(&t, 2, &[], 3), vec![3]);
        // 4 is never followed by anything, so it is not a context.
        assert_eq!(canon(&t, 2, &[1, 2], 4), Vec::<Symbol>::new());
    }

    #[test]
    fn longest_suffix_prediction() {
        let t = example_counts();
        let (order, dist) = predict_longest_suffix(&t, 2, &[0, 1]).unwrap();
        assert_eq!(order, 2);
        assert_eq!(dist, vec![(2, 10.0 / 21.0), (3, 11.0 / 21.0)]);
        let (order, dist) = predict_longest_suffix(&t, 2, &[5, 0, 1, 2]).unwrap();
        assert_eq!((order, dist), (2, vec![(4, 1.0)]));
        // (5, 0) is unseen: back off to (0).
        let (order, dist) = predict_longest_suffix(&t, 2, &[5, 0]).unwrap();
        assert_eq!((order, dist), (1, vec![(1, 1.0)]));
        let (order, _) = predict_longest_suffix(&t, 2, &[]).unwrap();
        assert_eq!(order, 0);
    }

    #[test]
    fn integer_example_graph_size() {
        let t = example_counts();
        let g = ContextGraph::build(&t, 2, SourcePolicy::LongestSuffixMle).unwrap();
        assert_eq!(g.state_count(), 11);
        assert_eq!(g.edge_count(), 23);
        assert_eq!(g.context(g.root()), &[] as &[Symbol]);
        let s = g.state(&[0, 1]).unwrap();
        let e = g.edge(s, 2).unwrap();
        assert_eq!(g.context(e.target), &[1, 2]);
    }

    #[test]
    fn rows_are_normalized() {
        let t = example_counts();
        for policy in [
            SourcePolicy::LongestSuffixMle,
            SourcePolicy::Interpolated(Interpolation::default()),
            SourcePolicy::Interpolated(Interpolation {
                lambda: LambdaRule::Constant(0.3),
                root_additive: 0.5,
            }),
        ] {
            let g = ContextGraph::build(&t, 2, policy).unwrap();
            for s in g.states() {
                let sum: f64 = g.edges(s).iter().map(|e| e.prob).sum();
                assert!((sum - 1.0).abs() <= 1e-12, "{policy:?} {sum}");
                assert!(g.edges(s).iter().all(|e| e.prob > 0.0));
            }
        }
    }

    #[test]
    fn first_order_projection_values() {
        let t = example_counts();
        let g = first_order_project(&t).unwrap();
        let two = g.state(&[2]).unwrap();
        let three = g.state(&[3]).unwrap();
        assert_eq!(g.edge(two, 4).unwrap().prob, 10.0 / 1010.0);
        assert_eq!(g.edge(three, 4).unwrap().prob, 1001.0 / 1011.0);
    }

    #[test]
    fn interpolation_degenerate_weights() {
        let t = example_counts();
        let one = Interpolation {
            lambda: LambdaRule::Constant(1.0),
            root_additive: 0.0,
        };
        let zero = Interpolation {
            lambda: LambdaRule::Constant(0.0),
            root_additive: 0.0,
        };
        let mle = mle_row(t.get(&[0, 1]).unwrap());
        assert_eq!(interpolated_row(&t, &[0, 1], &one).unwrap(), mle);
        let root = mle_row(t.get(&[]).unwrap());
        let r0 = interpolated_row(&t, &[0, 1], &zero).unwrap();
        assert_eq!(r0, root);
    }

    #[test]
    fn invalid_lambda_rejected() {
        let t = example_counts();
        let p = SourcePolicy::Interpolated(Interpolation {
            lambda: LambdaRule::Constant(1.5),
            root_additive: 0.0,
        });
        assert!(matches!(
            ContextGraph::build(&t, 2, p),
            Err(Error::InvalidPolicy(_))
        ));
    }

    #[test]
    fn dump_format() {
        let t = CountTable::from_corpus(&Corpus::parse("0 1").unwrap(), 1).unwrap();
        let g = ContextGraph::build(&t, 1, SourcePolicy::LongestSuffixMle).unwrap();
        let d = g.dump();
        assert_eq!(
            d,
            "() -> 0 : (0) @ 5.0000000000000000e-1\n() -> 1 : () @ 5.0000000000000000e-1\n(0) -> 1 : () @ 1.0000000000000000e0\n"
        );
    }

    #[test]
    fn canon_is_longest_stored_suffix() {
        let t = example_counts();
        let g = ContextGraph::build(&t, 2, SourcePolicy::LongestSuffixMle).unwrap();
        for s in g.states() {
            for y in 0..8 {
                let expect = canon(&t, 2, g.context(s), y);
                assert_eq!(g.context(g.canon(s, y)), &expect[..]);
            }
        }
        assert_eq!(g.context(g.start_state(&[9, 0, 1])), &[0, 1]);
        assert_eq!(g.start_state(&[]), g.root());
    }
}
