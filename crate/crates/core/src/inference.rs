//! Backward messages on the reachable context × acceptor product.
//!
//! [`BackwardTable`] materializes, layer by layer, exactly the product states
//! `(s, q)` reachable from the start state within the horizon (edges filtered
//! by the positional mask and the acceptor), then runs the backward recursion
//!
//! ```text
//! β_n(s, q) = 1[q ∈ F]
//! β_t(s, q) = Σ_{s --y,p--> s', y ∈ ψ_t, δ(q,y) defined} p · β_{t+1}(s', δ(q, y))
//! ```
//!
//! in linear space. A layer whose maximum drops below the rescale threshold is
//! multiplied by a power of two and the factor is logged, so sampling ratios
//! are bit-identical with or without rescaling.
//!
//! [`MemoBackward`] computes the same messages on demand in log space, for
//! callers whose query states are not known up front (order stacks).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::RwLock;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::constraints::{Acceptor, AcceptorState, Constraints, PositionalMask};
use crate::context::{ContextGraph, StateId};
use crate::corpus::CountTable;
use crate::error::{Error, Result};
use crate::Symbol;

/// Layers at least this large are evaluated in parallel.
const PARALLEL_LAYER: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProductState {
    pub context: StateId,
    pub acceptor: AcceptorState,
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    /// Rescale a layer when its maximum is positive and below this value.
    pub rescale_threshold: Option<f64>,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            rescale_threshold: Some(1e-280),
        }
    }
}

/// Start state for a prefix: the canon context of the prefix, paired with the
/// acceptor start (or the state after reading the prefix when `feed_prefix`).
pub fn start_state(
    graph: &ContextGraph,
    acceptor: &Acceptor,
    prefix: &[Symbol],
    feed_prefix: bool,
) -> Result<ProductState> {
    let context = if graph.is_complete() {
        graph.start_state(prefix)
    } else {
        let mut found = None;
        for len in (0..=graph.cutoff().min(prefix.len())).rev() {
            if let Some(id) = graph.state(&prefix[prefix.len() - len..]) {
                found = Some(id);
                break;
            }
        }
        found.ok_or_else(|| Error::UnknownStart(prefix.to_vec()))?
    };
    let acceptor_state = if feed_prefix {
        acceptor
            .run_from(acceptor.start(), prefix)
            .ok_or(Error::Infeasible)?
    } else {
        acceptor.start()
    };
    Ok(ProductState {
        context,
        acceptor: acceptor_state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ProductEdge {
    symbol: Symbol,
    prob: f64,
    target: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Layer {
    states: Vec<ProductState>,
    index: HashMap<ProductState, u32>,
    beta: Vec<f64>,
    offsets: Vec<usize>,
    edges: Vec<ProductEdge>,
}

impl Layer {
    fn out(&self, i: usize) -> &[ProductEdge] {
        &self.edges[self.offsets[i]..self.offsets[i + 1]]
    }

    fn intern(&mut self, ps: ProductState) -> u32 {
        if let Some(&i) = self.index.get(&ps) {
            return i;
        }
        let i = self.states.len() as u32;
        self.states.push(ps);
        self.index.insert(ps, i);
        i
    }
}

/// `β_0` at the start state as a scaled value: `Z = value · exp(log_scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partition {
    pub value: f64,
    pub log_scale: f64,
}

impl Partition {
    pub fn z(&self) -> f64 {
        self.value * self.log_scale.exp()
    }

    pub fn log_z(&self) -> f64 {
        if self.value > 0.0 {
            self.value.ln() + self.log_scale
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.value > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceStep {
    pub t: usize,
    pub context: StateId,
    pub acceptor: AcceptorState,
    pub symbol: Symbol,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleResult {
    pub sequence: Vec<Symbol>,
    /// Order used at each step (context length for fixed sources, selected
    /// level for order stacks).
    pub orders: Vec<usize>,
    pub trace: Option<Vec<TraceStep>>,
}

/// Sizes of the materialized product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ProductStats {
    pub context_states: usize,
    pub context_edges: usize,
    pub acceptor_states: usize,
    /// Distinct `(s, q)` over all layers.
    pub reach_states: usize,
    /// Distinct `(s, q, t)`.
    pub time_indexed_states: usize,
    /// Distinct product edges `(s, q) --y--> (s', q')` over all layers.
    pub reach_edges: usize,
    pub time_indexed_edges: usize,
    /// `|Q| · |E_T|`.
    pub full_bound: usize,
    /// Edge relaxations performed by the backward sweep.
    pub relaxations: u64,
}

/// Backward messages over the reachable product for one start state.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTable {
    start: ProductState,
    layers: Vec<Layer>,
    log_scale: Vec<f64>,
    state_orders: Vec<u16>,
    context_states: usize,
    context_edges: usize,
    acceptor_states: usize,
    relaxations: u64,
}

impl BackwardTable {
    pub fn build(
        graph: &ContextGraph,
        acceptor: &Acceptor,
        mask: &PositionalMask,
        start: ProductState,
        options: BackwardOptions,
    ) -> Result<Self> {
        let n = mask.horizon();
        if n == 0 {
            return Err(Error::InfeasibleSpec("horizon must be at least 1".into()));
        }
        if start.context as usize >= graph.state_count() {
            return Err(Error::UnknownStart(Vec::new()));
        }
        if start.acceptor as usize >= acceptor.state_count() {
            return Err(Error::InvalidAcceptor(format!(
                "start acceptor state {} out of range",
                start.acceptor
            )));
        }

        let mut layers: Vec<Layer> = Vec::with_capacity(n + 1);
        let mut first = Layer::default();
        first.intern(start);
        layers.push(first);
        for t in 0..n {
            let mut next = Layer::default();
            let cur = &mut layers[t];
            cur.offsets.push(0);
            for i in 0..cur.states.len() {
                let ps = cur.states[i];
                if !graph.is_expanded(ps.context) {
                    return Err(Error::Invariant(format!(
                        "context state {} reached at t = {t} but not expanded",
                        ps.context
                    )));
                }
                for e in graph.edges(ps.context) {
                    if !mask.allows(t, e.symbol) {
                        continue;
                    }
                    if let Some(q) = acceptor.step(ps.acceptor, e.symbol) {
                        let target = next.intern(ProductState {
                            context: e.target,
                            acceptor: q,
                        });
                        cur.edges.push(ProductEdge {
                            symbol: e.symbol,
                            prob: e.prob,
                            target,
                        });
                    }
                }
                cur.offsets.push(cur.edges.len());
            }
            layers.push(next);
        }

        let mut log_scale = vec![0.0; n + 1];
        let last = &mut layers[n];
        last.beta = last
            .states
            .iter()
            .map(|ps| {
                if acceptor.is_accepting(ps.acceptor) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut relaxations = 0u64;
        for t in (0..n).rev() {
            let (lo, hi) = layers.split_at_mut(t + 1);
            let cur = &mut lo[t];
            let next_beta = &hi[0].beta;
            let eval = |i: usize| -> f64 {
                cur.out(i)
                    .iter()
                    .fold(0.0, |acc, e| acc + e.prob * next_beta[e.target as usize])
            };
            let beta: Vec<f64> = if cur.states.len() >= PARALLEL_LAYER {
                (0..cur.states.len()).into_par_iter().map(eval).collect()
            } else {
                (0..cur.states.len()).map(eval).collect()
            };
            relaxations += cur.edges.len() as u64;
            cur.beta = beta;
            log_scale[t] = log_scale[t + 1];
            if let Some(threshold) = options.rescale_threshold {
                let max = cur.beta.iter().copied().fold(0.0, f64::max);
                if max > 0.0 && max < threshold {
                    let k = -(max.log2().floor() as i32);
                    for b in cur.beta.iter_mut() {
                        *b = scale_pow2(*b, k);
                    }
                    log_scale[t] -= k as f64 * std::f64::consts::LN_2;
                }
            }
        }

        let state_orders = graph
            .states()
            .map(|s| graph.context(s).len() as u16)
            .collect();
        Ok(BackwardTable {
            start,
            layers,
            log_scale,
            state_orders,
            context_states: graph.state_count(),
            context_edges: graph.edge_count(),
            acceptor_states: acceptor.state_count(),
            relaxations,
        })
    }

    /// Convenience wrapper taking compiled constraints.
    pub fn for_constraints(
        graph: &ContextGraph,
        constraints: &Constraints,
        start: ProductState,
    ) -> Result<Self> {
        BackwardTable::build(
            graph,
            &constraints.acceptor,
            &constraints.mask,
            start,
            BackwardOptions::default(),
        )
    }

    pub fn horizon(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn start(&self) -> ProductState {
        self.start
    }

    /// Accumulated log rescale factor of layer `t`.
    pub fn layer_log_scale(&self, t: usize) -> f64 {
        self.log_scale[t]
    }

    /// True (unscaled) `β_t(s, q)`, or `None` if the state was not reached.
    pub fn beta(&self, t: usize, ps: ProductState) -> Option<f64> {
        let layer = self.layers.get(t)?;
        let &i = layer.index.get(&ps)?;
        Some(layer.beta[i as usize] * self.log_scale[t].exp())
    }

    /// Stored (scaled) `β_t(s, q)`.
    pub fn scaled_beta(&self, t: usize, ps: ProductState) -> Option<f64> {
        let layer = self.layers.get(t)?;
        layer.index.get(&ps).map(|&i| layer.beta[i as usize])
    }

    pub fn partition_function(&self, start: ProductState) -> Result<Partition> {
        if start != self.start {
            return Err(Error::UnknownStart(Vec::new()));
        }
        Ok(self.partition())
    }

    pub fn partition(&self) -> Partition {
        Partition {
            value: self.layers[0].beta[0],
            log_scale: self.log_scale[0],
        }
    }

    /// Unnormalized first-step scores `p · β_1` per emitted symbol (true scale).
    pub fn first_step_scores(&self) -> Vec<(Symbol, f64)> {
        let scale = self.log_scale.get(1).copied().unwrap_or(0.0).exp();
        let next = &self.layers[1].beta;
        self.layers[0]
            .out(0)
            .iter()
            .map(|e| (e.symbol, e.prob * next[e.target as usize] * scale))
            .collect()
    }

    /// Draws one sequence by backward-weighted ancestral sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampleResult> {
        self.sample_inner(rng, false)
    }

    pub fn sample_traced<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampleResult> {
        self.sample_inner(rng, true)
    }

    fn sample_inner<R: Rng + ?Sized>(&self, rng: &mut R, trace: bool) -> Result<SampleResult> {
        if !self.partition().is_feasible() {
            return Err(Error::Infeasible);
        }
        let n = self.horizon();
        let mut sequence = Vec::with_capacity(n);
        let mut orders = Vec::with_capacity(n);
        let mut steps = trace.then(|| Vec::with_capacity(n));
        let mut i = 0usize;
        for t in 0..n {
            let layer = &self.layers[t];
            let next = &self.layers[t + 1].beta;
            let edges = layer.out(i);
            let total: f64 = edges.iter().map(|e| e.prob * next[e.target as usize]).sum();
            if !(total > 0.0) {
                return Err(Error::Invariant(format!("zero candidate mass at t = {t}")));
            }
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for e in edges {
                let w = e.prob * next[e.target as usize];
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                chosen = Some(e);
                if u < acc {
                    break;
                }
            }
            let e = chosen.expect("positive total implies a positive edge");
            let ps = layer.states[i];
            let order = self.state_orders[ps.context as usize] as usize;
            if let Some(steps) = steps.as_mut() {
                steps.push(TraceStep {
                    t,
                    context: ps.context,
                    acceptor: ps.acceptor,
                    symbol: e.symbol,
                    order,
                });
            }
            sequence.push(e.symbol);
            orders.push(order);
            i = e.target as usize;
        }
        Ok(SampleResult {
            sequence,
            orders,
            trace: steps,
        })
    }

    /// Exact conditional distribution by enumerating product paths with the
    /// BP-normalized local weights. Refuses when more than `edge_budget`
    /// path edges would be visited.
    pub fn conditional_distribution(&self, edge_budget: u64) -> Result<BTreeMap<Vec<Symbol>, f64>> {
        let mut out = BTreeMap::new();
        if !self.partition().is_feasible() {
            return Ok(out);
        }
        let n = self.horizon();
        let mut visited = 0u64;
        let mut stack: Vec<(usize, usize, Vec<Symbol>, f64)> = vec![(0, 0, Vec::new(), 1.0)];
        while let Some((t, i, seq, prob)) = stack.pop() {
            if t == n {
                *out.entry(seq).or_insert(0.0) += prob;
                continue;
            }
            let next = &self.layers[t + 1].beta;
            let edges = self.layers[t].out(i);
            let total: f64 = edges.iter().map(|e| e.prob * next[e.target as usize]).sum();
            for e in edges.iter().rev() {
                let w = e.prob * next[e.target as usize];
                if w <= 0.0 {
                    continue;
                }
                visited += 1;
                if visited > edge_budget {
                    return Err(Error::BudgetExceeded {
                        needed: visited as u128,
                        budget: edge_budget as u128,
                    });
                }
                let mut s = seq.clone();
                s.push(e.symbol);
                stack.push((t + 1, e.target as usize, s, prob * (w / total)));
            }
        }
        Ok(out)
    }

    pub fn stats(&self) -> ProductStats {
        let mut states: HashSet<ProductState> = HashSet::new();
        let mut edges: HashSet<(ProductState, Symbol)> = HashSet::new();
        let mut time_states = 0;
        let mut time_edges = 0;
        for layer in &self.layers {
            time_states += layer.states.len();
            time_edges += layer.edges.len();
            states.extend(layer.states.iter().copied());
            for (i, ps) in layer.states.iter().enumerate() {
                if layer.offsets.len() > i + 1 {
                    edges.extend(layer.out(i).iter().map(|e| (*ps, e.symbol)));
                }
            }
        }
        ProductStats {
            context_states: self.context_states,
            context_edges: self.context_edges,
            acceptor_states: self.acceptor_states,
            reach_states: states.len(),
            time_indexed_states: time_states,
            reach_edges: edges.len(),
            time_indexed_edges: time_edges,
            full_bound: self.acceptor_states * self.context_edges,
            relaxations: self.relaxations,
        }
    }
}

/// Multiplies by `2^k` exactly, in two steps so the factor stays finite.
fn scale_pow2(x: f64, k: i32) -> f64 {
    let half = k / 2;
    x * 2f64.powi(half) * 2f64.powi(k - half)
}

/// On-demand backward messages in log space, memoized per `(t, s, q)`.
///
/// The memo is shared behind a lock: concurrent queries see identical values
/// because every entry is a pure function of the graph, acceptor and mask.
#[derive(Debug, Default)]
pub struct MemoBackward {
    layers: RwLock<Vec<HashMap<(StateId, AcceptorState), f64>>>,
    relaxations: std::sync::atomic::AtomicU64,
}

impl Clone for MemoBackward {
    fn clone(&self) -> Self {
        MemoBackward {
            layers: RwLock::new(self.layers.read().unwrap().clone()),
            relaxations: std::sync::atomic::AtomicU64::new(
                self.relaxations.load(std::sync::atomic::Ordering::Relaxed),
            ),
        }
    }
}

impl PartialEq for MemoBackward {
    fn eq(&self, other: &Self) -> bool {
        let a = self.layers.read().unwrap();
        let b = other.layers.read().unwrap();
        *a == *b
    }
}

impl MemoBackward {
    pub fn new(horizon: usize) -> Self {
        MemoBackward {
            layers: RwLock::new(vec![HashMap::new(); horizon + 1]),
            relaxations: Default::default(),
        }
    }

    /// `ln β_t(s, q)`; `-inf` for zero mass.
    pub fn log_beta(
        &self,
        graph: &ContextGraph,
        acceptor: &Acceptor,
        mask: &PositionalMask,
        t: usize,
        s: StateId,
        q: AcceptorState,
    ) -> f64 {
        if let Some(&v) = self.layers.read().unwrap()[t].get(&(s, q)) {
            return v;
        }
        let mut layers = self.layers.write().unwrap();
        let n = layers.len() - 1;
        let mut stack: Vec<(usize, StateId, AcceptorState, bool)> = vec![(t, s, q, false)];
        let mut relax = 0u64;
        while let Some(&(t, s, q, expanded)) = stack.last() {
            if layers[t].contains_key(&(s, q)) {
                stack.pop();
                continue;
            }
            if t == n {
                let v = if acceptor.is_accepting(q) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                layers[t].insert((s, q), v);
                stack.pop();
                continue;
            }
            let children = graph.edges(s).iter().filter_map(|e| {
                if !mask.allows(t, e.symbol) {
                    return None;
                }
                acceptor.step(q, e.symbol).map(|q2| (e.prob, e.target, q2))
            });
            if !expanded {
                stack.last_mut().unwrap().3 = true;
                let pending: Vec<_> = children
                    .filter(|&(_, s2, q2)| !layers[t + 1].contains_key(&(s2, q2)))
                    .map(|(_, s2, q2)| (t + 1, s2, q2, false))
                    .collect();
                stack.extend(pending);
                continue;
            }
            let terms: Vec<f64> = children
                .map(|(p, s2, q2)| p.ln() + layers[t + 1][&(s2, q2)])
                .collect();
            relax += terms.len() as u64;
            layers[t].insert((s, q), log_sum_exp(&terms));
            stack.pop();
        }
        self.relaxations
            .fetch_add(relax, std::sync::atomic::Ordering::Relaxed);
        layers[t][&(s, q)]
    }

    pub fn horizon(&self) -> usize {
        self.layers.read().unwrap().len() - 1
    }

    /// `(distinct (s, q), time-indexed entries)` currently memoized.
    pub fn touched(&self) -> (usize, usize) {
        let layers = self.layers.read().unwrap();
        let mut distinct = HashSet::new();
        let mut total = 0;
        for l in layers.iter() {
            total += l.len();
            distinct.extend(l.keys().copied());
        }
        (distinct.len(), total)
    }

    /// Distinct product edges `(s, q, y)` leaving memoized non-terminal
    /// entries, and the number of edge relaxations performed.
    pub fn touched_edges(
        &self,
        graph: &ContextGraph,
        acceptor: &Acceptor,
        mask: &PositionalMask,
    ) -> (usize, u64) {
        let layers = self.layers.read().unwrap();
        let n = layers.len() - 1;
        let mut edges = HashSet::new();
        for (t, l) in layers.iter().enumerate().take(n) {
            for &(s, q) in l.keys() {
                for e in graph.edges(s) {
                    if mask.allows(t, e.symbol) && acceptor.step(q, e.symbol).is_some() {
                        edges.insert((s, q, e.symbol));
                    }
                }
            }
        }
        (
            edges.len(),
            self.relaxations.load(std::sync::atomic::Ordering::Relaxed),
        )
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// First-step distribution of the weighted first-order hybrid: the
/// variable-order proposal at the prefix context, reweighted by future mass
/// computed on the order-1 projection. A diagnostic, not an exact sampler.
pub fn first_order_hybrid_scores(
    counts: &CountTable,
    cutoff: usize,
    prefix: &[Symbol],
    constraints: &Constraints,
) -> Result<Vec<(Symbol, f64)>> {
    use crate::context::{first_order_project, predict_longest_suffix};
    let fo = first_order_project(counts)?;
    let (_, proposal) = predict_longest_suffix(counts, cutoff, prefix)?;
    let acc = &constraints.acceptor;
    let mask = &constraints.mask;
    let memo = MemoBackward::new(mask.horizon());
    let fo_start = fo.start_state(prefix);
    let mut scores = Vec::new();
    for (y, p) in proposal {
        if !mask.allows(0, y) {
            continue;
        }
        let Some(q) = acc.step(acc.start(), y) else {
            continue;
        };
        let s = fo.canon(fo_start, y);
        let lb = memo.log_beta(&fo, acc, mask, 1, s, q);
        scores.push((y, p * lb.exp()));
    }
    let total: f64 = scores.iter().map(|x| x.1).sum();
    if total > 0.0 {
        for s in scores.iter_mut() {
            s.1 /= total;
        }
    }
    Ok(scores)
}
