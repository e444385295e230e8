//! Order-stack generation policies.
//!
//! [`vanilla_step`] is plain left-to-right backoff on raw counts. An
//! [`OrderStack`] holds one context graph per maximum order with its own
//! memoized backward messages, and [`OrderStack::step`] scans the orders from
//! the top, keeping only candidates with positive constrained future mass.
//! The resulting process is a sequential kernel, so its normalizer is a
//! policy success mass rather than a partition function.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::{Acceptor, AcceptorState, Constraints, PositionalMask};
use crate::context::{ContextGraph, SourcePolicy, StateId};
use crate::corpus::CountSource;
use crate::error::{Error, Result};
use crate::inference::{MemoBackward, SampleResult, TraceStep};
use crate::Symbol;

/// Acceptance probability for a singleton candidate set at order `k ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AcceptRule {
    /// `1 / (k + 1)`.
    InverseOrder,
    Constant(f64),
}

impl AcceptRule {
    pub fn probability(&self, k: usize) -> f64 {
        match *self {
            AcceptRule::InverseOrder => 1.0 / (k as f64 + 1.0),
            AcceptRule::Constant(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum OrderPolicy {
    /// Accept the first order with a nonempty candidate set.
    #[default]
    LongestFeasible,
    /// Accept singleton sets at `k ≥ 2` only with the given probability when
    /// some lower order has candidates.
    SingletonAvoiding(AcceptRule),
}

impl OrderPolicy {
    pub fn singleton_avoiding() -> Self {
        OrderPolicy::SingletonAvoiding(AcceptRule::InverseOrder)
    }

    pub fn validate(&self) -> Result<()> {
        if let OrderPolicy::SingletonAvoiding(AcceptRule::Constant(p)) = self {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidPolicy(format!(
                    "acceptance probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Probability of accepting a nonempty set of `size` candidates at order
    /// `k`, given whether some lower order has candidates.
    fn accept_probability(&self, k: usize, size: usize, lower_nonempty: bool) -> f64 {
        match self {
            OrderPolicy::LongestFeasible => 1.0,
            OrderPolicy::SingletonAvoiding(rule) => {
                if k >= 2 && size == 1 && lower_nonempty {
                    rule.probability(k)
                } else {
                    1.0
                }
            }
        }
    }
}

fn draw_index<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Continuations of the order-`k` suffix of `history`, or `None` when the
/// history is too short or the suffix is not stored.
fn vanilla_row(
    source: &dyn CountSource,
    history: &[Symbol],
    k: usize,
) -> Option<Vec<(Symbol, f64)>> {
    if history.len() < k {
        return None;
    }
    let row = source.row(&history[history.len() - k..])?;
    let total: u64 = row.values().sum();
    if total == 0 {
        return None;
    }
    Some(
        row.iter()
            .map(|(&y, &n)| (y, n as f64 / total as f64))
            .collect(),
    )
}

/// Decisions of one vanilla step: `(order, acceptance probability, row)` for
/// every order with support, from `K` down to the root.
fn vanilla_levels(
    source: &dyn CountSource,
    max_order: usize,
    policy: &OrderPolicy,
    history: &[Symbol],
) -> Vec<(usize, f64, Vec<(Symbol, f64)>)> {
    let rows: Vec<(usize, Vec<(Symbol, f64)>)> = (0..=max_order)
        .rev()
        .filter_map(|k| vanilla_row(source, history, k).map(|r| (k, r)))
        .collect();
    rows.iter()
        .enumerate()
        .map(|(i, (k, row))| {
            let lower = i + 1 < rows.len();
            let a = if *k == 0 {
                1.0
            } else {
                policy.accept_probability(*k, row.len(), lower)
            };
            (*k, a, row.clone())
        })
        .collect()
}

/// One unconstrained backoff step on raw counts. Returns the symbol and the
/// order used (0 at the root), or `None` when every order rejects.
pub fn vanilla_step<R: Rng + ?Sized>(
    source: &dyn CountSource,
    max_order: usize,
    policy: &OrderPolicy,
    history: &[Symbol],
    rng: &mut R,
) -> Option<(Symbol, usize)> {
    for (k, a, row) in vanilla_levels(source, max_order, policy, history) {
        if a < 1.0 && rng.gen::<f64>() >= a {
            continue;
        }
        let weights: Vec<f64> = row.iter().map(|x| x.1).collect();
        return Some((row[draw_index(rng, &weights)].0, k));
    }
    None
}

/// Exact sequence distribution of `n` vanilla steps after `prefix`, by kernel
/// enumeration. Failure mass is omitted, so the total may be below one.
pub fn vanilla_distribution(
    source: &dyn CountSource,
    max_order: usize,
    policy: &OrderPolicy,
    prefix: &[Symbol],
    n: usize,
    budget: u64,
) -> Result<BTreeMap<Vec<Symbol>, f64>> {
    let mut out = BTreeMap::new();
    let mut visited = 0u64;
    let mut stack = vec![(prefix.to_vec(), 1.0f64)];
    while let Some((history, prob)) = stack.pop() {
        let t = history.len() - prefix.len();
        if t == n {
            *out.entry(history[prefix.len()..].to_vec()).or_insert(0.0) += prob;
            continue;
        }
        let mut reach = 1.0;
        for (_, a, row) in vanilla_levels(source, max_order, policy, &history) {
            let select = reach * a;
            reach *= 1.0 - a;
            if select <= 0.0 {
                continue;
            }
            for (y, p) in row {
                visited += 1;
                if visited > budget {
                    return Err(Error::BudgetExceeded {
                        needed: visited as u128,
                        budget: budget as u128,
                    });
                }
                let mut h = history.clone();
                h.push(y);
                stack.push((h, prob * select * p));
            }
        }
    }
    Ok(out)
}

/// Feasible candidates of one order at one `(t, s, q)`, with cumulative
/// weights proportional to `P(y|s) · β_{t+1}(s', q')`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub symbols: Vec<Symbol>,
    pub targets: Vec<StateId>,
    pub next_acceptor: Vec<AcceptorState>,
    pub cumulative: Vec<f64>,
}

impl Candidates {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Normalized weight of candidate `i`.
    pub fn probability(&self, i: usize) -> f64 {
        let prev = if i == 0 { 0.0 } else { self.cumulative[i - 1] };
        (self.cumulative[i] - prev) / self.total()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.gen::<f64>() * self.total();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.len() - 1)
    }
}

type CandidateKey = (usize, usize, StateId, AcceptorState);

/// Outcome of one policy step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub symbol: Symbol,
    /// Selected order `k ∈ 1..=K`.
    pub order: usize,
    /// Per-order context states after the step, index `k - 1`.
    pub states: Vec<StateId>,
    pub acceptor: AcceptorState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MassMode {
    ExactDp { budget: usize },
    MonteCarlo { trials: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessMass {
    pub mass: f64,
    pub mode: &'static str,
    /// Joint states visited (exact mode) or trials run (Monte Carlo).
    pub work: usize,
    /// Binomial standard error of the estimate (Monte Carlo).
    pub std_error: Option<f64>,
    /// Three-sigma Wilson interval (Monte Carlo).
    pub ci: Option<(f64, f64)>,
}

impl SuccessMass {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({ "mass": self.mass, "mode": self.mode });
        if let Some((lo, hi)) = self.ci {
            v["ci"] = serde_json::json!([lo, hi]);
        }
        if let Some(se) = self.std_error {
            v["std_error"] = serde_json::json!(se);
        }
        v
    }
}

/// Wilson score interval for `successes / trials` at `z` standard deviations.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let radius = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - radius).max(0.0), (centre + radius).min(1.0))
}

/// Per-order context graphs `G_1..G_K` with memoized backward messages for one
/// set of constraints.
#[derive(Debug)]
pub struct OrderStack {
    graphs: Vec<ContextGraph>,
    memos: Vec<MemoBackward>,
    acceptor: Acceptor,
    mask: PositionalMask,
    cache: RwLock<HashMap<CandidateKey, Arc<Candidates>>>,
}

impl OrderStack {
    pub fn prepare(
        source: &dyn CountSource,
        max_order: usize,
        policy: SourcePolicy,
        constraints: &Constraints,
    ) -> Result<Self> {
        if max_order == 0 {
            return Err(Error::ZeroOrder);
        }
        if constraints.horizon() == 0 {
            return Err(Error::InfeasibleSpec("horizon must be at least 1".into()));
        }
        let graphs = (1..=max_order)
            .map(|k| ContextGraph::build(source, k, policy))
            .collect::<Result<Vec<_>>>()?;
        let memos = (0..max_order)
            .map(|_| MemoBackward::new(constraints.horizon()))
            .collect();
        Ok(OrderStack {
            graphs,
            memos,
            acceptor: constraints.acceptor.clone(),
            mask: constraints.mask.clone(),
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn max_order(&self) -> usize {
        self.graphs.len()
    }

    pub fn horizon(&self) -> usize {
        self.mask.horizon()
    }

    pub fn graph(&self, k: usize) -> &ContextGraph {
        &self.graphs[k - 1]
    }

    pub fn memo(&self, k: usize) -> &MemoBackward {
        &self.memos[k - 1]
    }

    pub fn acceptor(&self) -> &Acceptor {
        &self.acceptor
    }

    pub fn mask(&self) -> &PositionalMask {
        &self.mask
    }

    /// `ln β^(k)_t(s, q)`.
    pub fn log_beta(&self, k: usize, t: usize, s: StateId, q: AcceptorState) -> f64 {
        self.memos[k - 1].log_beta(&self.graphs[k - 1], &self.acceptor, &self.mask, t, s, q)
    }

    /// Starting per-order states for a prefix.
    pub fn start_states(&self, prefix: &[Symbol]) -> Vec<StateId> {
        self.graphs.iter().map(|g| g.start_state(prefix)).collect()
    }

    /// Feasible candidates of order `k` at `(t, s, q)`, cached.
    pub fn candidates(&self, k: usize, t: usize, s: StateId, q: AcceptorState) -> Arc<Candidates> {
        let key = (k, t, s, q);
        if let Some(c) = self.cache.read().unwrap().get(&key) {
            return c.clone();
        }
        let graph = &self.graphs[k - 1];
        let mut raw = Vec::new();
        for e in graph.edges(s) {
            if !self.mask.allows(t, e.symbol) {
                continue;
            }
            let Some(q2) = self.acceptor.step(q, e.symbol) else {
                continue;
            };
            let lb = self.log_beta(k, t + 1, e.target, q2);
            if lb > f64::NEG_INFINITY {
                raw.push((e.symbol, e.target, q2, e.prob.ln() + lb));
            }
        }
        let max = raw.iter().map(|r| r.3).fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        let mut c = Candidates {
            symbols: Vec::with_capacity(raw.len()),
            targets: Vec::with_capacity(raw.len()),
            next_acceptor: Vec::with_capacity(raw.len()),
            cumulative: Vec::with_capacity(raw.len()),
        };
        for (y, s2, q2, lw) in raw {
            acc += (lw - max).exp();
            c.symbols.push(y);
            c.targets.push(s2);
            c.next_acceptor.push(q2);
            c.cumulative.push(acc);
        }
        let c = Arc::new(c);
        self.cache.write().unwrap().insert(key, c.clone());
        c
    }

    /// Selection probability of each order `K..=1` at a joint state, with the
    /// candidate sets: `P(k) = a_k · Π_{j>k} (1 − a_j)`.
    pub fn selection(
        &self,
        policy: &OrderPolicy,
        states: &[StateId],
        t: usize,
        q: AcceptorState,
    ) -> Vec<(usize, f64, Arc<Candidates>)> {
        let k_max = self.max_order();
        let sets: Vec<Arc<Candidates>> = (1..=k_max)
            .map(|k| self.candidates(k, t, states[k - 1], q))
            .collect();
        let mut out = Vec::new();
        let mut reach = 1.0;
        for k in (1..=k_max).rev() {
            let c = &sets[k - 1];
            if c.is_empty() {
                continue;
            }
            let lower = sets[..k - 1].iter().any(|s| !s.is_empty());
            let a = policy.accept_probability(k, c.len(), lower);
            if reach * a > 0.0 {
                out.push((k, reach * a, c.clone()));
            }
            reach *= 1.0 - a;
        }
        out
    }

    fn advance(&self, states: &[StateId], y: Symbol) -> Vec<StateId> {
        self.graphs
            .iter()
            .zip(states)
            .map(|(g, &s)| g.canon(s, y))
            .collect()
    }

    /// One policy-guided backoff step; `None` when every order is empty or
    /// rejected.
    pub fn step<R: Rng + ?Sized>(
        &self,
        policy: &OrderPolicy,
        states: &[StateId],
        t: usize,
        q: AcceptorState,
        rng: &mut R,
    ) -> Option<StepOutcome> {
        let k_max = self.max_order();
        for k in (1..=k_max).rev() {
            let c = self.candidates(k, t, states[k - 1], q);
            if c.is_empty() {
                continue;
            }
            let a = match policy {
                OrderPolicy::LongestFeasible => 1.0,
                _ if k >= 2 && c.len() == 1 => {
                    let lower = (1..k).any(|j| !self.candidates(j, t, states[j - 1], q).is_empty());
                    policy.accept_probability(k, 1, lower)
                }
                _ => 1.0,
            };
            if a < 1.0 && rng.gen::<f64>() >= a {
                continue;
            }
            let i = c.draw(rng);
            let y = c.symbols[i];
            return Some(StepOutcome {
                symbol: y,
                order: k,
                states: self.advance(states, y),
                acceptor: c.next_acceptor[i],
            });
        }
        None
    }

    /// Runs the policy for the full horizon after `prefix`.
    pub fn run<R: Rng + ?Sized>(
        &self,
        policy: &OrderPolicy,
        prefix: &[Symbol],
        rng: &mut R,
        trace: bool,
    ) -> Result<SampleResult> {
        let n = self.horizon();
        let mut states = self.start_states(prefix);
        let mut q = self.acceptor.start();
        let mut sequence = Vec::with_capacity(n);
        let mut orders = Vec::with_capacity(n);
        let mut steps = trace.then(Vec::new);
        for t in 0..n {
            let out = self
                .step(policy, &states, t, q, rng)
                .ok_or(Error::PolicyFailure { position: t })?;
            if let Some(steps) = steps.as_mut() {
                steps.push(TraceStep {
                    t,
                    context: states[out.order - 1],
                    acceptor: q,
                    symbol: out.symbol,
                    order: out.order,
                });
            }
            sequence.push(out.symbol);
            orders.push(out.order);
            states = out.states;
            q = out.acceptor;
        }
        Ok(SampleResult {
            sequence,
            orders,
            trace: steps,
        })
    }

    /// Exact sequence distribution of the policy kernel by enumeration.
    /// Failure mass is omitted.
    pub fn distribution(
        &self,
        policy: &OrderPolicy,
        prefix: &[Symbol],
        budget: u64,
    ) -> Result<BTreeMap<Vec<Symbol>, f64>> {
        let n = self.horizon();
        let mut out = BTreeMap::new();
        let mut visited = 0u64;
        let mut stack = vec![(
            self.start_states(prefix),
            self.acceptor.start(),
            Vec::new(),
            1.0f64,
        )];
        while let Some((states, q, seq, prob)) = stack.pop() {
            let t = seq.len();
            if t == n {
                *out.entry(seq).or_insert(0.0) += prob;
                continue;
            }
            for (_, select, c) in self.selection(policy, &states, t, q) {
                for i in 0..c.len() {
                    visited += 1;
                    if visited > budget {
                        return Err(Error::BudgetExceeded {
                            needed: visited as u128,
                            budget: budget as u128,
                        });
                    }
                    let y = c.symbols[i];
                    let mut s = seq.clone();
                    s.push(y);
                    stack.push((
                        self.advance(&states, y),
                        c.next_acceptor[i],
                        s,
                        prob * select * c.probability(i),
                    ));
                }
            }
        }
        Ok(out)
    }

    /// Probability that the policy reaches the horizon without failure.
    ///
    /// The exact mode runs a DP over `(t, per-order states, q)`. The tuple of
    /// canonical states determines every candidate set, so it is a sufficient
    /// statistic of the raw suffix.
    pub fn success_mass(
        &self,
        policy: &OrderPolicy,
        prefix: &[Symbol],
        mode: MassMode,
    ) -> Result<SuccessMass> {
        match mode {
            MassMode::ExactDp { budget } => {
                let mut memo: HashMap<(usize, Vec<StateId>, AcceptorState), f64> = HashMap::new();
                let start = (0, self.start_states(prefix), self.acceptor.start());
                let mass = self.mass_dp(policy, start, &mut memo, budget)?;
                Ok(SuccessMass {
                    mass,
                    mode: "exact_dp",
                    work: memo.len(),
                    std_error: None,
                    ci: None,
                })
            }
            MassMode::MonteCarlo { trials, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut ok = 0usize;
                for _ in 0..trials {
                    match self.run(policy, prefix, &mut rng, false) {
                        Ok(_) => ok += 1,
                        Err(Error::PolicyFailure { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
                let p = ok as f64 / trials.max(1) as f64;
                Ok(SuccessMass {
                    mass: p,
                    mode: "monte_carlo",
                    work: trials,
                    std_error: Some((p * (1.0 - p) / trials.max(1) as f64).sqrt()),
                    ci: Some(wilson_interval(ok, trials, 3.0)),
                })
            }
        }
    }

    fn mass_dp(
        &self,
        policy: &OrderPolicy,
        key: (usize, Vec<StateId>, AcceptorState),
        memo: &mut HashMap<(usize, Vec<StateId>, AcceptorState), f64>,
        budget: usize,
    ) -> Result<f64> {
        if let Some(&v) = memo.get(&key) {
            return Ok(v);
        }
        let (t, states, q) = &key;
        let v = if *t == self.horizon() {
            1.0
        } else {
            let mut v = 0.0;
            for (_, select, c) in self.selection(policy, states, *t, *q) {
                for i in 0..c.len() {
                    let next = (
                        t + 1,
                        self.advance(states, c.symbols[i]),
                        c.next_acceptor[i],
                    );
                    v += select * c.probability(i) * self.mass_dp(policy, next, memo, budget)?;
                }
            }
            v
        };
        if memo.len() >= budget {
            return Err(Error::BudgetExceeded {
                needed: memo.len() as u128 + 1,
                budget: budget as u128,
            });
        }
        memo.insert(key, v);
        Ok(v)
    }
}
