//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use ctxbp::augmentation::{check_equivalence, close_alphabet, CheckPolicy, TransformGroup};
use ctxbp::constraints::{compile_maxorder, validate_sequence, ConstraintSpec, Constraints};
use ctxbp::context::{fmt_context, ContextGraph, Interpolation, SourcePolicy};
use ctxbp::corpus::{synthetic_corpus, Corpus, CountTable};
use ctxbp::inference::{start_state, BackwardTable, ProductStats, SampleResult};
use ctxbp::oracle::{empirical_distribution, enumerate_conditional, tiny_instance, tv_distance};
use ctxbp::orderstack::{MassMode, OrderPolicy, OrderStack};
use ctxbp::Symbol;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::output::{emit, read_file, CliResult, Failure, EXIT_INFEASIBLE};
use crate::{
    AugmentArgs, BenchArgs, CompileArgs, DumpArgs, ExactnessArgs, Format, MassArgs, MassModeArg,
    ModelArgs, PolicyKind, ProblemArgs, SampleArgs, Smoothing, TrainArgs,
};

/// Relative tolerance on the partition function and on point probabilities.
const EXACT_TOL: f64 = 1e-9;
/// Absolute floor for the partition function comparison.
const ABS_TOL: f64 = 1e-12;

struct Model {
    counts: CountTable,
    corpus: Option<Corpus>,
    k: usize,
    policy: SourcePolicy,
}

fn source_policy(s: Smoothing) -> SourcePolicy {
    match s {
        Smoothing::Mle => SourcePolicy::LongestSuffixMle,
        Smoothing::WittenBell => SourcePolicy::Interpolated(Interpolation::default()),
    }
}

fn read_corpus(path: &std::path::Path) -> CliResult<Corpus> {
    Corpus::parse(&read_file(path)?).map_err(|e| Failure::from(e).context(path.display()))
}

fn load_model(a: &ModelArgs) -> CliResult<Model> {
    let policy = source_policy(a.smoothing);
    match (&a.corpus, &a.model) {
        (Some(_), Some(_)) => Err(Failure::usage("give either --corpus or --model, not both")),
        (None, None) => Err(Failure::usage("one of --corpus or --model is required")),
        (Some(path), None) => {
            let k =
                a.k.ok_or_else(|| Failure::usage("--max-order is required with --corpus"))?;
            let corpus = read_corpus(path)?;
            let counts = CountTable::from_corpus(&corpus, k)?;
            Ok(Model {
                counts,
                corpus: Some(corpus),
                k,
                policy,
            })
        }
        (None, Some(path)) => {
            let counts = CountTable::from_json(&read_file(path)?)
                .map_err(|e| Failure::from(e).context(path.display()))?;
            let k = a.k.unwrap_or(counts.max_order());
            if k == 0 {
                return Err(ctxbp::Error::ZeroOrder.into());
            }
            if k > counts.max_order() {
                return Err(Failure::usage(format!(
                    "--max-order {k} exceeds the model order {}",
                    counts.max_order()
                )));
            }
            Ok(Model {
                counts,
                corpus: None,
                k,
                policy,
            })
        }
    }
}

fn parse_prefix(s: &str) -> CliResult<Vec<Symbol>> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<Symbol>()
                .map_err(|_| Failure::usage(format!("bad prefix symbol {t:?}")))
        })
        .collect()
}

fn load_constraints(
    p: &ProblemArgs,
    alphabet: &BTreeSet<Symbol>,
    corpus: Option<&Corpus>,
    default_horizon: Option<usize>,
) -> CliResult<Constraints> {
    match &p.constraints {
        Some(path) => {
            let spec = ConstraintSpec::from_json(&read_file(path)?)
                .map_err(|e| Failure::from(e).context(path.display()))?;
            if let Some(h) = p.horizon {
                if h != spec.horizon {
                    return Err(Failure::usage(format!(
                        "--horizon {h} disagrees with the document horizon {}",
                        spec.horizon
                    )));
                }
            }
            Ok(spec
                .compile(alphabet, corpus)
                .map_err(|e| Failure::from(e).context(path.display()))?)
        }
        None => {
            let n = p
                .horizon
                .or(default_horizon)
                .ok_or_else(|| Failure::usage("one of --constraints or --horizon is required"))?;
            Ok(Constraints::unconstrained(n, alphabet))
        }
    }
}

fn order_policy(kind: PolicyKind) -> Option<OrderPolicy> {
    match kind {
        PolicyKind::Fixed => None,
        PolicyKind::Stack => Some(OrderPolicy::LongestFeasible),
        PolicyKind::StackSingleton => Some(OrderPolicy::singleton_avoiding()),
    }
}

fn infeasible() -> Failure {
    Failure::new(
        EXIT_INFEASIBLE,
        "constraints are infeasible under this model (Z = 0)",
    )
}

fn fmt_seq(x: &[Symbol]) -> String {
    x.iter()
        .map(|y| y.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn no_feed_for_stack(p: &ProblemArgs, kind: PolicyKind) -> CliResult {
    if p.feed_prefix && kind != PolicyKind::Fixed {
        return Err(Failure::usage(
            "--feed-prefix is only supported with --policy fixed",
        ));
    }
    Ok(())
}

/// `true` when some order has a feasible start.
fn stack_feasible(stack: &OrderStack, prefix: &[Symbol]) -> bool {
    let states = stack.start_states(prefix);
    let q0 = stack.acceptor().start();
    (1..=stack.max_order()).any(|k| stack.log_beta(k, 0, states[k - 1], q0).is_finite())
}

pub fn train(a: TrainArgs) -> CliResult {
    let corpus = read_corpus(&a.corpus)?;
    let counts = CountTable::from_corpus(&corpus, a.k)?;
    emit(a.output.as_deref(), &counts.to_json())
}

pub fn sample(a: SampleArgs) -> CliResult {
    if !matches!(a.format, Format::Text | Format::Jsonl) {
        return Err(Failure::usage("sample supports --format text or jsonl"));
    }
    no_feed_for_stack(&a.problem, a.policy)?;
    let m = load_model(&a.model)?;
    let prefix = parse_prefix(&a.problem.prefix)?;
    let c = load_constraints(&a.problem, m.counts.alphabet(), m.corpus.as_ref(), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut results: Vec<SampleResult> = Vec::with_capacity(a.samples);
    // Context labels per trace step, resolved against the graph that produced them.
    let mut labels: Vec<Vec<String>> = Vec::new();
    match order_policy(a.policy) {
        None => {
            let graph = ContextGraph::build(&m.counts, m.k, m.policy)?;
            let start = start_state(&graph, &c.acceptor, &prefix, a.problem.feed_prefix)?;
            let table = BackwardTable::for_constraints(&graph, &c, start)?;
            if !table.partition().is_feasible() {
                return Err(infeasible());
            }
            for _ in 0..a.samples {
                let r = if a.trace {
                    table.sample_traced(&mut rng)?
                } else {
                    table.sample(&mut rng)?
                };
                if let Some(tr) = &r.trace {
                    labels.push(
                        tr.iter()
                            .map(|s| fmt_context(graph.context(s.context)))
                            .collect(),
                    );
                }
                results.push(r);
            }
        }
        Some(policy) => {
            let stack = OrderStack::prepare(&m.counts, m.k, m.policy, &c)?;
            if !stack_feasible(&stack, &prefix) {
                return Err(infeasible());
            }
            for _ in 0..a.samples {
                let r = stack.run(&policy, &prefix, &mut rng, a.trace)?;
                if let Some(tr) = &r.trace {
                    labels.push(
                        tr.iter()
                            .map(|s| fmt_context(stack.graph(s.order).context(s.context)))
                            .collect(),
                    );
                }
                results.push(r);
            }
        }
    }
    for r in &results {
        if !c.validate(&r.sequence) {
            return Err(Failure::check(format!(
                "sample violates the constraints: {}",
                fmt_seq(&r.sequence)
            )));
        }
    }
    let mut out = String::new();
    for (i, r) in results.iter().enumerate() {
        match a.format {
            Format::Text => writeln!(out, "{}", fmt_seq(&r.sequence)).unwrap(),
            _ => {
                let mut rec = json!({
                    "seq": r.sequence,
                    "orders": r.orders,
                    "seed": a.seed,
                    "index": i,
                    "rng": "chacha8",
                });
                if let Some(tr) = &r.trace {
                    let steps: Vec<Value> = tr
                        .iter()
                        .zip(&labels[i])
                        .map(|(s, ctx)| {
                            json!({"t": s.t, "context": ctx, "q": s.acceptor, "symbol": s.symbol, "order": s.order})
                        })
                        .collect();
                    rec["trace"] = Value::Array(steps);
                }
                writeln!(out, "{rec}").unwrap();
            }
        }
    }
    emit(a.output.as_deref(), &out)
}

fn within(a: f64, b: f64) -> bool {
    (a - b).abs() <= ABS_TOL.max(EXACT_TOL * b.abs())
}

pub fn exactness(a: ExactnessArgs) -> CliResult {
    let report = match a.random {
        Some(count) => exactness_random(&a, count)?,
        None => exactness_single(&a)?,
    };
    let passed = report["passed"].as_bool().unwrap_or(false);
    emit(
        a.output.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&report).unwrap()),
    )?;
    if passed {
        Ok(())
    } else {
        Err(Failure::check("exactness check failed"))
    }
}

fn exactness_single(a: &ExactnessArgs) -> CliResult<Value> {
    if a.model.smoothing != Smoothing::Mle {
        return Err(Failure::usage(
            "the enumeration oracle scores the longest-suffix MLE source only",
        ));
    }
    if a.problem.feed_prefix {
        return Err(Failure::usage(
            "--feed-prefix is not supported by the oracle",
        ));
    }
    let m = load_model(&a.model)?;
    let prefix = parse_prefix(&a.problem.prefix)?;
    let c = load_constraints(&a.problem, m.counts.alphabet(), m.corpus.as_ref(), None)?;
    let clock = Instant::now();
    let exact = enumerate_conditional(&m.counts, m.k, &c.acceptor, &c.mask, &prefix, a.budget)?;
    let brute_secs = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let graph = ContextGraph::build(&m.counts, m.k, m.policy)?;
    let table = BackwardTable::for_constraints(
        &graph,
        &c,
        start_state(&graph, &c.acceptor, &prefix, false)?,
    )?;
    let bp_secs = clock.elapsed().as_secs_f64();
    let z_bp = table.partition().z();
    let z_brute = exact.z_f64();
    let ex = exact.to_f64();
    let bp = table.conditional_distribution(a.budget.min(u64::MAX as u128) as u64)?;
    let tv_bp = tv_distance(&ex, &bp);
    let mut violations = 0usize;
    let mut tv_emp = None;
    if z_brute > 0.0 && a.samples > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut draws = Vec::with_capacity(a.samples);
        for _ in 0..a.samples {
            let s = table.sample(&mut rng)?.sequence;
            if !c.validate(&s) {
                violations += 1;
            }
            draws.push(s);
        }
        tv_emp = Some(tv_distance(&ex, &empirical_distribution(&draws)));
    }
    let passed = within(z_bp, z_brute)
        && tv_bp <= EXACT_TOL
        && violations == 0
        && tv_emp.is_none_or(|tv| tv <= a.tv_tolerance);
    Ok(json!({
        "Z_brute": z_brute,
        "Z_brute_exact": exact.z.to_string(),
        "Z_BP": z_bp,
        "log_Z_BP": table.partition().log_z(),
        "abs_dZ": (z_bp - z_brute).abs(),
        "support": ex.len(),
        "tv_exact_bp": tv_bp,
        "samples": if z_brute > 0.0 { a.samples } else { 0 },
        "tv_exact_empirical": tv_emp,
        "tv_tolerance": a.tv_tolerance,
        "violations": violations,
        "brute_seconds": brute_secs,
        "bp_seconds": bp_secs,
        "stats": table.stats(),
        "passed": passed,
    }))
}

fn exactness_random(a: &ExactnessArgs, count: usize) -> CliResult<Value> {
    let clock = Instant::now();
    let mut feasible = 0usize;
    let mut worst_z: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    let mut violations = 0usize;
    let mut sampled = 0usize;
    let mut failures = Vec::new();
    for i in 0..count as u64 {
        let seed = a.seed.wrapping_add(i);
        let inst = tiny_instance(seed);
        let c = &inst.constraints;
        let exact = enumerate_conditional(
            &inst.counts,
            inst.max_order,
            &c.acceptor,
            &c.mask,
            &inst.prefix,
            a.budget,
        )?;
        let graph =
            ContextGraph::build(&inst.counts, inst.max_order, SourcePolicy::LongestSuffixMle)?;
        let table = BackwardTable::for_constraints(
            &graph,
            c,
            start_state(&graph, &c.acceptor, &inst.prefix, false)?,
        )?;
        let (z_bp, z) = (table.partition().z(), exact.z_f64());
        let rel = if z == 0.0 {
            z_bp.abs()
        } else {
            (z_bp - z).abs() / z
        };
        worst_z = worst_z.max(rel);
        let bp = table.conditional_distribution(1 << 22)?;
        let mut ok = within(z_bp, z) && bp.len() == exact.entries.len();
        for (x, p) in exact.to_f64() {
            let d = (bp.get(&x).copied().unwrap_or(0.0) - p).abs();
            worst_p = worst_p.max(d);
            ok &= d <= EXACT_TOL;
        }
        if z > 0.0 {
            feasible += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let s = table.sample(&mut rng)?.sequence;
                sampled += 1;
                if !validate_sequence(&s, &c.acceptor, &c.mask) {
                    violations += 1;
                    ok = false;
                }
            }
        }
        if !ok {
            failures.push(seed);
        }
    }
    Ok(json!({
        "instances": count,
        "first_seed": a.seed,
        "feasible": feasible,
        "max_rel_dZ": worst_z,
        "max_abs_dP": worst_p,
        "samples": sampled,
        "violations": violations,
        "failed_seeds": failures,
        "seconds": clock.elapsed().as_secs_f64(),
        "passed": failures.is_empty(),
    }))
}

struct BenchRow {
    k: usize,
    stats: ProductStats,
    dense_lift: String,
    bp_seconds: f64,
    sample_ms: Option<f64>,
    violations: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Top-order reach statistics of a stack after its start queries.
fn stack_stats(stack: &OrderStack) -> ProductStats {
    let k = stack.max_order();
    let g = stack.graph(k);
    let memo = stack.memo(k);
    let (reach_states, time_indexed_states) = memo.touched();
    let (reach_edges, relaxations) = memo.touched_edges(g, stack.acceptor(), stack.mask());
    ProductStats {
        context_states: g.state_count(),
        context_edges: g.edge_count(),
        acceptor_states: stack.acceptor().state_count(),
        reach_states,
        time_indexed_states,
        reach_edges,
        time_indexed_edges: 0,
        full_bound: stack.acceptor().state_count() * g.edge_count(),
        relaxations,
    }
}

fn bench_one(a: &BenchArgs, corpus: &Corpus, k: usize, prefix: &[Symbol]) -> CliResult<BenchRow> {
    let counts = CountTable::from_corpus(corpus, k)?;
    let mut c = load_constraints(&a.problem, counts.alphabet(), Some(corpus), Some(32))?;
    if let Some(m) = a.maxorder {
        c.acceptor = c
            .acceptor
            .product(&compile_maxorder(corpus, m, counts.alphabet())?);
    }
    let policy = order_policy(a.policy);
    let mut times = Vec::new();
    let mut last = None;
    for rep in 0..a.warmup + a.repeats.max(1) {
        let clock = Instant::now();
        let built = match policy {
            None => {
                let graph = ContextGraph::build(&counts, k, SourcePolicy::LongestSuffixMle)?;
                let start = start_state(&graph, &c.acceptor, prefix, a.problem.feed_prefix)?;
                let table = BackwardTable::for_constraints(&graph, &c, start)?;
                Err(table)
            }
            Some(_) => {
                let stack = OrderStack::prepare(&counts, k, SourcePolicy::LongestSuffixMle, &c)?;
                stack_feasible(&stack, prefix);
                Ok(stack)
            }
        };
        if rep >= a.warmup {
            times.push(clock.elapsed().as_secs_f64());
        }
        last = Some(built);
    }
    let built = last.expect("at least one repeat");
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut violations = 0;
    let (stats, sample_ms) = match (&built, policy) {
        (Err(table), _) => {
            let feasible = table.partition().is_feasible();
            let mut ms = None;
            if feasible {
                let clock = Instant::now();
                for _ in 0..a.samples {
                    if !c.validate(&table.sample(&mut rng)?.sequence) {
                        violations += 1;
                    }
                }
                ms = Some(clock.elapsed().as_secs_f64() * 1e3);
            }
            (table.stats(), ms)
        }
        (Ok(stack), Some(policy)) => {
            let mut ms = None;
            if stack_feasible(stack, prefix) {
                let clock = Instant::now();
                for _ in 0..a.samples {
                    if !c.validate(&stack.run(&policy, prefix, &mut rng, false)?.sequence) {
                        violations += 1;
                    }
                }
                ms = Some(clock.elapsed().as_secs_f64() * 1e3);
            }
            (stack_stats(stack), ms)
        }
        (Ok(_), None) => unreachable!("stack built only for stack policies"),
    };
    let v = counts.alphabet().len() as u128;
    let dense_lift = match v.checked_pow(k as u32) {
        Some(d) => d.to_string(),
        None => format!("{:.3e}", (v as f64).powi(k as i32)),
    };
    Ok(BenchRow {
        k,
        stats,
        dense_lift,
        bp_seconds: median(times),
        sample_ms,
        violations,
    })
}

pub fn bench(a: BenchArgs) -> CliResult {
    if !matches!(a.format, Format::Csv | Format::Json) {
        return Err(Failure::usage("bench supports --format csv or json"));
    }
    if a.k == 0 {
        return Err(ctxbp::Error::ZeroOrder.into());
    }
    no_feed_for_stack(&a.problem, a.policy)?;
    let corpus = match &a.corpus {
        Some(path) => read_corpus(path)?,
        None => {
            if a.tokens == 0 || a.alphabet == 0 || a.branching == 0 {
                return Err(Failure::usage(
                    "--tokens, --alphabet and --branching must be positive",
                ));
            }
            synthetic_corpus(a.tokens, a.alphabet, a.branching, a.corpus_seed)
        }
    };
    let prefix = parse_prefix(&a.problem.prefix)?;
    let rows = (1..=a.k)
        .map(|k| bench_one(&a, &corpus, k, &prefix))
        .collect::<CliResult<Vec<_>>>()?;
    let mut out = String::new();
    match a.format {
        Format::Csv => {
            out.push_str(
                "K,contexts,context_edges,acceptor_states,reach_states,reach_edges,full_bound,dense_lift,bp_seconds,sample_ms,violations\n",
            );
            for r in &rows {
                let s = &r.stats;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{:.6},{},{}",
                    r.k,
                    s.context_states,
                    s.context_edges,
                    s.acceptor_states,
                    s.reach_states,
                    s.reach_edges,
                    s.full_bound,
                    r.dense_lift,
                    r.bp_seconds,
                    r.sample_ms.map(|m| format!("{m:.3}")).unwrap_or_default(),
                    r.violations
                )
                .unwrap();
            }
        }
        _ => {
            let doc: Vec<Value> = rows
                .iter()
                .map(|r| {
                    json!({
                        "K": r.k,
                        "stats": r.stats,
                        "dense_lift": r.dense_lift,
                        "bp_seconds": r.bp_seconds,
                        "sample_ms": r.sample_ms,
                        "violations": r.violations,
                    })
                })
                .collect();
            writeln!(out, "{}", serde_json::to_string_pretty(&doc).unwrap()).unwrap();
        }
    }
    emit(a.output.as_deref(), &out)?;
    let bad: usize = rows.iter().map(|r| r.violations).sum();
    if bad > 0 {
        return Err(Failure::check(format!(
            "{bad} samples violated the constraints"
        )));
    }
    Ok(())
}

pub fn augment_check(a: AugmentArgs) -> CliResult {
    let corpus = read_corpus(&a.corpus)?;
    let group = TransformGroup::from_json(&read_file(&a.group)?)
        .map_err(|e| Failure::from(e).context(a.group.display()))?;
    let alphabet = close_alphabet(corpus.alphabet(), &group)?;
    let c = load_constraints(&a.problem, &alphabet, Some(&corpus), None)?;
    let prefix = parse_prefix(&a.problem.prefix)?;
    let check = match order_policy(a.policy) {
        None => CheckPolicy::Fixed,
        Some(p) => CheckPolicy::Stack(p),
    };
    let report = check_equivalence(
        &corpus,
        a.k,
        &group,
        source_policy(a.smoothing),
        &c,
        &prefix,
        check,
    )?;
    emit(
        a.output.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&report).unwrap()),
    )?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::check(
            "virtual and materialized augmentation disagree",
        ))
    }
}

pub fn success_mass(a: MassArgs) -> CliResult {
    let policy = order_policy(a.policy)
        .ok_or_else(|| Failure::usage("success mass needs a stack policy"))?;
    no_feed_for_stack(&a.problem, a.policy)?;
    let m = load_model(&a.model)?;
    let prefix = parse_prefix(&a.problem.prefix)?;
    let c = load_constraints(&a.problem, m.counts.alphabet(), m.corpus.as_ref(), None)?;
    let stack = OrderStack::prepare(&m.counts, m.k, m.policy, &c)?;
    let mode = match a.mode {
        MassModeArg::Exact => MassMode::ExactDp { budget: a.budget },
        MassModeArg::MonteCarlo => MassMode::MonteCarlo {
            trials: a.trials,
            seed: a.seed,
        },
    };
    let r = stack.success_mass(&policy, &prefix, mode)?;
    emit(a.output.as_deref(), &format!("{}\n", r.to_json()))
}

pub fn dump_graph(a: DumpArgs) -> CliResult {
    let m = load_model(&a.model)?;
    let graph = ContextGraph::build(&m.counts, m.k, m.policy)?;
    emit(a.output.as_deref(), &graph.dump())
}

pub fn compile_constraints(a: CompileArgs) -> CliResult {
    let (alphabet, corpus) = match (&a.corpus, &a.model) {
        (Some(path), _) => {
            let corpus = read_corpus(path)?;
            (corpus.alphabet().clone(), Some(corpus))
        }
        (None, Some(path)) => {
            let counts = CountTable::from_json(&read_file(path)?)
                .map_err(|e| Failure::from(e).context(path.display()))?;
            (counts.alphabet().clone(), None)
        }
        (None, None) => {
            return Err(Failure::usage(
                "one of --corpus or --model is required for the alphabet",
            ))
        }
    };
    let spec = ConstraintSpec::from_json(&read_file(&a.constraints)?)
        .map_err(|e| Failure::from(e).context(a.constraints.display()))?;
    let c = spec.compile(&alphabet, corpus.as_ref())?;
    let mask: Vec<Option<Vec<Symbol>>> = (0..c.horizon())
        .map(|t| c.mask.allowed(t).map(|s| s.iter().copied().collect()))
        .collect();
    let doc = json!({
        "horizon": c.horizon(),
        "alphabet": alphabet,
        "acceptor": c.acceptor.to_doc(),
        "mask": mask,
    });
    emit(
        a.output.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()),
    )
}
