//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ctxbp::augmentation::{check_equivalence, CheckPolicy, TransformGroup, VirtualCountTable};
use ctxbp::constraints::{
    compile_maxorder, validate_sequence, Acceptor, Constraints, PositionalMask,
};
use ctxbp::context::{first_order_project, ContextGraph, SourcePolicy};
use ctxbp::corpus::{synthetic_corpus, Corpus, CountTable};
use ctxbp::inference::{first_order_hybrid_scores, start_state, BackwardOptions, BackwardTable};
use ctxbp::oracle::{empirical_distribution, enumerate_conditional, tv_distance, DEFAULT_BUDGET};
use ctxbp::orderstack::{
    vanilla_distribution, vanilla_step, wilson_interval, MassMode, OrderPolicy, OrderStack,
};
use ctxbp::Symbol;
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what)
    }
}

fn integer_table() -> (Corpus, CountTable, Constraints, ContextGraph, BackwardTable) {
    let (corpus, counts, c) = common::integer_example();
    let graph = ContextGraph::build(&counts, 2, SourcePolicy::LongestSuffixMle).unwrap();
    let start = start_state(&graph, &c.acceptor, &[0, 1], false).unwrap();
    let table = BackwardTable::for_constraints(&graph, &c, start).unwrap();
    (corpus, counts, c, graph, table)
}

fn integer_exactness() -> Outcome {
    let clock = Instant::now();
    let (_, counts, c, _, table) = integer_table();
    let z_bp = table.partition().z();
    let exact = enumerate_conditional(&counts, 2, &c.acceptor, &c.mask, &[0, 1], DEFAULT_BUDGET)
        .map_err(|e| e.to_string())?;
    let z_brute = exact.z_f64();
    let bp = table
        .conditional_distribution(1000)
        .map_err(|e| e.to_string())?;
    let tv = tv_distance(&exact.to_f64(), &bp);
    let secs = clock.elapsed().as_secs_f64();
    check(
        (z_bp - 0.52380952381).abs() < 5e-12,
        format!("Z_BP = {z_bp}"),
    )?;
    check(
        (z_bp - z_brute).abs() <= 1e-12,
        format!("|Z_BP - Z_brute| = {}", (z_bp - z_brute).abs()),
    )?;
    check(
        exact.z == BigRational::new(BigInt::from(11), BigInt::from(21)),
        "Z_brute != 11/21".into(),
    )?;
    let want = BTreeMap::from([(vec![2, 4], 10.0 / 11.0), (vec![3, 4], 1.0 / 11.0)]);
    check(
        tv_distance(&want, &bp) <= 1e-12,
        format!("BP conditional {bp:?}"),
    )?;
    check(tv <= 1e-12, format!("TV(exact, BP) = {tv}"))?;
    check(secs < 1.0, format!("runtime {secs} s"))?;
    Ok(format!(
        "Z_BP = {z_bp:.11}, |dZ| = {:.1e}, TV = {tv:.1e}, {secs:.3} s",
        (z_bp - z_brute).abs()
    ))
}

fn first_order_diagnostic() -> Outcome {
    let (_, counts, c) = common::integer_example();
    let fo = first_order_project(&counts).map_err(|e| e.to_string())?;
    let rational = |ctx: Symbol, y: Symbol| {
        let row = counts.get(&[ctx]).unwrap();
        let total: u64 = row.values().sum();
        BigRational::new(BigInt::from(row[&y]), BigInt::from(total))
    };
    let r = |a: i64, b: i64| BigRational::new(BigInt::from(a), BigInt::from(b));
    check(rational(2, 4) == r(1, 101), "P_fo(4|2) != 1/101".into())?;
    check(
        rational(3, 4) == r(1001, 1011),
        "P_fo(4|3) != 1001/1011".into(),
    )?;
    let edge = |ctx: Symbol, y: Symbol| fo.edge(fo.state(&[ctx]).unwrap(), y).map(|e| e.prob);
    check(
        edge(2, 4) == Some(10.0 / 1010.0),
        format!("graph P_fo(4|2) = {:?}", edge(2, 4)),
    )?;
    check(
        edge(3, 4) == Some(1001.0 / 1011.0),
        format!("graph P_fo(4|3) = {:?}", edge(3, 4)),
    )?;
    let scores = first_order_hybrid_scores(&counts, 2, &[0, 1], &c).map_err(|e| e.to_string())?;
    let p3 = scores.iter().find(|s| s.0 == 3).map(|s| s.1).unwrap_or(0.0);
    check(
        p3 > 0.99 && (p3 - 0.991).abs() <= 1e-3,
        format!("hybrid share of x0=3 is {p3}"),
    )?;
    Ok(format!(
        "P_fo(4|2) = 1/101, P_fo(4|3) = 1001/1011, hybrid P(x0=3) = {p3:.4}"
    ))
}

fn sampling_fidelity() -> Outcome {
    let (_, _, c, _, table) = integer_table();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut samples = Vec::with_capacity(20000);
    let mut violations = 0;
    for _ in 0..20000 {
        let s = table.sample(&mut rng).map_err(|e| e.to_string())?;
        if !c.validate(&s.sequence) {
            violations += 1;
        }
        samples.push(s.sequence);
    }
    let exact = table
        .conditional_distribution(1000)
        .map_err(|e| e.to_string())?;
    let tv = tv_distance(&exact, &empirical_distribution(&samples));
    check(tv <= 0.02, format!("TV(exact, empirical) = {tv}"))?;
    check(violations == 0, format!("{violations} violations"))?;
    Ok(format!(
        "TV(exact, empirical) = {tv:.5}, 0 violations in 20000"
    ))
}

fn randomized_oracle() -> Outcome {
    let clock = Instant::now();
    let mut feasible = 0;
    let mut samples = 0;
    let mut worst_z: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    for seed in 0..250u64 {
        let inst = common::random_instance(seed);
        let c = &inst.constraints;
        let graph =
            ContextGraph::build(&inst.counts, inst.max_order, SourcePolicy::LongestSuffixMle)
                .unwrap();
        let start = start_state(&graph, &c.acceptor, &inst.prefix, false).unwrap();
        let table = BackwardTable::for_constraints(&graph, c, start).unwrap();
        let exact = enumerate_conditional(
            &inst.counts,
            inst.max_order,
            &c.acceptor,
            &c.mask,
            &inst.prefix,
            DEFAULT_BUDGET,
        )
        .map_err(|e| format!("seed {seed}: {e}"))?;
        let (z_bp, z) = (table.partition().z(), exact.z_f64());
        let rel = if z == 0.0 {
            z_bp.abs()
        } else {
            (z_bp - z).abs() / z
        };
        worst_z = worst_z.max(rel);
        check(
            rel <= 1e-9,
            format!("seed {seed}: Z_BP = {z_bp}, Z_brute = {z}"),
        )?;
        let bp = table
            .conditional_distribution(1 << 22)
            .map_err(|e| e.to_string())?;
        let ex = exact.to_f64();
        check(
            bp.len() == ex.len(),
            format!("seed {seed}: support sizes {} vs {}", bp.len(), ex.len()),
        )?;
        for (x, p) in &ex {
            let d = (bp.get(x).copied().unwrap_or(0.0) - p).abs();
            worst_p = worst_p.max(d);
            check(d <= 1e-9, format!("seed {seed}: P({x:?}) differs by {d}"))?;
        }
        if z > 0.0 {
            feasible += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let s = table.sample(&mut rng).map_err(|e| e.to_string())?;
                samples += 1;
                check(
                    c.validate(&s.sequence),
                    format!("seed {seed}: violating sample {:?}", s.sequence),
                )?;
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    check(secs < 60.0, format!("runtime {secs} s"))?;
    Ok(format!(
        "250 instances ({feasible} feasible), max rel dZ = {worst_z:.1e}, max dP = {worst_p:.1e}, 0 violations in {samples} samples, {secs:.2} s"
    ))
}

fn policy_semantics() -> Outcome {
    // (a) With no constraints the stack kernel is the vanilla kernel.
    let mut worst: f64 = 0.0;
    let mut cases = vec![(
        Corpus::parse(common::INTEGER_EXAMPLE).unwrap(),
        2usize,
        vec![0, 1],
        3usize,
    )];
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        cases.push((
            common::random_corpus(&mut rng, 3),
            1 + (seed % 3) as usize,
            vec![],
            3,
        ));
    }
    for (corpus, k, prefix, n) in &cases {
        let counts = CountTable::from_corpus(corpus, *k).unwrap();
        let c = Constraints::unconstrained(*n, counts.alphabet());
        let stack = OrderStack::prepare(&counts, *k, SourcePolicy::LongestSuffixMle, &c).unwrap();
        let a = stack
            .distribution(&OrderPolicy::LongestFeasible, prefix, 1 << 22)
            .map_err(|e| e.to_string())?;
        let b = vanilla_distribution(
            &counts,
            *k,
            &OrderPolicy::LongestFeasible,
            prefix,
            *n,
            1 << 22,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(tv_distance(&a, &b));
    }
    check(worst <= 1e-12, format!("(a) TV(stack, vanilla) = {worst}"))?;

    // (b) Singleton acceptance at orders 2 and 3, with alternatives below.
    // Order k is the top of its own stack, so every step is one encounter.
    let corpus = Corpus::parse(common::INTEGER_EXAMPLE).unwrap();
    let policy = OrderPolicy::singleton_avoiding();
    let trials = 20000usize;
    let mut rates = Vec::new();
    for (k, history) in [(2usize, vec![1, 2]), (3, vec![0, 1, 2])] {
        let counts = CountTable::from_corpus(&corpus, k).unwrap();
        let c = Constraints::unconstrained(1, counts.alphabet());
        let stack = OrderStack::prepare(&counts, k, SourcePolicy::LongestSuffixMle, &c).unwrap();
        let states = stack.start_states(&history);
        let top = stack.candidates(k, 0, states[k - 1], 0);
        check(
            top.len() == 1,
            format!("(b) order-{k} set is not a singleton"),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut hits = 0;
        for _ in 0..trials {
            let out = stack
                .step(&policy, &states, 0, 0, &mut rng)
                .ok_or("(b) step failed")?;
            if out.order == k {
                hits += 1;
            }
        }
        let (lo, hi) = wilson_interval(hits, trials, 2.576);
        let target = 1.0 / (k as f64 + 1.0);
        check(
            lo <= target && target <= hi,
            format!("(b) order {k}: {hits}/{trials}, CI [{lo}, {hi}]"),
        )?;
        // The vanilla kernel applies the same rule on raw counts.
        let mut vanilla_hits = 0;
        for _ in 0..trials {
            if vanilla_step(&counts, k, &policy, &history, &mut rng).is_some_and(|(_, o)| o == k) {
                vanilla_hits += 1;
            }
        }
        let (lo, hi) = wilson_interval(vanilla_hits, trials, 2.576);
        check(
            lo <= target && target <= hi,
            format!("(b) vanilla order {k}: {vanilla_hits}/{trials}"),
        )?;
        rates.push(format!(
            "k={k}: {:.4} (vanilla {:.4})",
            hits as f64 / trials as f64,
            vanilla_hits as f64 / trials as f64
        ));
    }

    // (c) Exact success mass against Monte Carlo on a failing instance: the
    // anchor x1 = 0 cannot follow any continuation of (0, 1).
    let counts = CountTable::from_corpus(&corpus, 2).unwrap();
    let mut failing = Constraints::unconstrained(3, counts.alphabet());
    failing.mask.restrict(1, &BTreeSet::from([0])).unwrap();
    let stack = OrderStack::prepare(&counts, 2, SourcePolicy::LongestSuffixMle, &failing).unwrap();
    let mut masses = Vec::new();
    for policy in [
        OrderPolicy::LongestFeasible,
        OrderPolicy::singleton_avoiding(),
    ] {
        let dp = stack
            .success_mass(&policy, &[0, 1], MassMode::ExactDp { budget: 1 << 20 })
            .map_err(|e| e.to_string())?;
        let mc = stack
            .success_mass(
                &policy,
                &[0, 1],
                MassMode::MonteCarlo {
                    trials: 100_000,
                    seed: 5,
                },
            )
            .map_err(|e| e.to_string())?;
        let (lo, hi) = mc.ci.unwrap();
        let sigma = mc.std_error.unwrap();
        check(
            (dp.mass - mc.mass).abs() <= 3.0 * sigma && lo <= dp.mass && dp.mass <= hi,
            format!(
                "(c) DP {} vs MC {} (3-sigma Wilson [{lo}, {hi}])",
                dp.mass, mc.mass
            ),
        )?;
        masses.push(format!(
            "DP {} / MC {} [{lo:.1e}, {hi:.1e}]",
            dp.mass, mc.mass
        ));
    }
    Ok(format!(
        "(a) TV = {worst:.1e}; (b) {}; (c) {}",
        rates.join(", "),
        masses.join("; ")
    ))
}

fn augmentation_equivalence() -> Outcome {
    let mut runs = 0;
    let mut cases: Vec<(Corpus, usize, Vec<i64>)> = vec![(
        Corpus::parse(common::INTEGER_EXAMPLE).unwrap(),
        2,
        vec![0, 10],
    )];
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        cases.push((
            common::random_corpus(&mut rng, 4),
            1 + (seed % 3) as usize,
            vec![0, 1, 3],
        ));
    }
    for (corpus, k, shifts) in &cases {
        let group = TransformGroup::shifts(shifts).unwrap();
        let alphabet = ctxbp::augmentation::close_alphabet(corpus.alphabet(), &group).unwrap();
        let mut c = Constraints::unconstrained(3, &alphabet);
        let last = *alphabet.iter().next_back().unwrap();
        c.mask.restrict(2, &BTreeSet::from([0, 1, last])).unwrap();
        for policy in [
            CheckPolicy::Fixed,
            CheckPolicy::Stack(OrderPolicy::LongestFeasible),
        ] {
            let r = check_equivalence(
                corpus,
                *k,
                &group,
                SourcePolicy::LongestSuffixMle,
                &c,
                &[0],
                policy,
            )
            .map_err(|e| e.to_string())?;
            check(r.passed, format!("mismatch: {r:?}"))?;
            check(
                r.max_row_difference == 0 && r.max_edge_ulps == 0 && r.mass_difference == 0.0,
                format!("{r:?}"),
            )?;
            check(
                r.stored_events_materialized == group.len() as u64 * r.stored_events_virtual,
                format!("event accounting {r:?}"),
            )?;
            runs += 1;
        }
    }
    // Table-scale accounting: 12 shifts of a 592-event corpus.
    let base = synthetic_corpus(592, 12, 3, 11);
    let pitched = Corpus::new(
        base.sequences()
            .iter()
            .map(|(m, s)| (*m, s.iter().map(|y| y + 60).collect()))
            .collect(),
    )
    .unwrap();
    let group = TransformGroup::shifts(&(-6..=5).collect::<Vec<_>>()).unwrap();
    let (virt, mat) = VirtualCountTable::stored_events(&pitched, &group);
    check(
        virt == 592 && mat == 7104,
        format!("stored events {virt} vs {mat}"),
    )?;
    Ok(format!("{runs} dual-pipeline runs identical (0 row diff, 0 ulps, dmass = 0); stored events {virt} vs {mat}"))
}

fn scalability() -> Outcome {
    let corpus = synthetic_corpus(600, 25, 4, 7);
    let k = 6;
    let counts = CountTable::from_corpus(&corpus, k).unwrap();
    let acceptor = compile_maxorder(&corpus, 5, counts.alphabet()).map_err(|e| e.to_string())?;
    let c = Constraints {
        acceptor,
        mask: PositionalMask::permissive(32),
    };
    let clock = Instant::now();
    let stack = OrderStack::prepare(&counts, k, SourcePolicy::LongestSuffixMle, &c)
        .map_err(|e| e.to_string())?;
    let states = stack.start_states(&[]);
    let q0 = c.acceptor.start();
    for level in 1..=k {
        stack.log_beta(level, 0, states[level - 1], q0);
    }
    let bp_secs = clock.elapsed().as_secs_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut violations = 0;
    let mut orders = BTreeMap::new();
    for _ in 0..100 {
        let r = stack
            .run(&OrderPolicy::LongestFeasible, &[], &mut rng, false)
            .map_err(|e| e.to_string())?;
        if !validate_sequence(&r.sequence, &c.acceptor, &c.mask) {
            violations += 1;
        }
        for o in r.orders {
            *orders.entry(o).or_insert(0usize) += 1;
        }
    }
    let total_secs = clock.elapsed().as_secs_f64();
    let top = stack.graph(k);
    let bound = c.acceptor.state_count() * top.edge_count();
    let all_levels: usize = (1..=k)
        .map(|level| {
            stack
                .memo(level)
                .touched_edges(stack.graph(level), &c.acceptor, &c.mask)
                .0
        })
        .sum();
    let top_edges = stack.memo(k).touched_edges(top, &c.acceptor, &c.mask).0;
    let dense = (counts.alphabet().len() as f64).powi(k as i32);
    check(
        (all_levels as f64) < 0.1 * bound as f64,
        format!("reach edges {all_levels} vs bound {bound}"),
    )?;
    check(
        (all_levels as f64) < 1e-3 * dense,
        format!("reach edges {all_levels} vs dense lift {dense}"),
    )?;
    check(bp_secs < 5.0, format!("backward pass {bp_secs} s"))?;
    check(violations == 0, format!("{violations} violations"))?;
    Ok(format!(
        "|Q| = {}, top-order reach edges {top_edges}, all orders {all_levels}, bound {bound} ({:.3}%), dense {dense:.0}, BP {bp_secs:.3} s, 100 samples in {total_secs:.3} s, orders {orders:?}, 0 violations",
        c.acceptor.state_count(),
        100.0 * all_levels as f64 / bound as f64
    ))
}

fn mask_dfa_factorization() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut instances = vec![];
    let (_, counts, c) = common::integer_example();
    instances.push((counts, 2usize, vec![0, 1], c));
    for seed in 0..200u64 {
        let inst = common::random_instance(5000 + seed);
        instances.push((inst.counts, inst.max_order, inst.prefix, inst.constraints));
    }
    for (counts, k, prefix, c) in &instances {
        let graph = ContextGraph::build(counts, *k, SourcePolicy::LongestSuffixMle).unwrap();
        let start = start_state(&graph, &c.acceptor, prefix, false).unwrap();
        let masked = BackwardTable::for_constraints(&graph, c, start).unwrap();
        let folded = c
            .acceptor
            .product(&Acceptor::from_mask(&c.mask, counts.alphabet()));
        let permissive = PositionalMask::permissive(c.horizon());
        let start = start_state(&graph, &folded, prefix, false).unwrap();
        let dfa = BackwardTable::build(
            &graph,
            &folded,
            &permissive,
            start,
            BackwardOptions::default(),
        )
        .unwrap();
        worst = worst.max((masked.partition().z() - dfa.partition().z()).abs());
    }
    check(worst <= 1e-12, format!("max |Z_mask - Z_dfa| = {worst}"))?;
    Ok(format!(
        "{} instances, max |Z_mask - Z_dfa| = {worst:.1e}",
        instances.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("integer-example exactness", integer_exactness),
        ("first-order failure diagnostic", first_order_diagnostic),
        ("sampling fidelity", sampling_fidelity),
        ("randomized oracle equivalence", randomized_oracle),
        ("policy semantics", policy_semantics),
        ("augmentation equivalence", augmentation_equivalence),
        ("scalability", scalability),
        ("mask/DFA factorization", mask_dfa_factorization),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
