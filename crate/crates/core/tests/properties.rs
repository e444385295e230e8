mod common;

use std::collections::{BTreeMap, BTreeSet};

use ctxbp::augmentation::{materialize, TransformGroup, VirtualCountTable};
use ctxbp::constraints::{compile_forbidden, validate_sequence, Acceptor, PositionalMask};
use ctxbp::context::{ContextGraph, SourcePolicy};
use ctxbp::corpus::{Corpus, CountTable};
use ctxbp::inference::{start_state, BackwardOptions, BackwardTable};
use ctxbp::oracle::{self, enumerate_conditional, sequence_probability, tv_distance};
use ctxbp::orderstack::{vanilla_distribution, MassMode, OrderPolicy, OrderStack};
use ctxbp::Symbol;
use num_traits::One;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_corpus, random_instance};

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    (2u32..=5, any::<u64>())
        .prop_map(|(v, seed)| random_corpus(&mut ChaCha8Rng::seed_from_u64(seed), v))
}

fn contains_pattern(x: &[Symbol], patterns: &[Vec<Symbol>]) -> bool {
    patterns
        .iter()
        .any(|p| x.windows(p.len()).any(|w| w == p.as_slice()))
}

fn table_for(inst: &common::Instance) -> (ContextGraph, BackwardTable) {
    let graph =
        ContextGraph::build(&inst.counts, inst.max_order, SourcePolicy::LongestSuffixMle).unwrap();
    let start = start_state(&graph, &inst.constraints.acceptor, &inst.prefix, false).unwrap();
    let table = BackwardTable::for_constraints(&graph, &inst.constraints, start).unwrap();
    (graph, table)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_table_is_suffix_closed_and_conserves_events(corpus in corpus_strategy(), k in 1usize..=4) {
        let t = CountTable::from_corpus(&corpus, k).unwrap();
        for ctx in t.rows().keys() {
            prop_assert!(ctx.len() <= k);
            if !ctx.is_empty() {
                prop_assert!(t.get(&ctx[1..]).is_some());
            }
        }
        for order in 0..=k {
            let stored: u64 = t.rows().iter().filter(|(c, _)| c.len() == order).flat_map(|(_, r)| r.values()).sum();
            let expected: u64 = corpus
                .sequences()
                .iter()
                .map(|(m, s)| m * s.len().saturating_sub(order) as u64)
                .sum();
            prop_assert_eq!(stored, expected);
        }
        prop_assert_eq!(t.rows()[&Vec::new()].values().sum::<u64>(), corpus.event_count());
    }

    #[test]
    fn graph_rows_are_normalized(corpus in corpus_strategy(), k in 1usize..=3) {
        let t = CountTable::from_corpus(&corpus, k).unwrap();
        let g = ContextGraph::build(&t, k, SourcePolicy::LongestSuffixMle).unwrap();
        for s in g.states() {
            let sum: f64 = g.edges(s).iter().map(|e| e.prob).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for e in g.edges(s) {
                let ctx = g.context(e.target);
                let mut cat = g.context(s).to_vec();
                cat.push(e.symbol);
                prop_assert!(cat.ends_with(ctx));
            }
        }
    }

    #[test]
    fn path_probability_matches_direct_backoff(seed in any::<u64>(), k in 1usize..=3, len in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_corpus(&mut rng, 4);
        let t = CountTable::from_corpus(&corpus, k).unwrap();
        let g = ContextGraph::build(&t, k, SourcePolicy::LongestSuffixMle).unwrap();
        let x: Vec<Symbol> = (0..len).map(|i| ((seed >> (2 * i)) & 3) as Symbol).collect();
        let mut s = g.root();
        let mut p = 1.0;
        for &y in &x {
            match g.edge(s, y) {
                Some(e) => { p *= e.prob; s = e.target; }
                None => { p = 0.0; break; }
            }
        }
        let exact = oracle::to_f64(&sequence_probability(&t, k, &[], &x));
        prop_assert!((p - exact).abs() <= 1e-12 * exact.max(1e-300));
    }

    #[test]
    fn forbidden_acceptor_matches_substring_search(
        patterns in prop::collection::vec(prop::collection::vec(0u32..3, 1..=3), 1..=3),
        x in prop::collection::vec(0u32..3, 0..=8),
    ) {
        let alphabet: BTreeSet<Symbol> = (0..3).collect();
        let a = compile_forbidden(&patterns, &alphabet).unwrap();
        prop_assert_eq!(a.accepts(&x), !contains_pattern(&x, &patterns));
    }

    #[test]
    fn mask_and_position_dfa_agree(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let (graph, masked) = table_for(&inst);
        let alphabet = inst.counts.alphabet().clone();
        let folded = inst.constraints.acceptor.product(&Acceptor::from_mask(&inst.constraints.mask, &alphabet));
        let mask = PositionalMask::permissive(inst.constraints.mask.horizon());
        let start = start_state(&graph, &folded, &inst.prefix, false).unwrap();
        let dfa = BackwardTable::build(&graph, &folded, &mask, start, BackwardOptions::default()).unwrap();
        prop_assert!((masked.partition().z() - dfa.partition().z()).abs() <= 1e-12);
    }

    #[test]
    fn bp_matches_oracle(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let (_, table) = table_for(&inst);
        let c = &inst.constraints;
        let exact = enumerate_conditional(&inst.counts, inst.max_order, &c.acceptor, &c.mask, &inst.prefix, oracle::DEFAULT_BUDGET).unwrap();
        prop_assert!(exact.total.is_one());
        let z = exact.z_f64();
        prop_assert!((table.partition().z() - z).abs() <= 1e-9 * z.max(1e-300));
        let bp = table.conditional_distribution(1 << 20).unwrap();
        let ex = exact.to_f64();
        prop_assert_eq!(bp.keys().collect::<Vec<_>>(), ex.keys().collect::<Vec<_>>());
        for (x, p) in &bp {
            prop_assert!((p - ex[x]).abs() <= 1e-9);
            prop_assert!(validate_sequence(x, &c.acceptor, &c.mask));
        }
    }

    #[test]
    fn samples_never_violate(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let (_, table) = table_for(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if table.partition().is_feasible() {
            for _ in 0..20 {
                let s = table.sample(&mut rng).unwrap();
                prop_assert!(inst.constraints.validate(&s.sequence));
                prop_assert!(!contains_pattern(&s.sequence, &inst.patterns));
            }
        } else {
            prop_assert!(table.sample(&mut rng).is_err());
        }
    }

    #[test]
    fn rescaling_changes_nothing(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let graph = ContextGraph::build(&inst.counts, inst.max_order, SourcePolicy::LongestSuffixMle).unwrap();
        let c = &inst.constraints;
        let start = start_state(&graph, &c.acceptor, &inst.prefix, false).unwrap();
        let plain = BackwardTable::build(&graph, &c.acceptor, &c.mask, start, BackwardOptions { rescale_threshold: None }).unwrap();
        let forced = BackwardTable::build(&graph, &c.acceptor, &c.mask, start, BackwardOptions { rescale_threshold: Some(2.0) }).unwrap();
        if plain.partition().is_feasible() {
            prop_assert!((plain.partition().log_z() - forced.partition().log_z()).abs() <= 1e-9);
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..10 {
                prop_assert_eq!(plain.sample(&mut r1).unwrap(), forced.sample(&mut r2).unwrap());
            }
        }
    }

    #[test]
    fn relaxations_bounded_by_reachable_edges(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let (_, table) = table_for(&inst);
        let s = table.stats();
        prop_assert!(s.relaxations <= (table.horizon() * s.reach_edges) as u64);
        prop_assert!(s.reach_edges <= s.full_bound);
    }

    #[test]
    fn tv_is_a_metric(a in prop::collection::vec(0.0f64..1.0, 4), b in prop::collection::vec(0.0f64..1.0, 4), c in prop::collection::vec(0.0f64..1.0, 4)) {
        let dist = |w: &[f64]| -> BTreeMap<Vec<Symbol>, f64> {
            let total: f64 = w.iter().sum::<f64>() + 1e-9;
            w.iter().enumerate().map(|(i, x)| (vec![i as Symbol], x / total)).collect()
        };
        let (p, q, r) = (dist(&a), dist(&b), dist(&c));
        prop_assert!((tv_distance(&p, &q) - tv_distance(&q, &p)).abs() < 1e-15);
        prop_assert!(tv_distance(&p, &r) <= tv_distance(&p, &q) + tv_distance(&q, &r) + 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&tv_distance(&p, &q)));
    }

    #[test]
    fn virtual_rows_equal_materialized_rows(corpus in corpus_strategy(), k in 1usize..=3, shifts in prop::collection::btree_set(1i64..6, 0..3)) {
        let mut amounts = vec![0];
        amounts.extend(shifts);
        let group = TransformGroup::shifts(&amounts).unwrap();
        let base = CountTable::from_corpus(&corpus, k).unwrap();
        let virt = VirtualCountTable::new(base, group.clone()).unwrap();
        let mat = CountTable::from_corpus(&materialize(&corpus, &group).unwrap(), k).unwrap();
        for (ctx, row) in mat.rows() {
            prop_assert_eq!(&virt.virtual_row(ctx), row);
        }
        let vg = ContextGraph::build(&virt, k, SourcePolicy::LongestSuffixMle).unwrap();
        let mg = ContextGraph::build(&mat, k, SourcePolicy::LongestSuffixMle).unwrap();
        prop_assert_eq!(vg.dump(), mg.dump());
        for g in group.transforms() {
            for ctx in mat.rows().keys() {
                if let Some(pre) = g.invert_seq(ctx) {
                    prop_assert_eq!(g.apply_seq(&pre), Some(ctx.clone()));
                }
            }
        }
    }

    #[test]
    fn stack_without_constraints_is_vanilla(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_corpus(&mut rng, 3);
        let k = 1 + (seed % 3) as usize;
        let t = CountTable::from_corpus(&corpus, k).unwrap();
        let c = ctxbp::Constraints::unconstrained(3, t.alphabet());
        let stack = OrderStack::prepare(&t, k, SourcePolicy::LongestSuffixMle, &c).unwrap();
        let a = stack.distribution(&OrderPolicy::LongestFeasible, &[], 1 << 20).unwrap();
        let b = vanilla_distribution(&t, k, &OrderPolicy::LongestFeasible, &[], 3, 1 << 20).unwrap();
        prop_assert!(tv_distance(&a, &b) <= 1e-12);
    }

    #[test]
    fn longest_feasible_never_backs_off_needlessly(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let c = &inst.constraints;
        let stack = OrderStack::prepare(&inst.counts, inst.max_order, SourcePolicy::LongestSuffixMle, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = stack.start_states(&inst.prefix);
        let mut q = c.acceptor.start();
        for t in 0..c.horizon() {
            let top = (1..=inst.max_order).rev().find(|&k| !stack.candidates(k, t, states[k - 1], q).is_empty());
            match stack.step(&OrderPolicy::LongestFeasible, &states, t, q, &mut rng) {
                Some(out) => {
                    prop_assert_eq!(Some(out.order), top);
                    states = out.states;
                    q = out.acceptor;
                }
                None => { prop_assert_eq!(top, None); break; }
            }
        }
    }

    #[test]
    fn success_mass_is_one_exactly_when_the_start_is_feasible(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let c = &inst.constraints;
        let stack = OrderStack::prepare(&inst.counts, inst.max_order, SourcePolicy::LongestSuffixMle, c).unwrap();
        let states = stack.start_states(&inst.prefix);
        let feasible = (1..=inst.max_order).any(|k| !stack.candidates(k, 0, states[k - 1], c.acceptor.start()).is_empty());
        for policy in [OrderPolicy::LongestFeasible, OrderPolicy::singleton_avoiding()] {
            let m = stack.success_mass(&policy, &inst.prefix, MassMode::ExactDp { budget: 1 << 20 }).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m.mass));
            if feasible {
                prop_assert!((m.mass - 1.0).abs() <= 1e-12, "mass {}", m.mass);
            } else {
                prop_assert_eq!(m.mass, 0.0);
            }
        }
    }
}
