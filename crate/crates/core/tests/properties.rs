//! Property tests for the invariants of grammars, closures, the parser, estimation and the oracle.

mod common;

use std::collections::HashSet;

use pearley::closures::{closure, epsilon_step, initial_epsilon, left_corner_matrix, unit_matrix};
use pearley::estimation::{em_step, log_likelihood};
use pearley::oracle::{enumerate, Oracle, OracleConfig};
use pearley::sample::{random_grammar, sample_sentence, RandomGrammarConfig};
use pearley::*;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::*;

fn grammar(seed: u64) -> (Grammar, StdRng) {
    let mut rng = StdRng::seed_from_u64(seed);
    let g = random_grammar(&mut rng, &RandomGrammarConfig::default());
    (g, rng)
}

fn sentence(g: &Grammar, rng: &mut StdRng, max_len: usize) -> Vec<String> {
    loop {
        if let Some(s) = sample_sentence(g, rng, max_len) {
            if !s.is_empty() {
                return s;
            }
        }
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Partial sums of `I + M + M^2 + ...` until the increment vanishes.
fn power_series(m: &NtMatrix) -> Vec<Vec<f64>> {
    let n = m.dim();
    let dense = m.to_dense();
    let mut sum = NtMatrix::identity(n).to_dense();
    let mut term = sum.clone();
    for _ in 0..100_000 {
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                if term[i][k] != 0.0 {
                    for j in 0..n {
                        next[i][j] += term[i][k] * dense[k][j];
                    }
                }
            }
        }
        let biggest = next.iter().flatten().fold(0.0f64, |a, b| a.max(*b));
        for i in 0..n {
            for j in 0..n {
                sum[i][j] += next[i][j];
            }
        }
        term = next;
        if biggest < 1e-17 {
            break;
        }
    }
    sum
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn grammar_text_round_trips_exactly(seed in any::<u64>()) {
        let (g, _) = grammar(seed);
        let text = g.to_text();
        let (h, warnings) = parse_grammar(&text).unwrap();
        prop_assert!(warnings.is_empty());
        prop_assert_eq!(h.to_text(), text);
        prop_assert_eq!(h.productions(), g.productions());
        prop_assert_eq!(h.nonterminal_names(), g.nonterminal_names());
        prop_assert_eq!(h.terminal_names(), g.terminal_names());
        prop_assert_eq!(h.start(), g.start());
    }

    #[test]
    fn closures_equal_power_series(seed in any::<u64>()) {
        let (g, _) = grammar(seed);
        let eps = EpsilonProbs::compute(&g).unwrap();
        for m in [left_corner_matrix(&g, &eps), unit_matrix(&g, &eps)] {
            prop_assume!(m.spectral_radius() < 0.9);
            let r = closure(&m).unwrap();
            let s = power_series(&m);
            for (i, row) in s.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    prop_assert!((r.get(i, j) - v).abs() <= 1e-10, "({}, {}): {} vs {}", i, j, r.get(i, j), v);
                }
            }
        }
    }

    #[test]
    fn epsilon_is_least_fixpoint(seed in any::<u64>()) {
        let (g, _) = grammar(seed);
        let eps = EpsilonProbs::compute(&g).unwrap();
        let step = epsilon_step(&g, &eps.e);
        for (a, b) in step.iter().zip(&eps.e) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        // Iterates from the null-rule probabilities rise monotonically and stay below the fixpoint.
        let mut cur = initial_epsilon(&g);
        for _ in 0..200 {
            let next = epsilon_step(&g, &cur);
            for ((n, c), e) in next.iter().zip(&cur).zip(&eps.e) {
                prop_assert!(*n >= *c - 1e-15);
                prop_assert!(*n <= *e + 1e-12);
            }
            cur = next;
        }
        let o = Oracle::build(&g, &OracleConfig { max_len: 0, ..Default::default() }, 1e-16, false).unwrap();
        let empty = o.string_prob(&[]).unwrap();
        prop_assert!((empty - eps.e[g.start()]).abs() <= 1e-9 + o.residual);
    }

    #[test]
    fn state_sets_have_unique_keys(seed in any::<u64>()) {
        let (g, mut rng) = grammar(seed);
        let t = ClosureTables::build(&g).unwrap();
        let w = sentence(&g, &mut rng, 8);
        let r = parse_tokens(&g, &t, &w, &ParseOptions::default());
        for set in &r.chart.sets {
            let keys: HashSet<&StateKey> = set.states().map(|s| &s.key).collect();
            prop_assert_eq!(keys.len(), set.len());
        }
    }

    #[test]
    fn prefix_probabilities_are_monotone(seed in any::<u64>()) {
        let (g, mut rng) = grammar(seed);
        let t = ClosureTables::build(&g).unwrap();
        let w = sentence(&g, &mut rng, 8);
        let r = parse_tokens(&g, &t, &w, &ParseOptions::default());
        prop_assert_eq!(r.prefix_probs.len(), w.len());
        prop_assert!(r.prefix_probs[0] <= 1.0 + 1e-12);
        for p in r.prefix_probs.windows(2) {
            prop_assert!(p[1] <= p[0] * (1.0 + 1e-12));
        }
        prop_assert!(r.sentence_prob > 0.0);
        prop_assert!(r.sentence_prob <= r.prefix_probs[w.len() - 1] * (1.0 + 1e-12));
    }

    #[test]
    fn viterbi_bounded_by_total(seed in any::<u64>()) {
        let (g, mut rng) = grammar(seed);
        let t = ClosureTables::build(&g).unwrap();
        let w = sentence(&g, &mut rng, 5);
        let r = parse_tokens(&g, &t, &w, &ParseOptions::default());
        let v = r.viterbi_prob.unwrap();
        prop_assert!(v <= r.sentence_prob * (1.0 + 1e-12));
        let tree = r.viterbi_tree.as_ref().unwrap();
        prop_assert!(rel_close(tree.probability(&g).unwrap(), v, 1e-12));
        prop_assert_eq!(tree.frontier(), w.iter().map(|s| s.as_str()).collect::<Vec<_>>());

        let e = enumerate(&g, &OracleConfig { max_len: w.len(), ..Default::default() });
        prop_assume!(e.is_ok());
        let e = e.unwrap();
        let x = oracle_ids(&g, &w);
        let found: Vec<f64> = e.matching(&x).map(|d| d.prob).collect();
        let complete = rel_close(found.iter().sum(), r.sentence_prob, 1e-9);
        if complete && found.len() == 1 {
            prop_assert!(rel_close(v, r.sentence_prob, 1e-12));
        }
        let best = found.iter().cloned().fold(0.0, f64::max);
        let others: f64 = found.iter().sum::<f64>() - best;
        if complete && others > 1e-9 * r.sentence_prob {
            prop_assert!(v < r.sentence_prob);
        }
    }

    #[test]
    fn brackets_refine_the_distribution(seed in any::<u64>(), picks in prop::collection::vec((0usize..8, 1usize..9), 0..4)) {
        let (g, mut rng) = grammar(seed);
        let t = ClosureTables::build(&g).unwrap();
        let w = sentence(&g, &mut rng, 5);
        let n = w.len();
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for (s, len) in picks {
            let s = s % n;
            let e = (s + len).min(n);
            if !spans.iter().any(|&b| b == (s, e) || crosses(b, (s, e))) {
                spans.push((s, e));
            }
        }
        let words: Vec<&str> = w.iter().map(|s| s.as_str()).collect();
        let b = parse_bracketed(&g, &t, &bracketed(&words, &spans), &ParseOptions::default()).unwrap();
        let u = parse_tokens(&g, &t, &w, &ParseOptions::default());
        prop_assert!(b.sentence_prob <= u.sentence_prob * (1.0 + 1e-12));

        let e = enumerate(&g, &OracleConfig { max_len: n, ..Default::default() });
        prop_assume!(e.is_ok());
        let e = e.unwrap();
        let x = oracle_ids(&g, &w);
        prop_assume!(rel_close(e.string_prob(&x), u.sentence_prob, 1e-9));
        let (want, _) = bracketed_oracle(&g, &e, &x, &spans);
        prop_assert!((b.sentence_prob - want).abs() <= 1e-9 * u.sentence_prob, "{} vs {}", b.sentence_prob, want);
    }

    #[test]
    fn null_elimination_preserves_probabilities(seed in any::<u64>()) {
        let (g, mut rng) = grammar(seed);
        let h = eliminate_null(&g).unwrap();
        // Only a fresh start symbol may keep a null rule.
        for p in h.productions().iter().filter(|p| p.is_null()) {
            prop_assert_eq!(p.lhs, h.start());
            prop_assert!(h.productions().iter().all(|q| q.rhs.iter().all(|s| s.nonterminal() != Some(h.start()))));
        }
        let tg = ClosureTables::build(&g).unwrap();
        let th = ClosureTables::build(&h).unwrap();
        for _ in 0..4 {
            let w = sentence(&g, &mut rng, 8);
            let a = parse_tokens(&g, &tg, &w, &ParseOptions::default()).sentence_prob;
            let b = parse_tokens(&h, &th, &w, &ParseOptions::default()).sentence_prob;
            prop_assert!(rel_close(a, b, 1e-9), "{:?}: {} vs {}", w, a, b);
        }
    }

    #[test]
    fn useless_symbols_match_derivations(seed in any::<u64>()) {
        let (g, _) = grammar(seed);
        // Add an unproductive and an unreachable nonterminal to the random grammar.
        let mut b = GrammarBuilder::new();
        b.set_start(g.nonterminal_name(g.start()));
        for p in g.productions() {
            let rhs = p.rhs.iter().map(|s| g.symbol_name(*s).to_string()).collect();
            b.push(g.nonterminal_name(p.lhs), rhs, p.prob);
        }
        b.push("Loop", vec!["a".into(), "Loop".into()], 1.0);
        b.push("Island", vec!["a".into()], 1.0);
        let (h, _) = b.build_with_warnings().unwrap();
        let useless = validate(&h).useless;
        prop_assert!(useless.contains(&h.nonterminal("Loop").unwrap()));
        prop_assert!(useless.contains(&h.nonterminal("Island").unwrap()));

        let e = enumerate(&h, &OracleConfig { max_len: 6, ..Default::default() });
        prop_assume!(e.is_ok());
        let used: HashSet<usize> = e.unwrap().derivations.iter().flat_map(|d| d.rules.iter().map(|&r| h.production(r).lhs)).collect();
        for x in &used {
            prop_assert!(!useless.contains(x), "{} is used but flagged", h.nonterminal_name(*x));
        }
    }

    #[test]
    fn em_step_is_proper_and_monotone(seed in any::<u64>()) {
        let (g, mut rng) = grammar(seed);
        let corpus: Vec<Vec<String>> = (0..6).map(|_| sentence(&g, &mut rng, 6)).collect();
        let start = g.with_probs(&g.productions().iter().map(|_| rng.gen_range(0.1..1.0)).collect::<Vec<_>>());
        let start = renormalize(&start).unwrap();
        prop_assume!(ClosureTables::build(&start).is_ok());
        let step = em_step(&start, &corpus).unwrap();
        prop_assert!(step.skipped.is_empty());
        for s in step.grammar.lhs_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
        prop_assume!(ClosureTables::build(&step.grammar).is_ok());
        let after = log_likelihood(&step.grammar, &corpus).unwrap();
        prop_assert!(after >= step.log_likelihood - 1e-9 * step.log_likelihood.abs().max(1.0));
    }

    #[test]
    fn oracle_tables_agree(seed in any::<u64>()) {
        let (g, _) = grammar(seed);
        let cfg = OracleConfig { max_len: 3, ..Default::default() };
        let o = Oracle::build(&g, &cfg, 1e-14, false);
        let e = enumerate(&g, &cfg);
        prop_assume!(o.is_ok() && e.is_ok());
        let (o, e) = (o.unwrap(), e.unwrap());
        let (p0, bar) = o.prefix_prob(&[]).unwrap();
        prop_assert!((p0 - 1.0).abs() <= 1e-9 + bar);
        let t = ClosureTables::build(&g).unwrap();
        for x in all_strings(g.num_terminals(), 3) {
            let a = o.string_prob(&x).unwrap();
            let b = e.string_prob(&x);
            prop_assert!((a - b).abs() <= 1e-8 + o.residual + e.residual, "{:?}: {} vs {}", x, a, b);
            let (pre, bar) = o.prefix_prob(&x).unwrap();
            let r = parse_tokens(&g, &t, &names(&g, &x), &ParseOptions::default());
            let parser_prefix = if r.rejected_at.is_some() { 0.0 } else { r.prefix_probs[x.len() - 1] };
            prop_assert!((pre - parser_prefix).abs() <= 1e-8 + bar, "{:?}: {} vs {}", x, pre, parser_prefix);
            prop_assert!(a <= pre + 1e-12 + bar);
        }
    }
}

fn oracle_ids(g: &Grammar, w: &[String]) -> Vec<usize> {
    pearley::oracle::terminal_ids(g, w).unwrap()
}
