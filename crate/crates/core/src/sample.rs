//! Random small grammars and sentence sampling, for tests, benchmarks and the CLI.

use rand::Rng;

use crate::closures::NtMatrix;
use crate::grammar::{Grammar, GrammarBuilder, Sym};

const NONTERMINALS: [&str; 6] = ["S", "A", "B", "C", "D", "E"];
const TERMINALS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

#[derive(Clone, Copy, Debug)]
pub struct RandomGrammarConfig {
    pub max_nonterminals: usize,
    pub max_terminals: usize,
    pub max_rhs: usize,
    pub max_rules_per_lhs: usize,
    pub null_rules: bool,
    pub unit_rules: bool,
    /// Upper bound on the spectral radius of the expected-offspring matrix.
    pub max_branching: f64,
}

impl Default for RandomGrammarConfig {
    fn default() -> Self {
        RandomGrammarConfig {
            max_nonterminals: 5,
            max_terminals: 4,
            max_rhs: 3,
            max_rules_per_lhs: 4,
            null_rules: true,
            unit_rules: true,
            max_branching: 0.6,
        }
    }
}

/// Mean number of Y children per X expansion.
pub fn offspring_matrix(g: &Grammar) -> NtMatrix {
    let n = g.num_nonterminals();
    let mut m = vec![vec![0.0; n]; n];
    for p in g.productions() {
        for s in &p.rhs {
            if let Sym::N(y) = s {
                m[p.lhs][*y as usize] += p.prob;
            }
        }
    }
    NtMatrix::from_dense(&m)
}

/// A random proper grammar whose derivations terminate quickly.
pub fn random_grammar<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomGrammarConfig) -> Grammar {
    loop {
        if let Some(g) = try_random_grammar(rng, cfg) {
            if offspring_matrix(&g).spectral_radius() <= cfg.max_branching {
                return g;
            }
        }
    }
}

fn try_random_grammar<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomGrammarConfig) -> Option<Grammar> {
    let n = rng.gen_range(1..=cfg.max_nonterminals.min(NONTERMINALS.len()));
    let t = rng.gen_range(1..=cfg.max_terminals.min(TERMINALS.len()));
    let mut b = GrammarBuilder::new();
    b.set_start(NONTERMINALS[0]);
    for &lhs in &NONTERMINALS[..n] {
        let k = rng.gen_range(1..=cfg.max_rules_per_lhs);
        let mut rules: Vec<Vec<String>> = Vec::new();
        // The first rule terminates directly so every nonterminal is productive.
        if cfg.null_rules && rng.gen_bool(0.25) {
            rules.push(Vec::new());
        } else {
            rules.push(vec![TERMINALS[rng.gen_range(0..t)].to_string()]);
        }
        for _ in 1..k {
            let len = if cfg.unit_rules && rng.gen_bool(0.25) {
                1
            } else if cfg.null_rules && rng.gen_bool(0.1) {
                0
            } else {
                rng.gen_range(1..=cfg.max_rhs)
            };
            let rhs: Vec<String> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        NONTERMINALS[rng.gen_range(0..n)].to_string()
                    } else {
                        TERMINALS[rng.gen_range(0..t)].to_string()
                    }
                })
                .collect();
            if rhs.len() == 1 && rhs[0] == lhs {
                continue;
            }
            if !rules.contains(&rhs) {
                rules.push(rhs);
            }
        }
        let weights: Vec<f64> = rules.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for (rhs, w) in rules.into_iter().zip(weights) {
            b.push(lhs, rhs, w / total);
        }
    }
    let g = b.build().ok()?;
    // The start symbol must be able to produce a nonempty string.
    g.derives_nonempty()[g.start()].then_some(g)
}

/// Sample a sentence top-down; `None` if it would exceed `max_len` tokens.
pub fn sample_sentence<R: Rng + ?Sized>(g: &Grammar, rng: &mut R, max_len: usize) -> Option<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![Sym::N(g.start() as u32)];
    let mut steps = 0usize;
    while let Some(s) = stack.pop() {
        steps += 1;
        if steps > 100 * (max_len + 10) {
            return None;
        }
        match s {
            Sym::T(a) => {
                out.push(g.terminal_name(a as usize).to_string());
                if out.len() > max_len {
                    return None;
                }
            }
            Sym::N(x) => {
                let rules = g.productions_of(x as usize);
                let mut u: f64 = rng.gen();
                let mut pick = *rules.last()?;
                for &r in rules {
                    u -= g.production(r).prob;
                    if u < 0.0 {
                        pick = r;
                        break;
                    }
                }
                stack.extend(g.production(pick).rhs.iter().rev());
            }
        }
    }
    Some(out)
}
