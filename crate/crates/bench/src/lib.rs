//! Shared inputs for the parser benchmarks.

use pearley::sample::{random_grammar, sample_sentence, RandomGrammarConfig};
use pearley::{fixtures, parse_grammar, ClosureTables, Grammar};
use rand::rngs::StdRng;
use rand::SeedableRng;

/// A grammar together with its closure tables.
pub struct Prepared {
    pub grammar: Grammar,
    pub tables: ClosureTables,
}

impl Prepared {
    pub fn from_text(text: &str) -> Prepared {
        let grammar = parse_grammar(text).expect("valid grammar").0;
        let tables = ClosureTables::build(&grammar).expect("closure tables");
        Prepared { grammar, tables }
    }
}

/// The binary grammar `S -> a | S S`, whose chart grows cubically with input length.
pub fn binary() -> Prepared {
    Prepared::from_text(fixtures::BINARY)
}

pub fn tiny_english() -> Prepared {
    Prepared::from_text(fixtures::TINY_ENGLISH)
}

/// `n` copies of the token `a`.
pub fn a_string(n: usize) -> Vec<String> {
    vec!["a".to_string(); n]
}

/// Random grammars, each paired with a sampled corpus of nonempty sentences.
pub fn random_workload(
    seed: u64,
    grammars: usize,
    sentences: usize,
    max_len: usize,
) -> Vec<(Prepared, Vec<Vec<String>>)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let cfg = RandomGrammarConfig::default();
    (0..grammars)
        .map(|_| {
            let grammar = random_grammar(&mut rng, &cfg);
            let mut corpus = Vec::new();
            while corpus.len() < sentences {
                if let Some(s) = sample_sentence(&grammar, &mut rng, max_len) {
                    if !s.is_empty() {
                        corpus.push(s);
                    }
                }
            }
            let tables = ClosureTables::build(&grammar).expect("closure tables");
            (Prepared { grammar, tables }, corpus)
        })
        .collect()
}
