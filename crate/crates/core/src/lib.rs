//! Probabilistic Earley parsing for stochastic context-free grammars: prefix, sentence and
//! substring probabilities, Viterbi parses, bracketed and robust parsing, and EM estimation.

pub mod chart;
pub mod closures;
pub mod error;
pub mod estimation;
pub mod fixtures;
pub mod grammar;
pub mod oracle;
pub mod parser;
pub mod sample;

pub use chart::{Chart, DottedRule, EarleyState, StateKey, StateRef, StateSet};
pub use closures::{ClosureTables, EpsilonProbs, NtMatrix};
pub use error::{ClosureError, GrammarError, ParseError};
pub use grammar::{
    eliminate_null, parse_grammar, renormalize, validate, Grammar, GrammarBuilder, GrammarDiagnostics, Production, Sym,
};
pub use parser::{
    next_word_distribution, parse, parse_bracketed, parse_robust, parse_tokens, tokenize, Mode, ParseOptions,
    ParseRequest, ParseResult, ParseTree, PartialParse, Pruning, RobustResult,
};

/// Format a probability with up to 12 significant digits and no trailing zeros.
pub fn fmt_prob(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=15).contains(&mag) {
        let s = format!("{:.11e}", x);
        let (mant, exp) = s.split_once('e').unwrap();
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        return format!("{}e{}", mant, exp);
    }
    let decimals = (11 - mag).max(0) as usize;
    let s = format!("{:.*}", decimals, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
