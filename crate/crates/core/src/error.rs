use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: probability {value} outside (0, 1]")]
    Probability { line: usize, value: f64 },
    #[error("grammar has no productions")]
    Empty,
    #[error("start symbol {0} is not a nonterminal")]
    UnknownStart(String),
    #[error("start symbol {0} derives only the empty string")]
    StartOnlyEpsilon(String),
    #[error("productions of {0} have zero total probability")]
    ZeroTotal(String),
    #[error("grammar is not proper: {0}")]
    Improper(String),
    #[error(transparent)]
    Closure(#[from] ClosureError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosureError {
    #[error("epsilon fixpoint did not converge after {iterations} iterations (residual {residual:e})")]
    EpsilonDiverged { iterations: usize, residual: f64 },
    #[error("closure matrix is singular (pivot {pivot:e}); the grammar is likely divergent")]
    Singular { pivot: f64 },
    #[error("closure residual {residual:e} exceeds tolerance; the grammar is likely divergent")]
    Residual { residual: f64 },
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("unbalanced brackets in input")]
    UnbalancedBrackets,
    #[error("empty bracketed span")]
    EmptyBracket,
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("no Viterbi links recorded; parse with Viterbi enabled")]
    NoViterbi,
    #[error("input was rejected")]
    Rejected,
    #[error("unknown nonterminal {0}")]
    UnknownNonterminal(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("chart does not contain an accepted parse")]
    NotAccepted,
    #[error("sentence probability is zero")]
    ZeroProbability,
    #[error("sentence {} could not be parsed", .index + 1)]
    Unparseable { index: usize },
    #[error("epsilon sensitivity system is singular")]
    Singular,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("expansion cap {cap} reached with residual mass {residual:e}")]
    TooManyExpansions { cap: usize, residual: f64 },
    #[error("residual mass {residual:e} exceeds requested tolerance {tol:e}")]
    Residual { residual: f64, tol: f64 },
    #[error("string longer than the enumeration bound {0}")]
    TooLong(usize),
}
