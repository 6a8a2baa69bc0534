//! Small grammars used in examples, tests and benchmarks.

/// `S -> a [p]`, `S -> S S [q]` with p = 0.6.
pub const BINARY: &str = "S -> a [0.6]\nS -> S S [0.4]\n";

/// A tiny English fragment with uniform probabilities per left-hand side.
pub const TINY_ENGLISH: &str = "\
S -> NP VP [1]
NP -> Det N [1]
VP -> VT NP [0.5]
VP -> VI PP [0.5]
PP -> P NP [1]
Det -> a [1]
N -> circle [0.3333333333333333]
N -> square [0.3333333333333333]
N -> triangle [0.3333333333333334]
VT -> touches [1]
VI -> is [1]
P -> above [0.5]
P -> below [0.5]
";

/// The binary grammar with probability `p` for the terminal rule.
pub fn binary(p: f64) -> String {
    format!("S -> a [{:?}]\nS -> S S [{:?}]\n", p, 1.0 - p)
}

/// `S -> a [p]`, `S -> T [q]`, `T -> S [1]`: a unit-production cycle.
pub fn unit_cycle(p: f64) -> String {
    format!("S -> a [{:?}]\nS -> T [{:?}]\nT -> S [1]\n", p, 1.0 - p)
}
