//! Stochastic context-free grammars: loading, validation and preprocessing.

use std::collections::HashMap;
use std::fmt;

use crate::closures::{self, EpsilonProbs};
use crate::error::GrammarError;

/// Properness tolerance on per-LHS probability sums.
pub const TAU_PROP: f64 = 1e-6;

/// Reserved tokens that may not be used as symbol names.
pub const RESERVED: [&str; 7] = ["(", ")", "?", "->", "[", "]", "eps"];

/// A grammar symbol: nonterminals and terminals have separate dense id spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sym {
    N(u32),
    T(u32),
}

impl Sym {
    pub fn nonterminal(self) -> Option<usize> {
        match self {
            Sym::N(x) => Some(x as usize),
            Sym::T(_) => None,
        }
    }

    pub fn terminal(self) -> Option<usize> {
        match self {
            Sym::T(a) => Some(a as usize),
            Sym::N(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymbolKind {
    Nonterminal,
    Terminal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Production {
    pub lhs: usize,
    pub rhs: Vec<Sym>,
    pub prob: f64,
}

impl Production {
    pub fn is_null(&self) -> bool {
        self.rhs.is_empty()
    }

    /// A plain unit production `X -> Y`.
    pub fn is_unit(&self) -> bool {
        self.rhs.len() == 1 && matches!(self.rhs[0], Sym::N(_))
    }
}

/// An immutable SCFG.
#[derive(Clone, Debug)]
pub struct Grammar {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    nt_index: HashMap<String, usize>,
    t_index: HashMap<String, usize>,
    productions: Vec<Production>,
    by_lhs: Vec<Vec<usize>>,
    start: usize,
}

/// Result of validating a grammar. Never fails; everything is a diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarDiagnostics {
    pub improper_lhs: Vec<(usize, f64)>,
    pub useless: Vec<usize>,
    pub null_start: bool,
    pub consistency_estimate: f64,
}

impl GrammarDiagnostics {
    pub fn is_proper(&self) -> bool {
        self.improper_lhs.is_empty()
    }
}

/// Incremental builder; merges duplicate productions.
#[derive(Default)]
pub struct GrammarBuilder {
    rules: Vec<(String, Vec<String>, f64)>,
    start: Option<String>,
}

impl GrammarBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, lhs: &str, rhs: &[&str], prob: f64) -> Self {
        self.push(lhs, rhs.iter().map(|s| s.to_string()).collect(), prob);
        self
    }

    pub fn push(&mut self, lhs: &str, rhs: Vec<String>, prob: f64) {
        self.rules.push((lhs.to_string(), rhs, prob));
    }

    pub fn start(mut self, name: &str) -> Self {
        self.start = Some(name.to_string());
        self
    }

    pub fn set_start(&mut self, name: &str) {
        self.start = Some(name.to_string());
    }

    pub fn build(self) -> Result<Grammar, GrammarError> {
        self.build_with_warnings().map(|(g, _)| g)
    }

    pub fn build_with_warnings(self) -> Result<(Grammar, Vec<String>), GrammarError> {
        let mut warnings = Vec::new();
        let mut nonterminals: Vec<String> = Vec::new();
        let mut nt_index = HashMap::new();
        for (lhs, _, _) in &self.rules {
            if !nt_index.contains_key(lhs) {
                nt_index.insert(lhs.clone(), nonterminals.len());
                nonterminals.push(lhs.clone());
            }
        }
        if nonterminals.is_empty() {
            return Err(GrammarError::Empty);
        }
        let mut terminals: Vec<String> = Vec::new();
        let mut t_index = HashMap::new();
        let mut productions: Vec<Production> = Vec::new();
        let mut seen: HashMap<(usize, Vec<Sym>), usize> = HashMap::new();
        for (lhs, rhs, prob) in self.rules {
            if !(prob > 0.0 && prob.is_finite()) {
                return Err(GrammarError::Probability { line: 0, value: prob });
            }
            let lhs_id = nt_index[&lhs];
            let rhs: Vec<Sym> = rhs
                .iter()
                .map(|s| match nt_index.get(s) {
                    Some(&x) => Sym::N(x as u32),
                    None => {
                        let next = terminals.len();
                        let a = *t_index.entry(s.clone()).or_insert_with(|| {
                            terminals.push(s.clone());
                            next
                        });
                        Sym::T(a as u32)
                    }
                })
                .collect();
            match seen.get(&(lhs_id, rhs.clone())) {
                Some(&i) => {
                    warnings.push(format!("duplicate production for {} merged by summing probabilities", lhs));
                    productions[i].prob += prob;
                }
                None => {
                    seen.insert((lhs_id, rhs.clone()), productions.len());
                    productions.push(Production { lhs: lhs_id, rhs, prob });
                }
            }
        }
        let start = match &self.start {
            Some(name) => *nt_index.get(name).ok_or_else(|| GrammarError::UnknownStart(name.clone()))?,
            None => 0,
        };
        let mut by_lhs = vec![Vec::new(); nonterminals.len()];
        for (i, p) in productions.iter().enumerate() {
            by_lhs[p.lhs].push(i);
        }
        let g = Grammar { nonterminals, terminals, nt_index, t_index, productions, by_lhs, start };
        for (x, sum) in g.lhs_sums().into_iter().enumerate() {
            if (sum - 1.0).abs() > TAU_PROP {
                warnings.push(format!("probabilities of {} sum to {}", g.nonterminals[x], sum));
            }
        }
        Ok((g, warnings))
    }
}

/// Parse grammar-file text, returning the grammar and any load warnings.
pub fn parse_grammar(text: &str) -> Result<(Grammar, Vec<String>), GrammarError> {
    let mut b = GrammarBuilder::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("%start") {
            let name: Vec<&str> = rest.split_whitespace().collect();
            if name.len() != 1 || !rest.starts_with(char::is_whitespace) {
                return Err(syntax(line_no, "expected `%start NAME`"));
            }
            check_name(line_no, name[0])?;
            b.set_start(name[0]);
            continue;
        }
        let (body, prob) = split_prob(line_no, line)?;
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() < 2 || toks[1] != "->" {
            return Err(syntax(line_no, "expected `LHS -> symbols [prob]`"));
        }
        check_name(line_no, toks[0])?;
        let mut rhs: Vec<String> = Vec::new();
        let rest = &toks[2..];
        if rest == ["eps"] {
            // explicit empty right-hand side
        } else {
            for t in rest {
                check_name(line_no, t)?;
                rhs.push(t.to_string());
            }
        }
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(GrammarError::Probability { line: line_no, value: prob });
        }
        b.push(toks[0], rhs, prob);
    }
    b.build_with_warnings()
}

fn syntax(line: usize, msg: &str) -> GrammarError {
    GrammarError::Syntax { line, msg: msg.to_string() }
}

fn check_name(line: usize, name: &str) -> Result<(), GrammarError> {
    if RESERVED.contains(&name) || name.contains(['[', ']', '(', ')']) || name.starts_with('%') {
        return Err(syntax(line, &format!("reserved token `{}` used as a symbol", name)));
    }
    Ok(())
}

fn split_prob(line: usize, text: &str) -> Result<(&str, f64), GrammarError> {
    let open = text.rfind('[').ok_or_else(|| syntax(line, "missing `[prob]`"))?;
    let tail = &text[open + 1..];
    let close = tail.find(']').ok_or_else(|| syntax(line, "unterminated `[prob]`"))?;
    if !tail[close + 1..].trim().is_empty() {
        return Err(syntax(line, "text after `[prob]`"));
    }
    let value = tail[..close].trim().parse::<f64>().map_err(|_| syntax(line, "probability is not a number"))?;
    Ok((&text[..open], value))
}

impl Grammar {
    pub fn num_nonterminals(&self) -> usize {
        self.nonterminals.len()
    }

    pub fn num_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn productions(&self) -> &[Production] {
        &self.productions
    }

    pub fn production(&self, i: usize) -> &Production {
        &self.productions[i]
    }

    pub fn productions_of(&self, x: usize) -> &[usize] {
        &self.by_lhs[x]
    }

    pub fn nonterminal_name(&self, x: usize) -> &str {
        &self.nonterminals[x]
    }

    pub fn terminal_name(&self, a: usize) -> &str {
        &self.terminals[a]
    }

    pub fn nonterminal_names(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn terminal_names(&self) -> &[String] {
        &self.terminals
    }

    pub fn nonterminal(&self, name: &str) -> Option<usize> {
        self.nt_index.get(name).copied()
    }

    pub fn terminal(&self, name: &str) -> Option<usize> {
        self.t_index.get(name).copied()
    }

    pub fn kind(&self, name: &str) -> Option<SymbolKind> {
        if self.nt_index.contains_key(name) {
            Some(SymbolKind::Nonterminal)
        } else if self.t_index.contains_key(name) {
            Some(SymbolKind::Terminal)
        } else {
            None
        }
    }

    pub fn symbol_name(&self, s: Sym) -> &str {
        match s {
            Sym::N(x) => &self.nonterminals[x as usize],
            Sym::T(a) => &self.terminals[a as usize],
        }
    }

    /// Find a production by LHS and RHS names.
    pub fn find(&self, lhs: &str, rhs: &[&str]) -> Option<usize> {
        let x = self.nonterminal(lhs)?;
        self.by_lhs[x].iter().copied().find(|&i| {
            let p = &self.productions[i];
            p.rhs.len() == rhs.len() && p.rhs.iter().zip(rhs).all(|(s, n)| self.symbol_name(*s) == *n)
        })
    }

    pub fn has_null_productions(&self) -> bool {
        self.productions.iter().any(|p| p.is_null())
    }

    pub fn lhs_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.nonterminals.len()];
        for p in &self.productions {
            sums[p.lhs] += p.prob;
        }
        sums
    }

    /// Same grammar with new production probabilities (same order); zero-probability rules are dropped.
    pub fn with_probs(&self, probs: &[f64]) -> Grammar {
        assert_eq!(probs.len(), self.productions.len());
        let mut g = self.clone();
        g.productions = self
            .productions
            .iter()
            .zip(probs)
            .filter(|(_, &q)| q > 0.0)
            .map(|(p, &q)| Production { prob: q, ..p.clone() })
            .collect();
        g.by_lhs = vec![Vec::new(); g.nonterminals.len()];
        for (i, p) in g.productions.iter().enumerate() {
            g.by_lhs[p.lhs].push(i);
        }
        g
    }

    fn rhs_names(&self, p: &Production) -> Vec<String> {
        p.rhs.iter().map(|s| self.symbol_name(*s).to_string()).collect()
    }

    /// A copy with one extra preterminal `name -> terminal [1]` per entry.
    pub fn with_preterminals(&self, extra: &[(String, String)]) -> Grammar {
        let mut b = self.to_builder();
        for (name, tok) in extra {
            b.push(name, vec![tok.clone()], 1.0);
        }
        b.build().expect("extending a valid grammar")
    }

    fn to_builder(&self) -> GrammarBuilder {
        let mut b = GrammarBuilder::new();
        for p in &self.productions {
            b.push(&self.nonterminals[p.lhs], self.rhs_names(p), p.prob);
        }
        b.set_start(&self.nonterminals[self.start]);
        b
    }

    /// Nonterminals that can derive some terminal string.
    pub fn productive(&self) -> Vec<bool> {
        let n = self.nonterminals.len();
        let mut prod = vec![false; n];
        let mut changed = true;
        while changed {
            changed = false;
            for p in &self.productions {
                if !prod[p.lhs]
                    && p.rhs.iter().all(|s| match s {
                        Sym::N(y) => prod[*y as usize],
                        Sym::T(_) => true,
                    })
                {
                    prod[p.lhs] = true;
                    changed = true;
                }
            }
        }
        prod
    }

    /// Nonterminals that can derive the empty string.
    pub fn nullable(&self) -> Vec<bool> {
        let n = self.nonterminals.len();
        let mut null = vec![false; n];
        let mut changed = true;
        while changed {
            changed = false;
            for p in &self.productions {
                if !null[p.lhs] && p.rhs.iter().all(|s| matches!(s, Sym::N(y) if null[*y as usize])) {
                    null[p.lhs] = true;
                    changed = true;
                }
            }
        }
        null
    }

    /// Nonterminals that can derive a nonempty terminal string.
    pub fn derives_nonempty(&self) -> Vec<bool> {
        let productive = self.productive();
        let n = self.nonterminals.len();
        let mut ne = vec![false; n];
        let mut changed = true;
        while changed {
            changed = false;
            for p in &self.productions {
                if ne[p.lhs] {
                    continue;
                }
                let all_productive = p.rhs.iter().all(|s| match s {
                    Sym::N(y) => productive[*y as usize],
                    Sym::T(_) => true,
                });
                let some_nonempty = p.rhs.iter().any(|s| match s {
                    Sym::N(y) => ne[*y as usize],
                    Sym::T(_) => true,
                });
                if all_productive && some_nonempty {
                    ne[p.lhs] = true;
                    changed = true;
                }
            }
        }
        ne
    }

    /// Serialize in the grammar file format; parsing the output reproduces the grammar exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("%start {}\n", self.nonterminals[self.start]);
        for p in &self.productions {
            out.push_str(&self.nonterminals[p.lhs]);
            out.push_str(" ->");
            if p.rhs.is_empty() {
                out.push_str(" eps");
            }
            for s in &p.rhs {
                out.push(' ');
                out.push_str(self.symbol_name(*s));
            }
            out.push_str(&format!(" [{:?}]\n", p.prob));
        }
        out
    }

    pub fn display_production(&self, i: usize) -> String {
        let p = &self.productions[i];
        let mut s = format!("{} ->", self.nonterminals[p.lhs]);
        for sym in &p.rhs {
            s.push(' ');
            s.push_str(self.symbol_name(*sym));
        }
        s
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl std::str::FromStr for Grammar {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_grammar(s).map(|(g, _)| g)
    }
}

/// Properness, usefulness and a spectral-radius consistency estimate.
pub fn validate(g: &Grammar) -> GrammarDiagnostics {
    let improper_lhs = g.lhs_sums().into_iter().enumerate().filter(|(_, s)| (s - 1.0).abs() > TAU_PROP).collect();

    let productive = g.productive();
    let n = g.num_nonterminals();
    let mut reachable = vec![false; n];
    if productive[g.start] {
        reachable[g.start] = true;
        let mut stack = vec![g.start];
        while let Some(x) = stack.pop() {
            for &i in &g.by_lhs[x] {
                let p = &g.productions[i];
                let ok = p.rhs.iter().all(|s| s.nonterminal().is_none_or(|y| productive[y]));
                if !ok {
                    continue;
                }
                for y in p.rhs.iter().filter_map(|s| s.nonterminal()) {
                    if !reachable[y] {
                        reachable[y] = true;
                        stack.push(y);
                    }
                }
            }
        }
    }
    let useless = (0..n).filter(|&x| !(reachable[x] && productive[x])).collect();

    let consistency_estimate = match EpsilonProbs::compute(g) {
        Ok(eps) => {
            let pl = closures::left_corner_matrix(g, &eps);
            let pu = closures::unit_matrix(g, &eps);
            pl.spectral_radius().max(pu.spectral_radius())
        }
        Err(_) => f64::INFINITY,
    };

    GrammarDiagnostics { improper_lhs, useless, null_start: g.nullable()[g.start], consistency_estimate }
}

/// Divide every production probability by its LHS total.
pub fn renormalize(g: &Grammar) -> Result<Grammar, GrammarError> {
    let sums = g.lhs_sums();
    for (x, s) in sums.iter().enumerate() {
        if !g.by_lhs[x].is_empty() && *s <= 0.0 {
            return Err(GrammarError::ZeroTotal(g.nonterminals[x].clone()));
        }
    }
    let mut out = g.clone();
    for p in &mut out.productions {
        p.prob /= sums[p.lhs];
    }
    Ok(out)
}

/// Remove null productions while preserving the probability of every nonempty string.
///
/// Every nullable RHS occurrence is either kept (its nonterminal now derives only nonempty
/// strings, which it does with probability `1 - e`) or deleted (probability `e`). Each LHS is
/// then conditioned on deriving a nonempty string. If the start symbol is nullable a fresh
/// start symbol carries the empty string.
pub fn eliminate_null(g: &Grammar) -> Result<Grammar, GrammarError> {
    if !g.has_null_productions() {
        return Ok(g.clone());
    }
    let nonempty = g.derives_nonempty();
    if !nonempty[g.start] {
        return Err(GrammarError::StartOnlyEpsilon(g.nonterminals[g.start].clone()));
    }
    let eps = EpsilonProbs::compute(g)?;
    let e = &eps.e;
    let mut b = GrammarBuilder::new();
    let mut out_rules: Vec<(usize, Vec<Sym>, f64)> = Vec::new();
    let mut index: HashMap<(usize, Vec<Sym>), usize> = HashMap::new();
    for p in &g.productions {
        if p.is_null() || !nonempty[p.lhs] {
            continue;
        }
        let denom = 1.0 - e[p.lhs];
        let nullable_pos: Vec<usize> = p
            .rhs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.nonterminal().is_some_and(|y| e[y] > 0.0))
            .map(|(i, _)| i)
            .collect();
        let k = nullable_pos.len();
        for mask in 0u64..(1u64 << k) {
            let mut prob = p.prob;
            let mut rhs = Vec::with_capacity(p.rhs.len());
            let mut deleted = vec![false; p.rhs.len()];
            for (bit, &pos) in nullable_pos.iter().enumerate() {
                let y = p.rhs[pos].nonterminal().unwrap();
                if mask >> bit & 1 == 1 {
                    prob *= e[y];
                    deleted[pos] = true;
                } else {
                    prob *= 1.0 - e[y];
                }
            }
            for (i, s) in p.rhs.iter().enumerate() {
                if !deleted[i] {
                    rhs.push(*s);
                }
            }
            if rhs.is_empty() || prob <= 0.0 {
                continue;
            }
            if rhs.iter().any(|s| s.nonterminal().is_some_and(|y| !nonempty[y])) {
                continue;
            }
            prob /= denom;
            match index.get(&(p.lhs, rhs.clone())) {
                Some(&i) => out_rules[i].2 += prob,
                None => {
                    index.insert((p.lhs, rhs.clone()), out_rules.len());
                    out_rules.push((p.lhs, rhs, prob));
                }
            }
        }
    }
    let e_s = e[g.start];
    let start_name = g.nonterminals[g.start].clone();
    let fresh = if e_s > 0.0 {
        let mut name = format!("{}_0", start_name);
        while g.nt_index.contains_key(&name) || g.t_index.contains_key(&name) {
            name.push('_');
        }
        b.push(&name, vec![start_name.clone()], 1.0 - e_s);
        b.push(&name, Vec::new(), e_s);
        Some(name)
    } else {
        None
    };
    for (lhs, rhs, prob) in out_rules {
        let names = rhs.iter().map(|s| g.symbol_name(*s).to_string()).collect();
        b.push(&g.nonterminals[lhs], names, prob.min(1.0));
    }
    b.set_start(fresh.as_deref().unwrap_or(&start_name));
    b.build()
}
