//! The probabilistic Earley parser.
//!
//! Null productions are never instantiated as states. Instead the dot moves spontaneously over
//! nullable nonterminals, multiplying in their epsilon probabilities, and the left-corner and
//! unit closures include the nullable extensions. Unit-production chains are collapsed through
//! `R_U` in completion; mass whose only nonempty constituent is a single nonterminal is kept apart
//! (`gamma_single`) so it is never propagated twice.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use indexmap::IndexMap;

use crate::chart::{Chart, CompletionQueue, DottedRule, Edge, Origin, StateKey, StateRef, StateSet, ViterbiLink};
use crate::closures::ClosureTables;
use crate::error::ParseError;
use crate::grammar::{Grammar, Sym};

/// Optional alpha-based pruning of each state set after completion.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Pruning {
    #[default]
    Off,
    /// Keep the `n` states with the highest forward probability.
    Beam(usize),
    /// Drop states whose forward probability is below this fraction of the best one.
    Relative(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParseOptions {
    /// Bottom-up filtering of predictions with the extended left-corner relation.
    pub filter: bool,
    pub viterbi: bool,
    pub pruning: Pruning,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { filter: true, viterbi: true, pruning: Pruning::Off }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Standard,
    Robust,
}

/// Tokens may include the bracket markers `(` and `)`.
#[derive(Clone, Debug, Default)]
pub struct ParseRequest {
    pub tokens: Vec<String>,
    pub mode: Mode,
    pub options: ParseOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParseTree {
    Leaf(String),
    Node { label: String, children: Vec<ParseTree> },
}

impl ParseTree {
    pub fn label(&self) -> &str {
        match self {
            ParseTree::Leaf(s) => s,
            ParseTree::Node { label, .. } => label,
        }
    }

    /// Terminal leaves, left to right.
    pub fn frontier(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            ParseTree::Leaf(s) => out.push(s),
            ParseTree::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// Product of the probabilities of the productions used in the tree.
    pub fn probability(&self, g: &Grammar) -> Option<f64> {
        match self {
            ParseTree::Leaf(_) => Some(1.0),
            ParseTree::Node { label, children } => {
                let rhs: Vec<&str> = children.iter().map(|c| c.label()).collect();
                let p = g.production(g.find(label, &rhs)?).prob;
                children.iter().try_fold(p, |acc, c| Some(acc * c.probability(g)?))
            }
        }
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseTree::Leaf(s) => f.write_str(s),
            ParseTree::Node { label, children } => {
                write!(f, "({}", label)?;
                for c in children {
                    write!(f, " {}", c)?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParseResult {
    pub chart: Chart,
    /// `prefix_probs[i - 1]` is the probability of the first `i` tokens as a prefix.
    pub prefix_probs: Vec<f64>,
    pub sentence_prob: f64,
    pub accepted: bool,
    /// Set when pruning removed states; probabilities are then lower bounds.
    pub approximate: bool,
    pub viterbi_prob: Option<f64>,
    pub viterbi_tree: Option<ParseTree>,
    /// Input position (token count) at which scanning failed.
    pub rejected_at: Option<usize>,
    /// Bracket spans `[s, t)` over token positions.
    pub brackets: Vec<(usize, usize)>,
    pub(crate) final_state: Option<StateRef>,
    pub(crate) viterbi_enabled: bool,
}

impl ParseResult {
    pub fn final_state(&self) -> Option<StateRef> {
        self.final_state
    }

    /// Sum of inner probabilities of complete `X` states spanning tokens `k..i`.
    ///
    /// Returns 0 both when X cannot derive the span and when no derivation places X after the
    /// first `k` tokens (the chart only holds top-down reachable states). Empty spans are not
    /// represented in the chart and also give 0.
    pub fn substring_probability(&self, g: &Grammar, x: &str, k: usize, i: usize) -> Result<f64, ParseError> {
        let x = g.nonterminal(x).ok_or_else(|| ParseError::UnknownNonterminal(x.to_string()))?;
        if k > i || i >= self.chart.sets.len() {
            return Err(ParseError::OutOfRange(format!("span {}..{}", k, i)));
        }
        Ok(self.chart.sets[i]
            .states()
            .filter(|s| s.complete && !s.pruned && s.key.start as usize == k && s.key.rule.lhs(g) == Some(x))
            .map(|s| s.gamma())
            .sum())
    }

    pub fn viterbi_parse(&self) -> Result<(&ParseTree, f64), ParseError> {
        if !self.viterbi_enabled {
            return Err(ParseError::NoViterbi);
        }
        match (&self.viterbi_tree, self.viterbi_prob) {
            (Some(t), Some(v)) => Ok((t, v)),
            _ => Err(ParseError::Rejected),
        }
    }
}

/// A sequence of nonterminals that together cover the whole input.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialParse {
    pub labels: Vec<String>,
    /// Start position of each constituent in the most likely split, followed by the input length.
    pub split_points: Vec<usize>,
    pub inner_prob: f64,
    pub viterbi_prob: f64,
    pub maximal: bool,
    /// Viterbi tree of each constituent under the most likely split.
    pub trees: Vec<ParseTree>,
}

impl PartialParse {
    pub fn label_string(&self) -> String {
        self.labels.join(" ")
    }
}

#[derive(Clone, Debug)]
pub struct RobustResult {
    pub result: ParseResult,
    /// All complete partial parses, most probable first.
    pub partial_parses: Vec<PartialParse>,
    /// The grammar actually used: the input grammar plus a preterminal per unknown token.
    pub grammar: Grammar,
}

impl RobustResult {
    pub fn maximal(&self) -> impl Iterator<Item = &PartialParse> {
        self.partial_parses.iter().filter(|p| p.maximal)
    }
}

/// Split whitespace-separated input into tokens, detaching bracket markers.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch == '(' || ch == ')' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Half-open token span `[start, end)`.
pub type Span = (usize, usize);

/// Separate bracket markers from words; returns the words and `[s, t)` bracket spans.
pub fn split_brackets<S: AsRef<str>>(tokens: &[S]) -> Result<(Vec<String>, Vec<Span>), ParseError> {
    let mut words = Vec::new();
    let mut open = Vec::new();
    let mut spans = Vec::new();
    for t in tokens {
        match t.as_ref() {
            "(" => open.push(words.len()),
            ")" => {
                let s = open.pop().ok_or(ParseError::UnbalancedBrackets)?;
                if s == words.len() {
                    return Err(ParseError::EmptyBracket);
                }
                spans.push((s, words.len()));
            }
            w => words.push(w.to_string()),
        }
    }
    if !open.is_empty() {
        return Err(ParseError::UnbalancedBrackets);
    }
    Ok((words, spans))
}

/// Parse according to a request. Bracket markers in the tokens constrain the parse.
pub fn parse(g: &Grammar, tables: &ClosureTables, req: &ParseRequest) -> Result<ParseResult, ParseError> {
    match req.mode {
        Mode::Standard => parse_bracketed(g, tables, &req.tokens, &req.options),
        Mode::Robust => Ok(parse_robust(g, tables, &req.tokens, &req.options)?.result),
    }
}

/// Parse plain tokens (no bracket markers).
pub fn parse_tokens<S: AsRef<str>>(
    g: &Grammar,
    tables: &ClosureTables,
    tokens: &[S],
    opts: &ParseOptions,
) -> ParseResult {
    let words: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    Engine::new(g, tables, opts, words, Vec::new(), false).run(false)
}

/// Parse input that may contain `(` `)` markers; only derivations whose constituents do not
/// cross a bracketed span contribute.
pub fn parse_bracketed<S: AsRef<str>>(
    g: &Grammar,
    tables: &ClosureTables,
    tokens: &[S],
    opts: &ParseOptions,
) -> Result<ParseResult, ParseError> {
    let (words, spans) = split_brackets(tokens)?;
    Ok(Engine::new(g, tables, opts, words, spans, false).run(false))
}

/// Conditional distribution of the next terminal given a prefix, in terminal id order.
pub fn next_word_distribution<S: AsRef<str>>(
    g: &Grammar,
    tables: &ClosureTables,
    prefix: &[S],
    opts: &ParseOptions,
) -> Result<Vec<(String, f64)>, ParseError> {
    let words: Vec<String> = prefix.iter().map(|t| t.as_ref().to_string()).collect();
    let l = words.len();
    let res = Engine::new(g, tables, opts, words, Vec::new(), false).run(true);
    if res.rejected_at.is_some() {
        return Err(ParseError::Rejected);
    }
    let denom = if l == 0 { 1.0 } else { res.prefix_probs[l - 1] };
    let last = &res.chart.sets[l];
    // Terminals no dotted symbol can start with are zero without looking at alphas.
    let mut possible = vec![false; g.num_terminals()];
    for s in last.states().filter(|s| !s.pruned) {
        match s.next {
            Some(Sym::T(a)) => possible[a as usize] = true,
            Some(Sym::N(z)) => {
                for (a, &b) in tables.rlt.row(z as usize).iter().enumerate() {
                    possible[a] |= b;
                }
            }
            None => {}
        }
    }
    Ok((0..g.num_terminals())
        .map(|a| {
            let p = if possible[a] {
                let num: f64 = last
                    .waiting_for_terminal(a)
                    .iter()
                    .map(|&i| last.get(i as usize))
                    .filter(|s| !s.pruned)
                    .map(|s| s.alpha)
                    .sum();
                num / denom
            } else {
                0.0
            };
            (g.terminal_name(a).to_string(), p)
        })
        .collect())
}

/// Robust parsing: find every nonterminal over every substring and assemble complete
/// partial parses. Unknown tokens get a fresh preterminal `UNK_<token>` with probability 1.
pub fn parse_robust<S: AsRef<str>>(
    g: &Grammar,
    tables: &ClosureTables,
    tokens: &[S],
    opts: &ParseOptions,
) -> Result<RobustResult, ParseError> {
    let words: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    let mut extra: Vec<(String, String)> = Vec::new();
    for w in &words {
        if g.terminal(w).is_none() && !extra.iter().any(|(_, t)| t == w) {
            let mut name = format!("UNK_{}", w);
            while g.kind(&name).is_some() || extra.iter().any(|(n, _)| *n == name) {
                name.push('_');
            }
            extra.push((name, w.clone()));
        }
    }
    let (grammar, owned_tables);
    let (g, tables) = if extra.is_empty() {
        (g, tables)
    } else {
        grammar = g.with_preterminals(&extra);
        owned_tables = ClosureTables::build(&grammar).map_err(crate::error::GrammarError::from)?;
        (&grammar, &owned_tables)
    };
    let mut engine = Engine::new(g, tables, opts, words, Vec::new(), true);
    let mut result = engine.run(false);
    let consumed = consumed_constituents(g, tables, &result.chart);
    let full = assemble_wildcards(g, &result.chart, None);
    let maximal = assemble_wildcards(g, &result.chart, Some(&consumed));
    let l = result.chart.input.len();
    let maximal_labels: HashSet<Vec<u32>> = maximal[l].keys().cloned().collect();
    insert_wildcards(&mut result.chart, &full);
    let mut partial_parses: Vec<PartialParse> = full[l]
        .iter()
        .filter(|(seen, _)| !seen.is_empty())
        .map(|(seen, w)| {
            let is_max = maximal_labels.contains(seen);
            let entry = if is_max { &maximal[l][seen] } else { w };
            let table = if is_max { &maximal } else { &full };
            let (splits, children) = wildcard_split(table, l, seen, entry);
            PartialParse {
                labels: seen.iter().map(|&x| g.nonterminal_name(x as usize).to_string()).collect(),
                split_points: splits,
                inner_prob: entry.gamma,
                viterbi_prob: entry.viterbi,
                maximal: is_max,
                trees: children.into_iter().map(|c| node_tree(g, tables, &result.chart, c)).collect(),
            }
        })
        .collect();
    partial_parses.sort_by(|a, b| b.inner_prob.total_cmp(&a.inner_prob).then_with(|| a.labels.cmp(&b.labels)));
    Ok(RobustResult { result, partial_parses, grammar: g.clone() })
}

struct Engine<'a> {
    g: &'a Grammar,
    t: &'a ClosureTables,
    opts: &'a ParseOptions,
    words: Vec<String>,
    tokens: Vec<Option<usize>>,
    brackets: Vec<(usize, usize)>,
    robust: bool,
    sets: Vec<StateSet>,
    queue: CompletionQueue,
    approximate: bool,
}

impl<'a> Engine<'a> {
    fn new(
        g: &'a Grammar,
        t: &'a ClosureTables,
        opts: &'a ParseOptions,
        words: Vec<String>,
        brackets: Vec<(usize, usize)>,
        robust: bool,
    ) -> Engine<'a> {
        let tokens = words.iter().map(|w| g.terminal(w)).collect();
        Engine {
            g,
            t,
            opts,
            words,
            tokens,
            brackets,
            robust,
            sets: Vec::new(),
            queue: CompletionQueue::new(),
            approximate: false,
        }
    }

    fn new_set(&self, pos: usize) -> StateSet {
        StateSet::new(pos, self.g.num_nonterminals(), self.g.num_terminals())
    }

    /// Whether a state spanning from `k` to position `q` respects every bracket. An incomplete
    /// state ending at a right bracket edge stays legal: nullable symbols may still complete it there.
    fn legal(&self, k: usize, q: usize, complete: bool) -> bool {
        self.brackets.iter().all(|&(s, t)| {
            let crosses_left = k < s && s < q && q < t && complete;
            let crosses_right = s < k && k < t && q > t;
            !(crosses_left || crosses_right)
        })
    }

    /// Add mass to a state at `pos` and push it through spontaneous dot shifts.
    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        pos: usize,
        rule: DottedRule,
        start: usize,
        d_alpha: f64,
        d_single: f64,
        d_rest: f64,
        origin: Origin,
        edge: Option<Edge>,
        d_viterbi: f64,
        link: Option<ViterbiLink>,
    ) -> Option<usize> {
        let next = rule.next_symbol(self.g);
        let complete = rule.is_complete(self.g);
        if !self.legal(start, pos, complete) {
            return None;
        }
        let dummy = rule.is_dummy();
        let key = StateKey { rule, start: start as u32 };
        let set = &mut self.sets[pos];
        let (idx, new) = set.entry(key, next, complete, origin);
        let s = set.get_mut(idx);
        if let Some(e) = edge {
            s.edges.push(e);
        }
        s.alpha += d_alpha;
        s.gamma_single += d_single;
        s.gamma_rest += d_rest;
        let enqueue = complete && !dummy && d_rest > 0.0 && !s.queued;
        if enqueue {
            s.queued = true;
        }
        let improved = d_viterbi > 0.0 && set.improve_viterbi(idx, d_viterbi, link);
        if enqueue {
            self.queue.push(start, idx);
        }
        if let Some(Sym::N(y)) = next {
            let e = self.t.eps.e[y as usize];
            if e > 0.0 {
                let succ = self.sets[pos].get(idx).key.rule.advance();
                let succ_complete = succ.is_complete(self.g);
                if !(succ_complete && start == pos) {
                    let here = StateRef { pos: pos as u32, idx: idx as u32 };
                    let v = if improved { d_viterbi * self.t.veps.v[y as usize] } else { 0.0 };
                    self.add(
                        pos,
                        succ,
                        start,
                        d_alpha * e,
                        d_single * e,
                        d_rest * e,
                        Origin::Skipped,
                        new.then_some(Edge::Skip { pred: here, sym: y, weight: e }),
                        v,
                        Some(ViterbiLink::Skip { pred: here, sym: y }),
                    );
                }
            }
        }
        Some(idx)
    }

    fn run(&mut self, predict_at_end: bool) -> ParseResult {
        let l = self.words.len();
        self.sets.push(self.new_set(0));
        self.add(0, DottedRule::Start { dot: 0 }, 0, 1.0, 0.0, 1.0, Origin::Initial, None, 1.0, None);
        let mut rejected_at = None;
        for pos in 0..=l {
            if pos > 0 {
                self.complete(pos);
                if self.opts.viterbi {
                    self.viterbi_pass(pos);
                }
                if pos < l {
                    self.prune(pos);
                }
            }
            if pos == l {
                if predict_at_end || !self.opts.filter {
                    self.predict(pos, None);
                }
                break;
            }
            if self.robust {
                self.seed(pos);
            }
            let tok = self.tokens[pos];
            self.predict(pos, Some(tok));
            self.sets.push(self.new_set(pos + 1));
            self.scan(pos, tok);
            if !self.robust && self.sets[pos + 1].live_count() == 0 {
                rejected_at = Some(pos + 1);
                break;
            }
        }
        self.finish(rejected_at)
    }

    fn seed(&mut self, pos: usize) {
        for x in 0..self.g.num_nonterminals() {
            let ok = !self.opts.filter || self.tokens[pos].is_some_and(|a| self.t.rlt.get(x, a));
            if ok {
                let rule = DottedRule::Seed { nt: x as u32, dot: 0 };
                self.add(pos, rule, pos, 0.0, 0.0, 1.0, Origin::Seed, None, 1.0, None);
            }
        }
    }

    /// `tok` is `None` at the end of input, `Some(None)` for a token outside the grammar.
    fn predict(&mut self, pos: usize, tok: Option<Option<usize>>) {
        let filter = if self.opts.filter { tok } else { None };
        if filter == Some(None) {
            return;
        }
        let n = self.g.num_nonterminals();
        let mut sums = vec![0.0; n];
        let mut present = vec![false; n];
        for s in self.sets[pos].states() {
            if s.pruned || !(s.start() < pos || s.key.rule.is_dummy()) {
                continue;
            }
            if let Some(Sym::N(z)) = s.next {
                let z = z as usize;
                if let Some(Some(a)) = filter {
                    if !self.t.rlt.get(z, a) {
                        continue;
                    }
                }
                sums[z] += s.alpha;
                present[z] = true;
            }
        }
        let mut alpha = vec![0.0; n];
        let mut reach = vec![false; n];
        for z in (0..n).filter(|&z| present[z]) {
            for &(y, r) in self.t.rl.row(z) {
                alpha[y] += sums[z] * r;
                reach[y] = true;
            }
        }
        for y in (0..n).filter(|&y| reach[y]) {
            if let Some(Some(a)) = filter {
                if !self.t.rlt.get(y, a) {
                    continue;
                }
            }
            for &r in self.g.productions_of(y) {
                let p = self.g.production(r).prob;
                if self.g.production(r).rhs.is_empty() {
                    continue;
                }
                let rule = DottedRule::Prod { prod: r as u32, dot: 0 };
                self.add(pos, rule, pos, alpha[y] * p, 0.0, p, Origin::Predicted, None, p, None);
            }
        }
    }

    fn scan(&mut self, pos: usize, tok: Option<usize>) {
        let Some(a) = tok else { return };
        let movers: Vec<u32> = self.sets[pos].waiting_for_terminal(a).to_vec();
        for i in movers {
            let s = self.sets[pos].get(i as usize);
            if s.pruned {
                continue;
            }
            let (rule, start) = (s.key.rule.advance(), s.start());
            let (alpha, gamma, v) = (s.alpha, s.gamma(), s.viterbi);
            let pred = StateRef { pos: pos as u32, idx: i };
            let before = self.sets[pos + 1].len();
            let added = self.add(
                pos + 1,
                rule,
                start,
                alpha,
                0.0,
                gamma,
                Origin::Scanned,
                Some(Edge::Scan { pred }),
                v,
                Some(ViterbiLink::Scan { pred }),
            );
            if added.is_some() || self.sets[pos + 1].len() > before {
                self.sets[pos + 1].scanned_alpha_sum += alpha;
            }
        }
    }

    fn complete(&mut self, pos: usize) {
        while let Some(ci) = self.queue.pop() {
            let c = self.sets[pos].get(ci);
            let (j, y, gc) = (c.start(), c.key.rule.lhs(self.g).unwrap(), c.gamma_rest);
            let child = StateRef { pos: pos as u32, idx: ci as u32 };
            for &(z, ru) in &self.t.ru_into[y] {
                let preds: Vec<u32> = self.sets[j].waiting_for(z).to_vec();
                for pi in preds {
                    let p = self.sets[j].get(pi as usize);
                    if p.pruned {
                        continue;
                    }
                    let w = gc * ru;
                    let single = p.start() == j;
                    let (rule, start) = (p.key.rule.advance(), p.start());
                    let (da, dg) = (p.alpha * w, p.gamma() * w);
                    let (ds, dr) = if single { (dg, 0.0) } else { (0.0, dg) };
                    let pred = StateRef { pos: j as u32, idx: pi };
                    let edge = Edge::Complete { pred, child, z: z as u32, weight: ru };
                    self.add(pos, rule, start, da, ds, dr, Origin::Completed, Some(edge), 0.0, None);
                }
            }
        }
    }

    /// Max-product completion over explicit (uncollapsed) unit chains.
    fn viterbi_pass(&mut self, pos: usize) {
        let mut initial: Vec<(usize, usize)> = self.sets[pos]
            .states()
            .enumerate()
            .filter(|(_, s)| s.complete && !s.key.rule.is_dummy() && s.viterbi > 0.0 && !s.pruned)
            .map(|(i, s)| (s.start(), i))
            .collect();
        initial.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut work: VecDeque<usize> = initial.into_iter().map(|(_, i)| i).collect();
        while let Some(ci) = work.pop_front() {
            let c = self.sets[pos].get(ci);
            let (j, y, vc) = (c.start(), c.key.rule.lhs(self.g).unwrap(), c.viterbi);
            let child = StateRef { pos: pos as u32, idx: ci as u32 };
            let preds: Vec<u32> = self.sets[j].waiting_for(y).to_vec();
            for pi in preds {
                let p = self.sets[j].get(pi as usize);
                if p.pruned {
                    continue;
                }
                let cand = p.viterbi * vc;
                let rule = p.key.rule.advance();
                let start = p.start();
                let pred = StateRef { pos: j as u32, idx: pi };
                self.viterbi_update(pos, rule, start, cand, ViterbiLink::Complete { pred, child }, &mut work);
            }
        }
    }

    fn viterbi_update(
        &mut self,
        pos: usize,
        rule: DottedRule,
        start: usize,
        v: f64,
        link: ViterbiLink,
        work: &mut VecDeque<usize>,
    ) {
        if v <= 0.0 {
            return;
        }
        let next = rule.next_symbol(self.g);
        let complete = rule.is_complete(self.g);
        if !self.legal(start, pos, complete) {
            return;
        }
        let dummy = rule.is_dummy();
        let key = StateKey { rule, start: start as u32 };
        let set = &mut self.sets[pos];
        let idx = match set.find(&key) {
            Some(i) => i,
            None => set.entry(key, next, complete, Origin::Completed).0,
        };
        if !set.improve_viterbi(idx, v, Some(link)) {
            return;
        }
        if complete && !dummy {
            work.push_back(idx);
        }
        if let Some(Sym::N(y)) = next {
            if self.t.eps.e[y as usize] > 0.0 {
                let succ = self.sets[pos].get(idx).key.rule.advance();
                if !(succ.is_complete(self.g) && start == pos) {
                    let pred = StateRef { pos: pos as u32, idx: idx as u32 };
                    let vs = v * self.t.veps.v[y as usize];
                    self.viterbi_update(pos, succ, start, vs, ViterbiLink::Skip { pred, sym: y }, work);
                }
            }
        }
    }

    fn prune(&mut self, pos: usize) {
        let set = &mut self.sets[pos];
        let mut cands: Vec<(usize, f64)> = set
            .states()
            .enumerate()
            .filter(|(_, s)| !s.key.rule.is_dummy() && !s.pruned)
            .map(|(i, s)| (i, s.alpha))
            .collect();
        let drop: Vec<usize> = match self.opts.pruning {
            Pruning::Off => return,
            Pruning::Beam(n) => {
                cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                cands.iter().skip(n).map(|c| c.0).collect()
            }
            Pruning::Relative(r) => {
                let best = cands.iter().map(|c| c.1).fold(0.0, f64::max);
                cands.iter().filter(|c| c.1 < r * best).map(|c| c.0).collect()
            }
        };
        if !drop.is_empty() {
            self.approximate = true;
        }
        for i in drop {
            set.get_mut(i).pruned = true;
        }
    }

    fn finish(&mut self, rejected_at: Option<usize>) -> ParseResult {
        let l = self.words.len();
        let sets = std::mem::take(&mut self.sets);
        let chart = Chart { sets, input: self.words.clone() };
        let scanned_upto = rejected_at.map_or(l, |r| r - 1);
        let prefix_probs: Vec<f64> = (1..=scanned_upto).map(|i| chart.sets[i].scanned_alpha_sum).collect();
        let mut res = ParseResult {
            prefix_probs,
            sentence_prob: 0.0,
            accepted: false,
            approximate: self.approximate,
            viterbi_prob: None,
            viterbi_tree: None,
            rejected_at,
            brackets: self.brackets.clone(),
            final_state: None,
            viterbi_enabled: self.opts.viterbi,
            chart,
        };
        if rejected_at.is_some() {
            return res;
        }
        if l == 0 {
            let s = self.g.start();
            let e = self.t.eps.e[s];
            if e > 0.0 {
                res.accepted = true;
                res.sentence_prob = e;
                if self.opts.viterbi {
                    res.viterbi_prob = Some(self.t.veps.v[s]);
                    res.viterbi_tree = Some(epsilon_tree(self.g, self.t, s));
                }
            }
            return res;
        }
        let key = StateKey { rule: DottedRule::Start { dot: 1 }, start: 0 };
        if let Some(idx) = res.chart.sets[l].find(&key) {
            let st = res.chart.sets[l].get(idx);
            if st.gamma() > 0.0 {
                res.accepted = true;
                res.sentence_prob = st.gamma();
                res.final_state = Some(StateRef { pos: l as u32, idx: idx as u32 });
                if self.opts.viterbi && st.viterbi > 0.0 {
                    res.viterbi_prob = Some(st.viterbi);
                    let kids = children_trees(self.g, self.t, &res.chart, res.final_state.unwrap());
                    res.viterbi_tree = kids.into_iter().next();
                }
            }
        }
        res
    }
}

fn epsilon_tree(g: &Grammar, t: &ClosureTables, x: usize) -> ParseTree {
    let children = match t.veps.best[x] {
        Some(r) => g.production(r).rhs.iter().filter_map(|s| s.nonterminal()).map(|y| epsilon_tree(g, t, y)).collect(),
        None => Vec::new(),
    };
    ParseTree::Node { label: g.nonterminal_name(x).to_string(), children }
}

/// Viterbi subtrees for the symbols left of the dot of a state.
fn children_trees(g: &Grammar, t: &ClosureTables, chart: &Chart, r: StateRef) -> Vec<ParseTree> {
    let mut out = Vec::new();
    let mut cur = r;
    loop {
        let s = chart.state(cur);
        match &s.viterbi_link {
            None => break,
            Some(ViterbiLink::Scan { pred }) => {
                out.push(ParseTree::Leaf(chart.input[cur.pos as usize - 1].clone()));
                cur = *pred;
            }
            Some(ViterbiLink::Skip { pred, sym }) => {
                out.push(epsilon_tree(g, t, *sym as usize));
                cur = *pred;
            }
            Some(ViterbiLink::Complete { pred, child }) | Some(ViterbiLink::Wildcard { pred, child }) => {
                out.push(node_tree(g, t, chart, *child));
                cur = *pred;
            }
        }
    }
    out.reverse();
    out
}

/// Tree rooted at a complete state; a complete seed yields the tree of its nonterminal.
fn node_tree(g: &Grammar, t: &ClosureTables, chart: &Chart, r: StateRef) -> ParseTree {
    let s = chart.state(r);
    match s.key.rule.lhs(g) {
        Some(x) => {
            ParseTree::Node { label: g.nonterminal_name(x).to_string(), children: children_trees(g, t, chart, r) }
        }
        None => children_trees(g, t, chart, r)
            .into_iter()
            .next()
            .unwrap_or(ParseTree::Node { label: String::new(), children: Vec::new() }),
    }
}

/// Constituents `(X, start, end)` that are a proper part of some larger complete constituent.
fn consumed_constituents(g: &Grammar, t: &ClosureTables, chart: &Chart) -> HashSet<(usize, usize, usize)> {
    // Per state: reaches a complete constituent at the same position using only dot skips,
    // or one that ends later.
    let mut same: Vec<Vec<bool>> = chart.sets.iter().map(|s| vec![false; s.len()]).collect();
    let mut later: Vec<Vec<bool>> = same.clone();
    for (p, set) in chart.sets.iter().enumerate() {
        for (i, s) in set.states().enumerate() {
            if s.complete && !s.key.rule.is_dummy() && !s.pruned {
                same[p][i] = true;
            }
        }
    }
    let mut changed = true;
    while changed {
        changed = false;
        for p in (0..chart.sets.len()).rev() {
            for i in (0..chart.sets[p].len()).rev() {
                let (sm, lt) = (same[p][i], later[p][i]);
                if !(sm || lt) {
                    continue;
                }
                for e in &chart.sets[p].get(i).edges {
                    let (pred, to_same, to_later) = match *e {
                        Edge::Skip { pred, .. } => (pred, sm, lt),
                        Edge::Scan { pred } | Edge::Complete { pred, .. } => (pred, false, true),
                    };
                    let (pp, pi) = (pred.pos as usize, pred.idx as usize);
                    if to_same && !same[pp][pi] {
                        same[pp][pi] = true;
                        changed = true;
                    }
                    if to_later && !later[pp][pi] {
                        later[pp][pi] = true;
                        changed = true;
                    }
                }
            }
        }
    }
    let mut consumed = HashSet::new();
    for (p, set) in chart.sets.iter().enumerate() {
        for (i, s) in set.states().enumerate() {
            for e in &s.edges {
                if let Edge::Complete { pred, child, z, .. } = *e {
                    let ps = chart.state(pred);
                    let bigger = later[p][i] || (same[p][i] && ps.start() < pred.pos as usize);
                    if !bigger {
                        continue;
                    }
                    let c = chart.state(child);
                    let y = c.key.rule.lhs(g).unwrap();
                    let (j, e_pos) = (c.start(), child.pos as usize);
                    let z = z as usize;
                    for w in 0..g.num_nonterminals() {
                        let on_chain = (w == z || t.ru.get(z, w) > 0.0) && (w == y || t.ru.get(w, y) > 0.0);
                        if on_chain {
                            consumed.insert((w, j, e_pos));
                        }
                    }
                }
            }
        }
    }
    consumed
}

#[derive(Clone, Debug)]
struct WildEntry {
    gamma: f64,
    viterbi: f64,
    /// Previous wildcard (position, seen) and the completed seed extending it.
    link: Option<(usize, Vec<u32>, StateRef)>,
}

type WildTable = Vec<IndexMap<Vec<u32>, WildEntry>>;

fn assemble_wildcards(g: &Grammar, chart: &Chart, exclude: Option<&HashSet<(usize, usize, usize)>>) -> WildTable {
    let l = chart.input.len();
    let mut wild: WildTable = vec![IndexMap::new(); l + 1];
    wild[0].insert(Vec::new(), WildEntry { gamma: 1.0, viterbi: 1.0, link: None });
    for i in 1..=l {
        for (ci, c) in chart.sets[i].states().enumerate() {
            let DottedRule::Seed { nt, dot: 1 } = c.key.rule else { continue };
            let j = c.start();
            if c.pruned || exclude.is_some_and(|ex| ex.contains(&(nt as usize, j, i))) {
                continue;
            }
            let child = StateRef { pos: i as u32, idx: ci as u32 };
            let prev: Vec<(Vec<u32>, WildEntry)> = wild[j].iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            for (seen, w) in prev {
                let mut ext = seen.clone();
                ext.push(nt);
                let entry = wild[i].entry(ext).or_insert(WildEntry { gamma: 0.0, viterbi: 0.0, link: None });
                entry.gamma += w.gamma * c.gamma();
                let v = w.viterbi * c.viterbi;
                if v > entry.viterbi {
                    entry.viterbi = v;
                    entry.link = Some((j, seen, child));
                }
            }
        }
    }
    let _ = g;
    wild
}

fn wildcard_split(table: &WildTable, l: usize, seen: &[u32], entry: &WildEntry) -> (Vec<usize>, Vec<StateRef>) {
    let mut splits = vec![l];
    let mut children = Vec::new();
    let mut cur = entry.clone();
    let mut cur_seen = seen.to_vec();
    while let Some((j, prev, child)) = cur.link.clone() {
        splits.push(j);
        children.push(child);
        cur = table[j][&prev].clone();
        cur_seen = prev;
    }
    debug_assert!(cur_seen.is_empty());
    splits.reverse();
    children.reverse();
    (splits, children)
}

fn insert_wildcards(chart: &mut Chart, table: &WildTable) {
    let mut refs: Vec<std::collections::HashMap<Vec<u32>, StateRef>> = vec![Default::default(); table.len()];
    for (i, entries) in table.iter().enumerate() {
        for (seen, w) in entries {
            let key = StateKey { rule: DottedRule::Wildcard { seen: seen.clone() }, start: 0 };
            let set = &mut chart.sets[i];
            let (idx, _) = set.entry(key, None, false, Origin::Wildcard);
            let s = set.get_mut(idx);
            s.gamma_rest = w.gamma;
            s.viterbi = w.viterbi;
            s.viterbi_link =
                w.link.as_ref().map(|(j, prev, child)| ViterbiLink::Wildcard { pred: refs[*j][prev], child: *child });
            refs[i].insert(seen.clone(), StateRef { pos: i as u32, idx: idx as u32 });
        }
    }
}
