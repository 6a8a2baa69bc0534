//! Brute-force reference computations over leftmost derivations.
//!
//! Everything here works on sentential forms and knows nothing about charts; it exists to check
//! the parser on small grammars.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use crate::error::OracleError;
use crate::grammar::{Grammar, Sym};
use crate::parser::ParseTree;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    /// Longest yield considered.
    pub max_len: usize,
    /// Bound on probability mass left unexplored.
    pub mass_tol: f64,
    pub max_expansions: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { max_len: 5, mass_tol: 1e-9, max_expansions: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Derivation {
    /// Production ids in leftmost order.
    pub rules: Vec<usize>,
    pub prob: f64,
    pub yield_: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Enumeration {
    pub derivations: Vec<Derivation>,
    /// Probability of partial derivations abandoned by the probability cutoff.
    pub residual: f64,
}

impl Enumeration {
    pub fn string_prob(&self, x: &[usize]) -> f64 {
        self.derivations.iter().filter(|d| d.yield_ == x).map(|d| d.prob).sum()
    }

    pub fn matching<'a>(&'a self, x: &'a [usize]) -> impl Iterator<Item = &'a Derivation> + 'a {
        self.derivations.iter().filter(move |d| d.yield_ == x)
    }
}

/// Enumeration frame: stack with top at the end, yield so far, rules, probability.
type Frame = (Vec<Sym>, Vec<usize>, Vec<usize>, f64);

/// Search node: consumed tokens, stack, and a back pointer (parent id, rule applied or `None`
/// for a shift).
type Node = (usize, Vec<Sym>, Option<(usize, Option<usize>)>);

/// Minimum number of terminals each nonterminal can derive (`usize::MAX` if unproductive).
pub fn min_yield(g: &Grammar) -> Vec<usize> {
    let mut m = vec![usize::MAX; g.num_nonterminals()];
    let mut changed = true;
    while changed {
        changed = false;
        for p in g.productions() {
            let v = p.rhs.iter().try_fold(0usize, |acc, s| match *s {
                Sym::T(_) => Some(acc + 1),
                Sym::N(y) => (m[y as usize] != usize::MAX).then(|| acc + m[y as usize]),
            });
            if let Some(v) = v {
                if v < m[p.lhs] {
                    m[p.lhs] = v;
                    changed = true;
                }
            }
        }
    }
    m
}

fn stack_min_yield(my: &[usize], stack: &[Sym]) -> usize {
    stack.iter().fold(0usize, |acc, s| match *s {
        Sym::T(_) => acc.saturating_add(1),
        Sym::N(y) => acc.saturating_add(my[y as usize]),
    })
}

/// Depth-first enumeration of all leftmost derivations with yield length at most `max_len`.
pub fn enumerate(g: &Grammar, cfg: &OracleConfig) -> Result<Enumeration, OracleError> {
    let my = min_yield(g);
    let cutoff = cfg.mass_tol * 1e-3;
    let mut out = Enumeration { derivations: Vec::new(), residual: 0.0 };
    let mut work: Vec<Frame> = vec![(vec![Sym::N(g.start() as u32)], Vec::new(), Vec::new(), 1.0)];
    let mut expansions = 0usize;
    while let Some((mut stack, mut yld, rules, prob)) = work.pop() {
        // Shift terminals off the top.
        while let Some(&Sym::T(a)) = stack.last() {
            stack.pop();
            yld.push(a as usize);
        }
        if yld.len() + stack_min_yield(&my, &stack) > cfg.max_len {
            continue;
        }
        let Some(Sym::N(x)) = stack.pop() else {
            out.derivations.push(Derivation { rules, prob, yield_: yld });
            continue;
        };
        expansions += 1;
        if expansions > cfg.max_expansions {
            let residual = out.residual + prob + work.iter().map(|w| w.3).sum::<f64>();
            return Err(OracleError::TooManyExpansions { cap: cfg.max_expansions, residual });
        }
        for &r in g.productions_of(x as usize).iter().rev() {
            let p = g.production(r);
            let q = prob * p.prob;
            if q < cutoff {
                out.residual += q;
                continue;
            }
            let mut s = stack.clone();
            s.extend(p.rhs.iter().rev());
            let mut rs = rules.clone();
            rs.push(r);
            work.push((s, yld.clone(), rs, q));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Form {
    prefix: Vec<u32>,
    /// Top at the end.
    stack: Vec<Sym>,
    /// Only the part of the stack that can matter for prefixes of length `max_len` is kept.
    truncated: bool,
}

struct Pending {
    mass: f64,
    counts: Option<Vec<f64>>,
    queued: bool,
}

/// String, prefix and expected-count tables for every terminal string up to a length bound,
/// computed by pushing probability mass through merged sentential forms.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub max_len: usize,
    strings: HashMap<Vec<u32>, f64>,
    counts: HashMap<Vec<u32>, Vec<f64>>,
    prefixes: HashMap<Vec<u32>, f64>,
    /// Total mass left unpropagated; bounds the error of every table entry.
    pub residual: f64,
    pub expansions: usize,
}

impl Oracle {
    /// `threshold` is the smallest pending mass worth expanding; `with_counts` also tracks
    /// per-production usage for expected counts.
    pub fn build(g: &Grammar, cfg: &OracleConfig, threshold: f64, with_counts: bool) -> Result<Oracle, OracleError> {
        let my = min_yield(g);
        let n_rules = g.productions().len();
        let mut o = Oracle {
            max_len: cfg.max_len,
            strings: HashMap::new(),
            counts: HashMap::new(),
            prefixes: HashMap::new(),
            residual: 0.0,
            expansions: 0,
        };
        o.prefixes.insert(Vec::new(), 1.0);
        let mut forms: HashMap<Form, Pending> = HashMap::new();
        let mut queue: VecDeque<Form> = VecDeque::new();
        let start = Form { prefix: Vec::new(), stack: vec![Sym::N(g.start() as u32)], truncated: false };
        let zero = with_counts.then(|| vec![0.0; n_rules]);
        o.push(&my, &mut forms, &mut queue, start, 1.0, zero.as_deref(), threshold);
        while let Some(f) = queue.pop_front() {
            let pend = forms.get_mut(&f).unwrap();
            pend.queued = false;
            let m = std::mem::take(&mut pend.mass);
            let c = pend.counts.as_mut().map(|c| std::mem::replace(c, vec![0.0; n_rules]));
            o.expansions += 1;
            if o.expansions > cfg.max_expansions {
                let residual = m + forms.values().map(|p| p.mass).sum::<f64>();
                return Err(OracleError::TooManyExpansions { cap: cfg.max_expansions, residual });
            }
            let mut stack = f.stack.clone();
            match stack.pop() {
                Some(Sym::T(a)) => {
                    let mut prefix = f.prefix.clone();
                    prefix.push(a);
                    *o.prefixes.entry(prefix.clone()).or_insert(0.0) += m;
                    let next = Form { prefix, stack, truncated: f.truncated };
                    o.push(&my, &mut forms, &mut queue, next, m, c.as_deref(), threshold);
                }
                Some(Sym::N(x)) => {
                    for &r in g.productions_of(x as usize) {
                        let p = g.production(r);
                        let mut s = stack.clone();
                        s.extend(p.rhs.iter().rev());
                        let cr = c.as_ref().map(|c| {
                            let mut v: Vec<f64> = c.iter().map(|v| v * p.prob).collect();
                            v[r] += m * p.prob;
                            v
                        });
                        let next = Form { prefix: f.prefix.clone(), stack: s, truncated: f.truncated };
                        o.push(&my, &mut forms, &mut queue, next, m * p.prob, cr.as_deref(), threshold);
                    }
                }
                None => unreachable!("complete forms are never queued"),
            }
        }
        o.residual = forms.values().map(|p| p.mass).sum();
        Ok(o)
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        my: &[usize],
        forms: &mut HashMap<Form, Pending>,
        queue: &mut VecDeque<Form>,
        mut f: Form,
        mass: f64,
        counts: Option<&[f64]>,
        threshold: f64,
    ) {
        if mass == 0.0 {
            return;
        }
        let need = self.max_len - f.prefix.len();
        if !f.truncated && stack_min_yield(my, &f.stack) > need {
            // No string within the bound; keep only what decides the next `need` terminals.
            if need == 0 {
                return;
            }
            let mut acc = 0usize;
            let mut keep = f.stack.len();
            for (i, s) in f.stack.iter().enumerate().rev() {
                acc = acc.saturating_add(match *s {
                    Sym::T(_) => 1,
                    Sym::N(y) => my[y as usize],
                });
                if acc >= need {
                    keep = f.stack.len() - i;
                    break;
                }
            }
            let cut = f.stack.len() - keep;
            f.stack.drain(..cut);
            f.truncated = true;
        }
        if f.stack.is_empty() {
            if !f.truncated {
                *self.strings.entry(f.prefix.clone()).or_insert(0.0) += mass;
                if let Some(c) = counts {
                    let e = self.counts.entry(f.prefix).or_insert_with(|| vec![0.0; c.len()]);
                    e.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                }
            }
            return;
        }
        if f.truncated && f.prefix.len() == self.max_len {
            return;
        }
        let entry = forms.entry(f.clone()).or_insert_with(|| Pending {
            mass: 0.0,
            counts: counts.map(|c| vec![0.0; c.len()]).filter(|_| !f.truncated),
            queued: false,
        });
        entry.mass += mass;
        if let (Some(e), Some(c)) = (entry.counts.as_mut(), counts) {
            e.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
        if !entry.queued && entry.mass > threshold {
            entry.queued = true;
            queue.push_back(f);
        }
    }

    fn key(x: &[usize]) -> Vec<u32> {
        x.iter().map(|&a| a as u32).collect()
    }

    /// Probability of the string; `None` if it is longer than the table bound.
    pub fn string_prob(&self, x: &[usize]) -> Option<f64> {
        (x.len() <= self.max_len).then(|| self.strings.get(&Self::key(x)).copied().unwrap_or(0.0))
    }

    /// Prefix probability and its error bar.
    pub fn prefix_prob(&self, x: &[usize]) -> Option<(f64, f64)> {
        (x.len() <= self.max_len).then(|| (self.prefixes.get(&Self::key(x)).copied().unwrap_or(0.0), self.residual))
    }

    /// Posterior expected production counts given the string.
    pub fn expected_counts(&self, x: &[usize]) -> Option<Vec<f64>> {
        let p = self.string_prob(x)?;
        let c = self.counts.get(&Self::key(x))?;
        (p > 0.0).then(|| c.iter().map(|v| v / p).collect())
    }

    /// Total probability of all strings within the bound.
    pub fn total_mass(&self) -> f64 {
        self.strings.values().sum()
    }

    pub fn strings(&self) -> impl Iterator<Item = (&Vec<u32>, &f64)> {
        self.strings.iter()
    }
}

#[derive(PartialEq)]
struct Candidate {
    prob: f64,
    id: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.prob.total_cmp(&other.prob).then_with(|| other.id.cmp(&self.id))
    }
}

/// Most probable leftmost derivation of `x`, by best-first search over (position, stack).
pub fn viterbi(g: &Grammar, x: &[usize], cfg: &OracleConfig) -> Result<Option<(Vec<usize>, f64)>, OracleError> {
    let my = min_yield(g);
    let mut nodes: Vec<Node> = Vec::new();
    let mut best: HashMap<(usize, Vec<Sym>), f64> = HashMap::new();
    let mut heap = BinaryHeap::new();
    let root = (0usize, vec![Sym::N(g.start() as u32)]);
    best.insert(root.clone(), 1.0);
    nodes.push((root.0, root.1, None));
    heap.push(Candidate { prob: 1.0, id: 0 });
    let mut pops = 0usize;
    while let Some(Candidate { prob, id }) = heap.pop() {
        let (pos, stack) = (nodes[id].0, nodes[id].1.clone());
        if best.get(&(pos, stack.clone())).is_some_and(|&b| b > prob) {
            continue;
        }
        pops += 1;
        if pops > cfg.max_expansions {
            return Err(OracleError::TooManyExpansions { cap: cfg.max_expansions, residual: prob });
        }
        let mut s = stack.clone();
        match s.pop() {
            None if pos == x.len() => {
                let mut rules = Vec::new();
                let mut cur = id;
                while let Some((parent, rule)) = nodes[cur].2 {
                    if let Some(r) = rule {
                        rules.push(r);
                    }
                    cur = parent;
                }
                rules.reverse();
                return Ok(Some((rules, prob)));
            }
            None => {}
            Some(Sym::T(a)) => {
                if pos < x.len() && x[pos] == a as usize {
                    relax(&mut nodes, &mut best, &mut heap, id, None, pos + 1, s, prob, &my, x.len());
                }
            }
            Some(Sym::N(y)) => {
                for &r in g.productions_of(y as usize) {
                    let p = g.production(r);
                    let mut ns = s.clone();
                    ns.extend(p.rhs.iter().rev());
                    relax(&mut nodes, &mut best, &mut heap, id, Some(r), pos, ns, prob * p.prob, &my, x.len());
                }
            }
        }
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn relax(
    nodes: &mut Vec<Node>,
    best: &mut HashMap<(usize, Vec<Sym>), f64>,
    heap: &mut BinaryHeap<Candidate>,
    parent: usize,
    rule: Option<usize>,
    pos: usize,
    stack: Vec<Sym>,
    prob: f64,
    my: &[usize],
    len: usize,
) {
    if prob <= 0.0 || pos.saturating_add(stack_min_yield(my, &stack)) > len {
        return;
    }
    let key = (pos, stack);
    if best.get(&key).is_some_and(|&b| b >= prob) {
        return;
    }
    best.insert(key.clone(), prob);
    nodes.push((key.0, key.1, Some((parent, rule))));
    heap.push(Candidate { prob, id: nodes.len() - 1 });
}

/// Rebuild a tree from a leftmost derivation.
pub fn derivation_tree(g: &Grammar, rules: &[usize]) -> Option<ParseTree> {
    fn build(g: &Grammar, rules: &[usize], next: &mut usize) -> Option<ParseTree> {
        let r = *rules.get(*next)?;
        *next += 1;
        let p = g.production(r);
        let mut children = Vec::new();
        for s in &p.rhs {
            children.push(match *s {
                Sym::T(a) => ParseTree::Leaf(g.terminal_name(a as usize).to_string()),
                Sym::N(_) => build(g, rules, next)?,
            });
        }
        Some(ParseTree::Node { label: g.nonterminal_name(p.lhs).to_string(), children })
    }
    let mut next = 0;
    let t = build(g, rules, &mut next)?;
    (next == rules.len()).then_some(t)
}

/// Map token strings to terminal ids; `None` if any is not a terminal of `g`.
pub fn terminal_ids<S: AsRef<str>>(g: &Grammar, tokens: &[S]) -> Option<Vec<usize>> {
    tokens.iter().map(|t| g.terminal(t.as_ref())).collect()
}

/// Probability of a single string by constrained mass pushing over (position, stack).
pub fn string_prob(g: &Grammar, x: &[usize], cfg: &OracleConfig) -> Result<f64, OracleError> {
    let my = min_yield(g);
    let mut pending: HashMap<(usize, Vec<Sym>), f64> = HashMap::new();
    let mut queue = VecDeque::new();
    let root = (0usize, vec![Sym::N(g.start() as u32)]);
    pending.insert(root.clone(), 1.0);
    queue.push_back(root);
    let threshold = cfg.mass_tol * 1e-3;
    let mut total = 0.0;
    let mut expansions = 0usize;
    while let Some(key) = queue.pop_front() {
        let m = pending.insert(key.clone(), 0.0).unwrap_or(0.0);
        if m == 0.0 {
            continue;
        }
        expansions += 1;
        if expansions > cfg.max_expansions {
            return Err(OracleError::TooManyExpansions { cap: cfg.max_expansions, residual: pending.values().sum() });
        }
        let (pos, mut stack) = key;
        let mut next = Vec::new();
        match stack.pop() {
            None => {
                if pos == x.len() {
                    total += m;
                }
                continue;
            }
            Some(Sym::T(a)) => {
                if pos < x.len() && x[pos] == a as usize {
                    next.push((pos + 1, stack, m));
                }
            }
            Some(Sym::N(y)) => {
                for &r in g.productions_of(y as usize) {
                    let p = g.production(r);
                    let mut s = stack.clone();
                    s.extend(p.rhs.iter().rev());
                    next.push((pos, s, m * p.prob));
                }
            }
        }
        for (pos, s, mass) in next {
            if pos + stack_min_yield(&my, &s) > x.len() {
                continue;
            }
            let e = pending.entry((pos, s.clone())).or_insert(0.0);
            let was = *e;
            *e += mass;
            if was <= threshold && *e > threshold {
                queue.push_back((pos, s));
            }
        }
    }
    let residual: f64 = pending.values().sum();
    if residual > cfg.mass_tol {
        return Err(OracleError::Residual { residual, tol: cfg.mass_tol });
    }
    Ok(total)
}
