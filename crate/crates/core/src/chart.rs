//! Earley state sets with accumulate-on-insert semantics and the completion queue.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write;

use indexmap::IndexMap;

use crate::grammar::{Grammar, Sym};

/// The rule part of a state key.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DottedRule {
    /// The dummy start state `-> . S`.
    Start {
        dot: u8,
    },
    /// A robust-parsing seed `-> . X`.
    Seed {
        nt: u32,
        dot: u8,
    },
    /// A wildcard state `-> λ . ?`; `seen` holds the nonterminals of λ.
    Wildcard {
        seen: Vec<u32>,
    },
    Prod {
        prod: u32,
        dot: u16,
    },
}

impl DottedRule {
    pub fn is_dummy(&self) -> bool {
        !matches!(self, DottedRule::Prod { .. })
    }

    pub fn dot(&self) -> usize {
        match self {
            DottedRule::Start { dot } | DottedRule::Seed { dot, .. } => *dot as usize,
            DottedRule::Wildcard { seen } => seen.len(),
            DottedRule::Prod { dot, .. } => *dot as usize,
        }
    }

    /// The same rule with the dot moved one symbol right.
    pub fn advance(&self) -> DottedRule {
        match self {
            DottedRule::Start { dot } => DottedRule::Start { dot: dot + 1 },
            DottedRule::Seed { nt, dot } => DottedRule::Seed { nt: *nt, dot: dot + 1 },
            DottedRule::Prod { prod, dot } => DottedRule::Prod { prod: *prod, dot: dot + 1 },
            DottedRule::Wildcard { .. } => panic!("wildcard states advance by completion only"),
        }
    }

    /// Right-hand side symbols (the wildcard itself is not a symbol).
    pub fn rhs<'g>(&self, g: &'g Grammar) -> std::borrow::Cow<'g, [Sym]> {
        use std::borrow::Cow;
        match self {
            DottedRule::Start { .. } => Cow::Owned(vec![Sym::N(g.start() as u32)]),
            DottedRule::Seed { nt, .. } => Cow::Owned(vec![Sym::N(*nt)]),
            DottedRule::Wildcard { seen } => Cow::Owned(seen.iter().map(|&x| Sym::N(x)).collect()),
            DottedRule::Prod { prod, .. } => Cow::Borrowed(&g.production(*prod as usize).rhs),
        }
    }

    pub fn next_symbol(&self, g: &Grammar) -> Option<Sym> {
        match self {
            DottedRule::Wildcard { .. } => None,
            _ => self.rhs(g).get(self.dot()).copied(),
        }
    }

    pub fn is_complete(&self, g: &Grammar) -> bool {
        match self {
            DottedRule::Wildcard { .. } => false,
            _ => self.dot() == self.rhs(g).len(),
        }
    }

    pub fn lhs(&self, g: &Grammar) -> Option<usize> {
        match self {
            DottedRule::Prod { prod, .. } => Some(g.production(*prod as usize).lhs),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub rule: DottedRule,
    pub start: u32,
}

/// Position and index of a state in the chart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateRef {
    pub pos: u32,
    pub idx: u32,
}

/// How a state was first created.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Initial,
    Seed,
    Predicted,
    Scanned,
    Completed,
    /// Dot moved over a nullable nonterminal.
    Skipped,
    Wildcard,
}

/// A recorded forward transition into a state; the backward pass replays these.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Edge {
    Scan {
        pred: StateRef,
    },
    /// `weight` is the epsilon probability of the skipped nonterminal `sym`.
    Skip {
        pred: StateRef,
        sym: u32,
        weight: f64,
    },
    /// `weight` is `R_U(z, lhs(child))`.
    Complete {
        pred: StateRef,
        child: StateRef,
        z: u32,
        weight: f64,
    },
}

/// The predecessor pair that produced a state's current Viterbi value.
#[derive(Clone, Debug, PartialEq)]
pub enum ViterbiLink {
    Scan {
        pred: StateRef,
    },
    Skip {
        pred: StateRef,
        sym: u32,
    },
    Complete {
        pred: StateRef,
        child: StateRef,
    },
    /// Wildcard extension: previous wildcard state and the completed seed.
    Wildcard {
        pred: StateRef,
        child: StateRef,
    },
}

#[derive(Clone, Debug)]
pub struct EarleyState {
    pub key: StateKey,
    pub next: Option<Sym>,
    pub complete: bool,
    pub alpha: f64,
    /// Inner mass whose only nonempty constituent is a single nonterminal (already covered by
    /// the unit closure, so it is never propagated by completion).
    pub gamma_single: f64,
    pub gamma_rest: f64,
    pub viterbi: f64,
    pub viterbi_link: Option<ViterbiLink>,
    pub origin: Origin,
    pub edges: Vec<Edge>,
    pub pruned: bool,
    pub(crate) queued: bool,
}

impl EarleyState {
    pub fn gamma(&self) -> f64 {
        self.gamma_single + self.gamma_rest
    }

    pub fn start(&self) -> usize {
        self.key.start as usize
    }
}

/// One Earley state set.
#[derive(Clone, Debug)]
pub struct StateSet {
    pub position: usize,
    states: IndexMap<StateKey, EarleyState>,
    pub scanned_alpha_sum: f64,
    waiting_nt: Vec<Vec<u32>>,
    waiting_t: Vec<Vec<u32>>,
}

impl StateSet {
    pub fn new(position: usize, nonterminals: usize, terminals: usize) -> StateSet {
        StateSet {
            position,
            states: IndexMap::new(),
            scanned_alpha_sum: 0.0,
            waiting_nt: vec![Vec::new(); nonterminals],
            waiting_t: vec![Vec::new(); terminals],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &EarleyState> {
        self.states.values()
    }

    pub fn live_count(&self) -> usize {
        self.states.values().filter(|s| !s.pruned).count()
    }

    pub fn get(&self, idx: usize) -> &EarleyState {
        &self.states[idx]
    }

    pub(crate) fn get_mut(&mut self, idx: usize) -> &mut EarleyState {
        &mut self.states[idx]
    }

    pub fn find(&self, key: &StateKey) -> Option<usize> {
        self.states.get_index_of(key)
    }

    pub fn lookup(&self, key: &StateKey) -> Option<&EarleyState> {
        self.states.get(key)
    }

    /// Indices of states with nonterminal `x` right after the dot.
    pub fn waiting_for(&self, x: usize) -> &[u32] {
        &self.waiting_nt[x]
    }

    /// Indices of states with terminal `a` right after the dot.
    pub fn waiting_for_terminal(&self, a: usize) -> &[u32] {
        self.waiting_t.get(a).map_or(&[], |v| v.as_slice())
    }

    /// Find or create the state for `key`; returns its index and whether it was new.
    pub fn entry(&mut self, key: StateKey, next: Option<Sym>, complete: bool, origin: Origin) -> (usize, bool) {
        if let Some(i) = self.states.get_index_of(&key) {
            return (i, false);
        }
        let idx = self.states.len();
        match next {
            Some(Sym::N(x)) => self.waiting_nt[x as usize].push(idx as u32),
            Some(Sym::T(a)) => self.waiting_t[a as usize].push(idx as u32),
            None => {}
        }
        self.states.insert(
            key.clone(),
            EarleyState {
                key,
                next,
                complete,
                alpha: 0.0,
                gamma_single: 0.0,
                gamma_rest: 0.0,
                viterbi: 0.0,
                viterbi_link: None,
                origin,
                edges: Vec::new(),
                pruned: false,
                queued: false,
            },
        );
        (idx, true)
    }

    /// Add probability mass to a state, creating it if needed. Alpha and gamma add up;
    /// the Viterbi value takes the maximum and its link changes only on strict improvement.
    #[allow(clippy::too_many_arguments)]
    pub fn insert_or_accumulate(
        &mut self,
        key: StateKey,
        next: Option<Sym>,
        complete: bool,
        d_alpha: f64,
        d_gamma: f64,
        d_viterbi: f64,
        link: Option<ViterbiLink>,
    ) -> (usize, bool) {
        let (idx, new) = self.entry(key, next, complete, Origin::Completed);
        let s = &mut self.states[idx];
        s.alpha += d_alpha;
        s.gamma_rest += d_gamma;
        if d_viterbi > s.viterbi {
            s.viterbi = d_viterbi;
            s.viterbi_link = link;
        }
        (idx, new)
    }

    /// Raise the Viterbi value if `v` is strictly better; returns whether it changed.
    pub fn improve_viterbi(&mut self, idx: usize, v: f64, link: Option<ViterbiLink>) -> bool {
        let s = &mut self.states[idx];
        if v > s.viterbi {
            s.viterbi = v;
            s.viterbi_link = link;
            true
        } else {
            false
        }
    }
}

/// Complete states awaiting completion, drained highest start index first, FIFO within one.
#[derive(Clone, Debug, Default)]
pub struct CompletionQueue {
    buckets: BTreeMap<u32, VecDeque<u32>>,
}

impl CompletionQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, start: usize, idx: usize) {
        self.buckets.entry(start as u32).or_default().push_back(idx as u32);
    }

    pub fn pop(&mut self) -> Option<usize> {
        let mut entry = self.buckets.last_entry()?;
        let idx = entry.get_mut().pop_front().expect("buckets are never left empty");
        if entry.get().is_empty() {
            entry.remove();
        }
        Some(idx as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Visit every queued state; `visit` may push more.
    pub fn drain(&mut self, mut visit: impl FnMut(&mut CompletionQueue, usize)) {
        while let Some(idx) = self.pop() {
            visit(self, idx);
        }
    }
}

/// The sequence of state sets for one input.
#[derive(Clone, Debug)]
pub struct Chart {
    pub sets: Vec<StateSet>,
    pub input: Vec<String>,
}

impl Chart {
    pub fn state(&self, r: StateRef) -> &EarleyState {
        self.sets[r.pos as usize].get(r.idx as usize)
    }

    pub fn total_states(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }

    pub fn predicted_states(&self) -> usize {
        self.sets.iter().flat_map(|s| s.states()).filter(|s| s.origin == Origin::Predicted).count()
    }

    /// `LHS -> λ . μ` for a state key.
    pub fn describe(g: &Grammar, key: &StateKey) -> String {
        let rhs = key.rule.rhs(g);
        let dot = key.rule.dot();
        let mut s = match key.rule.lhs(g) {
            Some(x) => format!("{} ->", g.nonterminal_name(x)),
            None => "->".to_string(),
        };
        for (i, sym) in rhs.iter().enumerate() {
            if i == dot {
                s.push_str(" .");
            }
            s.push(' ');
            s.push_str(g.symbol_name(*sym));
        }
        if dot == rhs.len() {
            s.push_str(" .");
        }
        if matches!(key.rule, DottedRule::Wildcard { .. }) {
            s.push_str(" ?");
        }
        s
    }

    /// Debug dump, one line per live state, ordered by position, start and rule.
    pub fn dump(&self, g: &Grammar) -> String {
        let mut out = String::new();
        for set in &self.sets {
            let mut states: Vec<&EarleyState> = set.states().filter(|s| !s.pruned).collect();
            states.sort_by(|a, b| a.key.start.cmp(&b.key.start).then_with(|| a.key.rule.cmp(&b.key.rule)));
            for s in states {
                let _ = writeln!(
                    out,
                    "{}: {} {}  alpha={} gamma={} v={}",
                    set.position,
                    s.key.start,
                    Chart::describe(g, &s.key),
                    crate::fmt_prob(s.alpha),
                    crate::fmt_prob(s.gamma()),
                    crate::fmt_prob(s.viterbi)
                );
            }
        }
        out
    }
}
