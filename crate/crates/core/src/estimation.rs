//! Outer probabilities, expected production counts and EM re-estimation.
//!
//! The backward pass is the exact adjoint of the forward inner-probability computation: it
//! replays the recorded edges of every state in reverse topological order. Production
//! probabilities also enter through the unit closure `R_U` and through the epsilon
//! probabilities, and those paths are differentiated explicitly.

use std::collections::VecDeque;

use crate::chart::{DottedRule, Edge, Origin, StateRef};
use crate::closures::{dense_inverse, ClosureTables};
use crate::error::{EstimationError, GrammarError};
use crate::grammar::{Grammar, Production, Sym};
use crate::parser::{parse_bracketed, ParseOptions, ParseResult};

/// Outer weights of every state plus the sensitivities of the sentence probability to the
/// unit closure and to the epsilon probabilities.
#[derive(Clone, Debug)]
pub struct Outside {
    /// Weight of a state's single-constituent inner mass.
    pub beta_single: Vec<Vec<f64>>,
    /// Weight of the remaining inner mass; for predicted and scanned states this is the
    /// classical outer probability.
    pub beta_rest: Vec<Vec<f64>>,
    /// `dP / dR_U(Z, Y)`, dense.
    pub grad_ru: Vec<Vec<f64>>,
    /// `dP / de_X` through dot skips and the unit matrix.
    pub grad_eps: Vec<f64>,
}

impl Outside {
    pub fn beta(&self, r: StateRef) -> f64 {
        self.beta_rest[r.pos as usize][r.idx as usize]
    }
}

/// Backward pass over the chart of an accepted parse.
pub fn backward_pass(g: &Grammar, tables: &ClosureTables, res: &ParseResult) -> Result<Outside, EstimationError> {
    let n = g.num_nonterminals();
    let chart = &res.chart;
    let mut out = Outside {
        beta_single: chart.sets.iter().map(|s| vec![0.0; s.len()]).collect(),
        beta_rest: chart.sets.iter().map(|s| vec![0.0; s.len()]).collect(),
        grad_ru: vec![vec![0.0; n]; n],
        grad_eps: vec![0.0; n],
    };
    if !res.accepted {
        return Err(EstimationError::NotAccepted);
    }
    if res.sentence_prob <= 0.0 {
        return Err(EstimationError::ZeroProbability);
    }
    let Some(fin) = res.final_state() else {
        // Empty input: P = e_S.
        out.grad_eps[g.start()] = 1.0;
        add_unit_eps_terms(g, tables, &mut out);
        return Ok(out);
    };
    // Reverse topological order over (state, part) nodes; whole states can form cycles through
    // single-constituent mass, their parts cannot. `pending` counts the edges a node still
    // waits on, indexed `[pos][2 * idx + part]` with part 0 = single, 1 = rest.
    let mut pending: Vec<Vec<u32>> = chart.sets.iter().map(|s| vec![0; 2 * s.len()]).collect();
    let node = |r: StateRef, part: usize| (r.pos as usize, 2 * r.idx as usize + part);
    for set in &chart.sets {
        for s in set.states() {
            for e in &s.edges {
                let (pred, child) = match *e {
                    Edge::Scan { pred } | Edge::Skip { pred, .. } => (pred, None),
                    Edge::Complete { pred, child, .. } => (pred, Some(child)),
                };
                for part in 0..2 {
                    let (p, i) = node(pred, part);
                    pending[p][i] += 1;
                }
                if let Some(c) = child {
                    let (p, i) = node(c, 1);
                    pending[p][i] += 1;
                }
            }
        }
    }
    out.beta_single[fin.pos as usize][fin.idx as usize] = 1.0;
    out.beta_rest[fin.pos as usize][fin.idx as usize] = 1.0;
    let mut ready: VecDeque<(StateRef, usize)> = VecDeque::new();
    for (p, row) in pending.iter().enumerate() {
        for (i, &c) in row.iter().enumerate() {
            if c == 0 {
                ready.push_back((StateRef { pos: p as u32, idx: (i / 2) as u32 }, i % 2));
            }
        }
    }
    let mut release = |r: StateRef, part: usize, ready: &mut VecDeque<(StateRef, usize)>| {
        let (p, i) = node(r, part);
        pending[p][i] -= 1;
        if pending[p][i] == 0 {
            ready.push_back((r, part));
        }
    };
    while let Some((r, part)) = ready.pop_front() {
        let (rp, ri) = (r.pos as usize, r.idx as usize);
        let b = if part == 0 { out.beta_single[rp][ri] } else { out.beta_rest[rp][ri] };
        for e in &chart.state(r).edges {
            match *e {
                Edge::Scan { pred } => {
                    // Scanning moves all inner mass into the rest part.
                    if part == 1 {
                        out.beta_single[pred.pos as usize][pred.idx as usize] += b;
                        out.beta_rest[pred.pos as usize][pred.idx as usize] += b;
                        release(pred, 0, &mut ready);
                        release(pred, 1, &mut ready);
                    }
                }
                Edge::Skip { pred, sym, weight } => {
                    let ps = chart.state(pred);
                    if part == 0 {
                        out.beta_single[pred.pos as usize][pred.idx as usize] += weight * b;
                        out.grad_eps[sym as usize] += ps.gamma_single * b;
                    } else {
                        out.beta_rest[pred.pos as usize][pred.idx as usize] += weight * b;
                        out.grad_eps[sym as usize] += ps.gamma_rest * b;
                    }
                    release(pred, part, &mut ready);
                }
                Edge::Complete { pred, child, z, weight } => {
                    let ps = chart.state(pred);
                    let category = if ps.start() == pred.pos as usize { 0 } else { 1 };
                    if part == category {
                        let cs = chart.state(child);
                        let up = b * cs.gamma_rest * weight;
                        out.beta_single[pred.pos as usize][pred.idx as usize] += up;
                        out.beta_rest[pred.pos as usize][pred.idx as usize] += up;
                        out.beta_rest[child.pos as usize][child.idx as usize] += b * ps.gamma() * weight;
                        let y = cs.key.rule.lhs(g).expect("completed children are productions");
                        out.grad_ru[z as usize][y] += b * ps.gamma() * cs.gamma_rest;
                        release(pred, 0, &mut ready);
                        release(pred, 1, &mut ready);
                        release(child, 1, &mut ready);
                    }
                }
            }
        }
    }
    add_unit_eps_terms(g, tables, &mut out);
    Ok(out)
}

/// `H(A, B) = sum_{Z,Y} G(Z,Y) R_U(Z,A) R_U(B,Y)`: sensitivity to a one-step unit entry.
fn unit_sensitivity(tables: &ClosureTables, grad_ru: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = grad_ru.len();
    // T(Z, B) = sum_Y G(Z,Y) R_U(B,Y)
    let mut t = vec![vec![0.0; n]; n];
    for (z, row) in grad_ru.iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (b, tz) in t[z].iter_mut().enumerate() {
            *tz = tables.ru.row(b).iter().map(|&(y, r)| row[y] * r).sum();
        }
    }
    let mut h = vec![vec![0.0; n]; n];
    for (z, tz) in t.iter().enumerate() {
        for &(a, r) in tables.ru.row(z) {
            for (b, &v) in tz.iter().enumerate() {
                h[a][b] += r * v;
            }
        }
    }
    h
}

/// Epsilon sensitivities contributed through the nullable-padded unit matrix.
fn add_unit_eps_terms(g: &Grammar, tables: &ClosureTables, out: &mut Outside) {
    let h = unit_sensitivity(tables, &out.grad_ru);
    let e = &tables.eps.e;
    for p in g.productions() {
        for (i, s) in p.rhs.iter().enumerate() {
            let Sym::N(b) = *s else { continue };
            let hv = h[p.lhs][b as usize];
            if hv == 0.0 {
                continue;
            }
            for (j, t) in p.rhs.iter().enumerate() {
                if j == i {
                    continue;
                }
                let Sym::N(x) = *t else { continue };
                let others: f64 = p
                    .rhs
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i && k != j)
                    .map(|(_, s)| match *s {
                        Sym::N(y) => e[y as usize],
                        Sym::T(_) => 0.0,
                    })
                    .product();
                out.grad_eps[x as usize] += hv * p.prob * others;
            }
        }
    }
}

/// Expected number of uses of each production in derivations of the parsed sentence.
pub fn expected_counts(g: &Grammar, tables: &ClosureTables, res: &ParseResult) -> Result<Vec<f64>, EstimationError> {
    let out = backward_pass(g, tables, res)?;
    expected_counts_from(g, tables, res, &out)
}

pub fn expected_counts_from(
    g: &Grammar,
    tables: &ClosureTables,
    res: &ParseResult,
    out: &Outside,
) -> Result<Vec<f64>, EstimationError> {
    let n = g.num_nonterminals();
    let e = &tables.eps.e;
    let mut grad = vec![0.0; g.productions().len()];
    // Direct use through predicted states.
    for (p, set) in res.chart.sets.iter().enumerate() {
        for (i, s) in set.states().enumerate() {
            if s.origin == Origin::Predicted {
                if let DottedRule::Prod { prod, dot: 0 } = s.key.rule {
                    grad[prod as usize] += out.beta_rest[p][i];
                }
            }
        }
    }
    // Through the unit closure.
    let h = unit_sensitivity(tables, &out.grad_ru);
    for (r, pr) in g.productions().iter().enumerate() {
        for (i, s) in pr.rhs.iter().enumerate() {
            let Sym::N(b) = *s else { continue };
            let hv = h[pr.lhs][b as usize];
            if hv == 0.0 {
                continue;
            }
            let others: f64 = pr
                .rhs
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, s)| match *s {
                    Sym::N(y) => e[y as usize],
                    Sym::T(_) => 0.0,
                })
                .product();
            grad[r] += hv * others;
        }
    }
    // Through the epsilon fixpoint: solve (I - J)^T lambda = grad_eps on the nullable set.
    let nullable: Vec<usize> = (0..n).filter(|&x| e[x] > 0.0).collect();
    if !nullable.is_empty() && out.grad_eps.iter().any(|&v| v != 0.0) {
        let pos: Vec<Option<usize>> = {
            let mut v = vec![None; n];
            for (k, &x) in nullable.iter().enumerate() {
                v[x] = Some(k);
            }
            v
        };
        let m = nullable.len();
        let mut a = vec![vec![0.0; m]; m];
        for (k, row) in a.iter_mut().enumerate() {
            row[k] = 1.0;
        }
        for pr in g.productions() {
            let Some(xi) = pos[pr.lhs] else { continue };
            for (j, s) in pr.rhs.iter().enumerate() {
                let Sym::N(y) = *s else { continue };
                let Some(yi) = pos[y as usize] else { continue };
                let d: f64 = pr
                    .rhs
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != j)
                    .map(|(_, s)| match *s {
                        Sym::N(w) => e[w as usize],
                        Sym::T(_) => 0.0,
                    })
                    .product();
                // Transposed system: row yi, column xi.
                a[yi][xi] -= pr.prob * d;
            }
        }
        let inv = dense_inverse(&a).map_err(|_| EstimationError::Singular)?;
        let rhs: Vec<f64> = nullable.iter().map(|&x| out.grad_eps[x]).collect();
        let lambda: Vec<f64> = inv.iter().map(|row| row.iter().zip(&rhs).map(|(a, b)| a * b).sum()).collect();
        for (r, pr) in g.productions().iter().enumerate() {
            if let Some(xi) = pos[pr.lhs] {
                grad[r] += lambda[xi] * tables.eps.product(&pr.rhs);
            }
        }
    }
    let total = res.sentence_prob;
    Ok(grad.iter().zip(g.productions()).map(|(d, pr)| pr.prob * d / total).collect())
}

/// Result of one EM iteration.
#[derive(Clone, Debug)]
pub struct EmStep {
    pub grammar: Grammar,
    /// Corpus log-likelihood under the input grammar, over the sentences that parsed.
    pub log_likelihood: f64,
    pub counts: Vec<f64>,
    /// Indices of sentences left out because they could not be parsed.
    pub skipped: Vec<usize>,
}

/// Summed expected counts and log-likelihood over a corpus.
#[derive(Clone, Debug)]
pub struct CorpusCounts {
    pub counts: Vec<f64>,
    pub log_likelihood: f64,
    pub skipped: Vec<usize>,
}

fn parse_sentence<S: AsRef<str>>(
    g: &Grammar,
    tables: &ClosureTables,
    sentence: &[S],
    index: usize,
) -> Result<ParseResult, EstimationError> {
    let opts = ParseOptions { viterbi: false, ..Default::default() };
    let res = parse_bracketed(g, tables, sentence, &opts)?;
    if !res.accepted || res.sentence_prob <= 0.0 {
        return Err(EstimationError::Unparseable { index });
    }
    Ok(res)
}

/// E-step over a corpus. Sentences may carry bracket markers. Unparseable sentences are skipped
/// with a warning unless `strict`; a corpus with no parseable sentence is an error.
pub fn corpus_counts<S: AsRef<str>>(
    g: &Grammar,
    corpus: &[Vec<S>],
    strict: bool,
) -> Result<CorpusCounts, EstimationError> {
    let tables = ClosureTables::build(g).map_err(GrammarError::from)?;
    let mut out = CorpusCounts { counts: vec![0.0; g.productions().len()], log_likelihood: 0.0, skipped: Vec::new() };
    for (index, sentence) in corpus.iter().enumerate() {
        let res = match parse_sentence(g, &tables, sentence, index) {
            Ok(r) => r,
            Err(EstimationError::Unparseable { index }) if !strict => {
                log::warn!("skipping unparseable sentence {}", index + 1);
                out.skipped.push(index);
                continue;
            }
            Err(e) => return Err(e),
        };
        out.log_likelihood += res.sentence_prob.ln();
        let c = expected_counts(g, &tables, &res)?;
        out.counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    if !corpus.is_empty() && out.skipped.len() == corpus.len() {
        return Err(EstimationError::Unparseable { index: 0 });
    }
    Ok(out)
}

/// Corpus log-likelihood over the sentences that parse.
pub fn log_likelihood<S: AsRef<str>>(g: &Grammar, corpus: &[Vec<S>]) -> Result<f64, EstimationError> {
    let tables = ClosureTables::build(g).map_err(GrammarError::from)?;
    let mut ll = 0.0;
    for (index, sentence) in corpus.iter().enumerate() {
        match parse_sentence(g, &tables, sentence, index) {
            Ok(res) => ll += res.sentence_prob.ln(),
            Err(EstimationError::Unparseable { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(ll)
}

/// One EM iteration: expected counts, then per-LHS normalization. A left-hand side with no
/// expected uses keeps its old probabilities.
pub fn em_step<S: AsRef<str>>(g: &Grammar, corpus: &[Vec<S>]) -> Result<EmStep, EstimationError> {
    em_step_with(g, corpus, false)
}

pub fn em_step_with<S: AsRef<str>>(g: &Grammar, corpus: &[Vec<S>], strict: bool) -> Result<EmStep, EstimationError> {
    let cc = corpus_counts(g, corpus, strict)?;
    let mut totals = vec![0.0; g.num_nonterminals()];
    for (c, p) in cc.counts.iter().zip(g.productions()) {
        totals[p.lhs] += c;
    }
    for (x, &t) in totals.iter().enumerate() {
        if t <= 0.0 && !g.productions_of(x).is_empty() {
            log::warn!("{} has no expected uses; keeping its probabilities", g.nonterminal_name(x));
        }
    }
    let probs: Vec<f64> = cc
        .counts
        .iter()
        .zip(g.productions())
        .map(|(c, p)| if totals[p.lhs] > 0.0 { c / totals[p.lhs] } else { p.prob })
        .collect();
    Ok(EmStep {
        grammar: g.with_probs(&probs),
        log_likelihood: cc.log_likelihood,
        counts: cc.counts,
        skipped: cc.skipped,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub max_iterations: usize,
    pub tol: f64,
    /// Abort on unparseable sentences instead of skipping them.
    pub strict: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { max_iterations: 50, tol: 1e-6, strict: false }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub grammar: Grammar,
    /// Log-likelihood before each iteration, then of the final grammar.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterate EM until the log-likelihood gain or the largest parameter change drops below `tol`.
pub fn train<S: AsRef<str>>(
    g: &Grammar,
    corpus: &[Vec<S>],
    opts: &TrainOptions,
) -> Result<TrainingReport, EstimationError> {
    train_with(g, corpus, opts, |_, _| {})
}

/// Like [`train`], calling `on_iteration(k, ll)` with the log-likelihood before iteration `k`.
pub fn train_with<S: AsRef<str>>(
    g: &Grammar,
    corpus: &[Vec<S>],
    opts: &TrainOptions,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<TrainingReport, EstimationError> {
    let mut cur = g.clone();
    let mut lls = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let step = em_step_with(&cur, corpus, opts.strict)?;
        on_iteration(iterations + 1, step.log_likelihood);
        lls.push(step.log_likelihood);
        iterations += 1;
        let delta = max_param_change(&cur, &step.grammar);
        let flat = lls.len() >= 2 && (lls[lls.len() - 1] - lls[lls.len() - 2]).abs() < opts.tol;
        cur = step.grammar;
        if delta < opts.tol || flat {
            converged = true;
            break;
        }
    }
    lls.push(log_likelihood(&cur, corpus)?);
    Ok(TrainingReport { grammar: cur, log_likelihoods: lls, iterations, converged })
}

/// Largest absolute change of a production probability; rules absent from one side count as 0.
fn max_param_change(a: &Grammar, b: &Grammar) -> f64 {
    let lookup = |g: &Grammar, p: &Production, from: &Grammar| -> f64 {
        let lhs = from.nonterminal_name(p.lhs);
        let rhs: Vec<&str> = p.rhs.iter().map(|s| from.symbol_name(*s)).collect();
        g.find(lhs, &rhs).map_or(0.0, |i| g.production(i).prob)
    };
    let ab = a.productions().iter().map(|p| (p.prob - lookup(b, p, a)).abs());
    let ba = b.productions().iter().map(|p| (p.prob - lookup(a, p, b)).abs());
    ab.chain(ba).fold(0.0, f64::max)
}
