//! Epsilon-expansion probabilities and the left-corner / unit-production closures.

use crate::error::ClosureError;
use crate::grammar::{Grammar, Sym};

pub const TAU_EPS: f64 = 1e-15;
pub const EPS_ITERATION_CAP: usize = 1_000_000;
pub const TAU_INV: f64 = 1e-9;
pub const TAU_PIVOT: f64 = 1e-12;

/// `e[X]`: probability that X derives the empty string.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonProbs {
    pub e: Vec<f64>,
    pub iterations: usize,
}

impl EpsilonProbs {
    /// Least fixpoint of `e_X = sum p * prod e[rhs]`, iterated from `e_X = P(X -> eps)`.
    pub fn compute(g: &Grammar) -> Result<EpsilonProbs, ClosureError> {
        let nullable = g.nullable();
        let mut e = initial_epsilon(g);
        if !nullable.iter().any(|&b| b) {
            return Ok(EpsilonProbs { e, iterations: 0 });
        }
        let mut residual = f64::INFINITY;
        for it in 1..=EPS_ITERATION_CAP {
            let next = epsilon_step(g, &e);
            residual = next.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            e = next;
            if residual <= TAU_EPS {
                return Ok(EpsilonProbs { e, iterations: it });
            }
        }
        Err(ClosureError::EpsilonDiverged { iterations: EPS_ITERATION_CAP, residual })
    }

    pub fn nullable(&self, x: usize) -> bool {
        self.e[x] > 0.0
    }

    /// Product of `e` over a symbol sequence; zero if any symbol is a terminal.
    pub fn product(&self, syms: &[Sym]) -> f64 {
        syms.iter()
            .map(|s| match s {
                Sym::N(y) => self.e[*y as usize],
                Sym::T(_) => 0.0,
            })
            .product()
    }
}

/// Starting point of the fixpoint iteration: direct null-production probabilities.
pub fn initial_epsilon(g: &Grammar) -> Vec<f64> {
    let mut e = vec![0.0; g.num_nonterminals()];
    for p in g.productions() {
        if p.is_null() {
            e[p.lhs] += p.prob;
        }
    }
    e
}

/// One Jacobi step of the epsilon fixpoint system.
pub fn epsilon_step(g: &Grammar, e: &[f64]) -> Vec<f64> {
    let mut next = vec![0.0; e.len()];
    for p in g.productions() {
        let mut v = p.prob;
        for s in &p.rhs {
            match s {
                Sym::N(y) => v *= e[*y as usize],
                Sym::T(_) => {
                    v = 0.0;
                    break;
                }
            }
        }
        next[p.lhs] += v;
    }
    next
}

/// Max-probability derivations of the empty string, for Viterbi parsing.
#[derive(Clone, Debug)]
pub struct ViterbiEpsilon {
    pub v: Vec<f64>,
    pub best: Vec<Option<usize>>,
}

impl ViterbiEpsilon {
    pub fn compute(g: &Grammar) -> ViterbiEpsilon {
        let n = g.num_nonterminals();
        let mut v = vec![0.0; n];
        let mut best = vec![None; n];
        for _ in 0..=n + 1 {
            let mut changed = false;
            for (i, p) in g.productions().iter().enumerate() {
                let mut cand = p.prob;
                for s in &p.rhs {
                    cand *= match s {
                        Sym::N(y) => v[*y as usize],
                        Sym::T(_) => 0.0,
                    };
                }
                if cand > v[p.lhs] {
                    v[p.lhs] = cand;
                    best[p.lhs] = Some(i);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        ViterbiEpsilon { v, best }
    }
}

/// Sparse square matrix over nonterminals, stored as sorted rows of nonzeros.
#[derive(Clone, Debug, PartialEq)]
pub struct NtMatrix {
    dim: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl NtMatrix {
    pub fn zeros(dim: usize) -> NtMatrix {
        NtMatrix { dim, rows: vec![Vec::new(); dim] }
    }

    pub fn identity(dim: usize) -> NtMatrix {
        NtMatrix { dim, rows: (0..dim).map(|i| vec![(i, 1.0)]).collect() }
    }

    pub fn from_dense(d: &[Vec<f64>]) -> NtMatrix {
        let rows = d
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (j, *v)).collect())
            .collect();
        NtMatrix { dim: d.len(), rows }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.dim]; self.dim];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                d[i][j] = v;
            }
        }
        d
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.rows[i].binary_search_by_key(&j, |e| e.0) {
            Ok(k) => self.rows[i][k].1,
            Err(_) => 0.0,
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        match self.rows[i].binary_search_by_key(&j, |e| e.0) {
            Ok(k) => self.rows[i][k].1 += v,
            Err(k) => self.rows[i].insert(k, (j, v)),
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect()
    }

    /// Nonzeros of column `j` as `(row, value)` pairs.
    pub fn column(&self, j: usize) -> Vec<(usize, f64)> {
        (0..self.dim).filter_map(|i| Some((i, self.get(i, j))).filter(|e| e.1 != 0.0)).collect()
    }

    /// Power-iteration estimate of the spectral radius of a nonnegative matrix.
    pub fn spectral_radius(&self) -> f64 {
        if self.nnz() == 0 {
            return 0.0;
        }
        let mut x = vec![1.0; self.dim];
        let mut logs = Vec::new();
        for _ in 0..400 {
            let mut y = vec![0.0; self.dim];
            for (i, r) in self.rows.iter().enumerate() {
                y[i] = r.iter().map(|&(j, v)| v * x[j]).sum();
            }
            let norm = y.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if norm == 0.0 {
                return 0.0;
            }
            logs.push(norm.ln());
            x = y.into_iter().map(|v| v / norm).collect();
        }
        // Periodic matrices make the ratio oscillate; average over the tail.
        let tail = &logs[logs.len() - 120..];
        (tail.iter().sum::<f64>() / tail.len() as f64).exp()
    }

    pub fn max_abs_diff(&self, other: &NtMatrix) -> f64 {
        let (a, b) = (self.to_dense(), other.to_dense());
        a.iter().zip(&b).flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
    }
}

/// `P_L(X, Y)`: probability that Y is an immediate left corner of X, skipping nullable prefixes.
pub fn left_corner_matrix(g: &Grammar, eps: &EpsilonProbs) -> NtMatrix {
    let mut m = NtMatrix::zeros(g.num_nonterminals());
    for p in g.productions() {
        let mut weight = p.prob;
        for s in &p.rhs {
            match *s {
                Sym::N(y) => {
                    m.add(p.lhs, y as usize, weight);
                    weight *= eps.e[y as usize];
                }
                Sym::T(_) => break,
            }
            if weight == 0.0 {
                break;
            }
        }
    }
    m
}

/// `P_U(X, Y)`: probability that X rewrites to Y alone once nullable siblings vanish.
pub fn unit_matrix(g: &Grammar, eps: &EpsilonProbs) -> NtMatrix {
    let mut m = NtMatrix::zeros(g.num_nonterminals());
    for p in g.productions() {
        if p.rhs.is_empty() || p.rhs.iter().any(|s| matches!(s, Sym::T(_))) {
            continue;
        }
        for (i, s) in p.rhs.iter().enumerate() {
            let y = s.nonterminal().unwrap();
            let mut weight = p.prob;
            for (k, t) in p.rhs.iter().enumerate() {
                if k != i {
                    weight *= eps.e[t.nonterminal().unwrap()];
                }
            }
            if weight > 0.0 {
                m.add(p.lhs, y, weight);
            }
        }
    }
    m
}

/// Invert a dense matrix by Gaussian elimination with partial pivoting.
pub fn dense_inverse(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ClosureError> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        let pivot = m[piv][col];
        if pivot.abs() < TAU_PIVOT {
            return Err(ClosureError::Singular { pivot: pivot.abs() });
        }
        m.swap(col, piv);
        inv.swap(col, piv);
        let scale = 1.0 / m[col][col];
        for j in 0..n {
            m[col][j] *= scale;
            inv[col][j] *= scale;
        }
        for i in 0..n {
            if i == col || m[i][col] == 0.0 {
                continue;
            }
            let f = m[i][col];
            for j in 0..n {
                m[i][j] -= f * m[col][j];
                inv[i][j] -= f * inv[col][j];
            }
        }
    }
    Ok(inv)
}

/// `(I - m)^{-1}` by inverting the plain dense matrix; used to cross-check [`closure`].
pub fn full_closure(m: &NtMatrix) -> Result<NtMatrix, ClosureError> {
    let mut a = m.to_dense();
    for (i, row) in a.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = -*v;
        }
        row[i] += 1.0;
    }
    Ok(NtMatrix::from_dense(&dense_inverse(&a)?))
}

/// `R = (I - m)^{-1}`, inverting only the block of rows with nonzero entries.
///
/// With `A` the active rows and `R'` the inverse of `I - m` restricted to `A x A`,
/// `R = I + R' * m[A, :]`; inactive rows are identity rows.
pub fn closure(m: &NtMatrix) -> Result<NtMatrix, ClosureError> {
    let n = m.dim;
    let active: Vec<usize> = (0..n).filter(|&i| !m.rows[i].is_empty()).collect();
    let mut pos = vec![usize::MAX; n];
    for (k, &i) in active.iter().enumerate() {
        pos[i] = k;
    }
    let r = active.len();
    let mut block = vec![vec![0.0; r]; r];
    for (k, &i) in active.iter().enumerate() {
        block[k][k] = 1.0;
        for &(j, v) in &m.rows[i] {
            if pos[j] != usize::MAX {
                block[k][pos[j]] -= v;
            }
        }
    }
    let rinv = dense_inverse(&block)?;
    let mut out = NtMatrix::identity(n);
    for (k, &i) in active.iter().enumerate() {
        let mut acc = vec![0.0; n];
        for (l, &a) in active.iter().enumerate() {
            let w = rinv[k][l];
            if w == 0.0 {
                continue;
            }
            for &(j, v) in &m.rows[a] {
                acc[j] += w * v;
            }
        }
        for (j, v) in acc.into_iter().enumerate() {
            if v != 0.0 {
                out.add(i, j, v);
            }
        }
    }
    let residual = closure_residual(m, &out);
    let negative = out.rows.iter().flatten().any(|e| e.1 < -TAU_INV || !e.1.is_finite());
    if residual > TAU_INV || negative {
        return Err(ClosureError::Residual { residual });
    }
    // Clamp round-off negatives so the nonzero pattern stays meaningful.
    for row in &mut out.rows {
        row.retain(|e| e.1 > 0.0);
    }
    Ok(out)
}

/// Max-norm of `(I - m) R - I`, relative to the magnitude of R.
pub fn closure_residual(m: &NtMatrix, r: &NtMatrix) -> f64 {
    let n = m.dim;
    let rd = r.to_dense();
    let scale = rd.iter().flatten().fold(1.0f64, |a, b| a.max(b.abs()));
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut row = rd[i].clone();
        for &(k, v) in &m.rows[i] {
            for j in 0..n {
                row[j] -= v * rd[k][j];
            }
        }
        row[i] -= 1.0;
        worst = row.iter().fold(worst, |a, b| a.max(b.abs()));
    }
    worst / scale
}

/// Boolean matrix: `(X, a)` true iff terminal `a` can be the leftmost terminal derived from X.
#[derive(Clone, Debug, PartialEq)]
pub struct LeftCornerTerminals {
    rows: Vec<Vec<bool>>,
}

impl LeftCornerTerminals {
    pub fn get(&self, x: usize, a: usize) -> bool {
        self.rows[x][a]
    }

    pub fn row(&self, x: usize) -> &[bool] {
        &self.rows[x]
    }
}

/// `P_LT(X, a)`: some production of X has `a` right after a nullable prefix.
pub fn terminal_left_corners(g: &Grammar, eps: &EpsilonProbs) -> Vec<Vec<bool>> {
    let mut plt = vec![vec![false; g.num_terminals()]; g.num_nonterminals()];
    for p in g.productions() {
        for s in &p.rhs {
            match *s {
                Sym::T(a) => {
                    plt[p.lhs][a as usize] = true;
                    break;
                }
                Sym::N(y) if eps.nullable(y as usize) => continue,
                Sym::N(_) => break,
            }
        }
    }
    plt
}

/// `R_LT = R_L * P_LT` over the boolean semiring.
pub fn extended_left_corner(g: &Grammar, rl: &NtMatrix, eps: &EpsilonProbs) -> LeftCornerTerminals {
    let plt = terminal_left_corners(g, eps);
    let t = g.num_terminals();
    let rows = (0..g.num_nonterminals())
        .map(|x| {
            let mut row = vec![false; t];
            for &(y, v) in rl.row(x) {
                if v > 0.0 {
                    for (a, &b) in plt[y].iter().enumerate() {
                        row[a] |= b;
                    }
                }
            }
            row
        })
        .collect();
    LeftCornerTerminals { rows }
}

/// Everything the parser needs from a grammar, computed once and shared read-only.
#[derive(Clone, Debug)]
pub struct ClosureTables {
    pub eps: EpsilonProbs,
    pub veps: ViterbiEpsilon,
    pub pl: NtMatrix,
    pub rl: NtMatrix,
    pub pu: NtMatrix,
    pub ru: NtMatrix,
    pub rlt: LeftCornerTerminals,
    /// For each Y, the nonterminals Z with `R_U(Z, Y) > 0` and that value.
    pub ru_into: Vec<Vec<(usize, f64)>>,
}

impl ClosureTables {
    pub fn build(g: &Grammar) -> Result<ClosureTables, ClosureError> {
        let eps = EpsilonProbs::compute(g)?;
        let pl = left_corner_matrix(g, &eps);
        let rl = closure(&pl)?;
        let pu = unit_matrix(g, &eps);
        let ru = closure(&pu)?;
        let rlt = extended_left_corner(g, &rl, &eps);
        let mut ru_into = vec![Vec::new(); g.num_nonterminals()];
        for z in 0..g.num_nonterminals() {
            for &(y, v) in ru.row(z) {
                ru_into[y].push((z, v));
            }
        }
        Ok(ClosureTables { veps: ViterbiEpsilon::compute(g), eps, pl, rl, pu, ru, rlt, ru_into })
    }

    /// Text dump of e, P_L, R_L, P_U and R_U (nonzero entries only).
    pub fn dump(&self, g: &Grammar) -> String {
        let mut out = String::from("e:\n");
        for (x, v) in self.eps.e.iter().enumerate() {
            out.push_str(&format!("  {} {}\n", g.nonterminal_name(x), crate::fmt_prob(*v)));
        }
        for (name, m) in [("P_L", &self.pl), ("R_L", &self.rl), ("P_U", &self.pu), ("R_U", &self.ru)] {
            out.push_str(&format!("{}:\n", name));
            for x in 0..m.dim() {
                for &(y, v) in m.row(x) {
                    out.push_str(&format!(
                        "  {} {} {}\n",
                        g.nonterminal_name(x),
                        g.nonterminal_name(y),
                        crate::fmt_prob(v)
                    ));
                }
            }
        }
        out
    }
}
