#![allow(dead_code)]

use pearley::oracle::{derivation_tree, Enumeration};
use pearley::{Grammar, ParseTree};

/// Every string over `t` terminals with length `1..=max_len`.
pub fn all_strings(t: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &layer {
            for a in 0..t {
                let mut v = s.clone();
                v.push(a);
                next.push(v);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

pub fn names<'g>(g: &'g Grammar, x: &[usize]) -> Vec<&'g str> {
    x.iter().map(|&a| g.terminal_name(a)).collect()
}

/// Spans `[start, end)` of all internal nodes of a tree.
pub fn spans(t: &ParseTree) -> Vec<(usize, usize)> {
    fn walk(t: &ParseTree, pos: &mut usize, out: &mut Vec<(usize, usize)>) {
        match t {
            ParseTree::Leaf(_) => *pos += 1,
            ParseTree::Node { children, .. } => {
                let s = *pos;
                for c in children {
                    walk(c, pos, out);
                }
                out.push((s, *pos));
            }
        }
    }
    let mut out = Vec::new();
    walk(t, &mut 0, &mut out);
    out
}

pub fn crosses((a, b): (usize, usize), (s, t): (usize, usize)) -> bool {
    (a < s && s < b && b < t) || (s < a && a < t && t < b)
}

/// Probability and number of derivations of `x` whose constituents cross none of `brackets`.
pub fn bracketed_oracle(g: &Grammar, e: &Enumeration, x: &[usize], brackets: &[(usize, usize)]) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    for d in e.matching(x) {
        let tree = derivation_tree(g, &d.rules).expect("valid leftmost derivation");
        let sp = spans(&tree);
        if sp.iter().all(|&c| brackets.iter().all(|&b| !crosses(c, b))) {
            total += d.prob;
            count += 1;
        }
    }
    (total, count)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Token list with brackets around the given spans.
pub fn bracketed(words: &[&str], spans: &[(usize, usize)]) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..=words.len() {
        let mut closing: Vec<&(usize, usize)> = spans.iter().filter(|s| s.1 == i).collect();
        closing.sort_by_key(|s| std::cmp::Reverse(s.0));
        out.extend(closing.iter().map(|_| ")".to_string()));
        let mut opening: Vec<&(usize, usize)> = spans.iter().filter(|s| s.0 == i).collect();
        opening.sort_by_key(|s| std::cmp::Reverse(s.1));
        out.extend(opening.iter().map(|_| "(".to_string()));
        if i < words.len() {
            out.push(words[i].to_string());
        }
    }
    out
}
