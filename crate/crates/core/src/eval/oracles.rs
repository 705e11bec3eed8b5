//! Deliberately naive reference implementations used as test oracles.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Node bound for [`brute_force_paths`].
pub const BRUTE_FORCE_MAX_NODES: usize = 12;

/// A path as `(nodes, relations, forward)`; `forward[j]` is false when hop
/// `j` walks edge `(nodes[j+1], r, nodes[j])` against its direction.
pub type PathKey = (Vec<usize>, Vec<usize>, Vec<bool>);

/// Every simple path of 1..=`l` hops starting in `start`, walking each
/// `(head, relation, tail)` edge in either direction.
pub fn brute_force_paths(num_nodes: usize, edges: &[(usize, usize, usize)], start: &[usize], l: usize) -> Result<BTreeSet<PathKey>> {
    if num_nodes > BRUTE_FORCE_MAX_NODES {
        return Err(Error::Validation(format!(
            "brute-force enumeration is limited to {BRUTE_FORCE_MAX_NODES} nodes, got {num_nodes}"
        )));
    }
    fn walk(edges: &[(usize, usize, usize)], l: usize, nodes: &mut Vec<usize>, rels: &mut Vec<usize>, fwd: &mut Vec<bool>, out: &mut BTreeSet<PathKey>) {
        if !rels.is_empty() {
            out.insert((nodes.clone(), rels.clone(), fwd.clone()));
        }
        if rels.len() == l {
            return;
        }
        let cur = *nodes.last().unwrap();
        for &(h, r, t) in edges {
            for (from, to, forward) in [(h, t, true), (t, h, false)] {
                if from == cur && !nodes.contains(&to) {
                    nodes.push(to);
                    rels.push(r);
                    fwd.push(forward);
                    walk(edges, l, nodes, rels, fwd, out);
                    nodes.pop();
                    rels.pop();
                    fwd.pop();
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    for &s in start {
        walk(edges, l, &mut vec![s], &mut Vec::new(), &mut Vec::new(), &mut out);
    }
    Ok(out)
}

/// Exact information quantities of a joint pmf `p[y][q][g]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiReport {
    pub i_y_g: f64,
    pub i_q_g: f64,
    pub h_q_given_y: f64,
    pub holds: bool,
}

fn plogp_ratio(p: f64, a: f64, b: f64) -> f64 {
    if p > 0.0 {
        p * (p / (a * b)).ln()
    } else {
        0.0
    }
}

/// Computes `I(y;G)`, `I(q;G)` and `H(q|y)` by direct summation (natural
/// log) and checks `|I(y;G) − I(q;G)| ≤ H(q|y) + 1e−9`.
///
/// With `markov` set, the table must factor as `p(y)·p(q|y)·p(G|q)`.
pub fn mi_inequality_oracle(p: &[Vec<Vec<f64>>], markov: bool) -> Result<MiReport> {
    let ny = p.len();
    let nq = p.first().map_or(0, Vec::len);
    let ng = p.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if ny == 0 || nq == 0 || ng == 0 || p.iter().any(|r| r.len() != nq || r.iter().any(|c| c.len() != ng)) {
        return Err(Error::Validation("joint table must be a non-empty rectangular 3-d array".into()));
    }
    let mut total = 0.0;
    for x in p.iter().flatten().flatten() {
        if !(*x >= 0.0) {
            return Err(Error::Validation(format!("negative or NaN probability {x}")));
        }
        total += x;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
    }

    let mut py = vec![0.0; ny];
    let mut pq = vec![0.0; nq];
    let mut pg = vec![0.0; ng];
    let mut pyq = vec![vec![0.0; nq]; ny];
    let mut pyg = vec![vec![0.0; ng]; ny];
    let mut pqg = vec![vec![0.0; ng]; nq];
    for y in 0..ny {
        for q in 0..nq {
            for g in 0..ng {
                let v = p[y][q][g];
                py[y] += v;
                pq[q] += v;
                pg[g] += v;
                pyq[y][q] += v;
                pyg[y][g] += v;
                pqg[q][g] += v;
            }
        }
    }

    if markov {
        // p(y,q,g)·p(q) must equal p(y,q)·p(q,g).
        for y in 0..ny {
            for q in 0..nq {
                for g in 0..ng {
                    if (p[y][q][g] * pq[q] - pyq[y][q] * pqg[q][g]).abs() > 1e-9 {
                        return Err(Error::Validation(format!("table does not factor as y -> q -> G at ({y}, {q}, {g})")));
                    }
                }
            }
        }
    }

    let mut i_y_g = 0.0;
    for y in 0..ny {
        for g in 0..ng {
            i_y_g += plogp_ratio(pyg[y][g], py[y], pg[g]);
        }
    }
    let mut i_q_g = 0.0;
    for q in 0..nq {
        for g in 0..ng {
            i_q_g += plogp_ratio(pqg[q][g], pq[q], pg[g]);
        }
    }
    let mut h_q_given_y = 0.0;
    for y in 0..ny {
        for q in 0..nq {
            if pyq[y][q] > 0.0 {
                h_q_given_y -= pyq[y][q] * (pyq[y][q] / py[y]).ln();
            }
        }
    }
    let holds = (i_y_g - i_q_g).abs() <= h_q_given_y + 1e-9;
    Ok(MiReport {
        i_y_g,
        i_q_g,
        h_q_given_y,
        holds,
    })
}

/// Builds `p(y)·p(q|y)·p(G|q)` from row-stochastic factors.
pub fn markov_table(py: &[f64], q_given_y: &[Vec<f64>], g_given_q: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    py.iter()
        .enumerate()
        .map(|(y, &a)| {
            q_given_y[y]
                .iter()
                .enumerate()
                .map(|(q, &b)| g_given_q[q].iter().map(|&c| a * b * c).collect())
                .collect()
        })
        .collect()
}
