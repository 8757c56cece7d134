//! Per-session item-transition graph with degree-normalised adjacency.

use std::collections::HashMap;
use std::fmt::Write;

use awgnn_tensor::Matrix;

/// Directed multigraph of one session, collapsed to weighted adjacency.
///
/// `a_out[u][v]` is the share of `u`'s outgoing transitions that go to `v`;
/// `a_in[u][v]` is the share of `u`'s incoming transitions that come from `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionGraph {
    /// Distinct catalog indices in order of first occurrence.
    pub nodes: Vec<usize>,
    /// For each sequence position, the node it refers to.
    pub alias: Vec<usize>,
    pub a_out: Matrix,
    pub a_in: Matrix,
}

impl SessionGraph {
    /// Builds the graph of `items` (catalog indices). Consecutive repeats
    /// form self-loops; repeated transitions accumulate before normalising.
    pub fn build(items: &[usize]) -> Self {
        let mut nodes = Vec::new();
        let mut position: HashMap<usize, usize> = HashMap::new();
        let alias: Vec<usize> = items
            .iter()
            .map(|&item| {
                *position.entry(item).or_insert_with(|| {
                    nodes.push(item);
                    nodes.len() - 1
                })
            })
            .collect();

        let m = nodes.len();
        let mut counts = Matrix::zeros(m, m);
        for w in alias.windows(2) {
            let (u, v) = (w[0], w[1]);
            counts.set(u, v, counts.get(u, v) + 1.0);
        }
        let a_out = row_normalise(&counts);
        let a_in = row_normalise(&counts.transpose());
        Self {
            nodes,
            alias,
            a_out,
            a_in,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.alias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alias.is_empty()
    }

    /// Reconstructs the original sequence from `nodes` and `alias`.
    pub fn sequence(&self) -> Vec<usize> {
        self.alias.iter().map(|&a| self.nodes[a]).collect()
    }

    /// `src dst out_weight in_weight` per edge, for debugging.
    pub fn to_edge_list(&self, label: impl Fn(usize) -> String) -> String {
        let mut out = String::new();
        for u in 0..self.node_count() {
            for v in 0..self.node_count() {
                let w = self.a_out.get(u, v);
                if w > 0.0 {
                    let _ = writeln!(
                        out,
                        "{} {} {:.6} {:.6}",
                        label(self.nodes[u]),
                        label(self.nodes[v]),
                        w,
                        self.a_in.get(v, u)
                    );
                }
            }
        }
        out
    }
}

fn row_normalise(counts: &Matrix) -> Matrix {
    let mut out = counts.clone();
    for r in 0..out.rows() {
        let total: f64 = out.row(r).iter().sum();
        if total > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= total);
        }
    }
    out
}
