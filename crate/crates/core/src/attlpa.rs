//! Attention-weighted label propagation.
//!
//! Runs the same aggregation as the encoder but over one-hot pseudo-labels:
//! per layer, `v_i = Σ_r β_i^r Σ_j â_ij y_j`, and the new label of `i` is the
//! argmax of `v_i` (ties to the smallest class id). No projections are applied
//! to labels. Layer `ℓ` uses the encoder's layer-`ℓ` attention.

use crate::encoder::AttentionSnapshot;
use crate::error::{Error, Result};
use crate::graph::{Adjacency, HinGraph};
use crate::lpa::PseudoLabels;
use crate::par;

/// Dense per-worker vote buffers with a touched list for cheap resets.
struct Votes {
    total: Vec<f64>,
    partial: Vec<f64>,
    touched: Vec<usize>,
    partial_touched: Vec<usize>,
}

impl Votes {
    fn new(k: usize) -> Self {
        Self {
            total: vec![0.0; k],
            partial: vec![0.0; k],
            touched: Vec::new(),
            partial_touched: Vec::new(),
        }
    }

    fn add_partial(&mut self, label: usize, w: f64) {
        if self.partial[label] == 0.0 && !self.partial_touched.contains(&label) {
            self.partial_touched.push(label);
        }
        self.partial[label] += w;
    }

    /// `total += beta · partial`, then clear `partial`.
    fn flush(&mut self, beta: f64) {
        for &c in &self.partial_touched {
            if !self.touched.contains(&c) {
                self.touched.push(c);
            }
            self.total[c] += beta * self.partial[c];
            self.partial[c] = 0.0;
        }
        self.partial_touched.clear();
    }

    /// Argmax of the dense vote vector; clears all state.
    fn take_argmax(&mut self) -> usize {
        let mut best = (0usize, 0.0f64);
        for &c in &self.touched {
            let v = self.total[c];
            if v > best.1 || (v == best.1 && c < best.0) {
                best = (c, v);
            }
            self.total[c] = 0.0;
        }
        self.touched.clear();
        best.0
    }
}

/// One propagation pass of `num_layers` layers.
pub fn propagate(
    snapshot: &AttentionSnapshot,
    graph: &HinGraph,
    labels: &PseudoLabels,
    num_layers: usize,
) -> Result<PseudoLabels> {
    if snapshot.num_layers() != num_layers {
        return Err(Error::size("attention snapshot layers", num_layers, snapshot.num_layers()));
    }
    if labels.len() != graph.num_objects() {
        return Err(Error::size("labels vs graph objects", graph.num_objects(), labels.len()));
    }
    let schema = graph.schema();
    for l in 0..num_layers {
        for (r, rel) in schema.relations().iter().enumerate() {
            if snapshot.relation(l, r).len() != graph.count(rel.source) {
                return Err(Error::size(
                    format!("β of relation `{}` at layer {l}", rel.name),
                    graph.count(rel.source),
                    snapshot.relation(l, r).len(),
                ));
            }
        }
    }
    let k = labels.k();
    let mut current = labels.as_slice().to_vec();
    for l in 0..num_layers {
        let prev = &current;
        let next = par::map_indices_with(
            graph.num_objects(),
            || Votes::new(k),
            |votes, global| {
                let (ty, local) = graph.localize(global);
                for &r in graph.relations_into(ty) {
                    let beta = snapshot.relation(l, r)[local];
                    if beta == 0.0 {
                        continue;
                    }
                    match graph.adjacency(r) {
                        Adjacency::Identity(_) => votes.add_partial(prev[global], 1.0),
                        Adjacency::Sparse { forward, .. } => {
                            let base = graph.offset(schema.relation(r).target);
                            let (cols, vals) = forward.row(local);
                            for (&j, &w) in cols.iter().zip(vals) {
                                votes.add_partial(prev[base + j], w);
                            }
                        }
                    }
                    votes.flush(beta);
                }
                votes.take_argmax()
            },
        );
        current = next;
    }
    PseudoLabels::new(current, k)
}

/// Fraction of objects whose label differs between two assignments.
pub fn label_churn(before: &PseudoLabels, after: &PseudoLabels) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::size("label sets", before.len(), after.len()));
    }
    if before.k() != after.k() {
        return Err(Error::size("label space K", before.k(), after.k()));
    }
    if before.is_empty() {
        return Ok(0.0);
    }
    let changed = before
        .as_slice()
        .iter()
        .zip(after.as_slice())
        .filter(|(a, b)| a != b)
        .count();
    Ok(changed as f64 / before.len() as f64)
}
