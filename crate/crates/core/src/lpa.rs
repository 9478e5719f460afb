//! Classic label propagation over the whole heterogeneous graph, used once to
//! produce the initial pseudo-labels and fix the label-space size `K`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Csr, HinGraph};

pub const DEFAULT_MAX_ITERS: usize = 100;

/// Hard cluster assignment over all objects in one shared class space.
///
/// `k` is fixed at creation; labels may lose all their members later without
/// shrinking it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    assignment: Vec<usize>,
    k: usize,
}

impl PseudoLabels {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("label space size K must be at least 1".into()));
        }
        if let Some((i, &l)) = assignment.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::InvalidArgument(format!("object {i} has label {l} >= K = {k}")));
        }
        Ok(Self { assignment, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn get(&self, object: usize) -> usize {
        self.assignment[object]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.assignment
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.assignment
    }

    /// Sparse `|V| × K` one-hot matrix.
    pub fn one_hot(&self) -> Csr {
        let n = self.assignment.len();
        Csr {
            nrows: n,
            ncols: self.k,
            row_ptr: (0..=n).collect(),
            cols: self.assignment.clone(),
            vals: vec![1.0; n],
        }
    }

    /// Number of labels that currently have at least one member.
    pub fn num_occupied(&self) -> usize {
        let mut seen = vec![false; self.k];
        for &l in &self.assignment {
            seen[l] = true;
        }
        seen.into_iter().filter(|&s| s).count()
    }
}

/// Result of [`lpa_init`].
#[derive(Debug, Clone, PartialEq)]
pub struct LpaOutcome {
    pub labels: PseudoLabels,
    /// Sweeps performed.
    pub iterations: usize,
    /// False when `max_iters` was hit while labels were still changing.
    pub converged: bool,
}

/// Label with the largest total weight; ties go to the smallest label id.
pub fn frequency_vote(neighbor_labels: &[(usize, f64)]) -> Result<usize> {
    if neighbor_labels.is_empty() {
        return Err(Error::InvalidArgument("frequency_vote on an empty neighborhood".into()));
    }
    let mut votes = neighbor_labels.to_vec();
    votes.sort_by_key(|v| v.0);
    let mut best = (votes[0].0, f64::NEG_INFINITY);
    let mut i = 0;
    while i < votes.len() {
        let label = votes[i].0;
        let mut total = 0.0;
        while i < votes.len() && votes[i].0 == label {
            total += votes[i].1;
            i += 1;
        }
        if total > best.1 {
            best = (label, total);
        }
    }
    Ok(best.0)
}

/// Label to adopt given the neighbors' labels and the current one.
///
/// The current label is kept whenever it is among the most frequent; otherwise
/// one of the most frequent labels is drawn uniformly. `scratch` and `tied`
/// are reused buffers.
fn sticky_vote<R: Rng>(
    labels: impl Iterator<Item = usize>,
    current: usize,
    scratch: &mut Vec<usize>,
    tied: &mut Vec<usize>,
    rng: &mut R,
) -> usize {
    scratch.clear();
    scratch.extend(labels);
    if scratch.is_empty() {
        return current;
    }
    scratch.sort_unstable();
    tied.clear();
    let (mut best_count, mut current_count) = (0usize, 0usize);
    let mut i = 0;
    while i < scratch.len() {
        let l = scratch[i];
        let start = i;
        while i < scratch.len() && scratch[i] == l {
            i += 1;
        }
        let c = i - start;
        if l == current {
            current_count = c;
        }
        if c > best_count {
            best_count = c;
            tied.clear();
        }
        if c == best_count {
            tied.push(l);
        }
    }
    if current_count == best_count {
        current
    } else if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

/// Asynchronous LPA over uncompacted labels. Returns (labels, sweeps, converged).
pub(crate) fn propagate_raw(
    neighbors: &[Vec<usize>],
    rng_seed: u64,
    max_iters: usize,
) -> (Vec<usize>, usize, bool) {
    let n = neighbors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(&mut rng);

    let mut order: Vec<usize> = (0..n).collect();
    let (mut scratch, mut tied) = (Vec::new(), Vec::new());
    for sweep in 1..=max_iters {
        order.shuffle(&mut rng);
        let mut changed = false;
        for &v in &order {
            let best = sticky_vote(neighbors[v].iter().map(|&u| labels[u]), labels[v], &mut scratch, &mut tied, &mut rng);
            if best != labels[v] {
                labels[v] = best;
                changed = true;
            }
        }
        if !changed {
            return (labels, sweep, true);
        }
    }
    (labels, max_iters, false)
}

/// Renumber labels densely in order of first appearance.
pub(crate) fn compact(raw: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let dense = raw
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (dense, map.len())
}

/// Structural clustering of the whole graph by classic label propagation.
///
/// All declared relations are merged into one untyped neighborhood with unit
/// votes per link; self-relations do not vote. Every object starts with a
/// unique label drawn from a seeded permutation, and sweeps visit objects in a
/// freshly shuffled order until a sweep changes nothing or `max_iters` sweeps
/// have run. An object keeps its label while that label is among its
/// neighborhood's most frequent; otherwise ties are broken by the seeded rng.
/// Breaking ties toward the smallest id instead lets the globally smallest
/// labels flood across blocks during the first sweep.
pub fn lpa_init(graph: &HinGraph, rng_seed: u64, max_iters: usize) -> Result<LpaOutcome> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument("lpa max_iters must be >= 1".into()));
    }
    if graph.num_objects() == 0 {
        return Err(Error::InvalidArgument("graph has no objects".into()));
    }
    let neighbors = graph.untyped_neighbors();
    let (raw, iterations, converged) = propagate_raw(&neighbors, rng_seed, max_iters);
    let (dense, k) = compact(&raw);
    Ok(LpaOutcome {
        labels: PseudoLabels::new(dense, k)?,
        iterations,
        converged,
    })
}
