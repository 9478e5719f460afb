//! Typed heterogeneous graph: object types, relations, and per-relation
//! normalized sparse adjacency.
//!
//! A relation aggregates from its *target* type into its *source* type: the
//! adjacency of relation `r` has one row per source-type object and one
//! column per target-type object. Bidirectional links are expressed by
//! declaring both directions. Every object type also gets a dummy
//! self-relation whose adjacency is the identity.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;

/// Prefix reserved for the auto-generated self-relations.
pub const SELF_PREFIX: &str = "self:";

/// A user-declared relation, by type name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub source: String,
    pub target: String,
}

impl RelationSpec {
    pub fn new(name: impl Into<String>, source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            source: source.into(),
            target: target.into(),
        }
    }
}

/// A resolved relation. `source` and `target` are type ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub source: usize,
    pub target: usize,
    pub is_self: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HinSchema {
    object_types: Vec<String>,
    /// Declared relations first, then one self-relation per type in type order.
    relations: Vec<Relation>,
    num_links: usize,
    /// Per type: the relations aggregating into it, self-relation first.
    incoming: Vec<Vec<usize>>,
}

impl HinSchema {
    pub fn new(object_types: Vec<String>, relations: Vec<RelationSpec>) -> Result<Self> {
        for (i, t) in object_types.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Schema("empty object type name".into()));
            }
            if object_types[..i].contains(t) {
                return Err(Error::Schema(format!("duplicate object type `{t}`")));
            }
        }
        let lookup = |name: &str, rel: &str| {
            object_types
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| Error::Schema(format!("relation `{rel}` references unknown type `{name}`")))
        };
        let mut resolved = Vec::with_capacity(relations.len() + object_types.len());
        for spec in &relations {
            if spec.name.is_empty() {
                return Err(Error::Schema("empty relation name".into()));
            }
            if spec.name.starts_with(SELF_PREFIX) {
                return Err(Error::Schema(format!(
                    "relation `{}`: self-relations are generated automatically",
                    spec.name
                )));
            }
            if resolved.iter().any(|r: &Relation| r.name == spec.name) {
                return Err(Error::Schema(format!("duplicate relation `{}`", spec.name)));
            }
            resolved.push(Relation {
                name: spec.name.clone(),
                source: lookup(&spec.source, &spec.name)?,
                target: lookup(&spec.target, &spec.name)?,
                is_self: false,
            });
        }
        let num_links = resolved.len();
        for (t, name) in object_types.iter().enumerate() {
            resolved.push(Relation {
                name: format!("{SELF_PREFIX}{name}"),
                source: t,
                target: t,
                is_self: true,
            });
        }
        // |A| + |R| > 2, with R counting the self-relations.
        if object_types.len() + resolved.len() <= 2 {
            return Err(Error::Schema(format!(
                "not heterogeneous: {} object type(s) and {} relation(s) including self-relations",
                object_types.len(),
                resolved.len()
            )));
        }
        let incoming = (0..object_types.len())
            .map(|t| {
                let mut ids = vec![num_links + t];
                ids.extend((0..num_links).filter(|&r| resolved[r].source == t));
                ids
            })
            .collect();
        Ok(Self {
            object_types,
            relations: resolved,
            num_links,
            incoming,
        })
    }

    pub fn object_types(&self) -> &[String] {
        &self.object_types
    }

    pub fn num_types(&self) -> usize {
        self.object_types.len()
    }

    /// All relations, declared ones first and self-relations last.
    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation(&self, id: usize) -> &Relation {
        &self.relations[id]
    }

    /// Number of declared (non-self) relations.
    pub fn num_links(&self) -> usize {
        self.num_links
    }

    pub fn self_relation(&self, ty: usize) -> usize {
        self.num_links + ty
    }

    /// Relations that aggregate into objects of type `ty`, self-relation first.
    pub fn relations_into(&self, ty: usize) -> &[usize] {
        &self.incoming[ty]
    }

    pub fn type_id(&self, name: &str) -> Option<usize> {
        self.object_types.iter().position(|t| t == name)
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    /// Declared relations in their original by-name form.
    pub fn link_specs(&self) -> Vec<RelationSpec> {
        self.relations[..self.num_links]
            .iter()
            .map(|r| {
                RelationSpec::new(
                    r.name.clone(),
                    self.object_types[r.source].clone(),
                    self.object_types[r.target].clone(),
                )
            })
            .collect()
    }

    /// Hex SHA-256 of the canonical schema text. Used to bind checkpoints to
    /// the graph they were trained on.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.object_types {
            h.update(b"T:");
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        for r in &self.relations[..self.num_links] {
            h.update(format!("R:{}:{}:{}\n", r.name, r.source, r.target).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Build from `(row, col, value)` triplets sorted by `(row, col)`.
    fn from_sorted(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut row_ptr = vec![0usize; nrows + 1];
        for &(r, _, _) in triplets {
            row_ptr[r + 1] += 1;
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            cols: triplets.iter().map(|t| t.1).collect(),
            vals: triplets.iter().map(|t| t.2).collect(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).1.iter().sum()
    }

    pub fn transpose(&self) -> Csr {
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            trip.extend(cols.iter().zip(vals).map(|(&j, &v)| (j, i, v)));
        }
        trip.sort_by_key(|e| (e.0, e.1));
        Csr::from_sorted(self.ncols, self.nrows, &trip)
    }

    /// `self · x` for a dense `x` with `ncols` rows.
    pub fn spmm(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        debug_assert_eq!(x.nrows(), self.ncols);
        let d = x.ncols();
        let mut out = Array2::<f64>::zeros((self.nrows, d));
        let out_slice = out.as_slice_mut().expect("fresh array is contiguous");
        par::for_each_row(out_slice, d, |i, row| {
            let (cols, vals) = self.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                for (o, &v) in row.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        });
        out
    }
}

/// Adjacency of one relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Adjacency {
    /// The dummy self-relation: `â_{i,i} = 1`.
    Identity(usize),
    /// Declared relation, with a transposed copy for gradient scatter.
    Sparse { forward: Csr, reverse: Csr },
}

impl Adjacency {
    /// Number of neighbors of source-type object `local` under this relation.
    pub fn degree(&self, local: usize) -> usize {
        match self {
            Adjacency::Identity(_) => 1,
            Adjacency::Sparse { forward, .. } => forward.degree(local),
        }
    }

    pub fn nnz(&self) -> usize {
        match self {
            Adjacency::Identity(n) => *n,
            Adjacency::Sparse { forward, .. } => forward.nnz(),
        }
    }
}

/// Link-weight normalization applied per relation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Each object's weights under one relation sum to 1.
    #[default]
    Row,
    /// `w_ij / sqrt(rowdeg_i · coldeg_j)`.
    Symmetric,
}

/// One raw edge: source-type local id, target-type local id, positive weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

impl Edge {
    pub fn new(src: usize, dst: usize, weight: f64) -> Self {
        Self { src, dst, weight }
    }

    pub fn unit(src: usize, dst: usize) -> Self {
        Self::new(src, dst, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HinGraph {
    schema: HinSchema,
    counts: Vec<usize>,
    offsets: Vec<usize>,
    adjacency: Vec<Adjacency>,
    normalization: Normalization,
}

/// Build a graph with row-normalized link weights.
///
/// `edge_lists[r]` holds the edges of declared relation `r`; the list may be
/// shorter than the number of relations, missing entries meaning no edges.
pub fn build_graph(schema: HinSchema, edge_lists: &[Vec<Edge>], counts: &[usize]) -> Result<HinGraph> {
    build_graph_with(schema, edge_lists, counts, Normalization::Row)
}

pub fn build_graph_with(
    schema: HinSchema,
    edge_lists: &[Vec<Edge>],
    counts: &[usize],
    normalization: Normalization,
) -> Result<HinGraph> {
    if counts.len() != schema.num_types() {
        return Err(Error::size("per-type counts", schema.num_types(), counts.len()));
    }
    if edge_lists.len() > schema.num_links() {
        return Err(Error::size("edge lists", schema.num_links(), edge_lists.len()));
    }
    let mut adjacency = Vec::with_capacity(schema.relations().len());
    for (rid, rel) in schema.relations()[..schema.num_links()].iter().enumerate() {
        let (ns, nt) = (counts[rel.source], counts[rel.target]);
        let edges = edge_lists.get(rid).map(Vec::as_slice).unwrap_or(&[]);
        let mut trip = Vec::with_capacity(edges.len());
        for e in edges {
            for (id, ty, n) in [(e.src, rel.source, ns), (e.dst, rel.target, nt)] {
                if id >= n {
                    return Err(Error::IdOutOfRange {
                        relation: rel.name.clone(),
                        ty: schema.object_types()[ty].clone(),
                        id,
                        count: n,
                    });
                }
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::NonPositiveWeight {
                    relation: rel.name.clone(),
                    src: e.src,
                    dst: e.dst,
                    weight: e.weight,
                });
            }
            trip.push((e.src, e.dst, e.weight));
        }
        trip.sort_by_key(|e| (e.0, e.1));
        if let Some(w) = trip.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::DuplicateEdge {
                relation: rel.name.clone(),
                src: w[0].0,
                dst: w[0].1,
            });
        }
        normalize(&mut trip, ns, nt, normalization);
        let forward = Csr::from_sorted(ns, nt, &trip);
        let reverse = forward.transpose();
        adjacency.push(Adjacency::Sparse { forward, reverse });
    }
    adjacency.extend(counts.iter().map(|&n| Adjacency::Identity(n)));

    let mut offsets = Vec::with_capacity(counts.len() + 1);
    let mut acc = 0;
    for &c in counts {
        offsets.push(acc);
        acc += c;
    }
    offsets.push(acc);

    Ok(HinGraph {
        schema,
        counts: counts.to_vec(),
        offsets,
        adjacency,
        normalization,
    })
}

fn normalize(trip: &mut [(usize, usize, f64)], ns: usize, nt: usize, mode: Normalization) {
    let mut rowdeg = vec![0.0; ns];
    for &(i, _, w) in trip.iter() {
        rowdeg[i] += w;
    }
    match mode {
        Normalization::Row => {
            for t in trip.iter_mut() {
                t.2 /= rowdeg[t.0];
            }
        }
        Normalization::Symmetric => {
            let mut coldeg = vec![0.0; nt];
            for &(_, j, w) in trip.iter() {
                coldeg[j] += w;
            }
            for t in trip.iter_mut() {
                t.2 /= (rowdeg[t.0] * coldeg[t.1]).sqrt();
            }
        }
    }
}

impl HinGraph {
    pub fn schema(&self) -> &HinSchema {
        &self.schema
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, ty: usize) -> usize {
        self.counts[ty]
    }

    pub fn num_objects(&self) -> usize {
        self.offsets[self.counts.len()]
    }

    /// Number of stored links over all declared relations (each direction counted).
    pub fn num_edges(&self) -> usize {
        self.adjacency[..self.schema.num_links()]
            .iter()
            .map(Adjacency::nnz)
            .sum()
    }

    /// First global id of type `ty`.
    pub fn offset(&self, ty: usize) -> usize {
        self.offsets[ty]
    }

    pub fn globalize(&self, ty: usize, local: usize) -> usize {
        debug_assert!(local < self.counts[ty]);
        self.offsets[ty] + local
    }

    /// Global id to `(type, local index)`.
    pub fn localize(&self, global: usize) -> (usize, usize) {
        assert!(global < self.num_objects(), "global id {global} out of range");
        let ty = self.offsets.partition_point(|&o| o <= global) - 1;
        (ty, global - self.offsets[ty])
    }

    pub fn object_type(&self, global: usize) -> usize {
        self.localize(global).0
    }

    pub fn adjacency(&self, relation: usize) -> &Adjacency {
        &self.adjacency[relation]
    }

    pub fn relations_into(&self, ty: usize) -> &[usize] {
        self.schema.relations_into(ty)
    }

    /// Neighbors of `object` under `relation`, ascending by global id, with
    /// their normalized link weight.
    pub fn neighbors(&self, object: usize, relation: usize) -> Result<Vec<(usize, f64)>> {
        if object >= self.num_objects() {
            return Err(Error::InvalidArgument(format!(
                "object {object} out of range ({} objects)",
                self.num_objects()
            )));
        }
        let rel = self.schema.relations().get(relation).ok_or_else(|| {
            Error::InvalidArgument(format!("relation {relation} out of range"))
        })?;
        let (ty, local) = self.localize(object);
        if rel.source != ty {
            return Err(Error::TypeMismatch {
                object,
                object_type: self.schema.object_types()[ty].clone(),
                relation: rel.name.clone(),
                expected: self.schema.object_types()[rel.source].clone(),
            });
        }
        Ok(match &self.adjacency[relation] {
            Adjacency::Identity(_) => vec![(object, 1.0)],
            Adjacency::Sparse { forward, .. } => {
                let base = self.offsets[rel.target];
                let (cols, vals) = forward.row(local);
                cols.iter().zip(vals).map(|(&j, &w)| (base + j, w)).collect()
            }
        })
    }

    /// Unit-weight neighbor lists over all declared relations, in global ids.
    /// Self-relations are excluded.
    pub fn untyped_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_objects()];
        for (rid, rel) in self.schema.relations()[..self.schema.num_links()].iter().enumerate() {
            if let Adjacency::Sparse { forward, .. } = &self.adjacency[rid] {
                let (src_base, dst_base) = (self.offsets[rel.source], self.offsets[rel.target]);
                for i in 0..forward.nrows {
                    out[src_base + i].extend(forward.row(i).0.iter().map(|&j| dst_base + j));
                }
            }
        }
        out
    }
}

/// Per-type dense feature matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    matrices: Vec<Array2<f64>>,
}

impl FeatureSet {
    pub fn new(graph: &HinGraph, matrices: Vec<Array2<f64>>) -> Result<Self> {
        if matrices.len() != graph.schema().num_types() {
            return Err(Error::size("feature matrices", graph.schema().num_types(), matrices.len()));
        }
        for (t, m) in matrices.iter().enumerate() {
            if m.nrows() != graph.count(t) {
                return Err(Error::size(
                    format!("feature rows of type `{}`", graph.schema().object_types()[t]),
                    graph.count(t),
                    m.nrows(),
                ));
            }
            if let Some((idx, _)) = m.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Format {
                    what: "features",
                    message: format!(
                        "non-finite entry in type `{}` at row {}",
                        graph.schema().object_types()[t],
                        idx / m.ncols().max(1)
                    ),
                });
            }
        }
        Ok(Self { matrices })
    }

    pub fn matrix(&self, ty: usize) -> &Array2<f64> {
        &self.matrices[ty]
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.matrices
    }

    pub fn dims(&self) -> Vec<usize> {
        self.matrices.iter().map(|m| m.ncols()).collect()
    }
}
