//! Planted-partition heterogeneous graphs with known block structure.
//!
//! All object types share one block space. Links between two types are drawn
//! independently with probability `p_in` inside a block and `p_out` across
//! blocks; both relation directions are emitted. Features are the block's
//! one-hot centroid plus isotropic Gaussian noise.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, Edge, FeatureSet, HinGraph, HinSchema, RelationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub num_blocks: usize,
    /// `(type name, object count)`; with `star`, the first type is the hub.
    pub types: Vec<(String, usize)>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    /// Link only hub↔other pairs. Otherwise every pair of distinct types is linked.
    pub star: bool,
}

impl PlantedConfig {
    /// The fixture used by the acceptance suite: 4 blocks over a 3-type star
    /// (P:200 hub, A:300, S:100), p_in = 0.2, p_out = 0.01, unit noise.
    pub fn acceptance() -> Self {
        Self {
            num_blocks: 4,
            types: vec![("P".into(), 200), ("A".into(), 300), ("S".into(), 100)],
            p_in: 0.2,
            p_out: 0.01,
            feature_dim: 16,
            feature_noise: 1.0,
            seed: 42,
            star: true,
        }
    }

    /// Same shape with every type count multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        let mut c = self.clone();
        for t in &mut c.types {
            t.1 *= factor;
        }
        c
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_blocks < 2 {
            return bad("need at least 2 blocks".into());
        }
        if self.types.len() < 2 {
            return bad("need at least 2 object types".into());
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) || self.p_out > self.p_in {
            return bad(format!("need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}", self.p_in, self.p_out));
        }
        if let Some((name, n)) = self.types.iter().find(|t| t.1 < self.num_blocks) {
            return bad(format!("type `{name}` has {n} objects, fewer than {} blocks", self.num_blocks));
        }
        if self.feature_dim < self.num_blocks {
            return bad(format!("feature_dim {} < num_blocks {}", self.feature_dim, self.num_blocks));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Linked `(type, type)` pairs, lower index first.
    pub fn type_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.types.len();
        if self.star {
            (1..n).map(|t| (0, t)).collect()
        } else {
            (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
        }
    }
}

/// A generated instance. `blocks` is indexed by global object id.
#[derive(Debug, Clone)]
pub struct PlantedHin {
    pub graph: HinGraph,
    pub features: FeatureSet,
    pub blocks: Vec<usize>,
    /// Raw edge lists per declared relation, as passed to `build_graph`.
    pub edges: Vec<Vec<Edge>>,
}

pub fn planted_hin(cfg: &PlantedConfig) -> Result<PlantedHin> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let type_blocks: Vec<Vec<usize>> = cfg
        .types
        .iter()
        .map(|&(_, n)| {
            let mut b: Vec<usize> = (0..n).map(|i| i % cfg.num_blocks).collect();
            b.shuffle(&mut rng);
            b
        })
        .collect();

    let mut relations = Vec::new();
    let mut edges = Vec::new();
    for (a, b) in cfg.type_pairs() {
        let (na, nb) = (&cfg.types[a].0, &cfg.types[b].0);
        let mut fwd = Vec::new();
        for (i, &bi) in type_blocks[a].iter().enumerate() {
            for (j, &bj) in type_blocks[b].iter().enumerate() {
                let p = if bi == bj { cfg.p_in } else { cfg.p_out };
                if rng.random::<f64>() < p {
                    fwd.push(Edge::unit(i, j));
                }
            }
        }
        let rev = fwd.iter().map(|e| Edge::unit(e.dst, e.src)).collect();
        relations.push(RelationSpec::new(format!("{na}{nb}"), na.clone(), nb.clone()));
        relations.push(RelationSpec::new(format!("{nb}{na}"), nb.clone(), na.clone()));
        edges.push(fwd);
        edges.push(rev);
    }

    let schema = HinSchema::new(cfg.types.iter().map(|t| t.0.clone()).collect(), relations)?;
    let counts: Vec<usize> = cfg.types.iter().map(|t| t.1).collect();
    let graph = build_graph(schema, &edges, &counts)?;

    let mats = type_blocks
        .iter()
        .map(|blocks| {
            let mut x = Array2::<f64>::zeros((blocks.len(), cfg.feature_dim));
            for (mut row, &b) in x.rows_mut().into_iter().zip(blocks) {
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = cfg.feature_noise * z;
                }
                row[b] += 1.0;
            }
            x
        })
        .collect();
    let features = FeatureSet::new(&graph, mats)?;
    let blocks = type_blocks.into_iter().flatten().collect();
    Ok(PlantedHin {
        graph,
        features,
        blocks,
        edges,
    })
}
