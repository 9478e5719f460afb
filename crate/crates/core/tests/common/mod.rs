#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity, clippy::neg_cmp_op_on_partial_ord)]

use hetpre::encoder::{backward_from, forward_cached, EncoderConfig, ModelParams};
use hetpre::graph::{build_graph, Edge, FeatureSet, HinGraph, HinSchema, RelationSpec};
use hetpre::lpa::PseudoLabels;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 10 objects over 3 types (P:4, A:4, S:2), bidirectional P–A and P–S.
/// A3 has no links at all; S1 has one paper.
pub fn toy_hin() -> HinGraph {
    let schema = HinSchema::new(
        vec!["P".into(), "A".into(), "S".into()],
        vec![
            RelationSpec::new("PA", "P", "A"),
            RelationSpec::new("AP", "A", "P"),
            RelationSpec::new("PS", "P", "S"),
            RelationSpec::new("SP", "S", "P"),
        ],
    )
    .unwrap();
    let pa = [(0, 0, 1.0), (0, 1, 2.0), (1, 1, 1.0), (2, 2, 1.0), (3, 0, 0.5), (3, 2, 1.5)];
    let ps = [(0, 0, 1.0), (1, 0, 1.0), (2, 0, 3.0), (3, 1, 1.0)];
    let fwd = |l: &[(usize, usize, f64)]| l.iter().map(|&(a, b, w)| Edge::new(a, b, w)).collect::<Vec<_>>();
    let rev = |l: &[(usize, usize, f64)]| l.iter().map(|&(a, b, w)| Edge::new(b, a, w)).collect::<Vec<_>>();
    build_graph(schema, &[fwd(&pa), rev(&pa), fwd(&ps), rev(&ps)], &[4, 4, 2]).unwrap()
}

pub fn random_features(graph: &HinGraph, dims: &[usize], seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mats = dims
        .iter()
        .enumerate()
        .map(|(t, &d)| Array2::from_shape_simple_fn((graph.count(t), d), || rng.random_range(-1.0..1.0)))
        .collect();
    FeatureSet::new(graph, mats).unwrap()
}

pub fn random_labels(n: usize, k: usize, seed: u64) -> PseudoLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PseudoLabels::new((0..n).map(|_| rng.random_range(0..k)).collect(), k).unwrap()
}

/// Xavier params with the attention vectors scaled up so β is far from uniform.
pub fn sharp_params(graph: &HinGraph, dims: &[usize], cfg: EncoderConfig, k: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::xavier(graph.schema(), dims, cfg, k, &mut rng).unwrap();
    for lp in &mut p.layers {
        for a in &mut lp.attention {
            a.mapv_inplace(|v| 4.0 * v);
        }
    }
    p
}

pub fn loss(params: &ModelParams, graph: &HinGraph, feats: &FeatureSet, labels: &PseudoLabels) -> f64 {
    let t = forward_cached(params, graph, feats).unwrap();
    backward_from(params, graph, feats, &t, labels, None).unwrap().0
}

/// Worst elementwise relative error of analytic vs central differences,
/// per tensor. Relative error is |a − n| / max(|a|, |n|, floor).
pub fn gradient_check(
    params: &ModelParams,
    graph: &HinGraph,
    feats: &FeatureSet,
    labels: &PseudoLabels,
    h: f64,
    floor: f64,
) -> Vec<(String, f64)> {
    let grads = hetpre::encoder::backward(params, graph, feats, labels).unwrap();
    let names = params.tensor_names(graph.schema());
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut out = Vec::new();
    for (ti, name) in names.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..analytic[ti].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].1[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].1[i] -= h;
            let numeric = (loss(&plus, graph, feats, labels) - loss(&minus, graph, feats, labels)) / (2.0 * h);
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        out.push((name, worst));
    }
    out
}

/// A small HIN kept in raw form so oracles never touch the CSR code.
pub struct RawHin {
    pub types: Vec<String>,
    pub counts: Vec<usize>,
    /// `(name, source type, target type, edges (src, dst, weight))`.
    pub relations: Vec<(String, usize, usize, Vec<(usize, usize, f64)>)>,
}

impl RawHin {
    pub fn build(&self) -> HinGraph {
        let specs = self
            .relations
            .iter()
            .map(|(n, s, t, _)| RelationSpec::new(n.clone(), self.types[*s].clone(), self.types[*t].clone()))
            .collect();
        let schema = HinSchema::new(self.types.clone(), specs).unwrap();
        let edges: Vec<Vec<Edge>> = self
            .relations
            .iter()
            .map(|r| r.3.iter().map(|&(a, b, w)| Edge::new(a, b, w)).collect())
            .collect();
        build_graph(schema, &edges, &self.counts).unwrap()
    }

    pub fn offset(&self, ty: usize) -> usize {
        self.counts[..ty].iter().sum()
    }

    pub fn num_objects(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Row-normalized neighbor list of `local` under declared relation `r`,
    /// sorted by neighbor index.
    pub fn normalized(&self, r: usize, local: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self.relations[r].3.iter().filter(|e| e.0 == local).map(|e| (e.1, e.2)).collect();
        out.sort_by_key(|e| e.0);
        let total: f64 = out.iter().map(|e| e.1).sum();
        out.iter().map(|&(j, w)| (j, w / total)).collect()
    }
}

pub fn raw_toy() -> RawHin {
    let pa = vec![(0, 0, 1.0), (0, 1, 2.0), (1, 1, 1.0), (2, 2, 1.0), (3, 0, 0.5), (3, 2, 1.5)];
    let ps = vec![(0, 0, 1.0), (1, 0, 1.0), (2, 0, 3.0), (3, 1, 1.0)];
    let rev = |l: &[(usize, usize, f64)]| l.iter().map(|&(a, b, w)| (b, a, w)).collect::<Vec<_>>();
    RawHin {
        types: vec!["P".into(), "A".into(), "S".into()],
        counts: vec![4, 4, 2],
        relations: vec![
            ("PA".into(), 0, 1, pa.clone()),
            ("AP".into(), 1, 0, rev(&pa)),
            ("PS".into(), 0, 2, ps.clone()),
            ("SP".into(), 2, 0, rev(&ps)),
        ],
    }
}

/// Random fixture with up to 20 objects. Some objects have no links, and
/// one-directional relations leave objects with links under only some relations.
pub fn raw_random(seed: u64) -> RawHin {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<usize> = (0..3).map(|_| rng.random_range(2..=6)).collect();
    let types: Vec<String> = ["X", "Y", "Z"].iter().map(|s| s.to_string()).collect();
    let pairs = [(0, 1), (1, 0), (1, 2), (0, 0), (2, 0)];
    let relations = pairs
        .iter()
        .map(|&(s, t)| {
            let mut edges = Vec::new();
            for i in 0..counts[s] {
                for j in 0..counts[t] {
                    if rng.random::<f64>() < 0.35 {
                        edges.push((i, j, rng.random_range(0.25..3.0)));
                    }
                }
            }
            (format!("{}{}", types[s], types[t]), s, t, edges)
        })
        .collect();
    RawHin { types, counts, relations }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Loop-written encoder: per object, per relation, explicit sums over
/// neighbors, projections and attention vectors. Returns `(embeddings per
/// global id, β[layer][global] as (relation name, β))`.
pub fn dense_forward(
    raw: &RawHin,
    params: &ModelParams,
    feats: &FeatureSet,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<(String, f64)>>>) {
    let nt = raw.types.len();
    let mut h: Vec<Vec<f64>> = Vec::new();
    for t in 0..nt {
        for row in feats.matrix(t).rows() {
            h.push(row.to_vec());
        }
    }
    let nrel_declared = raw.relations.len();
    let mut betas = Vec::new();
    for (l, lp) in params.layers.iter().enumerate() {
        let d = params.config.hidden_dims[l];
        let activate = l + 1 < params.layers.len() || params.config.top_activation;
        let mut next = vec![vec![0.0; d]; raw.num_objects()];
        let mut layer_beta = vec![Vec::new(); raw.num_objects()];
        for t in 0..nt {
            // Self-relations are numbered after the declared ones, in type order.
            let self_rel = nrel_declared + t;
            let q = &lp.query[t];
            let k = &lp.key[t];
            let a = &lp.attention[t];
            let da = q.ncols();
            for i in 0..raw.counts[t] {
                let gi = raw.offset(t) + i;
                let project = |x: &[f64], w: &Array2<f64>| -> Vec<f64> {
                    (0..d).map(|c| (0..x.len()).map(|p| x[p] * w[[p, c]]).sum()).collect()
                };
                let z_self = project(&h[gi], &lp.projections[self_rel]);
                let mut cands: Vec<(String, Vec<f64>)> = vec![(format!("self:{}", raw.types[t]), z_self.clone())];
                for (r, rel) in raw.relations.iter().enumerate() {
                    if rel.1 != t {
                        continue;
                    }
                    let nbrs = raw.normalized(r, i);
                    if nbrs.is_empty() {
                        continue;
                    }
                    let din = h[raw.offset(rel.2)].len();
                    let mut agg = vec![0.0; din];
                    for (j, w) in nbrs {
                        let gj = raw.offset(rel.2) + j;
                        for p in 0..din {
                            agg[p] += w * h[gj][p];
                        }
                    }
                    cands.push((rel.0.clone(), project(&agg, &lp.projections[r])));
                }
                let score = |z: &[f64]| -> f64 {
                    let mut s = 0.0;
                    for c in 0..da {
                        let qz: f64 = (0..d).map(|p| z_self[p] * q[[p, c]]).sum();
                        let kz: f64 = (0..d).map(|p| z[p] * k[[p, c]]).sum();
                        s += a[c] * qz + a[da + c] * kz;
                    }
                    s
                };
                let weights: Vec<f64> = match params.config.attention {
                    hetpre::encoder::AttentionMode::Uniform => vec![1.0 / cands.len() as f64; cands.len()],
                    hetpre::encoder::AttentionMode::Learned => {
                        let e: Vec<f64> = cands
                            .iter()
                            .map(|(_, z)| {
                                let s = score(z);
                                if s > 0.0 {
                                    s
                                } else {
                                    params.config.leaky_slope * s
                                }
                            })
                            .collect();
                        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let ex: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
                        let tot: f64 = ex.iter().sum();
                        ex.iter().map(|v| v / tot).collect()
                    }
                };
                for c in 0..d {
                    let v: f64 = cands.iter().zip(&weights).map(|((_, z), b)| b * z[c]).sum();
                    next[gi][c] = if activate { elu(v) } else { v };
                }
                layer_beta[gi] = cands.iter().zip(&weights).map(|((n, _), &b)| (n.clone(), b)).collect();
            }
        }
        betas.push(layer_beta);
        h = next;
    }
    (h, betas)
}

/// One synchronous weighted-LPA step with a unit self-vote, on a single
/// relation given as raw edges. Votes are halved to mirror uniform β over
/// {self, relation}; objects without neighbors keep their label.
pub fn weighted_lpa_step(n: usize, edges: &[(usize, usize, f64)], labels: &[usize], k: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let mut nbrs: Vec<(usize, f64)> = edges.iter().filter(|e| e.0 == i).map(|e| (e.1, e.2)).collect();
            if nbrs.is_empty() {
                return labels[i];
            }
            nbrs.sort_by_key(|e| e.0);
            let total: f64 = nbrs.iter().map(|e| e.1).sum();
            let mut partial = vec![0.0; k];
            for (j, w) in nbrs {
                partial[labels[j]] += w / total;
            }
            let mut votes = vec![0.0; k];
            votes[labels[i]] += 0.5 * 1.0;
            for c in 0..k {
                votes[c] += 0.5 * partial[c];
            }
            let mut best = 0;
            for c in 1..k {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Every object has strictly more links into its own block than into any
/// other single block.
pub fn majority_consistent(neighbors: &[Vec<usize>], blocks: &[usize], num_blocks: usize) -> bool {
    neighbors.iter().enumerate().all(|(v, ns)| {
        let mut cnt = vec![0usize; num_blocks];
        for &u in ns {
            cnt[blocks[u]] += 1;
        }
        let own = cnt[blocks[v]];
        (0..num_blocks).filter(|&b| b != blocks[v]).all(|b| cnt[b] < own)
    })
}

/// Micro/macro F1 from an explicit confusion matrix over the union of classes.
pub fn brute_force_f1(truth: &[usize], pred: &[usize]) -> (f64, f64) {
    let classes: std::collections::BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    let classes: Vec<usize> = classes.into_iter().collect();
    let m = classes.len();
    let idx = |c: usize| classes.iter().position(|&x| x == c).unwrap();
    let mut conf = vec![vec![0usize; m]; m];
    for (&t, &p) in truth.iter().zip(pred) {
        conf[idx(t)][idx(p)] += 1;
    }
    let correct: usize = (0..m).map(|c| conf[c][c]).sum();
    let micro = correct as f64 / truth.len() as f64;
    let mut macro_sum = 0.0;
    for c in 0..m {
        let tp = conf[c][c] as f64;
        let fp: f64 = (0..m).filter(|&r| r != c).map(|r| conf[r][c] as f64).sum();
        let fn_: f64 = (0..m).filter(|&p| p != c).map(|p| conf[c][p] as f64).sum();
        let denom = 2.0 * tp + fp + fn_;
        macro_sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    (micro, macro_sum / m as f64)
}

/// Σ_r β = 1 ± 1e-9 and β ≥ 0 for every object and layer.
pub fn check_beta_simplex(graph: &HinGraph, snap: &hetpre::encoder::AttentionSnapshot) -> Result<(), String> {
    for l in 0..snap.num_layers() {
        for gi in 0..graph.num_objects() {
            let bs = snap.at(graph, l, gi);
            if bs.iter().any(|b| !(b.1 >= 0.0)) {
                return Err(format!("negative β at layer {l} object {gi}"));
            }
            let s: f64 = bs.iter().map(|b| b.1).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(format!("β sums to {s} at layer {l} object {gi}"));
            }
        }
    }
    Ok(())
}

/// Every declared relation's rows with at least one link sum to 1 ± 1e-9.
pub fn check_row_stochastic(graph: &HinGraph) -> Result<(), String> {
    for (r, rel) in graph.schema().relations().iter().enumerate() {
        if let hetpre::graph::Adjacency::Sparse { forward, .. } = graph.adjacency(r) {
            for i in 0..graph.count(rel.source) {
                let (cols, vals) = forward.row(i);
                if cols.is_empty() {
                    continue;
                }
                let s: f64 = vals.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(format!("relation {} row {i} sums to {s}", rel.name));
                }
            }
        }
    }
    Ok(())
}

/// One-hot rows have exactly one unit entry below K; output labels are a
/// subset of input labels and K is unchanged.
pub fn check_label_closure(before: &PseudoLabels, after: &PseudoLabels) -> Result<(), String> {
    if after.k() != before.k() || after.len() != before.len() {
        return Err("label space or length changed".into());
    }
    let oh = after.one_hot();
    for i in 0..after.len() {
        let (cols, vals) = oh.row(i);
        if cols.len() != 1 || vals != [1.0] || cols[0] >= after.k() {
            return Err(format!("row {i} of the one-hot matrix is not a unit vector"));
        }
    }
    let present: std::collections::HashSet<usize> = before.as_slice().iter().copied().collect();
    if let Some(l) = after.as_slice().iter().find(|l| !present.contains(l)) {
        return Err(format!("label {l} was not present before propagation"));
    }
    Ok(())
}

pub fn check_softmax_rows(p: &Array2<f64>) -> Result<(), String> {
    for (i, row) in p.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(format!("softmax row {i} sums to {s}"));
        }
    }
    Ok(())
}

/// NMI and ARI unchanged (to 1e-12) when predicted ids are permuted.
pub fn check_metric_permutation(truth: &[usize], pred: &[usize], perm: &[usize]) -> Result<(), String> {
    use hetpre::eval::{ari, nmi};
    let relabeled: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
    let (n0, n1) = (nmi(truth, pred).unwrap(), nmi(truth, &relabeled).unwrap());
    let (a0, a1) = (ari(truth, pred).unwrap(), ari(truth, &relabeled).unwrap());
    if (n0 - n1).abs() > 1e-12 || (a0 - a1).abs() > 1e-12 {
        return Err(format!("NMI {n0} vs {n1}, ARI {a0} vs {a1}"));
    }
    if !(0.0..=1.0 + 1e-12).contains(&n0) || !(-0.5 - 1e-12..=1.0 + 1e-12).contains(&a0) {
        return Err(format!("metric out of range: NMI {n0}, ARI {a0}"));
    }
    Ok(())
}

pub fn check_inertia_monotone(history: &[f64]) -> Result<(), String> {
    for w in history.windows(2) {
        if w[1] > w[0] * (1.0 + 1e-12) + 1e-12 {
            return Err(format!("inertia rose from {} to {}", w[0], w[1]));
        }
    }
    Ok(())
}

/// A random permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Runs every invariant check on instances derived from `seed`.
pub fn invariant_suite(seed: u64) -> Result<(), String> {
    use hetpre::attlpa::propagate;
    use hetpre::encoder::{classify, forward};
    use hetpre::eval::kmeans_single;

    let raw = raw_random(seed);
    let g = raw.build();
    check_row_stochastic(&g)?;
    let dims = [3, 2, 2];
    let feats = random_features(&g, &dims, seed ^ 0x55);
    let k = 4;
    let cfg = EncoderConfig {
        hidden_dims: vec![4, 3],
        ..Default::default()
    };
    let params = sharp_params(&g, &dims, cfg, k, seed.wrapping_add(1));
    let (table, snap) = forward(&params, &g, &feats).map_err(|e| e.to_string())?;
    check_beta_simplex(&g, &snap)?;
    check_softmax_rows(&classify(&params, &table).map_err(|e| e.to_string())?)?;
    let labels = random_labels(g.num_objects(), k, seed.wrapping_add(2));
    let next = propagate(&snap, &g, &labels, 2).map_err(|e| e.to_string())?;
    check_label_closure(&labels, &next)?;

    let truth = random_labels(60, 3, seed.wrapping_add(3));
    let pred = random_labels(60, 5, seed.wrapping_add(4));
    check_metric_permutation(truth.as_slice(), pred.as_slice(), &permutation(5, seed))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    let data = Array2::from_shape_simple_fn((80, 3), || rng.random_range(-1.0..1.0));
    check_inertia_monotone(&kmeans_single(data.view(), 4, seed, 300).history)?;
    Ok(())
}

/// Largest absolute gap between the encoder and [`dense_forward`], over
/// embeddings and attention weights.
pub fn forward_oracle_gap(raw: &RawHin, params: &ModelParams, feats: &FeatureSet) -> f64 {
    let g = raw.build();
    let (table, snap) = hetpre::encoder::forward(params, &g, feats).unwrap();
    let (want, want_beta) = dense_forward(raw, params, feats);
    let mut gap = 0.0f64;
    for (gi, row) in want.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            gap = gap.max((table.row(gi)[c] - v).abs());
        }
    }
    for (l, per_obj) in want_beta.iter().enumerate() {
        for (gi, expected) in per_obj.iter().enumerate() {
            for (r, b) in snap.at(&g, l, gi) {
                let name = &g.schema().relation(r).name;
                let want = expected.iter().find(|e| &e.0 == name).map_or(0.0, |e| e.1);
                gap = gap.max((b - want).abs());
            }
        }
    }
    gap
}
