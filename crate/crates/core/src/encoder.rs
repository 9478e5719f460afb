//! Relation-level attention encoder with a softmax classifier head.
//!
//! One layer computes, for object `i` of type `Ω`,
//!
//! ```text
//! z_i^r  = (Σ_j â_ij h_j) · W^r            for every relation r into Ω (self: z = h_i · W^self)
//! s_i^r  = z_i^self · (Q_Ω a_q) + z_i^r · (K_Ω a_k)
//! β_i    = softmax_r LeakyReLU(s_i^r)      over relations where i has neighbors
//! h_i'   = ELU(Σ_r β_i^r z_i^r)
//! ```
//!
//! where `a_Ω = [a_q ‖ a_k]`. Matrices are row-major with one row per object,
//! so projections multiply on the right.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Adjacency, FeatureSet, HinGraph, HinSchema};
use crate::lpa::PseudoLabels;
use crate::par;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    Learned,
    /// β is uniform over the available relations; attention parameters are unused.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output width of each layer; the length is the layer count.
    pub hidden_dims: Vec<usize>,
    /// Query/key width. `None` means `ceil(d / 2)` per layer.
    pub att_dim: Option<usize>,
    pub leaky_slope: f64,
    /// Apply ELU on the top layer before the classifier.
    pub top_activation: bool,
    pub attention: AttentionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            att_dim: None,
            leaky_slope: 0.2,
            top_activation: true,
            attention: AttentionMode::Learned,
        }
    }
}

impl EncoderConfig {
    pub fn att_dim_for(&self, d: usize) -> usize {
        self.att_dim.unwrap_or(d.div_ceil(2)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Indexed by relation id, shape `d_in(target type) × d_out`.
    pub projections: Vec<Array2<f64>>,
    /// Per object type, `d_out × d_att`.
    pub query: Vec<Array2<f64>>,
    pub key: Vec<Array2<f64>>,
    /// Per object type, length `2 · d_att`.
    pub attention: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: EncoderConfig,
    /// Feature width per object type.
    pub input_dims: Vec<usize>,
    pub layers: Vec<LayerParams>,
    /// `d_N × K`.
    pub classifier: Array2<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

/// Row-stochastic `|V| × K` class probabilities.
pub type Predictions = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Projection,
    Query,
    Key,
    Attention,
    Classifier,
}

impl TensorKind {
    /// Attention parameters steer β; everything else is a feature map.
    pub fn is_attention(self) -> bool {
        matches!(self, TensorKind::Query | TensorKind::Key | TensorKind::Attention)
    }
}

fn xavier<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl ModelParams {
    /// Xavier-uniform initialization of every tensor.
    pub fn xavier<R: Rng>(
        schema: &HinSchema,
        input_dims: &[usize],
        config: EncoderConfig,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dims.len() != schema.num_types() {
            return Err(Error::size("input dims", schema.num_types(), input_dims.len()));
        }
        if config.hidden_dims.is_empty() || config.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("hidden_dims must be nonempty and positive".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("classifier needs K >= 1".into()));
        }
        let mut layers = Vec::with_capacity(config.hidden_dims.len());
        for (l, &d) in config.hidden_dims.iter().enumerate() {
            let in_dim = |t: usize| if l == 0 { input_dims[t] } else { config.hidden_dims[l - 1] };
            let da = config.att_dim_for(d);
            let projections = schema
                .relations()
                .iter()
                .map(|r| xavier(in_dim(r.target), d, in_dim(r.target), d, rng))
                .collect();
            let nt = schema.num_types();
            let query = (0..nt).map(|_| xavier(d, da, d, da, rng)).collect();
            let key = (0..nt).map(|_| xavier(d, da, d, da, rng)).collect();
            let attention = (0..nt)
                .map(|_| xavier(2 * da, 1, 2 * da, 1, rng).into_shape_with_order(2 * da).expect("column"))
                .collect();
            layers.push(LayerParams {
                projections,
                query,
                key,
                attention,
            });
        }
        let top = *config.hidden_dims.last().expect("nonempty");
        let classifier = xavier(top, num_classes, top, num_classes, rng);
        Ok(Self {
            config,
            input_dims: input_dims.to_vec(),
            layers,
            classifier,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.classifier.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor in a fixed order: per layer projections, queries, keys,
    /// attention vectors; then the classifier.
    pub fn tensors(&self) -> Vec<(TensorKind, &[f64])> {
        let mut out = Vec::new();
        for lp in &self.layers {
            out.extend(lp.projections.iter().map(|m| (TensorKind::Projection, slice(m))));
            out.extend(lp.query.iter().map(|m| (TensorKind::Query, slice(m))));
            out.extend(lp.key.iter().map(|m| (TensorKind::Key, slice(m))));
            out.extend(lp.attention.iter().map(|v| (TensorKind::Attention, v.as_slice().expect("contiguous"))));
        }
        out.push((TensorKind::Classifier, slice(&self.classifier)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorKind, &mut [f64])> {
        let mut out = Vec::new();
        for lp in &mut self.layers {
            out.extend(lp.projections.iter_mut().map(|m| (TensorKind::Projection, slice_mut(m))));
            out.extend(lp.query.iter_mut().map(|m| (TensorKind::Query, slice_mut(m))));
            out.extend(lp.key.iter_mut().map(|m| (TensorKind::Key, slice_mut(m))));
            out.extend(
                lp.attention
                    .iter_mut()
                    .map(|v| (TensorKind::Attention, v.as_slice_mut().expect("contiguous"))),
            );
        }
        out.push((TensorKind::Classifier, slice_mut(&mut self.classifier)));
        out
    }

    /// Human-readable names aligned with [`ModelParams::tensors`].
    pub fn tensor_names(&self, schema: &HinSchema) -> Vec<String> {
        let mut out = Vec::new();
        for (l, lp) in self.layers.iter().enumerate() {
            for r in 0..lp.projections.len() {
                out.push(format!("layer{l}.W[{}]", schema.relation(r).name));
            }
            for kind in ["Q", "K", "a"] {
                for t in schema.object_types() {
                    out.push(format!("layer{l}.{kind}[{t}]"));
                }
            }
        }
        out.push("C".into());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_against(&self, graph: &HinGraph, features: &FeatureSet) -> Result<()> {
        let schema = graph.schema();
        if features.dims() != self.input_dims {
            return Err(Error::SizeMismatch {
                what: format!("feature dims {:?} vs model input dims {:?}", features.dims(), self.input_dims),
                expected: self.input_dims.iter().sum(),
                got: features.dims().iter().sum(),
            });
        }
        for (t, m) in features.matrices().iter().enumerate() {
            if m.nrows() != graph.count(t) {
                return Err(Error::size("feature rows", graph.count(t), m.nrows()));
            }
        }
        for lp in &self.layers {
            if lp.projections.len() != schema.relations().len() {
                return Err(Error::size("relation projections", schema.relations().len(), lp.projections.len()));
            }
            if lp.query.len() != schema.num_types() {
                return Err(Error::size("per-type attention params", schema.num_types(), lp.query.len()));
            }
        }
        Ok(())
    }
}

fn slice(m: &Array2<f64>) -> &[f64] {
    m.as_slice().expect("parameters are contiguous")
}

fn slice_mut(m: &mut Array2<f64>) -> &mut [f64] {
    m.as_slice_mut().expect("parameters are contiguous")
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Cached per-relation quantities at one type and layer.
#[derive(Debug, Clone)]
struct RelationCache {
    relation: usize,
    /// Aggregated neighbor inputs `Â · H_target`; `None` for the self-relation.
    aggregate: Option<Array2<f64>>,
    projected: Array2<f64>,
    score: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Debug, Clone)]
struct TypeCache {
    rels: Vec<RelationCache>,
    pre_activation: Array2<f64>,
    output: Array2<f64>,
}

/// Per-object embeddings from the top layer, with the forward activations
/// kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    layers: Vec<Vec<TypeCache>>,
    offsets: Vec<usize>,
}

impl EmbeddingTable {
    pub fn num_objects(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn dim(&self) -> usize {
        self.layers.last().and_then(|l| l.first()).map_or(0, |t| t.output.ncols())
    }

    /// Top-layer embeddings of one type.
    pub fn of_type(&self, ty: usize) -> &Array2<f64> {
        &self.layers.last().expect("at least one layer")[ty].output
    }

    /// Embedding of one object by global id.
    pub fn row(&self, global: usize) -> ndarray::ArrayView1<'_, f64> {
        let ty = self.offsets.partition_point(|&o| o <= global) - 1;
        self.of_type(ty).row(global - self.offsets[ty])
    }

    /// `|V| × d` matrix in global-id order.
    pub fn to_matrix(&self) -> Array2<f64> {
        let top = self.layers.last().expect("at least one layer");
        let views: Vec<_> = top.iter().map(|t| t.output.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    }

    /// Detached β coefficients.
    pub fn attention(&self, graph: &HinGraph) -> AttentionSnapshot {
        let nrel = graph.schema().relations().len();
        let layers = self
            .layers
            .iter()
            .map(|types| {
                let mut per_rel = vec![Vec::new(); nrel];
                for tc in types {
                    for rc in &tc.rels {
                        per_rel[rc.relation] = rc.beta.clone();
                    }
                }
                per_rel
            })
            .collect();
        AttentionSnapshot { layers }
    }
}

/// β per layer, per relation, per source-type object (local index). Objects
/// with no neighbors under a relation carry β = 0 there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot {
    layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionSnapshot {
    pub fn from_raw(layers: Vec<Vec<Vec<f64>>>) -> Self {
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// β of every source-type object under `relation` at `layer`.
    pub fn relation(&self, layer: usize, relation: usize) -> &[f64] {
        &self.layers[layer][relation]
    }

    /// `(relation, β)` pairs for one object, over all relations into its type.
    pub fn at(&self, graph: &HinGraph, layer: usize, global: usize) -> Vec<(usize, f64)> {
        let (ty, local) = graph.localize(global);
        graph
            .relations_into(ty)
            .iter()
            .map(|&r| (r, self.layers[layer][r][local]))
            .collect()
    }

    /// Attention with β uniform over each object's available relations.
    pub fn uniform(graph: &HinGraph, num_layers: usize) -> Self {
        let schema = graph.schema();
        let mut per_rel = vec![Vec::new(); schema.relations().len()];
        for ty in 0..schema.num_types() {
            let rels = graph.relations_into(ty);
            for local in 0..graph.count(ty) {
                let avail = rels.iter().filter(|&&r| graph.adjacency(r).degree(local) > 0).count();
                for &r in rels {
                    let b = if graph.adjacency(r).degree(local) > 0 { 1.0 / avail as f64 } else { 0.0 };
                    per_rel[r].push(b);
                }
            }
        }
        Self {
            layers: vec![per_rel; num_layers],
        }
    }
}

/// Encoder forward pass over the whole graph.
pub fn forward(params: &ModelParams, graph: &HinGraph, features: &FeatureSet) -> Result<(EmbeddingTable, AttentionSnapshot)> {
    let table = forward_cached(params, graph, features)?;
    let snap = table.attention(graph);
    Ok((table, snap))
}

/// Forward pass returning only the activation table.
pub fn forward_cached(params: &ModelParams, graph: &HinGraph, features: &FeatureSet) -> Result<EmbeddingTable> {
    params.check_against(graph, features)?;
    let schema = graph.schema();
    let nl = params.num_layers();
    let mut layers: Vec<Vec<TypeCache>> = Vec::with_capacity(nl);
    for l in 0..nl {
        let inputs: Vec<&Array2<f64>> = if l == 0 {
            features.matrices().iter().collect()
        } else {
            layers[l - 1].iter().map(|t| &t.output).collect()
        };
        let lp = &params.layers[l];
        let is_top = l + 1 == nl;
        let activate = !is_top || params.config.top_activation;
        let mut types = Vec::with_capacity(schema.num_types());
        for ty in 0..schema.num_types() {
            let n = graph.count(ty);
            let (qv, kv) = score_vectors(lp, ty);
            let self_rel = schema.self_relation(ty);
            let self_proj = par::dot(inputs[ty].view(), lp.projections[self_rel].view());
            let self_score = self_proj.dot(&qv);

            let mut rels = Vec::new();
            for &r in graph.relations_into(ty) {
                let (aggregate, projected) = match graph.adjacency(r) {
                    Adjacency::Identity(_) => (None, self_proj.clone()),
                    Adjacency::Sparse { forward, .. } => {
                        let agg = forward.spmm(inputs[schema.relation(r).target].view());
                        let proj = par::dot(agg.view(), lp.projections[r].view());
                        (Some(agg), proj)
                    }
                };
                let score = (&self_score + &projected.dot(&kv)).to_vec();
                rels.push(RelationCache {
                    relation: r,
                    aggregate,
                    projected,
                    score,
                    beta: vec![0.0; n],
                });
            }

            attention_weights(graph, &mut rels, params.config.attention, params.config.leaky_slope);

            let d = params.config.hidden_dims[l];
            let mut pre = Array2::<f64>::zeros((n, d));
            for rc in &rels {
                Zip::from(pre.rows_mut())
                    .and(rc.projected.rows())
                    .and(&rc.beta)
                    .for_each(|mut acc, z, &b| {
                        if b != 0.0 {
                            acc.scaled_add(b, &z);
                        }
                    });
            }
            let output = if activate { pre.mapv(elu) } else { pre.clone() };
            if let Some(idx) = output.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    what: "encoder activation",
                    layer: l,
                    object: graph.globalize(ty, idx / d),
                });
            }
            types.push(TypeCache {
                rels,
                pre_activation: pre,
                output,
            });
        }
        layers.push(types);
    }
    let mut offsets: Vec<usize> = (0..schema.num_types()).map(|t| graph.offset(t)).collect();
    offsets.push(graph.num_objects());
    Ok(EmbeddingTable { layers, offsets })
}

/// `(Q_Ω a_q, K_Ω a_k)`: the score is linear in these two vectors.
fn score_vectors(lp: &LayerParams, ty: usize) -> (Array1<f64>, Array1<f64>) {
    let da = lp.query[ty].ncols();
    let a = &lp.attention[ty];
    let qv = lp.query[ty].dot(&a.slice(s![..da]));
    let kv = lp.key[ty].dot(&a.slice(s![da..]));
    (qv, kv)
}

fn attention_weights(graph: &HinGraph, rels: &mut [RelationCache], mode: AttentionMode, slope: f64) {
    let n = rels.first().map_or(0, |r| r.beta.len());
    let avail: Vec<Vec<bool>> = rels
        .iter()
        .map(|rc| (0..n).map(|i| graph.adjacency(rc.relation).degree(i) > 0).collect())
        .collect();
    for i in 0..n {
        match mode {
            AttentionMode::Uniform => {
                let count = avail.iter().filter(|a| a[i]).count() as f64;
                for (rc, a) in rels.iter_mut().zip(&avail) {
                    rc.beta[i] = if a[i] { 1.0 / count } else { 0.0 };
                }
            }
            AttentionMode::Learned => {
                let mut max = f64::NEG_INFINITY;
                for (rc, a) in rels.iter().zip(&avail) {
                    if a[i] {
                        max = max.max(leaky(rc.score[i], slope));
                    }
                }
                let mut total = 0.0;
                for (rc, a) in rels.iter_mut().zip(&avail) {
                    rc.beta[i] = if a[i] { (leaky(rc.score[i], slope) - max).exp() } else { 0.0 };
                    total += rc.beta[i];
                }
                for rc in rels.iter_mut() {
                    rc.beta[i] /= total;
                }
            }
        }
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `softmax(H · C)` for every object, in global-id order.
pub fn classify(params: &ModelParams, embeddings: &EmbeddingTable) -> Result<Predictions> {
    if embeddings.dim() != params.embedding_dim() {
        return Err(Error::size("embedding dim vs classifier rows", params.embedding_dim(), embeddings.dim()));
    }
    classify_matrix(params, embeddings.to_matrix().view())
}

pub fn classify_matrix(params: &ModelParams, embeddings: ArrayView2<'_, f64>) -> Result<Predictions> {
    if embeddings.ncols() != params.embedding_dim() {
        return Err(Error::size("embedding dim vs classifier rows", params.embedding_dim(), embeddings.ncols()));
    }
    Ok(softmax_rows(&par::dot(embeddings, params.classifier.view())))
}

/// `−Σ_i ln P[i, y_i]` over all objects, probabilities floored at 1e-12.
pub fn cross_entropy(predictions: &Predictions, labels: &PseudoLabels) -> Result<f64> {
    cross_entropy_masked(predictions, labels, None)
}

/// Cross-entropy restricted to objects where `mask` is true.
pub fn cross_entropy_masked(predictions: &Predictions, labels: &PseudoLabels, mask: Option<&[bool]>) -> Result<f64> {
    check_label_dims(predictions, labels, mask)?;
    Ok(predictions
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(i, row)| -row[labels.get(i)].max(PROB_FLOOR).ln())
        .sum())
}

fn check_label_dims(predictions: &Predictions, labels: &PseudoLabels, mask: Option<&[bool]>) -> Result<()> {
    if predictions.nrows() != labels.len() {
        return Err(Error::size("objects in predictions vs labels", labels.len(), predictions.nrows()));
    }
    if predictions.ncols() != labels.k() {
        return Err(Error::size("label space K", labels.k(), predictions.ncols()));
    }
    if let Some(m) = mask {
        if m.len() != labels.len() {
            return Err(Error::size("loss mask", labels.len(), m.len()));
        }
    }
    Ok(())
}

/// Exact gradients of `cross_entropy ∘ classify ∘ forward` over all objects.
pub fn backward(params: &ModelParams, graph: &HinGraph, features: &FeatureSet, labels: &PseudoLabels) -> Result<Gradients> {
    let table = forward_cached(params, graph, features)?;
    Ok(backward_from(params, graph, features, &table, labels, None)?.1)
}

/// Loss and gradients from a cached forward pass. With a mask, only masked-in
/// objects contribute.
pub fn backward_from(
    params: &ModelParams,
    graph: &HinGraph,
    features: &FeatureSet,
    table: &EmbeddingTable,
    labels: &PseudoLabels,
    mask: Option<&[bool]>,
) -> Result<(f64, Gradients)> {
    let schema = graph.schema();
    let h_top = table.to_matrix();
    let probs = classify_matrix(params, h_top.view())?;
    check_label_dims(&probs, labels, mask)?;

    let mut loss = 0.0;
    let mut g_logits = probs;
    for (i, mut row) in g_logits.rows_mut().into_iter().enumerate() {
        let y = labels.get(i);
        let p = row[y];
        if mask.is_some_and(|m| !m[i]) {
            row.fill(0.0);
            continue;
        }
        loss -= p.max(PROB_FLOOR).ln();
        if p < PROB_FLOOR {
            // Clamped: the loss is locally constant in this row.
            row.fill(0.0);
        } else {
            row[y] -= 1.0;
        }
    }

    let mut grads = params.zeros_like();
    grads.classifier = par::tdot(h_top.view(), g_logits.view());
    let g_h_global = par::dot(g_logits.view(), params.classifier.t());

    // Upstream gradient per type at the current layer output.
    let mut upstream: Vec<Array2<f64>> = (0..schema.num_types())
        .map(|t| {
            let lo = graph.offset(t);
            g_h_global.slice(s![lo..lo + graph.count(t), ..]).to_owned()
        })
        .collect();

    let nl = params.num_layers();
    let slope = params.config.leaky_slope;
    let learned = params.config.attention == AttentionMode::Learned;
    for l in (0..nl).rev() {
        let lp = &params.layers[l];
        let glp = &mut grads.layers[l];
        let activate = l + 1 < nl || params.config.top_activation;
        let inputs: Vec<&Array2<f64>> = if l == 0 {
            features.matrices().iter().collect()
        } else {
            table.layers[l - 1].iter().map(|t| &t.output).collect()
        };
        let mut downstream: Vec<Array2<f64>> = inputs.iter().map(|m| Array2::zeros(m.raw_dim())).collect();

        for ty in 0..schema.num_types() {
            let tc = &table.layers[l][ty];
            let n = graph.count(ty);
            let mut g_pre = std::mem::take(&mut upstream[ty]);
            if activate {
                Zip::from(&mut g_pre)
                    .and(&tc.pre_activation)
                    .for_each(|g, &u| *g *= elu_grad(u));
            }

            // dL/dβ_i^r = g_pre_i · z_i^r
            let g_beta: Vec<Array1<f64>> = tc
                .rels
                .iter()
                .map(|rc| (&g_pre * &rc.projected).sum_axis(Axis(1)))
                .collect();

            // Score gradients through softmax and LeakyReLU.
            let mut g_score: Vec<Array1<f64>> = tc.rels.iter().map(|_| Array1::zeros(n)).collect();
            if learned {
                for i in 0..n {
                    let mean: f64 = tc.rels.iter().zip(&g_beta).map(|(rc, gb)| rc.beta[i] * gb[i]).sum();
                    for (k, rc) in tc.rels.iter().enumerate() {
                        let ge = rc.beta[i] * (g_beta[k][i] - mean);
                        g_score[k][i] = if rc.score[i] > 0.0 { ge } else { slope * ge };
                    }
                }
            }

            let (qv, kv) = score_vectors(lp, ty);
            let self_idx = 0;
            debug_assert!(schema.relation(tc.rels[self_idx].relation).is_self);
            let g_score_sum: Array1<f64> = g_score.iter().fold(Array1::zeros(n), |acc, g| acc + g);

            let mut g_kv = Array1::<f64>::zeros(kv.len());
            for (k, rc) in tc.rels.iter().enumerate() {
                // dL/dz^r: attention-weighted share plus the key path.
                let mut g_proj = &g_pre * &rc.beta.iter().copied().collect::<Array1<f64>>().insert_axis(Axis(1));
                if learned {
                    g_kv += &rc.projected.t().dot(&g_score[k]);
                    add_outer(&mut g_proj, &g_score[k], &kv);
                    if k == self_idx {
                        add_outer(&mut g_proj, &g_score_sum, &qv);
                    }
                }

                let r = rc.relation;
                let input_rows = rc.aggregate.as_ref().unwrap_or(inputs[ty]);
                glp.projections[r] += &par::tdot(input_rows.view(), g_proj.view());

                if l > 0 {
                    let g_in = par::dot(g_proj.view(), lp.projections[r].t());
                    match graph.adjacency(r) {
                        Adjacency::Identity(_) => downstream[ty] += &g_in,
                        Adjacency::Sparse { reverse, .. } => {
                            downstream[schema.relation(r).target] += &reverse.spmm(g_in.view());
                        }
                    }
                }
            }

            if learned {
                let da = lp.query[ty].ncols();
                let a = &lp.attention[ty];
                // score = z_self·(Q a_q) + z_r·(K a_k)
                let g_qv = tc.rels[self_idx].projected.t().dot(&g_score_sum);
                glp.query[ty] += &outer(&g_qv, &a.slice(s![..da]).to_owned());
                glp.key[ty] += &outer(&g_kv, &a.slice(s![da..]).to_owned());
                let mut ga = Array1::<f64>::zeros(2 * da);
                ga.slice_mut(s![..da]).assign(&lp.query[ty].t().dot(&g_qv));
                ga.slice_mut(s![da..]).assign(&lp.key[ty].t().dot(&g_kv));
                glp.attention[ty] += &ga;
            }
        }
        upstream = downstream;
    }

    let names = grads.tensor_names(schema);
    for ((_, t), name) in grads.tensors().into_iter().zip(names) {
        if let Some(index) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: name, index });
        }
    }
    Ok((loss, grads))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    Array2::from_shape_fn((n, m), |(i, j)| a[i] * b[j])
}

/// `m += a ⊗ b`.
fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    Zip::from(m.rows_mut()).and(a).for_each(|mut row, &ai| {
        if ai != 0.0 {
            row.scaled_add(ai, b);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Edge, RelationSpec};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_type_graph(n: usize, edges: &[(usize, usize)]) -> HinGraph {
        let schema = HinSchema::new(vec!["N".into()], vec![RelationSpec::new("NN", "N", "N")]).unwrap();
        let list = edges.iter().map(|&(a, b)| Edge::unit(a, b)).collect();
        build_graph(schema, &[list], &[n]).unwrap()
    }

    #[test]
    fn self_only_object_uses_self_projection() {
        let g = one_type_graph(1, &[]);
        let feats = FeatureSet::new(&g, vec![array![[0.5, -2.0]]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig {
            hidden_dims: vec![3],
            ..Default::default()
        };
        let p = ModelParams::xavier(g.schema(), &[2], cfg, 2, &mut rng).unwrap();
        let (emb, snap) = forward(&p, &g, &feats).unwrap();
        let self_rel = g.schema().self_relation(0);
        assert_eq!(snap.relation(0, self_rel), &[1.0]);
        assert_eq!(snap.relation(0, 0), &[0.0]);
        let expect = feats.matrix(0).dot(&p.layers[0].projections[self_rel]).mapv(elu);
        assert_eq!(emb.of_type(0), &expect);
    }

    #[test]
    fn equal_neighbors_aggregate_to_projection() {
        // Object 0 has neighbors 1 and 2 with identical features.
        let g = one_type_graph(3, &[(0, 1), (0, 2)]);
        let x = array![[1.0, 0.0], [0.3, -0.7], [0.3, -0.7]];
        let feats = FeatureSet::new(&g, vec![x.clone()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EncoderConfig {
            hidden_dims: vec![4],
            ..Default::default()
        };
        let p = ModelParams::xavier(g.schema(), &[2], cfg, 2, &mut rng).unwrap();
        let table = forward_cached(&p, &g, &feats).unwrap();
        let rc = &table.layers[0][0].rels[1];
        assert_eq!(rc.relation, 0);
        let expect = x.row(1).dot(&p.layers[0].projections[0]);
        for (a, b) in rc.projected.row(0).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let p = softmax_rows(&Array2::zeros((2, 4)));
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax_rows(&array![[1000.0, 0.0, 0.0, 0.0]]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_edge_cases() {
        let labels = PseudoLabels::new(vec![0, 2, 1], 3).unwrap();
        let perfect = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        assert_eq!(cross_entropy(&perfect, &labels).unwrap(), 0.0);
        let uniform = Array2::from_elem((3, 3), 1.0 / 3.0);
        assert!((cross_entropy(&uniform, &labels).unwrap() - 3.0 * 3f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&Array2::zeros((2, 3)), &labels).is_err());
        assert!(cross_entropy(&Array2::zeros((3, 4)), &labels).is_err());
        // Zero probability is floored rather than producing infinity.
        let zero = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        assert!((cross_entropy(&zero, &labels).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn classifier_gradient_with_zero_inputs() {
        // Zero features and zero projections: H = ELU(0) = 0, P uniform,
        // dL/dC = Hᵀ(P − Y) = 0 and the softmax-CE row gradient is P − Y.
        let g = one_type_graph(4, &[(0, 1), (1, 0), (2, 3)]);
        let feats = FeatureSet::new(&g, vec![Array2::zeros((4, 3))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            hidden_dims: vec![2],
            ..Default::default()
        };
        let mut p = ModelParams::xavier(g.schema(), &[3], cfg, 3, &mut rng).unwrap();
        for w in &mut p.layers[0].projections {
            w.fill(0.0);
        }
        let labels = PseudoLabels::new(vec![0, 1, 2, 0], 3).unwrap();
        let table = forward_cached(&p, &g, &feats).unwrap();
        let probs = classify(&p, &table).unwrap();
        assert!(probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let grads = backward(&p, &g, &feats, &labels).unwrap();
        assert!(grads.classifier.iter().all(|&v| v == 0.0));
        let (loss, _) = backward_from(&p, &g, &feats, &table, &labels, None).unwrap();
        assert!((loss - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tensor_names_align_with_tensors() {
        let g = one_type_graph(2, &[(0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::xavier(g.schema(), &[3], EncoderConfig::default(), 5, &mut rng).unwrap();
        assert_eq!(p.tensor_names(g.schema()).len(), p.tensors().len());
        assert_eq!(p.layers[0].projections[0].dim(), (3, 64));
        assert_eq!(p.layers[1].projections[1].dim(), (64, 64));
        assert_eq!(p.layers[0].query[0].dim(), (64, 32));
        assert_eq!(p.layers[0].attention[0].len(), 64);
        assert_eq!(p.classifier.dim(), (64, 5));
    }

    #[test]
    fn forward_rejects_wrong_feature_width() {
        let g = one_type_graph(2, &[(0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::xavier(g.schema(), &[3], EncoderConfig::default(), 2, &mut rng).unwrap();
        let feats = FeatureSet::new(&g, vec![Array2::zeros((2, 4))]).unwrap();
        assert!(matches!(forward(&p, &g, &feats), Err(Error::SizeMismatch { .. })));
    }
}
