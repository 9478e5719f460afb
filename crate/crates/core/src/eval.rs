//! Downstream evaluation of frozen embeddings: a multinomial logistic
//! regression probe (micro/macro F1) and k-means clustering (NMI/ARI).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub const PROBE_L2: f64 = 1e-4;
pub const PROBE_ITERS: usize = 500;
pub const SPLIT_REDRAWS: usize = 20;
pub const KMEANS_MAX_ITERS: usize = 300;

/// A labeled object: `(row in the embedding matrix, class id)`.
pub type Labeled = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub nmi: f64,
    pub ari: f64,
}

/// Relabel arbitrary ids to `0..m` in order of first appearance.
fn densify(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let n = map.len();
            *map.entry(l).or_insert(n)
        })
        .collect();
    (out, map.len())
}

fn contingency(a: &[usize], b: &[usize]) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let (a, na) = densify(a);
    let (b, nb) = densify(b);
    let mut table = Array2::<f64>::zeros((na, nb));
    for (&x, &y) in a.iter().zip(&b) {
        table[[x, y]] += 1.0;
    }
    let rows = table.sum_axis(Axis(1)).to_vec();
    let cols = table.sum_axis(Axis(0)).to_vec();
    (table, rows, cols)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::size("clusterings", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("NMI of empty clusterings".into()));
    }
    let n = truth.len() as f64;
    let (table, rows, cols) = contingency(truth, pred);
    let mut mi = 0.0;
    for ((i, j), &nij) in table.indexed_iter() {
        if nij > 0.0 {
            mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
        }
    }
    let denom = 0.5 * (entropy(&rows, n) + entropy(&cols, n));
    if denom <= 0.0 {
        // Both clusterings are a single block: identical partitions.
        return Ok(1.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index (pair-counting form).
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::size("clusterings", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("ARI of empty clusterings".into()));
    }
    let (table, rows, cols) = contingency(truth, pred);
    let index: f64 = table.iter().map(|&v| comb2(v)).sum();
    let sa: f64 = rows.iter().map(|&v| comb2(v)).sum();
    let sb: f64 = cols.iter().map(|&v| comb2(v)).sum();
    let expected = sa * sb / comb2(truth.len() as f64).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Micro- and macro-averaged F1 for single-label multiclass predictions.
/// Macro F1 averages over classes present in either `truth` or `pred`.
pub fn f1_scores(truth: &[usize], pred: &[usize]) -> Result<ProbeScores> {
    if truth.len() != pred.len() {
        return Err(Error::size("predictions", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("F1 of an empty set".into()));
    }
    let m = truth.iter().chain(pred).copied().max().unwrap_or(0) + 1;
    let (mut tp, mut fp, mut fneg) = (vec![0usize; m], vec![0usize; m], vec![0usize; m]);
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let micro = correct as f64 / truth.len() as f64;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..m {
        if tp[c] + fp[c] + fneg[c] == 0 {
            continue;
        }
        present += 1;
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok(ProbeScores {
        micro_f1: micro,
        macro_f1: sum / present as f64,
    })
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seed(data: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::<f64>::zeros((k, data.ncols()));
    centroids.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// One k-means++ seeded Lloyd run.
pub fn kmeans_single(data: ArrayView2<'_, f64>, k: usize, seed: u64, max_iters: usize) -> KMeansResult {
    let n = data.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(data, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let cent = &centroids;
        let nearest: Vec<(usize, f64)> = par::map_indices(n, |i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(data.row(i), cent.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        });
        let changed = nearest.iter().zip(&assignment).any(|(a, &b)| a.0 != b);
        for (slot, a) in assignment.iter_mut().zip(&nearest) {
            *slot = a.0;
        }
        history.push(nearest.iter().map(|a| a.1).sum());
        if !changed {
            break;
        }

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &data.row(i));
            counts[c] += 1;
        }
        let mut taken = vec![false; n];
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / count as f64));
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| nearest[a].1.total_cmp(&nearest[b].1).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                centroids.row_mut(c).assign(&data.row(far));
            }
        }
    }
    let inertia = *history.last().unwrap_or(&0.0);
    KMeansResult {
        assignment,
        centroids,
        inertia,
        history,
    }
}

/// Best-inertia k-means over `restarts` seeded runs.
pub fn kmeans(data: ArrayView2<'_, f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k < 1 || data.nrows() < k {
        return Err(Error::InvalidArgument(format!("k-means with k = {k} on {} points", data.nrows())));
    }
    let runs = par::map_indices(restarts.max(1), |r| {
        kmeans_single(data, k, seed.wrapping_mul(1_000_003).wrapping_add(r as u64), KMEANS_MAX_ITERS)
    });
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one restart"))
}

fn gather(embeddings: ArrayView2<'_, f64>, labeled: &[Labeled]) -> Result<Array2<f64>> {
    if let Some(&(row, _)) = labeled.iter().find(|l| l.0 >= embeddings.nrows()) {
        return Err(Error::size("labeled object row", embeddings.nrows(), row + 1));
    }
    let rows: Vec<usize> = labeled.iter().map(|l| l.0).collect();
    Ok(embeddings.select(Axis(0), &rows))
}

fn num_classes(labeled: &[Labeled]) -> usize {
    densify(&labeled.iter().map(|l| l.1).collect::<Vec<_>>()).1
}

/// Cluster the labeled objects' embeddings with `k` = number of classes.
pub fn kmeans_eval(embeddings: ArrayView2<'_, f64>, labeled: &[Labeled], seed: u64, restarts: usize) -> Result<ClusterScores> {
    let k = num_classes(labeled);
    if k < 2 {
        return Err(Error::InvalidArgument("clustering evaluation needs at least 2 classes".into()));
    }
    let x = gather(embeddings, labeled)?;
    let res = kmeans(x.view(), k, seed, restarts)?;
    let truth: Vec<usize> = labeled.iter().map(|l| l.1).collect();
    Ok(ClusterScores {
        nmi: nmi(&truth, &res.assignment)?,
        ari: ari(&truth, &res.assignment)?,
    })
}

/// Train/validation/test split of the labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// `train_fraction` of the items for training, the rest halved into
/// validation and test. Redraws until every class appears in training.
pub fn split_labeled(classes: &[usize], train_fraction: f64, seed: u64) -> Result<Split> {
    let n = classes.len();
    let m = densify(classes).1;
    if m < 2 {
        return Err(Error::InvalidArgument("linear probe needs at least 2 classes".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train < m || n_train >= n {
        return Err(Error::InvalidArgument(format!(
            "{n_train} training objects cannot cover {m} classes out of {n} labeled"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SPLIT_REDRAWS {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let train = idx[..n_train].to_vec();
        let mut seen = std::collections::HashSet::new();
        for &i in &train {
            seen.insert(classes[i]);
        }
        if seen.len() == m {
            let rest = &idx[n_train..];
            let n_val = rest.len() / 2;
            return Ok(Split {
                train,
                validation: rest[..n_val].to_vec(),
                test: rest[n_val..].to_vec(),
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "no split with all {m} classes in training after {SPLIT_REDRAWS} draws"
    )))
}

/// Multinomial logistic regression fit by full-batch gradient descent on
/// standardized inputs with a bias column.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Array2<f64>,
}

impl LogisticRegression {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[usize], num_classes: usize, l2: f64, iters: usize) -> Self {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let xs = design(x, &mean, &scale);
        let d = xs.ncols();
        // Step 1/L with L bounding the Hessian of the mean loss.
        let gram = xs.t().dot(&xs) / n;
        let lr = 1.0 / (0.5 * top_eigenvalue(&gram) + l2);
        let mut w = Array2::<f64>::zeros((d, num_classes));
        let mut onehot = Array2::<f64>::zeros((xs.nrows(), num_classes));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        for _ in 0..iters {
            let p = crate::encoder::softmax_rows(&xs.dot(&w));
            let g = xs.t().dot(&(p - &onehot)) / n + &(&w * l2);
            w.scaled_add(-lr, &g);
        }
        Self {
            mean,
            scale,
            weights: w,
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        design(x, &self.mean, &self.scale)
            .dot(&self.weights)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b })
                    .0
            })
            .collect()
    }
}

fn design(x: ArrayView2<'_, f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::<f64>::ones((n, d + 1));
    out.slice_mut(ndarray::s![.., ..d]).assign(&((&x - mean) / scale));
    out
}

fn top_eigenvalue(sym: &Array2<f64>) -> f64 {
    let mut v = Array1::<f64>::from_elem(sym.nrows(), 1.0 / (sym.nrows() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = sym.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    // Power iteration approaches from below; pad slightly.
    1.05 * lambda.max(0.0)
}

/// Train a logistic-regression probe on `train_fraction` of the labeled
/// objects and score micro/macro F1 on the test half of the remainder.
pub fn linear_probe(embeddings: ArrayView2<'_, f64>, labeled: &[Labeled], train_fraction: f64, seed: u64) -> Result<ProbeScores> {
    let x = gather(embeddings, labeled)?;
    let (classes, m) = densify(&labeled.iter().map(|l| l.1).collect::<Vec<_>>());
    let split = split_labeled(&classes, train_fraction, seed)?;
    let xt = x.select(Axis(0), &split.train);
    let yt: Vec<usize> = split.train.iter().map(|&i| classes[i]).collect();
    let model = LogisticRegression::fit(xt.view(), &yt, m, PROBE_L2, PROBE_ITERS);
    let pred = model.predict(x.select(Axis(0), &split.test).view());
    let truth: Vec<usize> = split.test.iter().map(|&i| classes[i]).collect();
    f1_scores(&truth, &pred)
}

/// Mean and per-seed probe scores over `seeds`.
pub fn linear_probe_seeds(
    embeddings: ArrayView2<'_, f64>,
    labeled: &[Labeled],
    train_fraction: f64,
    seeds: &[u64],
) -> Result<(ProbeScores, Vec<ProbeScores>)> {
    let runs: Result<Vec<_>> = par::map_indices(seeds.len(), |i| linear_probe(embeddings, labeled, train_fraction, seeds[i]))
        .into_iter()
        .collect();
    let runs = runs?;
    let n = runs.len().max(1) as f64;
    let mean = ProbeScores {
        micro_f1: runs.iter().map(|r| r.micro_f1).sum::<f64>() / n,
        macro_f1: runs.iter().map(|r| r.macro_f1).sum::<f64>() / n,
    };
    Ok((mean, runs))
}
