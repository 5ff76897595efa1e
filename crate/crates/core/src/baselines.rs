//! Training-free grouping baselines and clustering-quality metrics.
//!
//! Every baseline groups items by their semantic vectors and pools their
//! ranking vectors with a plain mean, so comparisons against agent routing
//! differ only in the grouping rule.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, InteractionSequence, ItemCorpus};
use crate::matrix::{sq_dist64, sq_dist_mixed, Matrix};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("need at least {groups} items for {groups} groups, got {items}")]
    TooFewItems { items: usize, groups: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("silhouette needs at least two distinct labels")]
    SingleLabel,
    #[error("{labels} labels for {points} points")]
    LabelCount { labels: usize, points: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T, E = BaselineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMethod {
    Patch,
    Kmeans,
    Lsh,
}

impl std::str::FromStr for GroupingMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "patch" => Ok(Self::Patch),
            "kmeans" => Ok(Self::Kmeans),
            "lsh" => Ok(Self::Lsh),
            other => Err(format!("unknown baseline {other:?}")),
        }
    }
}

/// A partition of the history into nonempty groups, numbered `0..G`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingResult {
    pub group_of: Vec<usize>,
    /// `G x d'` mean ranking vector per group.
    pub group_vectors: Matrix<f64>,
    pub method: GroupingMethod,
}

impl GroupingResult {
    pub fn num_groups(&self) -> usize {
        self.group_vectors.rows()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups()];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    /// Mean squared distance from each item's semantic vector to its group's
    /// semantic centroid.
    pub fn quantization_error(&self, history: &InteractionSequence, corpus: &ItemCorpus) -> Result<f64> {
        let rows = corpus.resolve(history)?;
        let centroids = mean_by_group(&rows, &self.group_of, self.num_groups(), corpus.semantic());
        let total: f64 = rows
            .iter()
            .zip(&self.group_of)
            .map(|(&r, &g)| sq_dist_mixed(corpus.semantic().row(r), centroids.row(g)))
            .sum();
        Ok(total / rows.len() as f64)
    }
}

fn mean_by_group(rows: &[usize], group_of: &[usize], groups: usize, source: &Matrix<f32>) -> Matrix<f64> {
    let mut out = Matrix::zeros(groups, source.cols());
    let mut counts = vec![0usize; groups];
    for (&r, &g) in rows.iter().zip(group_of) {
        counts[g] += 1;
        for (o, &x) in out.row_mut(g).iter_mut().zip(source.row(r)) {
            *o += f64::from(x);
        }
    }
    for (g, &c) in counts.iter().enumerate() {
        out.row_mut(g).iter_mut().for_each(|x| *x /= c as f64);
    }
    out
}

/// Renumbers labels so that the nonempty groups are `0..G` in ascending
/// label order, then pools ranking rows.
fn finish(
    labels: Vec<usize>,
    rows: &[usize],
    corpus: &ItemCorpus,
    method: GroupingMethod,
) -> GroupingResult {
    let mut remap = BTreeMap::new();
    for &l in &labels {
        remap.insert(l, 0);
    }
    for (i, v) in remap.values_mut().enumerate() {
        *v = i;
    }
    let group_of: Vec<usize> = labels.iter().map(|l| remap[l]).collect();
    let group_vectors = mean_by_group(rows, &group_of, remap.len(), corpus.ranking());
    GroupingResult {
        group_of,
        group_vectors,
        method,
    }
}

/// Contiguous time-ordered patches of near-equal size; the first `N mod G`
/// patches take one extra item.
pub fn patch_compress(
    history: &InteractionSequence,
    corpus: &ItemCorpus,
    patch_count: usize,
) -> Result<GroupingResult> {
    if patch_count == 0 {
        return Err(BaselineError::InvalidParameter("patch_count must be at least 1".into()));
    }
    let rows = corpus.resolve(history)?;
    let n = rows.len();
    let g = patch_count.min(n);
    let (base, rem) = (n / g, n % g);
    let mut labels = Vec::with_capacity(n);
    for p in 0..g {
        let size = base + usize::from(p < rem);
        labels.extend(std::iter::repeat_n(p, size));
    }
    Ok(finish(labels, &rows, corpus, GroupingMethod::Patch))
}

/// Result of [`lloyd`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Matrix<f64>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_trace: Vec<f64>,
}

fn assign_nearest(points: &Matrix<f64>, centers: &Matrix<f64>, out: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (i, a) in out.iter_mut().enumerate() {
        let p = points.row(i);
        let mut best = (0, f64::INFINITY);
        for (k, c) in centers.iter_rows().enumerate() {
            let d = sq_dist64(p, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        *a = best.0;
        total += best.1;
    }
    total
}

/// Lloyd's algorithm from `g` distinct sampled points. Empty clusters are
/// moved onto a random point. `iters = 0` only assigns to the initial centers.
pub fn lloyd<R: Rng>(points: &Matrix<f64>, g: usize, iters: usize, rng: &mut R) -> Result<KMeansFit> {
    let n = points.rows();
    if g == 0 {
        return Err(BaselineError::InvalidParameter("group count must be at least 1".into()));
    }
    if n < g {
        return Err(BaselineError::TooFewItems { items: n, groups: g });
    }
    let mut picks = index::sample(rng, n, g).into_vec();
    picks.sort_unstable();
    let mut centers = points.select_rows(&picks);
    let mut assignment = vec![0; n];
    let mut trace = vec![assign_nearest(points, &centers, &mut assignment)];
    for _ in 0..iters {
        let mut sums = Matrix::<f64>::zeros(g, points.cols());
        let mut counts = vec![0usize; g];
        for (i, &k) in assignment.iter().enumerate() {
            counts[k] += 1;
            for (s, &x) in sums.row_mut(k).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for k in 0..g {
            if counts[k] == 0 {
                let src = rng.random_range(0..n);
                centers.row_mut(k).copy_from_slice(points.row(src));
            } else {
                for (c, &s) in centers.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *c = s / counts[k] as f64;
                }
            }
        }
        trace.push(assign_nearest(points, &centers, &mut assignment));
    }
    Ok(KMeansFit {
        centers,
        assignment,
        objective_trace: trace,
    })
}

/// K-means on semantic vectors, seeded per user from `seed`.
pub fn kmeans_compress(
    history: &InteractionSequence,
    corpus: &ItemCorpus,
    g: usize,
    iters: usize,
    seed: u64,
) -> Result<GroupingResult> {
    let rows = corpus.resolve(history)?;
    let points = corpus.semantic().select_rows(&rows).to_f64();
    let mut rng = stream(seed, Purpose::KMeans, history.user_id());
    let fit = lloyd(&points, g, iters, &mut rng)?;
    Ok(finish(fit.assignment, &rows, corpus, GroupingMethod::Kmeans))
}

/// Random-hyperplane hashing: `num_bits` Gaussian normals drawn from `seed`
/// (shared by all users); an item's bucket is its sign pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperplaneHasher {
    normals: Matrix<f64>,
}

impl HyperplaneHasher {
    pub fn new(dim: usize, num_bits: usize, seed: u64) -> Result<Self> {
        if num_bits == 0 || num_bits > 64 {
            return Err(BaselineError::InvalidParameter(format!(
                "num_bits must lie in 1..=64, got {num_bits}"
            )));
        }
        let mut rng = stream(seed, Purpose::Lsh, 0);
        let data = (0..num_bits * dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            normals: Matrix::from_vec(num_bits, dim, data).expect("sized"),
        })
    }

    pub fn hash(&self, x: &[f32]) -> u64 {
        self.normals.iter_rows().enumerate().fold(0u64, |key, (b, n)| {
            let dot: f64 = n.iter().zip(x).map(|(a, &v)| a * f64::from(v)).sum();
            key | (u64::from(dot >= 0.0) << b)
        })
    }
}

pub fn lsh_compress(
    history: &InteractionSequence,
    corpus: &ItemCorpus,
    num_bits: usize,
    seed: u64,
) -> Result<GroupingResult> {
    let hasher = HyperplaneHasher::new(corpus.semantic_dim(), num_bits, seed)?;
    let rows = corpus.resolve(history)?;
    let labels = rows
        .iter()
        .map(|&r| hasher.hash(corpus.semantic().row(r)) as usize)
        .collect();
    Ok(finish(labels, &rows, corpus, GroupingMethod::Lsh))
}

/// Mean silhouette `(b - a) / max(a, b)` with Euclidean distances. Points in
/// singleton clusters score 0.
pub fn silhouette(points: &Matrix<f64>, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(BaselineError::LabelCount { labels: labels.len(), points: n });
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(BaselineError::SingleLabel);
    }
    let dense: Vec<usize> = labels.iter().map(|l| ids.binary_search(l).unwrap()).collect();
    let mut sizes = vec![0usize; ids.len()];
    for &c in &dense {
        sizes[c] += 1;
    }
    let mut sum_to = vec![0.0; ids.len()];
    let mut total = 0.0;
    for i in 0..n {
        let own = dense[i];
        if sizes[own] == 1 {
            continue;
        }
        sum_to.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sum_to[dense[j]] += sq_dist64(points.row(i), points.row(j)).sqrt();
            }
        }
        let a = sum_to[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != own)
            .map(|c| sum_to[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}
