//! K-means, DBSCAN and normalised spectral clustering on feature matrices.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label given to DBSCAN noise points.
pub const NOISE: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    F0,
    F0Extended,
    LatentZ,
    RawTime,
    RawDct,
}

impl FeatureSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureSpace::F0 => "f0",
            FeatureSpace::F0Extended => "f0_extended",
            FeatureSpace::LatentZ => "latent_z",
            FeatureSpace::RawTime => "raw_time",
            FeatureSpace::RawDct => "raw_dct",
        }
    }

    /// Spaces that need no trained model.
    pub fn is_raw(&self) -> bool {
        matches!(self, FeatureSpace::RawTime | FeatureSpace::RawDct)
    }
}

/// Rows of features tagged with the space they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Array2<f64>,
    pub space: FeatureSpace,
}

impl FeatureMatrix {
    pub fn new(rows: Array2<f64>, space: FeatureSpace) -> Result<Self> {
        if rows.nrows() < 2 {
            return Err(Error::validation("clustering needs at least two rows"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("features contain non-finite values"));
        }
        Ok(Self { rows, space })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Predicted cluster per row; [`NOISE`] marks DBSCAN outliers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<i64>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        let mut v: Vec<i64> = self.labels.iter().copied().filter(|l| *l != NOISE).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["index", "label"])?;
        for (i, l) in self.labels.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let headers = r.headers()?.clone();
        let col = headers
            .iter()
            .position(|h| h == "label")
            .ok_or_else(|| Error::validation("assignment CSV needs a `label` column"))?;
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = rec.get(col).unwrap_or_default().trim();
            labels.push(
                field
                    .parse()
                    .map_err(|_| Error::validation(format!("bad label `{field}`")))?,
            );
        }
        Ok(Self { labels })
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: ClusterAssignment,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step of the selected restart.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            n_init: 10,
            max_iter: 300,
        }
    }
}

fn kmeans_pp<R: Rng>(x: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.row_mut(0).assign(&x.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in closest.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // every point already coincides with a centroid
            (0..n).find(|i| !chosen[*i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centroids
}

fn assign(x: ArrayView2<'_, f64>, centroids: &Array2<f64>, labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let (best, d) = centroids
            .rows()
            .into_iter()
            .enumerate()
            .map(|(c, cen)| (c, sq_dist(row, cen)))
            .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
        labels[i] = best;
        dists[i] = d;
        inertia += d;
    }
    inertia
}

fn lloyd(x: ArrayView2<'_, f64>, mut centroids: Array2<f64>, max_iter: usize) -> (Vec<usize>, Array2<f64>, f64, Vec<f64>) {
    let n = x.nrows();
    let k = centroids.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let inertia = assign(x, &centroids, &mut next, &mut dists);
        history.push(inertia);
        if next == labels {
            break;
        }
        labels.copy_from_slice(&next);
        let mut counts = vec![0usize; k];
        centroids.fill(0.0);
        for (i, &c) in labels.iter().enumerate() {
            let mut row = centroids.row_mut(c);
            row += &x.row(i);
            counts[c] += 1;
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = centroids.row_mut(c);
                row /= counts[c] as f64;
            } else {
                // reseed an empty cluster at the worst-fit point
                let far = (0..n)
                    .filter(|i| !taken[*i])
                    .max_by(|a, b| dists[*a].total_cmp(&dists[*b]).then(b.cmp(a)))
                    .unwrap_or(0);
                taken[far] = true;
                dists[far] = 0.0;
                centroids.row_mut(c).assign(&x.row(far));
            }
        }
    }
    let inertia = *history.last().unwrap();
    (next, centroids, inertia, history)
}

/// Lloyd iterations from k-means++ seeds; keeps the lowest-inertia restart.
pub fn kmeans(features: ArrayView2<'_, f64>, params: &KMeansParams) -> Result<KMeansResult> {
    let n = features.nrows();
    if params.k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if params.k > n {
        return Err(Error::validation(format!(
            "k = {} exceeds the number of points ({n})",
            params.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..params.n_init.max(1) {
        let init = kmeans_pp(features, params.k, &mut rng);
        let (labels, centroids, inertia, history) = lloyd(features, init, params.max_iter);
        if best.as_ref().map_or(true, |b| inertia < b.inertia) {
            best = Some(KMeansResult {
                assignment: ClusterAssignment {
                    labels: labels.into_iter().map(|l| l as i64).collect(),
                },
                centroids,
                inertia,
                history,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Density clustering with Euclidean `eps`-neighbourhoods (self included).
///
/// Border points join the cluster of their nearest core point, which makes
/// the partition independent of row order.
pub fn dbscan(features: ArrayView2<'_, f64>, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !(eps > 0.0) {
        return Err(Error::validation("eps must be positive"));
    }
    if min_pts == 0 {
        return Err(Error::validation("min_pts must be at least 1"));
    }
    let n = features.nrows();
    let eps2 = eps * eps;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| sq_dist(features.row(i), features.row(j)) <= eps2)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if core[q] && labels[q] == NOISE {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for p in 0..n {
        if core[p] {
            continue;
        }
        let nearest = neighbours[p]
            .iter()
            .filter(|&&q| core[q])
            .map(|&q| (q, sq_dist(features.row(p), features.row(q))))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((q, _)) = nearest {
            labels[p] = labels[q];
        }
    }
    Ok(ClusterAssignment { labels })
}

const DEGREE_EPS: f64 = 1e-10;

/// Normalised spectral embedding followed by k-means.
///
/// Affinity `exp(-gamma |x_i - x_j|^2)` with a zero diagonal; the embedding
/// uses the `k` eigenvectors of `I - D^-1/2 A D^-1/2` with the smallest
/// eigenvalues, rows scaled to unit length.
pub fn spectral_cluster(features: ArrayView2<'_, f64>, k: usize, seed: u64, gamma: f64) -> Result<ClusterAssignment> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::validation(format!("k must lie in 1..={n}, got {k}")));
    }
    if !(gamma > 0.0) {
        return Err(Error::validation("gamma must be positive"));
    }
    if k == 1 {
        return Ok(ClusterAssignment { labels: vec![0; n] });
    }
    let mut affinity = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let a = (-gamma * sq_dist(features.row(i), features.row(j))).exp();
            affinity[(i, j)] = a;
            affinity[(j, i)] = a;
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / (affinity.row(i).sum() + DEGREE_EPS).sqrt())
        .collect();
    let mut lap = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            lap[(i, j)] -= inv_sqrt[i] * affinity[(i, j)] * inv_sqrt[j];
        }
    }
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let mut embedding = Array2::zeros((n, k));
    for (c, &idx) in order.iter().take(k).enumerate() {
        for i in 0..n {
            embedding[[i, c]] = eig.eigenvectors[(i, idx)];
        }
    }
    for mut row in embedding.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    Ok(kmeans(embedding.view(), &KMeansParams::new(k, seed))?.assignment)
}

/// A configured clustering method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Clusterer {
    Kmeans {
        #[serde(default)]
        k: Option<usize>,
        #[serde(default = "default_n_init")]
        n_init: usize,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
    Dbscan {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_min_pts")]
        min_pts: usize,
    },
    Spectral {
        #[serde(default)]
        k: Option<usize>,
        /// Defaults to `1 / feature_dim`.
        #[serde(default)]
        gamma: Option<f64>,
    },
}

fn default_n_init() -> usize {
    10
}
fn default_max_iter() -> usize {
    300
}
fn default_eps() -> f64 {
    0.5
}
fn default_min_pts() -> usize {
    5
}

impl Clusterer {
    pub fn kmeans() -> Self {
        Clusterer::Kmeans {
            k: None,
            n_init: default_n_init(),
            max_iter: default_max_iter(),
        }
    }

    pub fn dbscan() -> Self {
        Clusterer::Dbscan {
            eps: default_eps(),
            min_pts: default_min_pts(),
        }
    }

    pub fn spectral() -> Self {
        Clusterer::Spectral { k: None, gamma: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Clusterer::Kmeans { .. } => "kmeans",
            Clusterer::Dbscan { .. } => "dbscan",
            Clusterer::Spectral { .. } => "spectral",
        }
    }

    /// `default_k` is used when the method has no explicit `k`.
    pub fn run(&self, features: &FeatureMatrix, default_k: Option<usize>, seed: u64) -> Result<ClusterAssignment> {
        let need_k = |k: &Option<usize>| {
            k.or(default_k)
                .ok_or_else(|| Error::Config(format!("{} needs a cluster count", self.name())))
        };
        let x = features.rows.view();
        match self {
            Clusterer::Kmeans { k, n_init, max_iter } => {
                let params = KMeansParams {
                    k: need_k(k)?,
                    seed,
                    n_init: *n_init,
                    max_iter: *max_iter,
                };
                Ok(kmeans(x, &params)?.assignment)
            }
            Clusterer::Dbscan { eps, min_pts } => dbscan(x, *eps, *min_pts),
            Clusterer::Spectral { k, gamma } => {
                let gamma = gamma.unwrap_or(1.0 / features.rows.ncols().max(1) as f64);
                spectral_cluster(x, need_k(k)?, seed, gamma)
            }
        }
    }
}
