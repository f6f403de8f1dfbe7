//! Clustering validity metrics.
//!
//! Supervised: homogeneity, completeness and V-measure from label entropies
//! (natural log). Unsupervised: mean silhouette and the Calinski-Harabasz
//! index, both with Euclidean geometry.

use std::collections::HashMap;

use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub v_score: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub silhouette: f64,
    pub calinski_harabasz: f64,
}

/// Homogeneity, completeness and V-measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hcv {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

/// Maps arbitrary label values onto `0..n` in order of first appearance.
fn dense_ids(labels: &[i64]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

pub fn homogeneity_completeness_v(truth: &[i64], pred: &[i64]) -> Result<Hcv> {
    ensure_len(truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::validation("labelings must be nonempty"));
    }
    let n = truth.len() as f64;
    let (t, nt) = dense_ids(truth);
    let (p, np) = dense_ids(pred);
    let mut joint = vec![0.0; nt * np];
    let mut ct = vec![0.0; nt];
    let mut cp = vec![0.0; np];
    for (&a, &b) in t.iter().zip(&p) {
        joint[a * np + b] += 1.0;
        ct[a] += 1.0;
        cp[b] += 1.0;
    }
    let h_c = entropy(&ct, n);
    let h_k = entropy(&cp, n);
    // H(C|K) = -sum n_ck/n log(n_ck / n_k), H(K|C) likewise
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for a in 0..nt {
        for b in 0..np {
            let nab = joint[a * np + b];
            if nab > 0.0 {
                h_c_given_k -= nab / n * (nab / cp[b]).ln();
                h_k_given_c -= nab / n * (nab / ct[a]).ln();
            }
        }
    }
    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(Hcv {
        homogeneity,
        completeness,
        v_measure,
    })
}

pub fn v_measure(truth: &[i64], pred: &[i64]) -> Result<f64> {
    Ok(homogeneity_completeness_v(truth, pred)?.v_measure)
}

fn check_features(features: ArrayView2<'_, f64>, labels: &[i64]) -> Result<(Vec<usize>, usize)> {
    ensure_len(features.nrows(), labels.len())?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("features contain non-finite values"));
    }
    Ok(dense_ids(labels))
}

fn distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient; points in singleton clusters contribute 0.
pub fn silhouette(features: ArrayView2<'_, f64>, labels: &[i64]) -> Result<f64> {
    let (ids, k) = check_features(features, labels)?;
    if k < 2 {
        return Err(Error::Degenerate(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let n = ids.len();
    let mut sizes = vec![0usize; k];
    for &c in &ids {
        sizes[c] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let xi = features.row(i);
        for j in 0..n {
            if i != j {
                sums[ids[j]] += distance(xi, features.row(j));
            }
        }
        let own = ids[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Between- over within-cluster dispersion, each normalised by its degrees of freedom.
pub fn calinski_harabasz(features: ArrayView2<'_, f64>, labels: &[i64]) -> Result<f64> {
    let (ids, k) = check_features(features, labels)?;
    let n = ids.len();
    if k < 2 || k >= n {
        return Err(Error::Degenerate(format!(
            "calinski-harabasz needs 2 <= clusters < samples, got {k} clusters for {n} samples"
        )));
    }
    let dim = features.ncols();
    let overall: Array1<f64> = features.mean_axis(Axis(0)).expect("nonempty");
    let mut centroids = vec![Array1::<f64>::zeros(dim); k];
    let mut sizes = vec![0usize; k];
    for (row, &c) in features.rows().into_iter().zip(&ids) {
        centroids[c] += &row;
        sizes[c] += 1;
    }
    for (c, s) in centroids.iter_mut().zip(&sizes) {
        *c /= *s as f64;
    }
    let between: f64 = centroids
        .iter()
        .zip(&sizes)
        .map(|(c, &s)| s as f64 * (c - &overall).mapv(|v| v * v).sum())
        .sum();
    let within: f64 = features
        .rows()
        .into_iter()
        .zip(&ids)
        .map(|(row, &c)| (&row - &centroids[c]).mapv(|v| v * v).sum())
        .sum();
    if within == 0.0 {
        return Err(Error::Degenerate(
            "zero within-cluster dispersion makes the index infinite".into(),
        ));
    }
    Ok(between / (k - 1) as f64 / (within / (n - k) as f64))
}

/// All five metrics for one predicted labelling.
pub fn evaluate(features: ArrayView2<'_, f64>, truth: &[i64], pred: &[i64]) -> Result<MetricReport> {
    let hcv = homogeneity_completeness_v(truth, pred)?;
    Ok(MetricReport {
        v_score: hcv.v_measure,
        homogeneity: hcv.homogeneity,
        completeness: hcv.completeness,
        silhouette: silhouette(features, pred)?,
        calinski_harabasz: calinski_harabasz(features, pred)?,
    })
}
