//! Seeded k-means++ initialization followed by Lloyd iterations.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{AirdError, Result};

/// Index and squared distance of the centroid nearest to `v`. Ties go to the lower index.
pub fn nearest(v: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = crate::l2_sq(v, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(data: &[f32], dim: usize, centroids: &[f32]) -> Vec<(usize, f64)> {
    data.par_chunks_exact(dim)
        .with_min_len(256)
        .map(|v| nearest(v, centroids, dim))
        .collect()
}

fn plus_plus_init(data: &[f32], dim: usize, k: usize, rng: &mut crate::Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| crate::l2_sq(row(i), row(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // All remaining points coincide with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = crate::l2_sq(row(i), &c);
            if nd < *d {
                *d = nd;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Trains `k` centroids over the row-major `data` (`n × dim`).
///
/// Empty clusters are re-seeded with the points farthest from their assigned centroid.
pub fn kmeans(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<Vec<f32>> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(AirdError::config("k-means input is not a whole number of rows"));
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(AirdError::config(format!(
            "k-means needs 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if iters == 0 {
        return Err(AirdError::config("k-means needs at least one iteration"));
    }
    let mut rng = crate::seeded_rng(seed);
    let mut centroids = plus_plus_init(data, dim, k, &mut rng);
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..iters {
        let assignment = assign(data, dim, &centroids);
        let labels: Vec<usize> = assignment.iter().map(|a| a.0).collect();
        if prev.as_ref() == Some(&labels) {
            break;
        }
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (v, &j) in data.chunks_exact(dim).zip(&labels) {
            counts[j] += 1;
            for (s, &x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        let mut far: Vec<usize> = Vec::new();
        if counts.contains(&0) {
            far = (0..n).collect();
            far.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
        }
        let mut far = far.into_iter();
        for j in 0..k {
            let c = &mut centroids[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                let inv = counts[j] as f64;
                for (ci, &s) in c.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *ci = (s / inv) as f32;
                }
            } else if let Some(i) = far.next() {
                c.copy_from_slice(&data[i * dim..(i + 1) * dim]);
            }
        }
        prev = Some(labels);
    }
    Ok(centroids)
}

/// Sum of squared distances from each point to its nearest centroid.
pub fn quantization_error(data: &[f32], dim: usize, centroids: &[f32]) -> f64 {
    assign(data, dim, centroids).iter().map(|a| a.1).sum()
}
