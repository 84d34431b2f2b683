//! Pseudo-domain labeling: K-means over GAP embeddings with silhouette-based
//! selection of the cluster count, then nearest-center assignment for every
//! split.

use rand::Rng;

use crate::error::{CdiraError, Result};
use crate::rng::{stream_rng, Stream};

/// Row-major N x D embedding matrix.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<EmbeddingMatrix> {
        if data.len() != rows * cols {
            return Err(CdiraError::shape("embedding matrix size".to_string()));
        }
        Ok(EmbeddingMatrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn gather(&self, ids: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Fitted cluster model: centers plus the silhouette diagnostics that chose K.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k_star: usize,
    pub cols: usize,
    /// k_star x cols, row-major.
    pub centers: Vec<f32>,
    /// (candidate K, mean silhouette), sorted by K.
    pub silhouette_by_k: Vec<(usize, f32)>,
    pub seed: u64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Lloyd's algorithm with k-means++ seeding. Returns (centers, assignments).
/// Empty clusters are repaired by re-seeding from the point farthest from its
/// assigned center.
pub fn kmeans(
    z: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f32,
) -> Result<(Vec<f32>, Vec<usize>)> {
    let (centers, assignments, _) = kmeans_with_trace(z, k, seed, max_iter, tol)?;
    Ok((centers, assignments))
}

/// `kmeans` plus the objective value recorded after every assignment step.
pub fn kmeans_with_trace(
    z: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f32,
) -> Result<(Vec<f32>, Vec<usize>, Vec<f64>)> {
    let n = z.rows;
    let d = z.cols;
    if k == 0 || k > n {
        return Err(CdiraError::Cluster(format!("k={k} out of range 1..={n}")));
    }

    // k-means++ seeding.
    let mut rng = stream_rng(seed, Stream::KmeansInit, k as u64);
    let mut centers = vec![0.0f32; k * d];
    let first = rng.random_range(0..n);
    centers[..d].copy_from_slice(z.row(first));
    let mut min_d2: Vec<f32> = (0..n).map(|i| sq_dist(z.row(i), &centers[..d])).collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().map(|&v| v as f64).sum();
        let pick = if total <= 0.0 {
            // all points coincide with chosen centers; spread deterministically
            rng.random_range(0..n)
        } else {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0f64;
            let mut chosen = n - 1;
            for (i, &v) in min_d2.iter().enumerate() {
                acc += v as f64;
                if target < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers[c * d..(c + 1) * d].copy_from_slice(z.row(pick));
        for i in 0..n {
            let d2 = sq_dist(z.row(i), &centers[c * d..(c + 1) * d]);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut objective_trace = Vec::new();
    for _ in 0..max_iter {
        assign_nearest(z, &centers, k, &mut assignments);
        objective_trace.push(kmeans_objective(z, &centers, &assignments));

        // Means of assigned points.
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let row = z.row(i);
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        let mut new_centers = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    new_centers[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
                }
            } else {
                // Re-seed from the farthest point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(z.row(a), &centers[assignments[a] * d..(assignments[a] + 1) * d]);
                        let db = sq_dist(z.row(b), &centers[assignments[b] * d..(assignments[b] + 1) * d]);
                        da.total_cmp(&db)
                    })
                    .expect("n >= 1");
                new_centers[c * d..(c + 1) * d].copy_from_slice(z.row(far));
            }
        }

        let mut max_shift = 0.0f32;
        for c in 0..k {
            let shift = sq_dist(
                &centers[c * d..(c + 1) * d],
                &new_centers[c * d..(c + 1) * d],
            )
            .sqrt();
            if shift > max_shift {
                max_shift = shift;
            }
        }
        centers = new_centers;
        if max_shift < tol {
            break;
        }
    }
    assign_nearest(z, &centers, k, &mut assignments);
    objective_trace.push(kmeans_objective(z, &centers, &assignments));
    Ok((centers, assignments, objective_trace))
}

fn assign_nearest(z: &EmbeddingMatrix, centers: &[f32], k: usize, out: &mut [usize]) {
    let d = z.cols;
    for (i, slot) in out.iter_mut().enumerate() {
        let row = z.row(i);
        let mut best = 0usize;
        let mut best_d2 = f32::INFINITY;
        for c in 0..k {
            let d2 = sq_dist(row, &centers[c * d..(c + 1) * d]);
            // Strict < keeps the lowest index on ties.
            if d2 < best_d2 {
                best_d2 = d2;
                best = c;
            }
        }
        *slot = best;
    }
}

/// Sum of squared distances to assigned centers.
pub fn kmeans_objective(z: &EmbeddingMatrix, centers: &[f32], assignments: &[usize]) -> f64 {
    let d = z.cols;
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(z.row(i), &centers[a * d..(a + 1) * d]) as f64)
        .sum()
}

/// Mean silhouette score over all points. Singleton clusters score 0 by
/// convention; a(i) = b(i) = 0 also scores 0.
pub fn silhouette(z: &EmbeddingMatrix, assignments: &[usize]) -> Result<f32> {
    let n = z.rows;
    if assignments.len() != n {
        return Err(CdiraError::Cluster("assignment length mismatch".to_string()));
    }
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    if k < 2 || counts.iter().any(|&c| c == 0) {
        return Err(CdiraError::Cluster(
            "silhouette needs >= 2 nonempty clusters".to_string(),
        ));
    }

    let mut total = 0.0f64;
    let mut sums = vec![0.0f64; k];
    for i in 0..n {
        let own = assignments[i];
        if counts[own] == 1 {
            continue; // s(i) = 0
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        let row = z.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            sums[assignments[j]] += (sq_dist(row, z.row(j)) as f64).sqrt();
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own {
                let mean = sums[c] / counts[c] as f64;
                if mean < b {
                    b = mean;
                }
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok((total / n as f64) as f32)
}

/// Candidate-K selection by mean silhouette on a subsample.
///
/// `ids` are stable per-point identities; when `rows > sample_size` the
/// subsample is chosen by shuffling ids, so permuting the input rows (with
/// their ids) does not change the result. Pass `None` to use row positions.
pub fn select_k(
    z: &EmbeddingMatrix,
    candidates: &[usize],
    sample_size: usize,
    seed: u64,
    ids: Option<&[u64]>,
) -> Result<(usize, Vec<(usize, f32)>)> {
    if candidates.is_empty() {
        return Err(CdiraError::Cluster("no candidate cluster counts".to_string()));
    }
    let n = z.rows;
    let default_ids: Vec<u64>;
    let ids = match ids {
        Some(v) => {
            if v.len() != n {
                return Err(CdiraError::Cluster("ids length mismatch".to_string()));
            }
            v
        }
        None => {
            default_ids = (0..n as u64).collect();
            &default_ids
        }
    };

    // Order rows by id, subsample without replacement, keep id order.
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by_key(|&i| ids[i]);
    let sample_rows: Vec<usize> = if n > sample_size {
        let mut shuffled = by_id.clone();
        let mut rng = stream_rng(seed, Stream::Subsample, 0);
        // Fisher-Yates on the id-ordered list.
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let mut taken = shuffled[..sample_size].to_vec();
        taken.sort_by_key(|&i| ids[i]);
        taken
    } else {
        by_id
    };
    let sample = z.gather(&sample_rows);

    let mut scores: Vec<(usize, f32)> = Vec::new();
    for &k in candidates {
        if k < 2 || k > sample.rows {
            continue;
        }
        let (_, assignments) = kmeans(&sample, k, seed, 100, 1e-4)?;
        match silhouette(&sample, &assignments) {
            Ok(s) => scores.push((k, s)),
            Err(_) => continue, // degenerate clustering for this K
        }
    }
    if scores.is_empty() {
        return Err(CdiraError::Cluster(
            "no valid candidate cluster count".to_string(),
        ));
    }
    scores.sort_by_key(|&(k, _)| k);
    let mut best = scores[0];
    for &(k, s) in &scores[1..] {
        // Strict > keeps the smaller K on ties.
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok((best.0, scores))
}

/// Fit the full cluster model on training embeddings.
pub fn fit_cluster_model(
    z_train: &EmbeddingMatrix,
    candidates: &[usize],
    sample_size: usize,
    seed: u64,
) -> Result<(ClusterModel, Vec<usize>)> {
    let (k_star, scores) = select_k(z_train, candidates, sample_size, seed, None)?;
    let (centers, assignments) = kmeans(z_train, k_star, seed, 100, 1e-4)?;
    Ok((
        ClusterModel {
            k_star,
            cols: z_train.cols,
            centers,
            silhouette_by_k: scores,
            seed,
        },
        assignments,
    ))
}

/// Nearest-center domain labels; ties go to the lowest index.
pub fn assign_domains(z: &EmbeddingMatrix, model: &ClusterModel) -> Result<Vec<usize>> {
    if z.cols != model.cols {
        return Err(CdiraError::Cluster(format!(
            "embedding dim {} vs centers dim {}",
            z.cols, model.cols
        )));
    }
    let mut out = vec![0usize; z.rows];
    assign_nearest(z, &model.centers, model.k_star, &mut out);
    Ok(out)
}
