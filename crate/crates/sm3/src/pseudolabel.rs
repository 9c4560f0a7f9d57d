//! Surrogate pseudo-multi-labels via K independent k-means clusterings.
//!
//! Lloyd iterations from k-means++ seeding, run once per label over that
//! label's embedding matrix. Empty clusters are reseeded at the point
//! farthest from its assigned centroid.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, Rng};
use crate::tensor::Tensor;

const MAX_ITERS: usize = 300;

#[derive(Debug, Clone)]
pub struct ClusterModel {
    /// k × d centroid matrix.
    pub centroids: Tensor,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    pub assignments: Vec<usize>,
    /// Inertia after each Lloyd iteration (index 0 = after seeding).
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoLabelSet {
    /// n × K assignment matrix, row per sample.
    pub assignments: Vec<Vec<usize>>,
    pub cluster_counts: Vec<usize>,
    pub generation_epoch: usize,
}

impl PseudoLabelSet {
    pub fn column(&self, k: usize) -> Vec<usize> {
        self.assignments.iter().map(|row| row[k]).collect()
    }

    /// CSV dump: sample_id, y_1..y_K.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id");
        for k in 0..self.cluster_counts.len() {
            out.push_str(&format!(",y_{}", k + 1));
        }
        out.push('\n');
        for (i, row) in self.assignments.iter().enumerate() {
            out.push_str(&i.to_string());
            for y in row {
                out.push_str(&format!(",{y}"));
            }
            out.push('\n');
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_seed(points: &Tensor, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let first = rng.gen_range(0..n);
    let mut centroids: Vec<Vec<f64>> = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass at existing centroids; pick uniformly
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let c = points.row(next).to_vec();
        for i in 0..n {
            let d = sq_dist(points.row(i), &c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &Tensor, centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = points.rows();
    let mut labels = vec![0usize; n];
    let mut inertia = 0.0;
    for i in 0..n {
        let row = points.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, cent) in centroids.iter().enumerate() {
            let d = sq_dist(row, cent);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        inertia += best_d;
    }
    (labels, inertia)
}

/// Lloyd's algorithm with k-means++ seeding; runs to an assignment
/// fixpoint or 300 iterations. Deterministic given the rng seed.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng) -> Result<ClusterModel> {
    let (n, d) = (points.rows(), points.cols());
    if k == 0 || n < k {
        return Err(Error::Config(format!("kmeans needs n >= k >= 1, got n={n}, k={k}")));
    }
    let mut centroids = kmeans_pp_seed(points, k, rng);
    let (mut labels, mut inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    for _ in 0..MAX_ITERS {
        // centroid update
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
        }
        // empty-cluster repair: reseed at the point farthest from its
        // assigned centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), &centroids[labels[a]]);
                        let db = sq_dist(points.row(b), &centroids[labels[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = points.row(far).to_vec();
                labels[far] = c;
            }
        }
        let (new_labels, new_inertia) = assign(points, &centroids);
        history.push(new_inertia);
        let fixed = new_labels == labels;
        labels = new_labels;
        inertia = new_inertia;
        if fixed {
            break;
        }
    }
    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    Ok(ClusterModel {
        centroids: Tensor::matrix(k, d, flat)?,
        inertia,
        assignments: labels,
        inertia_history: history,
    })
}

/// Runs k-means independently per label k with k = c_k clusters on that
/// label's embedding matrix, with per-label derived seeds.
pub fn generate_pseudo_multilabels(
    label_embeddings: &[Tensor],
    cluster_counts: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<PseudoLabelSet> {
    assert_eq!(
        label_embeddings.len(),
        cluster_counts.len(),
        "one embedding matrix per label required"
    );
    let n = label_embeddings.first().map(|m| m.rows()).unwrap_or(0);
    for m in label_embeddings {
        if m.rows() != n {
            return Err(Error::ShapeMismatch(
                "label embedding matrices must be row-aligned by sample".into(),
            ));
        }
    }
    let mut columns = Vec::with_capacity(cluster_counts.len());
    for (k, (emb, &c)) in label_embeddings.iter().zip(cluster_counts).enumerate() {
        let mut rng = derived_rng(seed, "kmeans", &[k as u64, epoch as u64]);
        let model = kmeans(emb, c, &mut rng)?;
        columns.push(model.assignments);
    }
    let assignments = (0..n)
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect();
    Ok(PseudoLabelSet {
        assignments,
        cluster_counts: cluster_counts.to_vec(),
        generation_epoch: epoch,
    })
}

/// Adjusted Rand index between two partitions; 1.0 means identical up to
/// relabeling. Test oracle for the planted-partition checks.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map(|m| m + 1).unwrap_or(0);
    let kb = b.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let comb2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let sum_ij: f64 = table.iter().flatten().map(|&v| comb2(v)).sum();
    let sum_a: f64 = table.iter().map(|row| comb2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| comb2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = comb2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}
