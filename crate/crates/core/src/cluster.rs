//! Unsupervised layout exploration over externally supplied feature
//! vectors: DBSCAN clustering, exact t-SNE embedding, cluster annotation
//! sampling and journal-level treatment indicators.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact (quadratic) t-SNE is intended for at most this many items.
pub const TSNE_MAX_POINTS: usize = 5_000;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("eps must be positive, got {0}")]
    BadEps(f64),
    #[error("min_pts must be >= 1")]
    BadMinPts,
    #[error("feature vectors must share one dimension")]
    RaggedFeatures,
    #[error("perplexity must satisfy 1 < perplexity < n/3 (n = {n}), got {perplexity}")]
    BadPerplexity { perplexity: f64, n: usize },
    #[error("t-SNE needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("t-SNE needs at least 250 iterations, got {0}")]
    TooFewIters(usize),
    #[error("exact t-SNE is capped at {TSNE_MAX_POINTS} points, got {0}")]
    TooManyPoints(usize),
    #[error("per_cluster must be >= 1")]
    BadSampleSize,
    #[error("unknown cluster id {0}")]
    UnknownCluster(usize),
}

/// One feature vector with its page and journal identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRow {
    pub item_id: String,
    pub group_id: String,
    pub vector: Vec<f64>,
}

/// Per-item cluster assignment; `None` is noise. Cluster ids are contiguous
/// from zero in discovery (scan) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabels {
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl ClusterLabels {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn members_of(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| (*l == Some(cluster)).then_some(i))
            .collect()
    }
}

/// 2-D embedding, one row per input item.
pub type Embedding2D = Vec<[f64; 2]>;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l2_normalize_rows(vectors: &mut [Vec<f64>]) {
    for v in vectors.iter_mut() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

/// Standard DBSCAN with Euclidean distance and an inclusive eps ball that
/// counts the point itself. Border points join the first core cluster that
/// discovers them; the scan order (and therefore the result) is
/// deterministic.
pub fn dbscan(
    vectors: &[Vec<f64>],
    eps: f64,
    min_pts: usize,
) -> Result<ClusterLabels, ClusterError> {
    if !(eps > 0.0) {
        return Err(ClusterError::BadEps(eps));
    }
    if min_pts < 1 {
        return Err(ClusterError::BadMinPts);
    }
    let dim = vectors.first().map_or(0, |v| v.len());
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(ClusterError::RaggedFeatures);
    }
    let n = vectors.len();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| sq_dist(&vectors[i], &vectors[j]) <= eps2).collect()
    };

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut cluster = 0usize;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seed_neighbors = neighbors(i);
        if seed_neighbors.len() < min_pts {
            continue; // noise unless a later cluster claims it as a border point
        }
        labels[i] = Some(cluster);
        let mut queue: VecDeque<usize> = seed_neighbors.into();
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(cluster);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nj = neighbors(j);
            if nj.len() >= min_pts {
                queue.extend(nj);
            }
        }
        cluster += 1;
    }
    Ok(ClusterLabels { labels, n_clusters: cluster })
}

pub fn dbscan_rows(
    rows: &[FeatureRow],
    eps: f64,
    min_pts: usize,
) -> Result<ClusterLabels, ClusterError> {
    let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.clone()).collect();
    dbscan(&vectors, eps, min_pts)
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    pub embedding: Embedding2D,
    /// KL divergence per iteration (exaggerated values during the first 250
    /// iterations, plain afterwards).
    pub kl_history: Vec<f64>,
}

const EXAGGERATION_PHASE: usize = 250;
const EXAGGERATION: f64 = 12.0;
const LEARNING_RATE: f64 = 200.0;
const P_MIN: f64 = 1e-12;

/// Exact symmetric t-SNE.
///
/// Per-point Gaussian bandwidths are found by bisection to match the target
/// perplexity (entropy tolerance 1e-5); optimisation is gradient descent
/// with momentum 0.5 (0.8 after iteration 250), learning rate 200, and x12
/// early exaggeration for the first 250 iterations. After the exaggeration
/// phase a step that would increase the KL divergence is retried with a
/// geometrically damped step (momentum reset), so the reported KL is
/// non-increasing from iteration 250 on.
pub fn tsne_embed(
    vectors: &[Vec<f64>],
    perplexity: f64,
    iters: usize,
    seed: u64,
) -> Result<TsneResult, ClusterError> {
    let n = vectors.len();
    if n < 4 {
        return Err(ClusterError::TooFewPoints(n));
    }
    if n > TSNE_MAX_POINTS {
        return Err(ClusterError::TooManyPoints(n));
    }
    if !(perplexity > 1.0 && perplexity < n as f64 / 3.0) {
        return Err(ClusterError::BadPerplexity { perplexity, n });
    }
    if iters < 250 {
        return Err(ClusterError::TooFewIters(iters));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(ClusterError::RaggedFeatures);
    }

    // high-dimensional affinities
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            d2[i * n + j] = sq_dist(&vectors[i], &vectors[j]);
        }
    }
    let p_cond = conditional_affinities(&d2, n, perplexity);
    // symmetrise: p_ij = (p_{j|i} + p_{i|j}) / 2n
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] =
                    ((p_cond[i * n + j] + p_cond[j * n + i]) / (2.0 * n as f64)).max(P_MIN);
            }
        }
    }

    // seeded Gaussian initialisation, sigma = 1e-4 (Box-Muller)
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || {
        let u1: f64 = rng.random_range(1e-300..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [gauss() * 1e-4, gauss() * 1e-4]).collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut kl_history = Vec::with_capacity(iters);
    let mut monotone_floor: Option<f64> = None;

    for t in 0..iters {
        let exaggeration = if t < EXAGGERATION_PHASE { EXAGGERATION } else { 1.0 };
        let momentum = if t < EXAGGERATION_PHASE { 0.5 } else { 0.8 };
        if t == EXAGGERATION_PHASE {
            monotone_floor = Some(kl_divergence(&p, &y, 1.0));
        }

        let grad = tsne_gradient(&p, &y, exaggeration);
        let mut damp = 1.0f64;
        loop {
            let mut y_next = y.clone();
            let mut v_next = velocity.clone();
            for i in 0..n {
                for c in 0..2 {
                    v_next[i][c] = momentum * velocity[i][c] - LEARNING_RATE * damp * grad[i][c];
                    y_next[i][c] += v_next[i][c];
                }
            }
            let kl = kl_divergence(&p, &y_next, exaggeration);
            match monotone_floor {
                Some(floor) if kl > floor => {
                    damp *= 0.5;
                    // zero the momentum for the retried step
                    velocity.iter_mut().for_each(|v| *v = [0.0, 0.0]);
                    if damp < 1e-16 {
                        // no acceptable step: hold position this iteration
                        kl_history.push(floor);
                        break;
                    }
                }
                _ => {
                    y = y_next;
                    velocity = v_next;
                    if let Some(floor) = monotone_floor.as_mut() {
                        *floor = kl;
                    }
                    kl_history.push(kl);
                    break;
                }
            }
        }
    }
    Ok(TsneResult { embedding: y, kl_history })
}

/// Per-point bandwidth search: bisection on the Gaussian precision until the
/// conditional distribution's entropy matches log(perplexity) within 1e-5.
fn conditional_affinities(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target_entropy = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let mut beta = 1.0f64;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-beta * d2[i * n + j]).exp();
                sum += w;
                weighted += w * d2[i * n + j];
            }
            // H = ln(sum) + beta * E[d^2]
            let entropy = if sum > 0.0 { sum.ln() + beta * weighted / sum } else { 0.0 };
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() { (beta + beta_max) / 2.0 } else { beta * 2.0 };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() { (beta + beta_min) / 2.0 } else { beta / 2.0 };
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let w = (-beta * d2[i * n + j]).exp();
                p[i * n + j] = w;
                sum += w;
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[i * n + j] /= sum;
            }
        }
    }
    p
}

fn student_t_weights(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut q_raw = vec![0.0f64; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q_raw[i * n + j] = w;
                total += w;
            }
        }
    }
    (q_raw, total)
}

fn tsne_gradient(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let n = y.len();
    let (q_raw, total) = student_t_weights(y);
    let mut grad = vec![[0.0f64; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let q = (q_raw[i * n + j] / total).max(P_MIN);
            let mult = (exaggeration * p[i * n + j] - q) * q_raw[i * n + j];
            grad[i][0] += 4.0 * mult * (y[i][0] - y[j][0]);
            grad[i][1] += 4.0 * mult * (y[i][1] - y[j][1]);
        }
    }
    grad
}

/// KL(P || Q) of the (optionally exaggerated) target distribution against
/// the embedding's Student-t distribution.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> f64 {
    let n = y.len();
    let (q_raw, total) = student_t_weights(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = (exaggeration * p[i * n + j]).max(P_MIN);
            let qij = (q_raw[i * n + j] / total).max(P_MIN);
            kl += pij * (pij / qij).ln();
        }
    }
    kl
}

/// Seeded annotation sample: up to `per_cluster` member ids per cluster
/// without replacement (the whole cluster when smaller), with noise items
/// sampled the same way but reported separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationSample {
    /// (cluster id, sampled item ids), in cluster order.
    pub clusters: Vec<(usize, Vec<String>)>,
    pub noise: Vec<String>,
}

impl AnnotationSample {
    /// All sampled cluster items, flattened; excludes noise.
    pub fn sampled_ids(&self) -> Vec<String> {
        self.clusters.iter().flat_map(|(_, ids)| ids.iter().cloned()).collect()
    }
}

pub fn annotation_sample(
    labels: &ClusterLabels,
    item_ids: &[String],
    per_cluster: usize,
    seed: u64,
) -> Result<AnnotationSample, ClusterError> {
    if per_cluster < 1 {
        return Err(ClusterError::BadSampleSize);
    }
    assert_eq!(labels.labels.len(), item_ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |members: Vec<usize>| -> Vec<String> {
        let mut pool = members;
        let take = per_cluster.min(pool.len());
        let mut out = Vec::with_capacity(take);
        for _ in 0..take {
            let k = rng.random_range(0..pool.len());
            out.push(item_ids[pool.swap_remove(k)].clone());
        }
        out
    };
    let clusters = (0..labels.n_clusters).map(|c| (c, pick(labels.members_of(c)))).collect();
    let noise_members: Vec<usize> = labels
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.is_none().then_some(i))
        .collect();
    let noise = pick(noise_members);
    Ok(AnnotationSample { clusters, noise })
}

/// Group-level indicator: a group is flagged when any of its items sits in
/// one of the positive clusters.
pub fn group_indicator(
    labels: &ClusterLabels,
    rows: &[FeatureRow],
    positive_clusters: &BTreeSet<usize>,
) -> Result<BTreeMap<String, bool>, ClusterError> {
    assert_eq!(labels.labels.len(), rows.len());
    if let Some(&bad) = positive_clusters.iter().find(|&&c| c >= labels.n_clusters) {
        return Err(ClusterError::UnknownCluster(bad));
    }
    let mut flags: BTreeMap<String, bool> = BTreeMap::new();
    for (row, label) in rows.iter().zip(labels.labels.iter()) {
        let hit = label.map_or(false, |c| positive_clusters.contains(&c));
        *flags.entry(row.group_id.clone()).or_insert(false) |= hit;
    }
    Ok(flags)
}
