//! Visual bag-of-words features: keypoint descriptors, codebook training,
//! and histogram encoding.
//!
//! Keypoints are Harris responses on the grayscale page; each keypoint gets
//! a 64-dimensional gradient-grid descriptor (a 4x4 spatial grid over a
//! 16x16 patch, each cell contributing sum(dx), sum(|dx|), sum(dy),
//! sum(|dy|)). This deliberately replaces the classic box-filter/Haar
//! pipeline: the descriptor only has to separate pre-printed layouts, and
//! this variant is exactly specifiable and testable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmark::{detect_corners_scored, harris_response_luma, Point};
use crate::raster::Raster;

pub const DESCRIPTOR_DIM: usize = 64;
pub const DEFAULT_CODEBOOK_SIZE: usize = 200;
pub const DEFAULT_MAX_KEYPOINTS: usize = 500;
/// Pages are downscaled (bilinear) until the longest side fits this bound
/// before keypoint extraction.
pub const MAX_PAGE_SIDE: usize = 1000;

// keypoint detector settings for descriptor extraction; denser than the
// table-landmark defaults
const KP_SIGMA: f64 = 2.0;
const KP_K: f64 = 0.05;
const KP_REL_THRESHOLD: f64 = 0.01;
const KP_NMS_RADIUS: f64 = 4.0;
const PATCH_HALF: isize = 8;

#[derive(Debug, Error)]
pub enum FeaturesError {
    #[error("image {0}x{1} smaller than 32x32")]
    ImageTooSmall(usize, usize),
    #[error("codebook size must be >= 2, got {0}")]
    BadCodebookSize(usize),
    #[error("need at least {need} descriptors to train {need} words, got {have}")]
    TooFewDescriptors { have: usize, need: usize },
    #[error("codebook file invalid: {0}")]
    BadCodebookFile(String),
    #[error("codebook JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// L2-normalised 64-d gradient-grid descriptor at a keypoint.
#[derive(Debug, Clone)]
pub struct Descriptor {
    pub vector: [f64; DESCRIPTOR_DIM],
    pub location: Point,
    pub scale: f64,
}

/// Visual-word centroids. Serialised as `{m, seed, centroids}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub m: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn validate(&self) -> Result<(), FeaturesError> {
        if self.m != self.centroids.len() {
            return Err(FeaturesError::BadCodebookFile(format!(
                "m = {} but {} centroids",
                self.m,
                self.centroids.len()
            )));
        }
        if self.centroids.iter().any(|c| c.len() != DESCRIPTOR_DIM) {
            return Err(FeaturesError::BadCodebookFile("centroid dimension != 64".into()));
        }
        if self.centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FeaturesError::BadCodebookFile("non-finite centroid value".into()));
        }
        Ok(())
    }
}

pub fn save_codebook(cb: &Codebook) -> Result<Vec<u8>, FeaturesError> {
    cb.validate()?;
    Ok(serde_json::to_vec_pretty(cb)?)
}

pub fn load_codebook(bytes: &[u8]) -> Result<Codebook, FeaturesError> {
    let cb: Codebook = serde_json::from_slice(bytes)?;
    cb.validate()?;
    Ok(cb)
}

/// Normalised visual-word frequency histogram of one page. All-zero with
/// the degenerate flag when the page produced no keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowVector {
    pub freqs: Vec<f64>,
    pub total_keypoints: usize,
}

impl BowVector {
    pub fn is_degenerate(&self) -> bool {
        self.total_keypoints == 0
    }
}

/// Downscale so the longest side fits [`MAX_PAGE_SIDE`]; smaller pages pass
/// through untouched.
pub fn prepare_page(img: &Raster) -> Raster {
    let longest = img.width().max(img.height());
    if longest <= MAX_PAGE_SIDE {
        return img.clone();
    }
    let scale = MAX_PAGE_SIDE as f64 / longest as f64;
    let w = ((img.width() as f64 * scale).round() as usize).max(1);
    let h = ((img.height() as f64 * scale).round() as usize).max(1);
    img.resize_bilinear(w, h)
}

/// Harris keypoints ordered by response, described by the 64-d gradient
/// grid, truncated to `max_keypoints`.
pub fn extract_descriptors(
    img: &Raster,
    max_keypoints: usize,
) -> Result<Vec<Descriptor>, FeaturesError> {
    let (w, h) = (img.width(), img.height());
    if w < 32 || h < 32 {
        return Err(FeaturesError::ImageTooSmall(w, h));
    }
    let luma: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let resp = harris_response_luma(&luma, w, h, KP_SIGMA, KP_K).expect("size checked");
    let corners = detect_corners_scored(&resp, KP_REL_THRESHOLD, KP_NMS_RADIUS).expect("params");

    // central-difference gradient planes, zero at the border
    let mut dx = vec![0.0f64; w * h];
    let mut dy = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            dx[i] = (luma[i + 1] - luma[i - 1]) * 0.5;
            dy[i] = (luma[i + w] - luma[i - w]) * 0.5;
        }
    }

    let mut out = Vec::new();
    for corner in corners {
        if out.len() >= max_keypoints {
            break;
        }
        let cx = corner.point.x.round() as isize;
        let cy = corner.point.y.round() as isize;
        // the patch and its gradients must stay inside the image
        if cx - PATCH_HALF < 1
            || cy - PATCH_HALF < 1
            || cx + PATCH_HALF > w as isize - 1
            || cy + PATCH_HALF > h as isize - 1
        {
            continue;
        }
        let mut vector = [0.0f64; DESCRIPTOR_DIM];
        for py in -PATCH_HALF..PATCH_HALF {
            for px in -PATCH_HALF..PATCH_HALF {
                let cell = (((py + PATCH_HALF) / 4) * 4 + (px + PATCH_HALF) / 4) as usize;
                let i = ((cy + py) as usize) * w + (cx + px) as usize;
                vector[cell * 4] += dx[i];
                vector[cell * 4 + 1] += dx[i].abs();
                vector[cell * 4 + 2] += dy[i];
                vector[cell * 4 + 3] += dy[i].abs();
            }
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            continue; // flat patch, nothing to describe
        }
        vector.iter_mut().for_each(|v| *v /= norm);
        out.push(Descriptor { vector, location: corner.point, scale: 1.0 });
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn assign(vector: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(vector, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Sum of squared distances to assigned centroids.
pub fn kmeans_objective(vectors: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    vectors.iter().map(|v| sq_dist(v, &centroids[assign(v, centroids)])).sum()
}

/// Seeded k-means++ followed by Lloyd iterations to a fixed point (or 300
/// iterations). Empty clusters are reseeded to the point farthest from its
/// centroid.
pub fn train_codebook(
    descriptors: &[Descriptor],
    m: usize,
    seed: u64,
) -> Result<Codebook, FeaturesError> {
    if m < 2 {
        return Err(FeaturesError::BadCodebookSize(m));
    }
    if descriptors.len() < m {
        return Err(FeaturesError::TooFewDescriptors { have: descriptors.len(), need: m });
    }
    let vectors: Vec<Vec<f64>> = descriptors.iter().map(|d| d.vector.to_vec()).collect();
    let centroids = kmeans(&vectors, m, seed);
    Ok(Codebook { m, seed, centroids })
}

fn kmeans(vectors: &[Vec<f64>], m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = vectors.len();

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(m);
    centroids.push(vectors[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centroid
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        };
        centroids.push(vectors[next].clone());
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, centroids.last().unwrap()));
        }
    }

    let dim = vectors[0].len();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let a = assign(v, &centroids);
            if a != assignment[i] {
                assignment[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; dim]; m];
        let mut counts = vec![0usize; m];
        for (v, &a) in vectors.iter().zip(assignment.iter()) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        for c in 0..m {
            if counts[c] == 0 {
                // reseed to the point farthest from its assigned centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&vectors[a], &centroids[assignment[a]])
                            .partial_cmp(&sq_dist(&vectors[b], &centroids[assignment[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[c] = vectors[far].clone();
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
    }
    centroids
}

/// Histogram synthetic or extracted descriptors against a codebook.
pub fn encode_descriptors(descriptors: &[Descriptor], cb: &Codebook) -> BowVector {
    let mut counts = vec![0usize; cb.m];
    for d in descriptors {
        counts[assign(&d.vector, &cb.centroids)] += 1;
    }
    let total = descriptors.len();
    let freqs = if total == 0 {
        vec![0.0; cb.m]
    } else {
        counts.into_iter().map(|c| c as f64 / total as f64).collect()
    };
    BowVector { freqs, total_keypoints: total }
}

/// Full page encoding: normalise size, extract descriptors, histogram.
pub fn encode_bow(img: &Raster, cb: &Codebook) -> BowVector {
    let prepared = prepare_page(img);
    match extract_descriptors(&prepared, DEFAULT_MAX_KEYPOINTS) {
        Ok(descriptors) => encode_descriptors(&descriptors, cb),
        // pages below the minimum size have no keypoints
        Err(_) => BowVector { freqs: vec![0.0; cb.m], total_keypoints: 0 },
    }
}
