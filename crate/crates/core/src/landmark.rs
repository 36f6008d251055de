//! Table-line intersection landmarks via the Harris corner response.
//!
//! The response runs on the binary line mask produced by
//! [`crate::raster::extract_table_lines`]; the detected corners become the
//! target point set for template registration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::BinaryRaster;

pub const DEFAULT_K: f64 = 0.05;
/// Wide enough that the four notch responses of a 3px-thick line crossing
/// merge into one central peak; narrower windows localise the notch corners
/// instead of the intersection.
pub const DEFAULT_WINDOW_SIGMA: f64 = 3.0;
pub const DEFAULT_REL_THRESHOLD: f64 = 0.01;
pub const DEFAULT_NMS_RADIUS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("image {0}x{1} smaller than 3x3")]
    ImageTooSmall(usize, usize),
    #[error("window sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("rel_threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("nms radius must be >= 1, got {0}")]
    BadRadius(f64),
}

/// Subpixel image point; x right, y down, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Ordered list of points. Detection output is ordered by descending
/// response and respects the NMS spacing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Self {
        PointSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }
}

impl FromIterator<Point> for PointSet {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        PointSet { points: iter.into_iter().collect() }
    }
}

impl From<Vec<(f64, f64)>> for PointSet {
    fn from(v: Vec<(f64, f64)>) -> Self {
        v.into_iter().map(|(x, y)| Point::new(x, y)).collect()
    }
}

/// Per-pixel Harris response R = det(M) - k * trace(M)^2.
#[derive(Debug, Clone)]
pub struct ResponseMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ResponseMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Test seam: build a map from raw values.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        ResponseMap { width, height, values }
    }
}

/// A detected corner with its response value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub point: Point,
    pub response: f64,
}

/// Harris response of a binary line image.
///
/// The mask is scaled to {0, 255}, gradients are central differences, and the
/// structure tensor is accumulated under a Gaussian window truncated at three
/// sigma.
pub fn harris_response(
    bin: &BinaryRaster,
    window_sigma: f64,
    k: f64,
) -> Result<ResponseMap, LandmarkError> {
    let luma: Vec<f64> = bin.data().iter().map(|&v| v as f64 * 255.0).collect();
    harris_response_luma(&luma, bin.width(), bin.height(), window_sigma, k)
}

/// Harris response on arbitrary luminance values (used directly by the
/// keypoint detector in the features module).
pub fn harris_response_luma(
    luma: &[f64],
    width: usize,
    height: usize,
    window_sigma: f64,
    k: f64,
) -> Result<ResponseMap, LandmarkError> {
    if width < 3 || height < 3 {
        return Err(LandmarkError::ImageTooSmall(width, height));
    }
    if !(window_sigma > 0.0) {
        return Err(LandmarkError::BadSigma(window_sigma));
    }
    assert_eq!(luma.len(), width * height);

    // central differences; zero at the border
    let mut ix = vec![0.0f64; width * height];
    let mut iy = vec![0.0f64; width * height];
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let i = y * width + x;
            ix[i] = (luma[i + 1] - luma[i - 1]) * 0.5;
            iy[i] = (luma[i + width] - luma[i - width]) * 0.5;
        }
    }

    let mut ixx: Vec<f64> = ix.iter().map(|v| v * v).collect();
    let mut iyy: Vec<f64> = iy.iter().map(|v| v * v).collect();
    let mut ixy: Vec<f64> = ix.iter().zip(iy.iter()).map(|(a, b)| a * b).collect();

    let kernel = gaussian_kernel_1d(window_sigma);
    for plane in [&mut ixx, &mut iyy, &mut ixy] {
        gaussian_blur_separable(plane, width, height, &kernel);
    }

    let values = ixx
        .iter()
        .zip(iyy.iter())
        .zip(ixy.iter())
        .map(|((&xx, &yy), &xy)| {
            let det = xx * yy - xy * xy;
            let trace = xx + yy;
            det - k * trace * trace
        })
        .collect();
    Ok(ResponseMap { width, height, values })
}

fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    kernel
}

fn gaussian_blur_separable(plane: &mut [f64], width: usize, height: usize, kernel: &[f64]) {
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0f64; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + ki as isize - radius as isize;
                if sx >= 0 && (sx as usize) < width {
                    acc += kv * plane[y * width + sx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + ki as isize - radius as isize;
                if sy >= 0 && (sy as usize) < height {
                    acc += kv * tmp[sy as usize * width + x];
                }
            }
            plane[y * width + x] = acc;
        }
    }
}

/// Non-maximum suppression plus subpixel refinement over a response map.
///
/// A pixel survives when its response reaches `rel_threshold * max(R)` and no
/// pixel within `nms_radius` (Euclidean) beats it; equal responses are won by
/// the earlier pixel in row-major scan order. Survivors get a quadratic
/// subpixel fit in their 3x3 neighbourhood and are returned ordered by
/// descending response.
pub fn detect_corners(
    resp: &ResponseMap,
    rel_threshold: f64,
    nms_radius: f64,
) -> Result<PointSet, LandmarkError> {
    Ok(detect_corners_scored(resp, rel_threshold, nms_radius)?
        .into_iter()
        .map(|c| c.point)
        .collect())
}

pub fn detect_corners_scored(
    resp: &ResponseMap,
    rel_threshold: f64,
    nms_radius: f64,
) -> Result<Vec<Corner>, LandmarkError> {
    if !(rel_threshold > 0.0 && rel_threshold <= 1.0) {
        return Err(LandmarkError::BadThreshold(rel_threshold));
    }
    if nms_radius < 1.0 {
        return Err(LandmarkError::BadRadius(nms_radius));
    }
    let max_r = resp.max_value();
    if !(max_r > 0.0) {
        return Ok(Vec::new());
    }
    let threshold = rel_threshold * max_r;
    let (w, h) = (resp.width, resp.height);
    let ri = nms_radius.floor() as isize;
    let r2 = nms_radius * nms_radius;

    let mut corners = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = resp.get(x, y);
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if (dx * dx + dy * dy) as f64 > r2 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                        continue;
                    }
                    let nv = resp.get(nx as usize, ny as usize);
                    // scan-order tie-break: an equal neighbour earlier in
                    // row-major order suppresses this pixel
                    if nv > v || (nv == v && (ny as usize, nx as usize) < (y, x)) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                corners.push(Corner { point: refine_subpixel(resp, x, y), response: v });
            }
        }
    }
    corners.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap()
            .then_with(|| (a.point.y, a.point.x).partial_cmp(&(b.point.y, b.point.x)).unwrap())
    });
    Ok(corners)
}

/// Quadratic fit of the 3x3 neighbourhood; offsets beyond half a pixel (a
/// degenerate fit) fall back to the integer location.
fn refine_subpixel(resp: &ResponseMap, x: usize, y: usize) -> Point {
    if x == 0 || y == 0 || x + 1 >= resp.width || y + 1 >= resp.height {
        return Point::new(x as f64, y as f64);
    }
    let v = |dx: isize, dy: isize| resp.get((x as isize + dx) as usize, (y as isize + dy) as usize);
    let gx = (v(1, 0) - v(-1, 0)) * 0.5;
    let gy = (v(0, 1) - v(0, -1)) * 0.5;
    let gxx = v(1, 0) - 2.0 * v(0, 0) + v(-1, 0);
    let gyy = v(0, 1) - 2.0 * v(0, 0) + v(0, -1);
    let gxy = (v(1, 1) - v(-1, 1) - v(1, -1) + v(-1, -1)) * 0.25;
    let det = gxx * gyy - gxy * gxy;
    if det.abs() < 1e-12 {
        return Point::new(x as f64, y as f64);
    }
    let ox = -(gyy * gx - gxy * gy) / det;
    let oy = -(gxx * gy - gxy * gx) / det;
    if ox.abs() > 0.5 || oy.abs() > 0.5 || !ox.is_finite() || !oy.is_finite() {
        return Point::new(x as f64, y as f64);
    }
    Point::new(x as f64 + ox, y as f64 + oy)
}

/// Full landmark detection with the module defaults: response + NMS.
pub fn detect_landmarks(bin: &BinaryRaster) -> Result<PointSet, LandmarkError> {
    let resp = harris_response(bin, DEFAULT_WINDOW_SIGMA, DEFAULT_K)?;
    detect_corners(&resp, DEFAULT_REL_THRESHOLD, DEFAULT_NMS_RADIUS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_mask(w: usize, h: usize, xs: &[usize], ys: &[usize], thick: usize) -> BinaryRaster {
        let mut bin = BinaryRaster::filled(w, h, 0);
        for &x in xs {
            for t in 0..thick {
                for y in 0..h {
                    bin.set((x + t).min(w - 1), y, 1);
                }
            }
        }
        for &y in ys {
            for t in 0..thick {
                for x in 0..w {
                    bin.set(x, (y + t).min(h - 1), 1);
                }
            }
        }
        bin
    }

    #[test]
    fn constant_image_zero_response() {
        for fill in [0u8, 1u8] {
            let bin = BinaryRaster::filled(16, 16, fill);
            let resp = harris_response(&bin, 2.0, 0.05).unwrap();
            assert!(resp.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn step_edge_nonpositive_response() {
        // vertical step: left half foreground
        let mut bin = BinaryRaster::filled(32, 32, 0);
        for y in 0..32 {
            for x in 0..16 {
                bin.set(x, y, 1);
            }
        }
        let resp = harris_response(&bin, 2.0, 0.05).unwrap();
        // interior of the edge (away from image corners): det ~ 0, trace > 0
        for y in 10..22 {
            for x in 14..18 {
                assert!(resp.get(x, y) <= 1e-9, "R({x},{y}) = {}", resp.get(x, y));
            }
        }
    }

    #[test]
    fn filled_square_corner_is_global_max() {
        let mut bin = BinaryRaster::filled(48, 48, 0);
        for y in 10..48 {
            for x in 10..48 {
                bin.set(x, y, 1);
            }
        }
        let resp = harris_response(&bin, 2.0, 0.05).unwrap();
        // brute-force scan for the maximum
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for y in 0..48 {
            for x in 0..48 {
                if resp.get(x, y) > best.2 {
                    best = (x, y, resp.get(x, y));
                }
            }
        }
        let d = ((best.0 as f64 - 10.0).powi(2) + (best.1 as f64 - 10.0).powi(2)).sqrt();
        assert!(d <= 2.0, "max at ({}, {}), distance {d:.2}", best.0, best.1);
    }

    #[test]
    fn zero_response_yields_empty_set() {
        let bin = BinaryRaster::filled(16, 16, 0);
        let resp = harris_response(&bin, 2.0, 0.05).unwrap();
        let pts = detect_corners(&resp, 0.01, 10.0).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn three_by_three_grid_nine_corners() {
        let xs = [30, 80, 130];
        let ys = [30, 80, 130];
        let bin = grid_mask(160, 160, &xs, &ys, 2);
        let pts = detect_landmarks(&bin).unwrap();
        assert_eq!(pts.len(), 9, "expected 9 intersections, got {}", pts.len());
        for &gx in &xs {
            for &gy in &ys {
                // intersection centre of a 2px-thick cross
                let (cx, cy) = (gx as f64 + 0.5, gy as f64 + 0.5);
                let nearest = pts
                    .iter()
                    .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest <= 2.0, "intersection ({gx},{gy}) nearest det {nearest:.2}");
            }
        }
    }

    #[test]
    fn equal_maxima_keep_scan_order_first() {
        // hand-built response map with two equal peaks 2px apart
        let mut values = vec![0.0f64; 15 * 15];
        values[7 * 15 + 6] = 5.0;
        values[7 * 15 + 8] = 5.0;
        let resp = ResponseMap::from_values(15, 15, values);
        let pts = detect_corners(&resp, 0.5, 5.0).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!((pts.points[0].x, pts.points[0].y), (6.0, 7.0));
    }

    #[test]
    fn rotation_by_90_permutes_corners() {
        let bin = grid_mask(140, 140, &[25, 70, 115], &[35, 90], 2);
        let rotated = {
            // (x, y) -> (h - 1 - y, x)
            let (w, h) = (bin.width(), bin.height());
            let mut out = BinaryRaster::filled(h, w, 0);
            for y in 0..h {
                for x in 0..w {
                    if bin.get(x, y) == 1 {
                        out.set(h - 1 - y, x, 1);
                    }
                }
            }
            out
        };
        let pts = detect_landmarks(&bin).unwrap();
        let pts_rot = detect_landmarks(&rotated).unwrap();
        assert_eq!(pts.len(), pts_rot.len());
        for p in pts.iter() {
            let mapped = Point::new(bin.height() as f64 - 1.0 - p.y, p.x);
            let nearest = pts_rot
                .iter()
                .map(|q| q.distance(&mapped))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 1.0, "corner {p:?} moved by {nearest:.2} under rotation");
        }
    }

    #[test]
    fn raising_threshold_never_adds_detections() {
        let bin = grid_mask(160, 160, &[30, 80, 130], &[30, 80, 130], 2);
        let resp = harris_response(&bin, 2.0, 0.05).unwrap();
        let mut prev = usize::MAX;
        for t in [0.01, 0.05, 0.2, 0.5, 0.9] {
            let n = detect_corners(&resp, t, 10.0).unwrap().len();
            assert!(n <= prev, "threshold {t} raised count {prev} -> {n}");
            prev = n;
        }
    }

    /// Random synthetic grids: intersection precision/recall >= 0.95 at 2px.
    /// Mirrored by the acceptance suite.
    #[test]
    fn random_grid_recall_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for _ in 0..100 {
            let nx = rng.random_range(3..=8usize);
            let ny = rng.random_range(3..=8usize);
            let thick = rng.random_range(1..=3usize);
            let spacing = 40usize;
            let (w, h) = ((nx + 1) * spacing, (ny + 1) * spacing);
            let xs: Vec<usize> = (1..=nx).map(|i| i * spacing + rng.random_range(0..10)).collect();
            let ys: Vec<usize> = (1..=ny).map(|i| i * spacing + rng.random_range(0..10)).collect();
            let bin = grid_mask(w, h, &xs, &ys, thick);
            let pts = detect_landmarks(&bin).unwrap();
            let half = (thick as f64 - 1.0) / 2.0;
            let truth: Vec<Point> = xs
                .iter()
                .flat_map(|&gx| {
                    ys.iter().map(move |&gy| Point::new(gx as f64 + half, gy as f64 + half))
                })
                .collect();
            let mut matched = vec![false; truth.len()];
            for p in pts.iter() {
                let mut hit = false;
                for (t, m) in truth.iter().zip(matched.iter_mut()) {
                    if !*m && p.distance(t) <= 2.0 {
                        *m = true;
                        hit = true;
                        break;
                    }
                }
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            fn_ += matched.iter().filter(|&&m| !m).count();
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        assert!(recall >= 0.95, "recall {recall:.3}");
        assert!(precision >= 0.95, "precision {precision:.3}");
    }
}
