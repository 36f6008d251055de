//! Page images, thresholding and the morphology used to isolate table lines.
//!
//! Convention: grayscale pixels are one byte, 0 = black, 255 = white. Binary
//! images store 1 for foreground (ink / line) and 0 for background, matching
//! the "white lines on a black background" view of a thresholded form.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("malformed {format} header: {reason}")]
    MalformedHeader { format: &'static str, reason: String },
    #[error("unsupported pixel depth: maxval {0} (only 8-bit supported)")]
    UnsupportedDepth(u32),
    #[error("truncated payload: expected {expected} pixel bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("png decode failed: {0}")]
    Png(String),
    #[error("png is not 8-bit grayscale")]
    PngNotGrayscale,
    #[error("empty image")]
    EmptyImage,
    #[error("image {width}x{height} smaller than required {min_width}x{min_height}")]
    TooSmall { width: usize, height: usize, min_width: usize, min_height: usize },
    #[error("structuring element length must be >= {min}, got {got}")]
    ElementTooShort { min: usize, got: usize },
    #[error("pixel buffer length {len} does not match {width}x{height}")]
    DimensionMismatch { len: usize, width: usize, height: usize },
}

/// 8-bit grayscale page image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage);
        }
        if data.len() != width * height {
            return Err(RasterError::DimensionMismatch { len: data.len(), width, height });
        }
        Ok(Raster { width, height, data })
    }

    /// Uniform image of the given value.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Raster { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel-exact sub-image over the half-open box `[x0,x1) x [y0,y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Option<Raster> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return None;
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y1 {
            let row = &self.data[y * self.width + x0..y * self.width + x1];
            data.extend_from_slice(row);
        }
        Some(Raster { width: w, height: h, data })
    }

    /// Bilinear downscale/upscale. Used to normalise page size before
    /// keypoint extraction.
    pub fn resize_bilinear(&self, new_width: usize, new_height: usize) -> Raster {
        assert!(new_width >= 1 && new_height >= 1);
        let mut data = Vec::with_capacity(new_width * new_height);
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        for oy in 0..new_height {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..new_width {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.get(x0, y0) as f64 * (1.0 - wx) + self.get(x1, y0) as f64 * wx;
                let bot = self.get(x0, y1) as f64 * (1.0 - wx) + self.get(x1, y1) as f64 * wx;
                data.push((top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8);
            }
        }
        Raster { width: new_width, height: new_height, data }
    }
}

/// Binary image; 1 = foreground (ink), 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryRaster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage);
        }
        if data.len() != width * height {
            return Err(RasterError::DimensionMismatch { len: data.len(), width, height });
        }
        debug_assert!(data.iter().all(|&v| v <= 1));
        Ok(BinaryRaster { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(value <= 1);
        BinaryRaster { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.width + x] = v;
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn complement(&self) -> BinaryRaster {
        let data = self.data.iter().map(|&v| 1 - v).collect();
        BinaryRaster { width: self.width, height: self.height, data }
    }

    /// View as a grayscale raster (1 -> 255, 0 -> 0), e.g. for writing the
    /// line mask back out as a PGM.
    pub fn to_raster(&self) -> Raster {
        let data = self.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
        Raster { width: self.width, height: self.height, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeKind {
    Horizontal,
    Vertical,
    Rectangular,
}

/// Flat (box) structuring element anchored at its centre
/// (`len/2` with integer division).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuringElement {
    kind: SeKind,
    len_x: usize,
    len_y: usize,
}

impl StructuringElement {
    pub fn horizontal(len: usize) -> Result<Self, RasterError> {
        if len < 1 {
            return Err(RasterError::ElementTooShort { min: 1, got: len });
        }
        Ok(StructuringElement { kind: SeKind::Horizontal, len_x: len, len_y: 1 })
    }

    pub fn vertical(len: usize) -> Result<Self, RasterError> {
        if len < 1 {
            return Err(RasterError::ElementTooShort { min: 1, got: len });
        }
        Ok(StructuringElement { kind: SeKind::Vertical, len_x: 1, len_y: len })
    }

    pub fn rectangular(len_x: usize, len_y: usize) -> Result<Self, RasterError> {
        if len_x < 1 {
            return Err(RasterError::ElementTooShort { min: 1, got: len_x });
        }
        if len_y < 1 {
            return Err(RasterError::ElementTooShort { min: 1, got: len_y });
        }
        Ok(StructuringElement { kind: SeKind::Rectangular, len_x, len_y })
    }

    pub fn kind(&self) -> SeKind {
        self.kind
    }

    pub fn len_x(&self) -> usize {
        self.len_x
    }

    pub fn len_y(&self) -> usize {
        self.len_y
    }
}

impl fmt::Display for StructuringElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {}x{}", self.kind, self.len_x, self.len_y)
    }
}

/// Decode an 8-bit grayscale PGM (P5) or grayscale PNG.
pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Raster, RasterError> {
    match format {
        ImageFormat::Pgm => decode_pgm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

/// Sniff PGM vs PNG by magic bytes. Convenience for file loading.
pub fn decode_image_auto(bytes: &[u8]) -> Result<Raster, RasterError> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(RasterError::MalformedHeader { format: "image", reason: "unknown magic".into() })
    }
}

fn decode_png(bytes: &[u8]) -> Result<Raster, RasterError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| RasterError::Png(e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        // Other layouts (palette expanded to rgb, 16-bit, alpha) are not
        // "grayscale PNG" for our purposes.
        _ => return Err(RasterError::PngNotGrayscale),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Raster::new(w, h, gray.into_raw())
}

fn decode_pgm(bytes: &[u8]) -> Result<Raster, RasterError> {
    let malformed = |reason: &str| RasterError::MalformedHeader {
        format: "PGM",
        reason: reason.to_string(),
    };
    if !bytes.starts_with(b"P5") {
        return Err(malformed("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(malformed("header ended early")),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if pos == start {
            return Err(malformed("expected decimal value"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse::<u32>().map_err(|_| malformed("value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(RasterError::UnsupportedDepth(maxval));
    }
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyImage);
    }
    // exactly one whitespace byte separates header and payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing separator before payload")),
    }
    let expected = width as usize * height as usize;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(RasterError::TruncatedPayload { expected, found: payload.len() });
    }
    Raster::new(width as usize, height as usize, payload[..expected].to_vec())
}

/// Encode in canonical P5 form: `P5\n<w> <h>\n255\n<pixels>`.
/// `decode_pgm(encode_pgm(r)) == r` bit-exactly, and canonical files
/// round-trip byte-for-byte.
pub fn encode_pgm(img: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Otsu threshold output. `degenerate` marks a constant image (zero
/// between-class variance everywhere); its threshold is the constant value
/// and the binary image is all foreground.
#[derive(Debug, Clone)]
pub struct OtsuResult {
    pub threshold: u8,
    pub degenerate: bool,
    pub binary: BinaryRaster,
}

/// Global Otsu thresholding over the 256-bin histogram.
///
/// The returned threshold maximises between-class variance with ties broken
/// toward the smallest value; pixels `<= t` become foreground (ink is dark).
pub fn otsu_threshold(img: &Raster) -> OtsuResult {
    let mut hist = [0u64; 256];
    for &p in &img.data {
        hist[p as usize] += 1;
    }
    let (threshold, degenerate) = otsu_from_histogram(&hist);
    let data = img.data.iter().map(|&p| (p <= threshold) as u8).collect();
    OtsuResult {
        threshold,
        degenerate,
        binary: BinaryRaster { width: img.width, height: img.height, data },
    }
}

/// Threshold selection on a raw histogram; exposed for property tests.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> (u8, bool) {
    let total: u64 = hist.iter().sum();
    assert!(total > 0, "empty histogram");
    let total_f = total as f64;
    let global_sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();

    let mut best_t = 0u8;
    let mut best_var = 0.0f64;
    let mut cum_count = 0u64;
    let mut cum_sum = 0.0f64;
    for t in 0..256usize {
        cum_count += hist[t];
        cum_sum += t as f64 * hist[t] as f64;
        let w0 = cum_count as f64 / total_f;
        let w1 = 1.0 - w0;
        if cum_count == 0 || cum_count == total {
            continue;
        }
        let mu0 = cum_sum / cum_count as f64;
        let mu1 = (global_sum - cum_sum) / (total - cum_count) as f64;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    if best_var == 0.0 {
        // constant image: every split is empty on one side
        let value = hist.iter().position(|&c| c > 0).unwrap() as u8;
        return (value, true);
    }
    (best_t, false)
}

/// Binary erosion or dilation with a flat box element.
///
/// Out-of-bounds pixels count as background: erosion requires the whole
/// element in-bounds and on foreground, dilation ignores out-of-bounds
/// positions.
pub fn morph(bin: &BinaryRaster, op: MorphOp, se: &StructuringElement) -> BinaryRaster {
    // A box element separates into a horizontal and a vertical pass.
    match (se.len_x, se.len_y) {
        (1, 1) => bin.clone(),
        (lx, 1) => morph_1d(bin, op, lx, true),
        (1, ly) => morph_1d(bin, op, ly, false),
        (lx, ly) => {
            let pass1 = morph_1d(bin, op, lx, true);
            morph_1d(&pass1, op, ly, false)
        }
    }
}

fn morph_1d(bin: &BinaryRaster, op: MorphOp, len: usize, horizontal: bool) -> BinaryRaster {
    let (w, h) = (bin.width, bin.height);
    let mut out = BinaryRaster::filled(w, h, 0);
    let anchor = len / 2;
    let lanes = if horizontal { h } else { w };
    let lane_len = if horizontal { w } else { h };
    for lane in 0..lanes {
        let at = |i: usize| -> u8 {
            if horizontal {
                bin.get(i, lane)
            } else {
                bin.get(lane, i)
            }
        };
        // running count of foreground pixels in the window [i-anchor, i-anchor+len);
        // seed with the first window minus the slot the i=0 step adds
        let mut count = 0usize;
        for j in -(anchor as isize)..(len as isize - anchor as isize - 1) {
            if j >= 0 && (j as usize) < lane_len && at(j as usize) == 1 {
                count += 1;
            }
        }
        for i in 0..lane_len {
            let enter = i as isize - anchor as isize + len as isize - 1;
            let leave = i as isize - anchor as isize - 1;
            if enter >= 0 && (enter as usize) < lane_len && at(enter as usize) == 1 {
                count += 1;
            }
            if leave >= 0 && (leave as usize) < lane_len && at(leave as usize) == 1 {
                count -= 1;
            }
            let window_start = i as isize - anchor as isize;
            let window_end = window_start + len as isize - 1;
            let fully_inside = window_start >= 0 && (window_end as usize) < lane_len;
            let v = match op {
                MorphOp::Erode => (fully_inside && count == len) as u8,
                MorphOp::Dilate => (count > 0) as u8,
            };
            if v == 1 {
                if horizontal {
                    out.set(i, lane, 1);
                } else {
                    out.set(lane, i, 1);
                }
            }
        }
    }
    out
}

/// Morphological opening: erode then dilate with the same element.
pub fn opening(bin: &BinaryRaster, se: &StructuringElement) -> BinaryRaster {
    let eroded = morph(bin, MorphOp::Erode, se);
    morph(&eroded, MorphOp::Dilate, se)
}

#[derive(Debug, Clone)]
pub struct TableLines {
    pub lines: BinaryRaster,
    /// Otsu found no contrast (blank/constant page); `lines` is empty.
    pub degenerate: bool,
}

/// Reduce a page to its long straight strokes: union of a horizontal opening
/// (length `h_len`) and a vertical opening (length `v_len`) of the Otsu
/// foreground. Ink runs shorter than the element lengths disappear.
pub fn extract_table_lines(
    img: &Raster,
    h_len: usize,
    v_len: usize,
) -> Result<TableLines, RasterError> {
    if h_len < 3 {
        return Err(RasterError::ElementTooShort { min: 3, got: h_len });
    }
    if v_len < 3 {
        return Err(RasterError::ElementTooShort { min: 3, got: v_len });
    }
    let otsu = otsu_threshold(img);
    if otsu.degenerate {
        // no contrast at all: a blank page has no lines
        return Ok(TableLines {
            lines: BinaryRaster::filled(img.width, img.height, 0),
            degenerate: true,
        });
    }
    let horiz = opening(&otsu.binary, &StructuringElement::horizontal(h_len)?);
    let vert = opening(&otsu.binary, &StructuringElement::vertical(v_len)?);
    let data = horiz
        .data
        .iter()
        .zip(vert.data.iter())
        .map(|(&a, &b)| a | b)
        .collect();
    Ok(TableLines {
        lines: BinaryRaster { width: img.width, height: img.height, data },
        degenerate: false,
    })
}
