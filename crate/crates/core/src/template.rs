//! Field templates: the pre-printed form model, its warp onto a page, and
//! the field-image cuts.
//!
//! A template lives in the pixel frame of the reference scan it was authored
//! on. Fitting registers its anchor points onto detected landmarks and maps
//! every field polygon through the learned transform; extraction cuts the
//! axis-aligned bounding box of each warped polygon out of the page without
//! resampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmark::{Point, PointSet};
use crate::raster::Raster;
use crate::registration::{
    apply_transform, cpd_register, CpdConfig, RegistrationError, RegistrationResult,
};

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
    #[error("template needs at least 3 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("field {0:?} polygon has zero area")]
    DegeneratePolygon(String),
    #[error("reference size must be positive")]
    BadReferenceSize,
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

/// Four-corner field region in template coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub polygon: [Point; 4],
}

/// The per-layout form model: anchor points (table intersections of the
/// reference scan) plus named field polygons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub layout_class: String,
    pub reference_size: [f64; 2],
    pub anchors: PointSet,
    pub fields: Vec<FieldSpec>,
}

fn polygon_area(poly: &[Point; 4]) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        let a = poly[i];
        let b = poly[(i + 1) % 4];
        acc += a.x * b.y - b.x * a.y;
    }
    acc.abs() / 2.0
}

impl Template {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.anchors.len() < 3 {
            return Err(TemplateError::TooFewAnchors(self.anchors.len()));
        }
        if self.reference_size[0] <= 0.0 || self.reference_size[1] <= 0.0 {
            return Err(TemplateError::BadReferenceSize);
        }
        let mut seen = std::collections::HashSet::new();
        for field in &self.fields {
            if !seen.insert(field.name.as_str()) {
                return Err(TemplateError::DuplicateField(field.name.clone()));
            }
            if polygon_area(&field.polygon) <= 0.0 {
                return Err(TemplateError::DegeneratePolygon(field.name.clone()));
            }
        }
        Ok(())
    }
}

/// Parse and validate a template file.
pub fn load_template(bytes: &[u8]) -> Result<Template, TemplateError> {
    let template: Template = serde_json::from_slice(bytes)?;
    template.validate()?;
    Ok(template)
}

/// Serialise a template canonically (pretty JSON, stable field order).
pub fn save_template(template: &Template) -> Result<Vec<u8>, TemplateError> {
    template.validate()?;
    let mut bytes = serde_json::to_vec_pretty(template)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// A field polygon mapped into the page frame. `missing` marks polygons that
/// fell entirely off the page at extraction time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarpedField {
    pub name: String,
    pub polygon: [Point; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedTemplate {
    pub source_doc: String,
    pub layout_class: String,
    pub warped_fields: Vec<WarpedField>,
    pub registration: RegistrationResult,
}

/// Final variance above this bound (squared pixels) suggests the landmarks
/// did not match the template; `fit_template` reports it via `sigma2_warning`.
pub const DEFAULT_SIGMA2_SANITY: f64 = 400.0;

impl FittedTemplate {
    pub fn sigma2_warning(&self, bound: f64) -> bool {
        self.registration.sigma2 > bound
    }
}

/// Register the template anchors onto the detected landmarks and carry every
/// field polygon through the learned transform.
pub fn fit_template(
    template: &Template,
    landmarks: &PointSet,
    cfg: &CpdConfig,
) -> Result<FittedTemplate, TemplateError> {
    template.validate()?;
    let registration = cpd_register(&template.anchors, landmarks, cfg)?;
    let warped_fields = template
        .fields
        .iter()
        .map(|field| WarpedField {
            name: field.name.clone(),
            polygon: field.polygon.map(|v| apply_transform(&registration.transform, v)),
        })
        .collect();
    Ok(FittedTemplate {
        source_doc: String::new(),
        layout_class: template.layout_class.clone(),
        warped_fields,
        registration,
    })
}

/// One extracted field crop; `origin` is the top-left of the crop in the
/// page frame.
#[derive(Debug, Clone)]
pub struct FieldImage {
    pub doc_id: String,
    pub field_name: String,
    pub crop: Raster,
    pub origin: Point,
}

#[derive(Debug, Clone)]
pub enum ExtractedField {
    Present(FieldImage),
    /// The warped polygon fell entirely outside the page.
    Missing { field_name: String },
}

impl ExtractedField {
    pub fn name(&self) -> &str {
        match self {
            ExtractedField::Present(f) => &f.field_name,
            ExtractedField::Missing { field_name } => field_name,
        }
    }

    pub fn as_present(&self) -> Option<&FieldImage> {
        match self {
            ExtractedField::Present(f) => Some(f),
            ExtractedField::Missing { .. } => None,
        }
    }
}

/// Cut every fitted field out of the page.
///
/// The crop is the half-open integer box `[floor(min x), ceil(max x)) x
/// [floor(min y), ceil(max y))` of the warped polygon, clamped to the page;
/// pixels are copied exactly, never resampled.
pub fn extract_fields(page: &Raster, fit: &FittedTemplate, doc_id: &str) -> Vec<ExtractedField> {
    fit.warped_fields
        .iter()
        .map(|field| {
            let xs = field.polygon.iter().map(|p| p.x);
            let ys = field.polygon.iter().map(|p| p.y);
            let x0 = xs.clone().fold(f64::INFINITY, f64::min).floor();
            let x1 = xs.fold(f64::NEG_INFINITY, f64::max).ceil();
            let y0 = ys.clone().fold(f64::INFINITY, f64::min).floor();
            let y1 = ys.fold(f64::NEG_INFINITY, f64::max).ceil();
            // clamp to the page; entirely outside -> missing
            let cx0 = x0.max(0.0) as usize;
            let cy0 = y0.max(0.0) as usize;
            let cx1 = (x1.min(page.width() as f64)).max(0.0) as usize;
            let cy1 = (y1.min(page.height() as f64)).max(0.0) as usize;
            if x1 <= 0.0 || y1 <= 0.0 || cx0 >= cx1 || cy0 >= cy1 {
                return ExtractedField::Missing { field_name: field.name.clone() };
            }
            let crop = page.crop(cx0, cy0, cx1, cy1).expect("clamped box is inside the page");
            ExtractedField::Present(FieldImage {
                doc_id: doc_id.to_string(),
                field_name: field.name.clone(),
                crop,
                origin: Point::new(cx0 as f64, cy0 as f64),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> [Point; 4] {
        [
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ]
    }

    /// Three fields on a 4x4 anchor grid, loosely shaped like the date/age
    /// block of a type-B certificate.
    fn sample_template() -> Template {
        let anchors: PointSet = (0..4)
            .flat_map(|iy| (0..4).map(move |ix| Point::new(60.0 + ix as f64 * 120.0, 40.0 + iy as f64 * 80.0)))
            .collect();
        Template {
            layout_class: "B".into(),
            reference_size: [500.0, 320.0],
            anchors,
            fields: vec![
                FieldSpec { name: "birth_date".into(), polygon: rect(65.0, 45.0, 175.0, 115.0) },
                FieldSpec { name: "death_date".into(), polygon: rect(185.0, 45.0, 295.0, 115.0) },
                FieldSpec { name: "age".into(), polygon: rect(305.0, 45.0, 415.0, 115.0) },
            ],
        }
    }

    #[test]
    fn template_round_trip() {
        let template = sample_template();
        let bytes = save_template(&template).unwrap();
        let loaded = load_template(&bytes).unwrap();
        assert_eq!(loaded, template);
        // canonical form is stable
        assert_eq!(save_template(&loaded).unwrap(), bytes);
    }

    #[test]
    fn template_validation_errors() {
        let mut t = sample_template();
        t.anchors = vec![(0.0, 0.0), (1.0, 1.0)].into();
        assert!(matches!(t.validate(), Err(TemplateError::TooFewAnchors(2))));

        let mut t = sample_template();
        t.fields[1].name = "birth_date".into();
        assert!(matches!(t.validate(), Err(TemplateError::DuplicateField(_))));

        let mut t = sample_template();
        t.fields[0].polygon = rect(10.0, 10.0, 10.0, 40.0);
        assert!(matches!(t.validate(), Err(TemplateError::DegeneratePolygon(_))));
    }

    #[test]
    fn self_fit_is_identity() {
        let template = sample_template();
        let fit = fit_template(&template, &template.anchors, &CpdConfig::default()).unwrap();
        for (warped, original) in fit.warped_fields.iter().zip(template.fields.iter()) {
            for (w, o) in warped.polygon.iter().zip(original.polygon.iter()) {
                assert!(w.distance(o) < 1e-6, "{} moved by {}", warped.name, w.distance(o));
            }
        }
    }

    #[test]
    fn translation_fit_shifts_polygons() {
        let template = sample_template();
        let landmarks: PointSet =
            template.anchors.iter().map(|p| Point::new(p.x + 5.0, p.y)).collect();
        let cfg = CpdConfig { w: 0.0, ..Default::default() };
        let fit = fit_template(&template, &landmarks, &cfg).unwrap();
        for (warped, original) in fit.warped_fields.iter().zip(template.fields.iter()) {
            for (w, o) in warped.polygon.iter().zip(original.polygon.iter()) {
                assert!((w.x - o.x - 5.0).abs() < 0.15 && (w.y - o.y).abs() < 0.15);
            }
        }
    }

    #[test]
    fn spurious_landmarks_tolerated() {
        let template = sample_template();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // landmarks = anchors + 20% junk points
        let mut landmarks: Vec<Point> = template.anchors.points.clone();
        for _ in 0..template.anchors.len() / 5 {
            landmarks.push(Point::new(rng.random_range(0.0..500.0), rng.random_range(0.0..320.0)));
        }
        let fit =
            fit_template(&template, &PointSet::new(landmarks), &CpdConfig::default()).unwrap();
        for (warped, original) in fit.warped_fields.iter().zip(template.fields.iter()) {
            for (w, o) in warped.polygon.iter().zip(original.polygon.iter()) {
                assert!(w.distance(o) < 3.0, "{} vertex error {}", warped.name, w.distance(o));
            }
        }
        assert!(!fit.sigma2_warning(DEFAULT_SIGMA2_SANITY));
    }

    fn identity_fit(template: &Template) -> FittedTemplate {
        fit_template(template, &template.anchors, &CpdConfig::default()).unwrap()
    }

    #[test]
    fn axis_aligned_crop_is_half_open() {
        let mut template = sample_template();
        template.fields = vec![FieldSpec {
            name: "cell".into(),
            polygon: rect(10.0, 10.0, 20.0, 15.0),
        }];
        let page = Raster::filled(64, 64, 200);
        let fit = identity_fit(&template);
        let fields = extract_fields(&page, &fit, "doc1");
        let field = fields[0].as_present().expect("present");
        assert_eq!((field.crop.width(), field.crop.height()), (10, 5));
        assert_eq!((field.origin.x, field.origin.y), (10.0, 10.0));
    }

    #[test]
    fn off_page_polygon_marked_missing() {
        let mut template = sample_template();
        template.fields = vec![FieldSpec {
            name: "gone".into(),
            polygon: rect(1000.0, 1000.0, 1100.0, 1050.0),
        }];
        let page = Raster::filled(64, 64, 200);
        let fields = extract_fields(&page, &identity_fit(&template), "doc1");
        assert!(matches!(fields[0], ExtractedField::Missing { .. }));
    }

    #[test]
    fn crops_are_exact_submatrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let data: Vec<u8> = (0..200 * 150).map(|_| rng.random()).collect();
        let page = Raster::new(200, 150, data).unwrap();
        let mut template = sample_template();
        template.fields = vec![
            FieldSpec { name: "a".into(), polygon: rect(17.0, 23.0, 63.0, 58.0) },
            // partially off-page: clamped to the page boundary
            FieldSpec { name: "b".into(), polygon: rect(180.0, 130.0, 230.0, 170.0) },
        ];
        let fields = extract_fields(&page, &identity_fit(&template), "doc1");
        let a = fields[0].as_present().unwrap();
        for y in 0..a.crop.height() {
            for x in 0..a.crop.width() {
                assert_eq!(a.crop.get(x, y), page.get(x + 17, y + 23));
            }
        }
        let b = fields[1].as_present().unwrap();
        assert_eq!((b.crop.width(), b.crop.height()), (20, 20));
        assert_eq!((b.origin.x, b.origin.y), (180.0, 130.0));
        for y in 0..20 {
            for x in 0..20 {
                assert_eq!(b.crop.get(x, y), page.get(x + 180, y + 130));
            }
        }
    }

    #[test]
    fn field_count_preserved_through_fit_and_extract() {
        let template = sample_template();
        let page = Raster::filled(500, 320, 255);
        let fit = identity_fit(&template);
        assert_eq!(fit.warped_fields.len(), template.fields.len());
        let fields = extract_fields(&page, &fit, "doc1");
        assert_eq!(fields.len(), template.fields.len());
        let names: Vec<&str> = fields.iter().map(|f| f.name()).collect();
        assert_eq!(names, vec!["birth_date", "death_date", "age"]);
    }
}
