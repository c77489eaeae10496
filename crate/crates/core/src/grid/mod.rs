//! Images, label masks, contours and bounding-box geometry.
//!
//! Axis convention: `x` is the row (height) axis and `y` the column (width)
//! axis. A pixel at index `(r, c)` occupies the unit cell `[r, r+1) x [c, c+1)`
//! so its center sits at `(r + 0.5, c + 0.5)`.

mod bbox;
mod contour;
pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bbox::{bbox_errors, encompasses, expand_bbox, expand_bbox_checked, iou, tight_bbox, BoxErrors};
pub use contour::mask_to_contour;

/// Physical pixel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelSpacing {
    /// mm per pixel along rows (x).
    pub dx: f64,
    /// mm per pixel along columns (y).
    pub dy: f64,
}

impl PixelSpacing {
    pub fn new(dx: f64, dy: f64) -> Result<Self> {
        if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "pixel spacing must be positive, got ({dx}, {dy})"
            )));
        }
        Ok(Self { dx, dy })
    }

    pub fn isotropic(d: f64) -> Self {
        Self { dx: d, dy: d }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            dx: self.dx * factor,
            dy: self.dy * factor,
        }
    }
}

impl Default for PixelSpacing {
    fn default() -> Self {
        Self::isotropic(1.0)
    }
}

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    spacing: PixelSpacing,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, spacing: PixelSpacing) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue("image must be at least 1x1".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidValue(format!("intensity {bad} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            spacing,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn spacing(&self) -> PixelSpacing {
        self.spacing
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

/// Which anatomical region of a label mask is meant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// LV cavity, class 1.
    Endo,
    /// LV cavity plus myocardium, classes 1 and 2.
    Epi,
}

impl Structure {
    pub const ALL: [Structure; 2] = [Structure::Endo, Structure::Epi];

    #[inline]
    pub fn contains(self, label: u8) -> bool {
        match self {
            Structure::Endo => label == LabelMask::CAVITY,
            Structure::Epi => label == LabelMask::CAVITY || label == LabelMask::MYOCARDIUM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Endo => "endo",
            Structure::Epi => "epi",
        }
    }
}

/// Apical acquisition view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "2CH")]
    TwoChamber,
    #[serde(rename = "4CH")]
    FourChamber,
}

impl View {
    pub const ALL: [View; 2] = [View::TwoChamber, View::FourChamber];

    pub fn name(self) -> &'static str {
        match self {
            View::TwoChamber => "2CH",
            View::FourChamber => "4CH",
        }
    }
}

/// Cardiac phase of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Instant {
    ED,
    ES,
}

impl Instant {
    pub const ALL: [Instant; 2] = [Instant::ED, Instant::ES];

    pub fn name(self) -> &'static str {
        match self {
            Instant::ED => "ED",
            Instant::ES => "ES",
        }
    }
}

/// Per-pixel class map over background, LV cavity and myocardium.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    spacing: PixelSpacing,
}

// PixelSpacing only holds finite values, so equality is total.
impl Eq for PixelSpacing {}

impl LabelMask {
    pub const BACKGROUND: u8 = 0;
    pub const CAVITY: u8 = 1;
    pub const MYOCARDIUM: u8 = 2;
    pub const CLASSES: usize = 3;

    pub fn new(height: usize, width: usize, labels: Vec<u8>, spacing: PixelSpacing) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue("mask must be at least 1x1".into()));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 2) {
            return Err(Error::InvalidValue(format!("label {bad} not in {{0,1,2}}")));
        }
        Ok(Self {
            height,
            width,
            labels,
            spacing,
        })
    }

    pub fn zeros(height: usize, width: usize, spacing: PixelSpacing) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
            spacing,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn spacing(&self) -> PixelSpacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: PixelSpacing) -> Self {
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, label: u8) {
        debug_assert!(label <= 2);
        self.labels[r * self.width + c] = label;
    }

    #[inline]
    pub fn in_structure(&self, r: usize, c: usize, structure: Structure) -> bool {
        structure.contains(self.get(r, c))
    }

    /// Binary region of a structure, row-major.
    pub fn region(&self, structure: Structure) -> Vec<bool> {
        self.labels.iter().map(|&l| structure.contains(l)).collect()
    }

    pub fn structure_area_px(&self, structure: Structure) -> usize {
        self.labels.iter().filter(|&&l| structure.contains(l)).count()
    }

    /// Image extent as a box `(0, H, 0, W)`.
    pub fn extent(&self) -> BoundingBox {
        BoundingBox::full(self.height, self.width)
    }
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        if ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) || x_min > x_max || y_min > y_max {
            return Err(Error::InvalidValue(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x_min: 0.0,
            x_max: height as f64,
            y_min: 0.0,
            y_max: width as f64,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.x_max, self.y_min, self.y_max]
    }

    pub fn height(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn width(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn x_center(&self) -> f64 {
        0.5 * (self.x_min + self.x_max)
    }

    pub fn y_center(&self) -> f64 {
        0.5 * (self.y_min + self.y_max)
    }

    pub fn area(&self) -> f64 {
        self.height() * self.width()
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min && self.x_max >= other.x_max && self.y_min <= other.y_min && self.y_max >= other.y_max
    }

    /// Box as fractions of an image extent.
    pub fn normalized(&self, height: usize, width: usize) -> [f64; 4] {
        let (h, w) = (height as f64, width as f64);
        [self.x_min / h, self.x_max / h, self.y_min / w, self.y_max / w]
    }

    /// Inverse of [`normalized`](Self::normalized); coordinates are sorted so the result is valid.
    pub fn from_normalized(n: [f64; 4], height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        let (a, b) = (n[0] * h, n[1] * h);
        let (c, d) = (n[2] * w, n[3] * w);
        Self {
            x_min: a.min(b),
            x_max: a.max(b),
            y_min: c.min(d),
            y_max: c.max(d),
        }
    }
}

/// Ordered boundary points (pixel centers) of a structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    points: Vec<[f64; 2]>,
    spacing: PixelSpacing,
}

impl Contour {
    pub fn new(points: Vec<[f64; 2]>, spacing: PixelSpacing) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyContour);
        }
        Ok(Self { points, spacing })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn spacing(&self) -> PixelSpacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points converted to millimetres.
    pub fn points_mm(&self) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .map(|p| [p[0] * self.spacing.dx, p[1] * self.spacing.dy])
            .collect()
    }

    pub fn translated(&self, dr: f64, dc: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + dr, p[1] + dc]).collect(),
            spacing: self.spacing,
        }
    }
}
