//! Geometry and label value types shared by every other module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SAD at or above this many millimetres puts a lesion in [`SizeStratum::Large`].
pub const LARGE_SAD_MM: f64 = 10.0;

/// Axis-aligned box in continuous pixel coordinates.
///
/// Construction rejects non-finite coordinates and zero or negative extents, so
/// every `BoundingBox` in circulation has positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "non-finite box coordinates [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidGeometry(format!(
                "box [{x1}, {y1}, {x2}, {y2}] has zero or negative extent"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn within_image(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Lexicographic order on `(x1, y1, x2, y2)`, used for deterministic tie-breaks.
    pub fn lex_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// Intersection over union. Touching boxes (shared edge only) give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// One RECIST diameter, stored as its two endpoints in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub start: Point,
    pub end: Point,
}

impl Axis {
    pub fn new(start: Point, end: Point) -> Result<Self> {
        if ![start.x, start.y, end.x, end.y].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite axis endpoint".into()));
        }
        if start == end {
            return Err(Error::InvalidGeometry(format!(
                "axis endpoints coincide at ({}, {})",
                start.x, start.y
            )));
        }
        Ok(Self { start, end })
    }

    pub fn from_coords(c: [f64; 4]) -> Result<Self> {
        Self::new(Point::new(c[0], c[1]), Point::new(c[2], c[3]))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.start.x, self.start.y, self.end.x, self.end.y]
    }

    pub fn length_px(&self) -> f64 {
        (self.end.x - self.start.x).hypot(self.end.y - self.start.y)
    }
}

/// RECIST long and short diameters of one lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecistMeasurement {
    pub long_axis: Axis,
    pub short_axis: Axis,
}

impl RecistMeasurement {
    pub fn new(long_axis: Axis, short_axis: Axis) -> Self {
        Self {
            long_axis,
            short_axis,
        }
    }

    /// Data-quality flag: the "short" diameter is longer than the long one.
    pub fn short_exceeds_long(&self) -> bool {
        self.short_axis.length_px() > self.long_axis.length_px()
    }

    pub fn endpoints(&self) -> [Point; 4] {
        [
            self.long_axis.start,
            self.long_axis.end,
            self.short_axis.start,
            self.short_axis.end,
        ]
    }
}

/// Axis-aligned hull of the four RECIST endpoints, grown by `padding_px` on every side.
pub fn box_from_recist(m: &RecistMeasurement, padding_px: f64) -> Result<BoundingBox> {
    if !(padding_px >= 0.0) || !padding_px.is_finite() {
        return Err(Error::InvalidGeometry(format!(
            "padding must be a finite nonnegative number, got {padding_px}"
        )));
    }
    let pts = m.endpoints();
    let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
    let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x1 = x1.min(p.x);
        y1 = y1.min(p.y);
        x2 = x2.max(p.x);
        y2 = y2.max(p.y);
    }
    if padding_px == 0.0 && (x1 >= x2 || y1 >= y2) {
        return Err(Error::DegenerateBox);
    }
    BoundingBox::new(x1 - padding_px, y1 - padding_px, x2 + padding_px, y2 + padding_px)
}

/// Short-axis diameter in millimetres.
pub fn sad_mm(m: &RecistMeasurement, spacing_mm_per_px: f64) -> Result<f64> {
    if !(spacing_mm_per_px > 0.0) || !spacing_mm_per_px.is_finite() {
        return Err(Error::InvalidSpacing(spacing_mm_per_px));
    }
    Ok(m.short_axis.length_px() * spacing_mm_per_px)
}

/// The eight coarse body-part tags, with their fixed numeric codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BodyPartLabel {
    Bone = 1,
    Abdomen = 2,
    Mediastinum = 3,
    Liver = 4,
    Lung = 5,
    Kidney = 6,
    SoftTissue = 7,
    Pelvis = 8,
}

impl BodyPartLabel {
    pub const ALL: [BodyPartLabel; 8] = [
        BodyPartLabel::Bone,
        BodyPartLabel::Abdomen,
        BodyPartLabel::Mediastinum,
        BodyPartLabel::Liver,
        BodyPartLabel::Lung,
        BodyPartLabel::Kidney,
        BodyPartLabel::SoftTissue,
        BodyPartLabel::Pelvis,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1..=8 => Some(Self::ALL[(code - 1) as usize]),
            _ => None,
        }
    }

    /// Zero-based position, handy for indexing 8-wide tables.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPartLabel::Bone => "Bone",
            BodyPartLabel::Abdomen => "Abdomen",
            BodyPartLabel::Mediastinum => "Mediastinum",
            BodyPartLabel::Liver => "Liver",
            BodyPartLabel::Lung => "Lung",
            BodyPartLabel::Kidney => "Kidney",
            BodyPartLabel::SoftTissue => "Soft Tissue",
            BodyPartLabel::Pelvis => "Pelvis",
        }
    }

    /// Bone, Kidney, Soft Tissue and Pelvis are the under-represented classes.
    pub fn is_under_represented(self) -> bool {
        matches!(
            self,
            BodyPartLabel::Bone
                | BodyPartLabel::Kidney
                | BodyPartLabel::SoftTissue
                | BodyPartLabel::Pelvis
        )
    }
}

impl fmt::Display for BodyPartLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BodyPartLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        if let Ok(code) = norm.parse::<i64>() {
            return Self::from_code(code)
                .ok_or_else(|| Error::Config(format!("label code {code} outside 1..8")));
        }
        Self::ALL
            .into_iter()
            .find(|l| l.name().replace(' ', "").to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::Config(format!("unknown body part label {s:?}")))
    }
}

impl Serialize for BodyPartLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for BodyPartLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = i64::deserialize(d)?;
        BodyPartLabel::from_code(code)
            .ok_or_else(|| serde::de::Error::custom(format!("label code {code} outside 1..8")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeStratum {
    /// SAD >= 10 mm
    Large,
    /// SAD < 10 mm
    Small,
}

impl SizeStratum {
    pub fn from_sad_mm(sad: f64) -> Self {
        if sad >= LARGE_SAD_MM {
            SizeStratum::Large
        } else {
            SizeStratum::Small
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeStratum::Large => "SAD>=1cm",
            SizeStratum::Small => "SAD<1cm",
        }
    }
}

impl fmt::Display for SizeStratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
