//! Structured "Lesions" block for the Findings section of a radiology report.
//!
//! Text layout (UTF-8, LF line endings):
//!
//! ```text
//! LESIONS:
//!   1. Lung lesion, confidence 97%, series 2, slice 134, location [10.0, 20.0, 110.0, 140.0]
//! ```
//!
//! or, when nothing qualifies,
//!
//! ```text
//! LESIONS:
//!   No lesions detected with confidence >= 50%.
//! ```

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Prediction;
use crate::geometry::{BodyPartLabel, BoundingBox};
use crate::ingestion::DatasetManifest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionOptions {
    pub top_k: usize,
    pub min_confidence: f64,
}

impl Default for SectionOptions {
    fn default() -> Self {
        Self {
            top_k: 3,
            min_confidence: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionEntry {
    pub rank: usize,
    pub body_part: BodyPartLabel,
    pub body_part_name: String,
    /// Detection score in `[0, 1]`.
    pub confidence: f64,
    pub series_id: String,
    pub slice_index: i64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionsSection {
    pub study_id: String,
    pub generated_from: String,
    pub min_confidence: f64,
    pub entries: Vec<LesionEntry>,
}

/// image_key -> (series_id, slice_index)
pub type SliceIndex = HashMap<String, (String, i64)>;

/// Index of every key slice in a manifest.
pub fn slice_index(m: &DatasetManifest) -> SliceIndex {
    m.annotations
        .iter()
        .map(|a| (a.image_key(), (a.series_id.clone(), a.slice_index)))
        .collect()
}

/// Filter to confident detections, rank by score and keep the top few.
pub fn build_lesions_section(
    preds: &[Prediction],
    index: &SliceIndex,
    study_id: &str,
    generated_from: &str,
    opts: &SectionOptions,
) -> Result<LesionsSection> {
    if let Some(p) = preds.iter().find(|p| !index.contains_key(&p.image_key)) {
        return Err(Error::MissingIndex(p.image_key.clone()));
    }
    let mut kept: Vec<&Prediction> = preds.iter().filter(|p| p.score >= opts.min_confidence).collect();
    kept.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.label.cmp(&b.label))
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
    });
    kept.truncate(opts.top_k);
    let entries = kept
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let (series_id, slice_index) = index[&p.image_key].clone();
            LesionEntry {
                rank: i + 1,
                body_part: p.label,
                body_part_name: p.label.name().to_string(),
                confidence: p.score,
                series_id,
                slice_index,
                bbox: p.bbox,
            }
        })
        .collect();
    Ok(LesionsSection {
        study_id: study_id.to_string(),
        generated_from: generated_from.to_string(),
        min_confidence: opts.min_confidence,
        entries,
    })
}

fn round_half_away(v: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let r = (v * scale).round() / scale;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn percent(score: f64) -> i64 {
    round_half_away(score * 100.0, 0) as i64
}

pub fn render_text(section: &LesionsSection) -> String {
    let mut out = String::from("LESIONS:\n");
    if section.entries.is_empty() {
        out.push_str(&format!(
            "  No lesions detected with confidence >= {}%.\n",
            percent(section.min_confidence)
        ));
        return out;
    }
    for e in &section.entries {
        let [x1, y1, x2, y2] = e.bbox.coords().map(|c| round_half_away(c, 1));
        out.push_str(&format!(
            "  {}. {} lesion, confidence {}%, series {}, slice {}, location [{x1:.1}, {y1:.1}, {x2:.1}, {y2:.1}]\n",
            e.rank,
            e.body_part.name(),
            percent(e.confidence),
            e.series_id,
            e.slice_index,
        ));
    }
    out
}
