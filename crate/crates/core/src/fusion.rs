//! Weighted boxes fusion (WBF) of detector outputs.
//!
//! Predictions from several checkpoints (or models) for the same image are
//! clustered per label. Boxes are visited by descending score; each joins the
//! first cluster whose *current fused box* overlaps it by more than the IoU
//! threshold, otherwise it opens a new cluster. A cluster's box is the
//! score-weighted mean of its members and its score the mean member score,
//! optionally rescaled by `min(T, N) / N` for a cluster of `T` boxes fused from
//! `N` prediction sets.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BodyPartLabel, BoundingBox};

/// One detector output. Serialises as one JSON Lines record:
/// `{"image_key": str, "box": [x1,y1,x2,y2], "label": 1..8, "score": float, "source_id": str}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_key: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: BodyPartLabel,
    pub score: f64,
    pub source_id: String,
}

impl Prediction {
    pub fn new(
        image_key: impl Into<String>,
        bbox: BoundingBox,
        label: BodyPartLabel,
        score: f64,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let p = Self {
            image_key: image_key.into(),
            bbox,
            label,
            score,
            source_id: source_id.into(),
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Config(format!(
                "prediction score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }
}

/// Descending score, then source id, then box coordinates.
fn fusion_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.source_id.cmp(&b.source_id))
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Read JSON Lines predictions. Blank lines are skipped.
pub fn read_predictions(source: impl BufRead) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line)
            .map_err(|e| Error::parse(i as u64 + 1, format!("col {}", e.column()), e.to_string()))?;
        p.validate()
            .map_err(|e| Error::parse(i as u64 + 1, "score", e.to_string()))?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_predictions(preds: &[Prediction], mut out: impl Write) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Mean member score.
    Average,
    /// Mean member score times `min(T, N) / N`.
    RescaledAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    pub num_sources: usize,
    pub score_mode: ScoreMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.55,
            num_sources: 5,
            score_mode: ScoreMode::RescaledAverage,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "fusion IoU threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        if self.num_sources == 0 {
            return Err(Error::Config("fusion needs at least one source".into()));
        }
        Ok(())
    }
}

/// Source id stamped on fused predictions.
pub const FUSED_SOURCE: &str = "wbf";

struct Cluster {
    members: Vec<(BoundingBox, f64)>,
    fused: BoundingBox,
}

impl Cluster {
    fn new(b: BoundingBox, score: f64) -> Self {
        Self {
            members: vec![(b, score)],
            fused: b,
        }
    }

    fn push(&mut self, b: BoundingBox, score: f64) {
        self.members.push((b, score));
        let weight: f64 = self.members.iter().map(|(_, s)| s).sum();
        let mut acc = [0.0; 4];
        for (m, s) in &self.members {
            // all-zero scores fall back to an unweighted mean
            let w = if weight > 0.0 { *s } else { 1.0 };
            for (a, c) in acc.iter_mut().zip(m.coords()) {
                *a += w * c;
            }
        }
        let norm = if weight > 0.0 {
            weight
        } else {
            self.members.len() as f64
        };
        let [x1, y1, x2, y2] = acc.map(|a| a / norm);
        // a weighted mean of valid boxes is valid
        self.fused = BoundingBox::new(x1, y1, x2, y2).unwrap_or(self.fused);
    }

    fn score(&self, cfg: &FusionConfig) -> f64 {
        let t = self.members.len();
        let mean = self.members.iter().map(|(_, s)| s).sum::<f64>() / t as f64;
        match cfg.score_mode {
            ScoreMode::Average => mean,
            ScoreMode::RescaledAverage => mean * t.min(cfg.num_sources) as f64 / cfg.num_sources as f64,
        }
    }
}

/// Fuse the predictions of a single image.
pub fn wbf(preds: &[Prediction], cfg: &FusionConfig) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let Some(first) = preds.first() else {
        return Ok(Vec::new());
    };
    if let Some(other) = preds.iter().find(|p| p.image_key != first.image_key) {
        return Err(Error::KeyMismatch {
            expected: first.image_key.clone(),
            found: other.image_key.clone(),
        });
    }

    let mut by_label: BTreeMap<BodyPartLabel, Vec<&Prediction>> = BTreeMap::new();
    for p in preds {
        by_label.entry(p.label).or_default().push(p);
    }

    let mut out = Vec::new();
    for (label, mut group) in by_label {
        group.sort_by(|a, b| fusion_order(a, b));
        let mut clusters: Vec<Cluster> = Vec::new();
        for p in group {
            match clusters
                .iter_mut()
                .find(|c| iou(&c.fused, &p.bbox) > cfg.iou_threshold)
            {
                Some(c) => c.push(p.bbox, p.score),
                None => clusters.push(Cluster::new(p.bbox, p.score)),
            }
        }
        out.extend(clusters.iter().map(|c| Prediction {
            image_key: first.image_key.clone(),
            bbox: c.fused,
            label,
            score: c.score(cfg),
            source_id: FUSED_SOURCE.to_string(),
        }));
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.label.cmp(&b.label))
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
    });
    Ok(out)
}

/// Fuse predictions spanning many images. Output is grouped by image key in
/// sorted order, each group in [`wbf`] order.
pub fn wbf_all(preds: Vec<Prediction>, cfg: &FusionConfig) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let mut by_image: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        by_image.entry(p.image_key.clone()).or_default().push(p);
    }
    let groups: Vec<Vec<Prediction>> = by_image.into_values().collect();
    let fused: Vec<Vec<Prediction>> = groups
        .par_iter()
        .map(|g| wbf(g, cfg))
        .collect::<Result<_>>()?;
    Ok(fused.into_iter().flatten().collect())
}

/// Keep predictions scoring at least `min_score`, in their original order.
pub fn filter_by_score(preds: &[Prediction], min_score: f64) -> Vec<Prediction> {
    preds.iter().filter(|p| p.score >= min_score).cloned().collect()
}
