//! Deterministic synthetic manifests, detector outputs and HU phantoms with
//! planted statistics.
//!
//! The generator is a pure function of its [`SynthSpec`] (seed included). Lesions
//! sharing a key slice are placed with a clear margin so that a jittered true
//! positive can only ever match its own lesion, and false positives are
//! rejection-sampled to overlap every lesion by IoU < 0.3.

use std::collections::BTreeMap;

use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Prediction;
use crate::geometry::{box_from_recist, iou, Axis, BodyPartLabel, BoundingBox, Point, RecistMeasurement};
use crate::ingestion::{DatasetManifest, LesionAnnotation};
use crate::preprocessing::HuSlice;
use crate::rng::SeededRng;

/// Planted true positives keep at least this IoU with their lesion.
pub const TP_MIN_IOU: f64 = 0.35;
/// Planted false positives stay below this IoU with every lesion.
pub const FP_MAX_IOU: f64 = 0.3;

const PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SadDistribution {
    /// Log-normal median in mm.
    pub median_mm: f64,
    /// Log-normal shape (standard deviation of ln SAD).
    pub sigma: f64,
    pub min_mm: f64,
    pub max_mm: f64,
}

impl Default for SadDistribution {
    fn default() -> Self {
        Self {
            median_mm: 10.0,
            sigma: 0.5,
            min_mm: 2.0,
            max_mm: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreNoise {
    pub tp_mean: f64,
    pub tp_sd: f64,
    pub fp_mean: f64,
    pub fp_sd: f64,
}

impl Default for ScoreNoise {
    fn default() -> Self {
        Self {
            tp_mean: 0.8,
            tp_sd: 0.1,
            fp_mean: 0.3,
            fp_sd: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_patients: usize,
    /// Weights for 1, 2, ... visits per patient.
    pub visits_per_patient: Vec<f64>,
    /// Weights for 1, 2, ... lesions per patient visit.
    pub lesions_per_patient: Vec<f64>,
    /// Weights for 1, 2, ... lesions sharing one key slice.
    pub lesions_per_slice: Vec<f64>,
    /// Weights over the eight labels in code order.
    pub label_distribution: [f64; 8],
    pub unlabeled_fraction: f64,
    pub sad_distribution: SadDistribution,
    pub image_size: u32,
    pub spacing_mm_range: (f64, f64),
    /// Detection probability per label, code order.
    pub planted_sensitivity: [f64; 8],
    /// Mean false positives per key slice (Poisson).
    pub planted_fp_rate: f64,
    pub score_noise: ScoreNoise,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_patients: 100,
            visits_per_patient: vec![0.6, 0.3, 0.1],
            lesions_per_patient: vec![0.45, 0.25, 0.12, 0.08, 0.05, 0.05],
            lesions_per_slice: vec![0.6, 0.3, 0.1],
            // skewed like DeepLesion: abdomen, mediastinum, liver and lung dominate
            label_distribution: [0.05, 0.22, 0.17, 0.13, 0.24, 0.06, 0.07, 0.06],
            unlabeled_fraction: 0.0,
            sad_distribution: SadDistribution::default(),
            image_size: 512,
            spacing_mm_range: (0.6, 1.0),
            planted_sensitivity: [0.8; 8],
            planted_fp_rate: 1.0,
            score_noise: ScoreNoise::default(),
        }
    }
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Spec(format!("{name} must be nonnegative weights with a positive sum")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_patients == 0 {
            return Err(Error::Spec("num_patients must be positive".into()));
        }
        check_weights("visits_per_patient", &self.visits_per_patient)?;
        check_weights("lesions_per_patient", &self.lesions_per_patient)?;
        check_weights("label_distribution", &self.label_distribution)?;
        check_weights("lesions_per_slice", &self.lesions_per_slice)?;
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::Spec("unlabeled_fraction must lie in [0, 1]".into()));
        }
        let sad = &self.sad_distribution;
        if !(sad.median_mm > 0.0 && sad.sigma >= 0.0 && sad.min_mm > 0.0 && sad.min_mm <= sad.max_mm) {
            return Err(Error::Spec("invalid SAD distribution".into()));
        }
        if self.image_size < 64 {
            return Err(Error::Spec("image_size must be at least 64".into()));
        }
        let (lo, hi) = self.spacing_mm_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Spec("spacing range must be positive and ordered".into()));
        }
        if self.planted_sensitivity.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Spec("planted sensitivities must lie in [0, 1]".into()));
        }
        if !(self.planted_fp_rate >= 0.0) || !self.planted_fp_rate.is_finite() {
            return Err(Error::Spec("planted_fp_rate must be nonnegative".into()));
        }
        let n = &self.score_noise;
        if [n.tp_mean, n.tp_sd, n.fp_mean, n.fp_sd].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Spec("score noise parameters must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.unit()
}

/// Box grown by 20% of its size on each side; placements keep these disjoint.
fn halo(b: &BoundingBox) -> [f64; 4] {
    let (mx, my) = (0.2 * b.width(), 0.2 * b.height());
    [b.x1() - mx, b.y1() - my, b.x2() + mx, b.y2() + my]
}

fn overlaps(a: [f64; 4], b: [f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn window_for(label: Option<BodyPartLabel>) -> (f64, f64) {
    match label {
        Some(BodyPartLabel::Lung) => (-600.0, 1500.0),
        Some(BodyPartLabel::Bone) => (400.0, 1800.0),
        _ => (50.0, 400.0),
    }
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = SeededRng::derived(spec.seed, 0);
    let sad = &spec.sad_distribution;
    let sad_dist = LogNormal::new(sad.median_mm.ln(), sad.sigma)
        .map_err(|e| Error::Spec(format!("SAD distribution: {e}")))?;
    let size = spec.image_size as f64;
    let max_long_px = size / 8.0;

    let mut annotations = Vec::new();
    for p in 0..spec.num_patients {
        let patient = format!("P{:05}", p + 1);
        let visits = rng.weighted_index(&spec.visits_per_patient) + 1;
        for visit in 1..=visits {
            let study = format!("{patient}_S{visit}");
            let series = format!("{}", rng.below(5) + 1);
            let spacing = uniform(&mut rng, spec.spacing_mm_range.0, spec.spacing_mm_range.1);
            let mut remaining = rng.weighted_index(&spec.lesions_per_patient) + 1;
            let mut slice_index = 20 + rng.below(40) as i64;
            while remaining > 0 {
                let on_slice = (rng.weighted_index(&spec.lesions_per_slice) + 1).min(remaining);
                remaining -= on_slice;
                let mut halos: Vec<[f64; 4]> = Vec::new();
                for _ in 0..on_slice {
                    let label = if rng.unit() < spec.unlabeled_fraction {
                        None
                    } else {
                        Some(BodyPartLabel::ALL[rng.weighted_index(&spec.label_distribution)])
                    };
                    let sad_mm = sad_dist.sample(rng.inner()).clamp(sad.min_mm, sad.max_mm);
                    let mut short_px = sad_mm / spacing;
                    let mut long_px = short_px * uniform(&mut rng, 1.0, 1.8);
                    if long_px > max_long_px {
                        let f = max_long_px / long_px;
                        long_px *= f;
                        short_px *= f;
                    }
                    let theta = uniform(&mut rng, 0.0, std::f64::consts::PI);
                    let (c, s) = (theta.cos(), theta.sin());
                    let margin = long_px + 2.0;
                    let mut placed = None;
                    for _ in 0..PLACEMENT_TRIES {
                        let cx = uniform(&mut rng, margin, size - margin);
                        let cy = uniform(&mut rng, margin, size - margin);
                        let long = Axis::new(
                            Point::new(cx - c * long_px / 2.0, cy - s * long_px / 2.0),
                            Point::new(cx + c * long_px / 2.0, cy + s * long_px / 2.0),
                        )?;
                        let short = Axis::new(
                            Point::new(cx + s * short_px / 2.0, cy - c * short_px / 2.0),
                            Point::new(cx - s * short_px / 2.0, cy + c * short_px / 2.0),
                        )?;
                        let recist = RecistMeasurement::new(long, short);
                        let bbox = box_from_recist(&recist, 0.0)?;
                        let h = halo(&bbox);
                        if halos.iter().all(|o| !overlaps(*o, h)) {
                            halos.push(h);
                            placed = Some((recist, bbox));
                            break;
                        }
                    }
                    let (recist, bbox) = placed.ok_or_else(|| {
                        Error::Spec(format!(
                            "could not place {on_slice} lesions on one {size}x{size} slice"
                        ))
                    })?;
                    let (window_center, window_width) = window_for(label);
                    annotations.push(LesionAnnotation {
                        lesion_id: format!("L{:07}", annotations.len() + 1),
                        patient_id: patient.clone(),
                        study_id: study.clone(),
                        visit_index: visit as u32,
                        series_id: series.clone(),
                        slice_index,
                        image_width: spec.image_size,
                        image_height: spec.image_size,
                        spacing_mm_per_px: spacing,
                        recist,
                        bbox,
                        label,
                        window_center,
                        window_width,
                    });
                }
                slice_index += 1 + rng.below(15) as i64;
            }
        }
    }
    let mut m = DatasetManifest::new(annotations)?;
    m.provenance.seed = Some(spec.seed);
    Ok(m.with_note(format!(
        "synth patients={} seed={}",
        spec.num_patients, spec.seed
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPredictions {
    pub predictions: Vec<Prediction>,
    /// Lesion ids that received a planted true positive.
    pub detected: Vec<String>,
}

fn noisy_score(rng: &mut SeededRng, mean: f64, sd: f64) -> f64 {
    let v = if sd > 0.0 {
        Normal::new(mean, sd).map(|d| d.sample(rng.inner())).unwrap_or(mean)
    } else {
        mean
    };
    v.clamp(0.0, 1.0)
}

fn jitter(rng: &mut SeededRng, gt: &BoundingBox, w: f64, h: f64) -> BoundingBox {
    let (dx, dy) = (0.1 * gt.width(), 0.1 * gt.height());
    loop {
        let b = BoundingBox::new(
            (gt.x1() + uniform(rng, -dx, dx)).max(0.0),
            (gt.y1() + uniform(rng, -dy, dy)).max(0.0),
            (gt.x2() + uniform(rng, -dx, dx)).min(w),
            (gt.y2() + uniform(rng, -dy, dy)).min(h),
        );
        // corner moves of at most 10% keep IoU >= 0.64 / 1.44
        if let Ok(b) = b {
            if iou(&b, gt) > TP_MIN_IOU {
                return b;
            }
        }
    }
}

/// Detector-like outputs for every key slice of `m`, labelled `source_id`.
///
/// Each labelled lesion is detected with its class's planted sensitivity;
/// unlabeled lesions are never detected. Every key slice additionally gets a
/// Poisson number of false positives with mean `planted_fp_rate`.
pub fn generate_predictions(m: &DatasetManifest, spec: &SynthSpec, source_id: &str) -> Result<SyntheticPredictions> {
    spec.validate()?;
    if m.is_empty() {
        return Err(Error::Spec("cannot generate predictions for an empty manifest".into()));
    }
    let mut rng = SeededRng::derived(spec.seed, 1);
    let poisson = (spec.planted_fp_rate > 0.0)
        .then(|| Poisson::new(spec.planted_fp_rate))
        .transpose()
        .map_err(|e| Error::Spec(format!("FP rate: {e}")))?;
    let noise = &spec.score_noise;

    let mut images: BTreeMap<String, Vec<&LesionAnnotation>> = BTreeMap::new();
    for a in &m.annotations {
        images.entry(a.image_key()).or_default().push(a);
    }

    let mut predictions = Vec::new();
    let mut detected = Vec::new();
    for (key, gts) in &images {
        let (w, h) = (gts[0].image_width as f64, gts[0].image_height as f64);
        for g in gts {
            let Some(label) = g.label else { continue };
            if rng.unit() < spec.planted_sensitivity[label.index()] {
                let bbox = jitter(&mut rng, &g.bbox, w, h);
                let score = noisy_score(&mut rng, noise.tp_mean, noise.tp_sd);
                predictions.push(Prediction::new(key.clone(), bbox, label, score, source_id)?);
                detected.push(g.lesion_id.clone());
            }
        }
        let n_fp = poisson.as_ref().map_or(0, |p| p.sample(rng.inner()) as usize);
        for _ in 0..n_fp {
            for _ in 0..PLACEMENT_TRIES {
                let bw = uniform(&mut rng, 8.0, 48.0).min(w - 1.0);
                let bh = uniform(&mut rng, 8.0, 48.0).min(h - 1.0);
                let x = uniform(&mut rng, 0.0, w - bw);
                let y = uniform(&mut rng, 0.0, h - bh);
                let bbox = BoundingBox::new(x, y, x + bw, y + bh)?;
                if gts.iter().all(|g| iou(&bbox, &g.bbox) < FP_MAX_IOU) {
                    let label = BodyPartLabel::ALL[rng.below(8) as usize];
                    let score = noisy_score(&mut rng, noise.fp_mean, noise.fp_sd);
                    predictions.push(Prediction::new(key.clone(), bbox, label, score, source_id)?);
                    break;
                }
            }
        }
    }
    Ok(SyntheticPredictions {
        predictions,
        detected,
    })
}

/// Simple CT phantom: air background, soft-tissue body ellipse, a bone ring and
/// a few round lesions.
pub fn generate_phantom(width: u32, height: u32, seed: u64) -> Result<HuSlice> {
    let mut rng = SeededRng::derived(seed, 2);
    let (w, h) = (width as f64, height as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (ax, ay) = (0.42 * w, 0.32 * h);
    let lesions: Vec<(f64, f64, f64, i16)> = (0..3)
        .map(|_| {
            let r = uniform(&mut rng, 0.02, 0.06) * w.min(h);
            let x = cx + uniform(&mut rng, -0.5, 0.5) * ax;
            let y = cy + uniform(&mut rng, -0.5, 0.5) * ay;
            let hu = 60 + rng.below(60) as i16;
            (x, y, r, hu)
        })
        .collect();
    let mut data = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let e = ((px - cx) / ax).powi(2) + ((py - cy) / ay).powi(2);
            let mut v: i16 = if e > 1.0 {
                -1000
            } else if e > 0.85 {
                700
            } else {
                40
            };
            for (lx, ly, r, hu) in &lesions {
                if (px - lx).hypot(py - ly) <= *r {
                    v = *hu;
                }
            }
            data.push(v);
        }
    }
    HuSlice::new(width, height, data)
}
