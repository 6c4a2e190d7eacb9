//! Builders, random instances and brute-force oracles shared by the
//! integration tests. The oracles are written from the definitions and share
//! no code with the library beyond its plain data types.

#![allow(dead_code)]

use std::cmp::Ordering;

use lesionkit::evaluation::GroundTruth;
use lesionkit::{
    Axis, BodyPartLabel, BoundingBox, DatasetManifest, LesionAnnotation, Point, Prediction,
    RecistMeasurement, ScoreMode, SizeStratum,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bbox(c: [f64; 4]) -> BoundingBox {
    BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

pub fn label(code: i64) -> BodyPartLabel {
    BodyPartLabel::from_code(code).unwrap()
}

/// Lesion on a 512x512 slice at 1 mm/px whose short axis is `sad_mm` long.
pub fn lesion(
    id: &str,
    patient: &str,
    slice: i64,
    b: [f64; 4],
    label: Option<BodyPartLabel>,
    sad_mm: f64,
) -> LesionAnnotation {
    let cx = (b[0] + b[2]) / 2.0;
    let cy = (b[1] + b[3]) / 2.0;
    let long = Axis::new(Point::new(b[0], cy), Point::new(b[2], cy)).unwrap();
    let short = Axis::new(Point::new(cx, cy - sad_mm / 2.0), Point::new(cx, cy + sad_mm / 2.0)).unwrap();
    LesionAnnotation {
        lesion_id: id.to_string(),
        patient_id: patient.to_string(),
        study_id: format!("{patient}_S1"),
        visit_index: 1,
        series_id: "1".to_string(),
        slice_index: slice,
        image_width: 512,
        image_height: 512,
        spacing_mm_per_px: 1.0,
        recist: RecistMeasurement::new(long, short),
        bbox: bbox(b),
        label,
        window_center: 40.0,
        window_width: 400.0,
    }
}

pub const SKEWED_LABELS: [f64; 8] = [0.04, 0.24, 0.18, 0.14, 0.24, 0.05, 0.06, 0.05];

fn weighted(r: &mut ChaCha8Rng, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut x = r.random::<f64>() * total;
    for (i, v) in w.iter().enumerate() {
        if x < *v {
            return i;
        }
        x -= v;
    }
    w.len() - 1
}

/// Exactly `n` labelled lesions, 1 to `max_per_patient` per patient, with a
/// skewed label distribution and SADs spanning both size strata.
pub fn skewed_manifest(n: usize, max_per_patient: usize, seed: u64) -> DatasetManifest {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n);
    let mut p = 0;
    while out.len() < n {
        p += 1;
        let patient = format!("P{p:05}");
        let k = r.random_range(1..=max_per_patient).min(n - out.len());
        for j in 0..k {
            let sad = r.random_range(3.0..25.0);
            let x = r.random_range(10.0..400.0);
            let y = r.random_range(10.0..400.0);
            let l = BodyPartLabel::ALL[weighted(&mut r, &SKEWED_LABELS)];
            out.push(lesion(
                &format!("L{:07}", out.len() + 1),
                &patient,
                j as i64,
                [x, y, x + sad * 1.5, y + sad + 1.0],
                Some(l),
                sad,
            ));
        }
    }
    DatasetManifest::new(out).unwrap()
}

// ---------------------------------------------------------------- WBF oracle

fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

fn weighted_box(members: &[([f64; 4], f64)]) -> [f64; 4] {
    let w: f64 = members.iter().map(|m| m.1).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = if w > 0.0 {
            members.iter().map(|m| m.1 * m.0[k]).sum::<f64>() / w
        } else {
            members.iter().map(|m| m.0[k]).sum::<f64>() / members.len() as f64
        };
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct FusedBox {
    pub label: BodyPartLabel,
    pub coords: [f64; 4],
    pub score: f64,
}

/// Sequential clustering from first principles: boxes in sorted order join
/// the first cluster (creation order) whose recomputed fused box overlaps
/// them with IoU strictly above the threshold.
pub fn wbf_oracle(preds: &[Prediction], thr: f64, n: usize, mode: ScoreMode) -> Vec<FusedBox> {
    let mut sorted: Vec<&Prediction> = preds.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.source_id.cmp(&b.source_id))
            .then_with(|| {
                a.bbox
                    .coords()
                    .partial_cmp(&b.bbox.coords())
                    .unwrap_or(Ordering::Equal)
            })
    });
    let mut out = Vec::new();
    for l in BodyPartLabel::ALL {
        let mut clusters: Vec<Vec<([f64; 4], f64)>> = Vec::new();
        for p in sorted.iter().filter(|p| p.label == l) {
            let c = p.bbox.coords();
            match clusters
                .iter()
                .position(|m| oracle_iou(weighted_box(m), c) > thr)
            {
                Some(i) => clusters[i].push((c, p.score)),
                None => clusters.push(vec![(c, p.score)]),
            }
        }
        for m in clusters {
            let t = m.len();
            let mean = m.iter().map(|x| x.1).sum::<f64>() / t as f64;
            let score = match mode {
                ScoreMode::Average => mean,
                ScoreMode::RescaledAverage => mean * t.min(n) as f64 / n as f64,
            };
            out.push(FusedBox {
                label: l,
                coords: weighted_box(&m),
                score,
            });
        }
    }
    out
}

/// Pair every oracle box with a distinct output of the same label within the
/// tolerances; returns a description of the first discrepancy.
pub fn same_fusion(got: &[Prediction], want: &[FusedBox], coord_tol: f64, score_tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{} fused boxes, oracle has {}", got.len(), want.len()));
    }
    let mut used = vec![false; got.len()];
    for w in want {
        let hit = got.iter().enumerate().position(|(i, g)| {
            !used[i]
                && g.label == w.label
                && (g.score - w.score).abs() <= score_tol
                && g.bbox.coords().iter().zip(w.coords).all(|(a, b)| (a - b).abs() <= coord_tol)
        });
        match hit {
            Some(i) => used[i] = true,
            None => return Err(format!("oracle box {w:?} missing from {got:?}")),
        }
    }
    for pair in got.windows(2) {
        if pair[0].score < pair[1].score {
            return Err("output not sorted by descending score".into());
        }
    }
    Ok(())
}

/// Up to `max` boxes on one image drawn around a few centres so that
/// overlaps, equal scores and label collisions are all common.
pub fn random_wbf_instance(r: &mut ChaCha8Rng, max: usize) -> Vec<Prediction> {
    let n = r.random_range(1..=max);
    let centres: Vec<(f64, f64)> = (0..r.random_range(1..=3))
        .map(|_| (r.random_range(10.0..50.0), r.random_range(10.0..50.0)))
        .collect();
    (0..n)
        .map(|i| {
            let (cx, cy) = centres[r.random_range(0..centres.len())];
            let hw = r.random_range(3.0..12.0);
            let hh = r.random_range(3.0..12.0);
            let x = cx + r.random_range(-4.0..4.0);
            let y = cy + r.random_range(-4.0..4.0);
            let score = if r.random_bool(0.3) {
                r.random_range(0..=4) as f64 * 0.25
            } else {
                r.random::<f64>()
            };
            Prediction::new(
                "img",
                bbox([x - hw, y - hh, x + hw, y + hh]),
                label(r.random_range(1..=2)),
                score,
                format!("e{}", i % 3),
            )
            .unwrap()
        })
        .collect()
}

// --------------------------------------------------------------- FROC oracle

#[derive(Debug, Clone)]
pub struct FrocImage {
    pub key: String,
    pub gts: Vec<GroundTruth>,
    pub preds: Vec<Prediction>,
}

fn total_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then_with(|| a.bbox.coords().partial_cmp(&b.bbox.coords()).unwrap())
        .then(a.label.cmp(&b.label))
        .then_with(|| a.source_id.cmp(&b.source_id))
}

/// Greedy matching written out directly: returns, for each prediction in
/// `preds` order, the index of the ground truth it claims.
pub fn oracle_match(gts: &[GroundTruth], preds: &[Prediction], thr: f64, class_aware: bool) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| total_order(&preds[i], &preds[j]));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || (class_aware && gt.label != Some(p.label)) {
                continue;
            }
            let v = oracle_iou(p.bbox.coords(), gt.bbox.coords());
            if v < thr {
                continue;
            }
            // lowest index wins among equal overlaps
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

/// Sensitivity at each FP point by re-matching from scratch at every distinct
/// score threshold and taking the best sensitivity among thresholds whose
/// FP rate stays within the point. `None` when no ground truth passes the filter.
pub fn froc_oracle(
    images: &[FrocImage],
    keep: impl Fn(&GroundTruth) -> bool,
    fp_points: &[f64],
    thr: f64,
    class_aware: bool,
) -> Vec<Option<f64>> {
    let num_gt = images.iter().flat_map(|i| &i.gts).filter(|g| keep(g)).count();
    if num_gt == 0 {
        return vec![None; fp_points.len()];
    }
    let mut thresholds: Vec<f64> = images.iter().flat_map(|i| i.preds.iter().map(|p| p.score)).collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    // (fp per image, tp) at every threshold
    let table: Vec<(f64, usize)> = thresholds
        .iter()
        .map(|&t| {
            let (mut fp, mut tp) = (0, 0);
            for img in images {
                let kept: Vec<Prediction> = img.preds.iter().filter(|p| p.score >= t).cloned().collect();
                for m in oracle_match(&img.gts, &kept, thr, class_aware) {
                    match m {
                        None => fp += 1,
                        Some(g) if keep(&img.gts[g]) => tp += 1,
                        Some(_) => {}
                    }
                }
            }
            (fp as f64 / images.len() as f64, tp)
        })
        .collect();

    fp_points
        .iter()
        .map(|&k| {
            let best = table.iter().filter(|(fp, _)| *fp <= k).map(|(_, tp)| *tp).max().unwrap_or(0);
            Some(best as f64 / num_gt as f64)
        })
        .collect()
}

/// 1 to 3 images with at most 10 ground truths and 20 predictions in total;
/// every image carries at least one ground truth.
pub fn random_froc_instance(r: &mut ChaCha8Rng) -> Vec<FrocImage> {
    let n_img = r.random_range(1..=3);
    let n_gt = r.random_range(n_img..=10);
    let n_pred = r.random_range(0..=20);
    let mut images: Vec<FrocImage> = (0..n_img)
        .map(|i| FrocImage {
            key: format!("img{i}"),
            gts: Vec::new(),
            preds: Vec::new(),
        })
        .collect();
    for g in 0..n_gt {
        let img = if g < n_img { g } else { r.random_range(0..n_img) };
        let x = r.random_range(0..40) as f64;
        let y = r.random_range(0..40) as f64;
        let w = r.random_range(4..20) as f64;
        let h = r.random_range(4..20) as f64;
        images[img].gts.push(GroundTruth {
            bbox: bbox([x, y, x + w, y + h]),
            label: if r.random_bool(0.1) { None } else { Some(label(r.random_range(1..=3))) },
            stratum: if r.random_bool(0.5) { SizeStratum::Large } else { SizeStratum::Small },
        });
    }
    for i in 0..n_pred {
        let img = r.random_range(0..n_img);
        let c = if r.random_bool(0.7) {
            let g = images[img].gts[r.random_range(0..images[img].gts.len())].bbox.coords();
            let d = |r: &mut ChaCha8Rng| r.random_range(-4..=4) as f64;
            let x1 = g[0] + d(r);
            let y1 = g[1] + d(r);
            [x1, y1, (g[2] + d(r)).max(x1 + 1.0), (g[3] + d(r)).max(y1 + 1.0)]
        } else {
            let x = r.random_range(0..50) as f64;
            let y = r.random_range(0..50) as f64;
            [x, y, x + r.random_range(2..20) as f64, y + r.random_range(2..20) as f64]
        };
        let key = images[img].key.clone();
        images[img].preds.push(
            Prediction::new(
                key,
                bbox(c),
                label(r.random_range(1..=3)),
                r.random_range(1..=20) as f64 / 20.0,
                format!("s{}", i % 2),
            )
            .unwrap(),
        );
    }
    images
}
