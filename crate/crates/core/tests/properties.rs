mod common;

use std::collections::{HashMap, HashSet};

use common::*;
use lesionkit::balancing::{balance, lesions_per_patient, LesionCountGroup};
use lesionkit::evaluation::{froc, match_ground_truth, GtFilter};
use lesionkit::fusion::{wbf, FusionConfig};
use lesionkit::ingestion::{
    keep_first_visit, keep_labeled, manifest_to_string, parse_manifest, split_by_patient,
};
use lesionkit::preprocessing::{stack_25d, WindowedSlice};
use lesionkit::reporting::{build_lesions_section, render_text, SectionOptions, SliceIndex};
use lesionkit::synth::{generate_dataset, generate_predictions, FP_MAX_IOU};
use lesionkit::{iou, BalanceSpec, DatasetManifest, Prediction, ScoreMode, Split, SplitFractions, Strategy, SynthSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn small_synth(seed: u64, patients: usize) -> SynthSpec {
    SynthSpec {
        seed,
        num_patients: patients,
        unlabeled_fraction: 0.1,
        ..SynthSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn wbf_matches_oracle(seed in any::<u64>(), thr in 0.1f64..0.9, n in 1usize..6, rescaled in any::<bool>()) {
        let preds = random_wbf_instance(&mut rng(seed), 6);
        let mode = if rescaled { ScoreMode::RescaledAverage } else { ScoreMode::Average };
        let cfg = FusionConfig { iou_threshold: thr, num_sources: n, score_mode: mode };
        let got = wbf(&preds, &cfg).unwrap();
        let want = wbf_oracle(&preds, thr, n, mode);
        prop_assert!(same_fusion(&got, &want, 1e-9, 1e-12).is_ok(), "{:?}", same_fusion(&got, &want, 1e-9, 1e-12));
    }

    #[test]
    fn wbf_shrinks_and_stays_in_hull(seed in any::<u64>()) {
        let preds = random_wbf_instance(&mut rng(seed), 12);
        let got = wbf(&preds, &FusionConfig::default()).unwrap();
        prop_assert!(got.len() <= preds.len());
        let (mut lo, mut hi) = ([f64::INFINITY; 4], [f64::NEG_INFINITY; 4]);
        for p in &preds {
            for (k, c) in p.bbox.coords().iter().enumerate() {
                lo[k] = lo[k].min(*c);
                hi[k] = hi[k].max(*c);
            }
        }
        for f in &got {
            for (k, c) in f.bbox.coords().iter().enumerate() {
                prop_assert!(*c >= lo[k] - 1e-9 && *c <= hi[k] + 1e-9);
            }
        }
    }

    #[test]
    fn wbf_ignores_input_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let preds = random_wbf_instance(&mut r, 10);
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut r);
        let cfg = FusionConfig::default();
        prop_assert_eq!(wbf(&preds, &cfg).unwrap(), wbf(&shuffled, &cfg).unwrap());
    }

    #[test]
    fn wbf_of_duplicated_set_is_identity(seed in any::<u64>(), count in 1usize..8) {
        // boxes on a grid never overlap, so each cluster is one box and its copy
        let mut r = rng(seed);
        let mut cells: Vec<usize> = (0..16).collect();
        cells.shuffle(&mut r);
        let set: Vec<Prediction> = cells[..count].iter().map(|&c| {
            let (x, y) = ((c % 4) as f64 * 30.0, (c / 4) as f64 * 30.0);
            Prediction::new("img", bbox([x, y, x + r.random_range(5.0..25.0), y + r.random_range(5.0..25.0)]),
                label(r.random_range(1..=8)), r.random::<f64>(), "e1").unwrap()
        }).collect();
        let mut both = set.clone();
        both.extend(set.iter().map(|p| Prediction { source_id: "e2".into(), ..p.clone() }));
        let cfg = FusionConfig { iou_threshold: 0.55, num_sources: 2, score_mode: ScoreMode::RescaledAverage };
        let fused = wbf(&both, &cfg).unwrap();
        prop_assert_eq!(fused.len(), set.len());
        for p in &set {
            prop_assert!(fused.iter().any(|f| f.label == p.label
                && f.score == p.score
                && f.bbox.coords().iter().zip(p.bbox.coords()).all(|(a, b)| (a - b).abs() <= 1e-9)));
        }
    }

    #[test]
    fn froc_matches_oracle(seed in any::<u64>(), thr in prop::sample::select(vec![0.1, 0.3, 0.5]), aware in any::<bool>()) {
        let images = random_froc_instance(&mut rng(seed));
        let matched: Vec<_> = images.iter().map(|i| match_ground_truth(i.gts.clone(), &i.preds, thr, aware)).collect();
        let points = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
        let got: Vec<_> = froc(&matched, GtFilter::ALL, &points).unwrap().operating_points.iter().map(|o| o.sensitivity).collect();
        prop_assert_eq!(got, froc_oracle(&images, |_| true, &points, thr, aware));
    }

    #[test]
    fn matching_is_one_to_one(seed in any::<u64>(), aware in any::<bool>()) {
        for img in random_froc_instance(&mut rng(seed)) {
            let m = match_ground_truth(img.gts.clone(), &img.preds, 0.3, aware);
            let claimed: Vec<usize> = m.matches.iter().filter_map(|x| x.gt).collect();
            let unique: HashSet<usize> = claimed.iter().copied().collect();
            prop_assert_eq!(unique.len(), claimed.len());
            prop_assert_eq!(claimed.len() + m.unmatched_gts.len(), img.gts.len());
            for x in &m.matches {
                if let Some(g) = x.gt {
                    prop_assert!(iou(&x.prediction.bbox, &img.gts[g].bbox) >= 0.3);
                }
            }
        }
    }

    #[test]
    fn froc_monotone_in_fp_point(seed in any::<u64>()) {
        let images = random_froc_instance(&mut rng(seed));
        let matched: Vec<_> = images.iter().map(|i| match_ground_truth(i.gts.clone(), &i.preds, 0.3, true)).collect();
        let points: Vec<f64> = (0..=32).map(|k| k as f64 / 4.0).collect();
        let res = froc(&matched, GtFilter::ALL, &points).unwrap();
        for w in res.operating_points.windows(2) {
            prop_assert!(w[0].sensitivity <= w[1].sensitivity);
        }
    }

    #[test]
    fn raising_iou_threshold_never_raises_sensitivity(seed in any::<u64>(), aware in any::<bool>()) {
        let images = random_froc_instance(&mut rng(seed));
        let points = [0.5, 1.0, 2.0, 4.0];
        let sens = |thr: f64| -> Vec<Option<f64>> {
            let matched: Vec<_> = images.iter().map(|i| match_ground_truth(i.gts.clone(), &i.preds, thr, aware)).collect();
            froc(&matched, GtFilter::ALL, &points).unwrap().operating_points.iter().map(|o| o.sensitivity).collect()
        };
        let thresholds = [0.1, 0.2, 0.3, 0.4, 0.5, 0.7];
        for w in thresholds.windows(2) {
            let (lo, hi) = (sens(w[0]), sens(w[1]));
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(b <= a, "iou {} -> {:?}, iou {} -> {:?}", w[0], lo, w[1], hi);
            }
        }
    }

    #[test]
    fn balancing_outputs_are_clean_subsets(seed in any::<u64>(), n in 60usize..400) {
        let m = skewed_manifest(n, 6, seed);
        let ids: HashSet<&str> = m.annotations.iter().map(|a| a.lesion_id.as_str()).collect();
        for strategy in [Strategy::ByBodyPart, Strategy::ByLesionCount, Strategy::BySize, Strategy::Unbalanced] {
            let target = (strategy == Strategy::Unbalanced).then_some(n / 2);
            let spec = BalanceSpec::new(strategy, seed, target).unwrap();
            let out = match balance(&m, &spec) {
                Ok(out) => out,
                // tiny manifests may lack one lesion-count group
                Err(lesionkit::Error::EmptyGroup(_)) => continue,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            let again = balance(&m, &spec).unwrap();
            prop_assert_eq!(&out.annotations, &again.annotations);
            let out_ids: HashSet<&str> = out.annotations.iter().map(|a| a.lesion_id.as_str()).collect();
            prop_assert_eq!(out_ids.len(), out.len());
            prop_assert!(out_ids.is_subset(&ids));
            match strategy {
                Strategy::ByBodyPart => {
                    let mut counts = HashMap::new();
                    for a in &out.annotations {
                        *counts.entry(a.label).or_insert(0) += 1;
                    }
                    prop_assert!(counts.values().all(|c| *c == counts.values().copied().min().unwrap()));
                }
                Strategy::BySize => {
                    let large = out.annotations.iter().filter(|a| a.stratum() == lesionkit::SizeStratum::Large).count();
                    prop_assert_eq!(large * 2, out.len());
                }
                Strategy::ByLesionCount => {
                    let input = lesions_per_patient(&m);
                    let (mut g1, mut g2) = (0, 0);
                    for n in input.values() {
                        match LesionCountGroup::of_count(*n) {
                            LesionCountGroup::G1 => g1 += n,
                            LesionCountGroup::G2 => g2 += n,
                        }
                    }
                    let larger = if g1 > g2 { LesionCountGroup::G1 } else { LesionCountGroup::G2 };
                    let bound = input.values().filter(|n| LesionCountGroup::of_count(**n) == larger).max().unwrap() - 1;
                    let (mut o1, mut o2) = (0usize, 0usize);
                    for (p, k) in lesions_per_patient(&out) {
                        prop_assert_eq!(input[p], k);
                        match LesionCountGroup::of_count(k) {
                            LesionCountGroup::G1 => o1 += k,
                            LesionCountGroup::G2 => o2 += k,
                        }
                    }
                    prop_assert!(o1.abs_diff(o2) <= bound);
                }
                Strategy::Unbalanced => prop_assert_eq!(out.len(), n / 2),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn curation_filters_commute_up_to_unlabeled_first_visits(seed in any::<u64>()) {
        let m = generate_dataset(&small_synth(seed, 30)).unwrap();
        let a = keep_labeled(&keep_first_visit(&m));
        let b = keep_first_visit(&keep_labeled(&m));
        // the orders differ only for patients whose earliest visit has no labelled lesion
        let first = keep_first_visit(&m);
        let blind: HashSet<&str> = m.patients().into_iter()
            .filter(|p| first.annotations.iter().all(|x| x.patient_id != *p || x.label.is_none()))
            .collect();
        let outside = |x: &&lesionkit::LesionAnnotation| !blind.contains(x.patient_id.as_str());
        let a_rest: Vec<_> = a.annotations.iter().filter(outside).collect();
        let b_rest: Vec<_> = b.annotations.iter().filter(outside).collect();
        prop_assert_eq!(a_rest, b_rest);
        prop_assert!(a.annotations.iter().all(|x| !blind.contains(x.patient_id.as_str())));
        if blind.is_empty() {
            prop_assert_eq!(a.annotations, b.annotations);
        }
    }

    #[test]
    fn manifest_text_round_trips(seed in any::<u64>()) {
        let m = generate_dataset(&small_synth(seed, 20)).unwrap();
        let m = split_by_patient(&m, SplitFractions::default(), seed).unwrap();
        let text = manifest_to_string(&m);
        let back = parse_manifest(text.as_bytes()).unwrap();
        prop_assert_eq!(&back.annotations, &m.annotations);
        prop_assert_eq!(&back.split_assignment, &m.split_assignment);
        prop_assert_eq!(manifest_to_string(&back), text);
    }

    #[test]
    fn splits_partition_patients(seed in any::<u64>(), patients in 3usize..60) {
        let m = generate_dataset(&small_synth(seed, patients)).unwrap();
        let s = split_by_patient(&m, SplitFractions::default(), seed).unwrap();
        let mut seen: HashSet<String> = HashSet::new();
        let mut lesions = 0;
        for split in Split::ALL {
            let part: DatasetManifest = s.subset(split).unwrap();
            prop_assert!(!part.is_empty());
            lesions += part.len();
            for p in part.patients() {
                prop_assert!(seen.insert(p.to_string()), "patient {} in two splits", p);
            }
        }
        prop_assert_eq!(seen.len(), patients);
        prop_assert_eq!(lesions, m.len());
    }

    #[test]
    fn synthetic_detections_respect_overlap_bounds(seed in any::<u64>()) {
        let spec = small_synth(seed, 40);
        let m = generate_dataset(&spec).unwrap();
        let p = generate_predictions(&m, &spec, "synth").unwrap();
        prop_assert_eq!(&m, &generate_dataset(&spec).unwrap());
        prop_assert_eq!(&p, &generate_predictions(&m, &spec, "synth").unwrap());
        let by_id: HashMap<&str, &lesionkit::LesionAnnotation> = m.annotations.iter().map(|a| (a.lesion_id.as_str(), a)).collect();
        let detected: HashSet<&str> = p.detected.iter().map(String::as_str).collect();
        // each detected lesion has one prediction above 0.3 IoU; everything else stays below
        for pred in &p.predictions {
            let hits: Vec<_> = m.annotations.iter()
                .filter(|a| a.image_key() == pred.image_key && iou(&a.bbox, &pred.bbox) >= FP_MAX_IOU)
                .collect();
            prop_assert!(hits.len() <= 1);
            if let Some(a) = hits.first() {
                prop_assert!(detected.contains(a.lesion_id.as_str()));
                prop_assert!(iou(&a.bbox, &pred.bbox) > 0.3);
                prop_assert_eq!(Some(pred.label), a.label);
            }
        }
        for id in &p.detected {
            prop_assert!(by_id[id.as_str()].label.is_some());
        }
    }

    #[test]
    fn stacking_copies_pixels(w in 1u32..12, h in 1u32..12, seed in any::<u64>(), with_below in any::<bool>(), with_above in any::<bool>()) {
        let mut r = rng(seed);
        let mut slice = || WindowedSlice::new(w, h, (0..w * h).map(|_| r.random()).collect(), None).unwrap();
        let (below, key, above) = (slice(), slice(), slice());
        let s = stack_25d(with_below.then_some(&below), &key, with_above.then_some(&above), 7).unwrap();
        prop_assert_eq!(s.key().data(), key.data());
        prop_assert_eq!(s.below().data(), if with_below { below.data() } else { key.data() });
        prop_assert_eq!(s.above().data(), if with_above { above.data() } else { key.data() });
    }

    #[test]
    fn lesions_section_rules(seed in any::<u64>(), top_k in 1usize..5) {
        let mut r = rng(seed);
        let index: SliceIndex = HashMap::from([("k".to_string(), ("3".to_string(), 12))]);
        let preds: Vec<Prediction> = (0..r.random_range(0..10)).map(|_| {
            let x = r.random_range(0.0..400.0);
            Prediction::new("k", bbox([x, x, x + 20.0, x + 30.0]), label(r.random_range(1..=8)),
                r.random_range(0..=100) as f64 / 100.0, "wbf").unwrap()
        }).collect();
        let opts = SectionOptions { top_k, min_confidence: 0.5 };
        let s = build_lesions_section(&preds, &index, "S", "f", &opts).unwrap();
        let qualifying = preds.iter().filter(|p| p.score >= 0.5).count();
        prop_assert_eq!(s.entries.len(), qualifying.min(top_k));
        for (i, e) in s.entries.iter().enumerate() {
            prop_assert_eq!(e.rank, i + 1);
            prop_assert!(e.confidence >= 0.5);
        }
        prop_assert!(s.entries.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        let json = serde_json::to_string(&s).unwrap();
        prop_assert_eq!(serde_json::from_str::<lesionkit::reporting::LesionsSection>(&json).unwrap(), s.clone());
        let text = render_text(&s);
        prop_assert_eq!(text.lines().count(), 1 + s.entries.len().max(1));
    }
}
