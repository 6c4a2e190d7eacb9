//! The four training-set constructions compared in the class-imbalance study.
//!
//! | strategy        | dataset | rule                                                   |
//! |-----------------|---------|--------------------------------------------------------|
//! | `Unbalanced`    | D_U     | uniform random lesions, label mix left as it is        |
//! | `ByBodyPart`    | D_BP    | every label cut down to the rarest label's count       |
//! | `ByLesionCount` | D_N     | equal lesion totals for 1–2-lesion and 3+-lesion patients |
//! | `BySize`        | D_S     | equal counts of SAD >= 10 mm and SAD < 10 mm lesions   |
//!
//! All samplers draw without replacement, are deterministic in `(input, seed)`
//! and return lesions ordered by `(label code, lesion_id)`, unlabeled first.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BodyPartLabel, SizeStratum};
use crate::ingestion::{DatasetManifest, LesionAnnotation};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Unbalanced,
    ByBodyPart,
    ByLesionCount,
    BySize,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Unbalanced => "unbalanced",
            Strategy::ByBodyPart => "bodypart",
            Strategy::ByLesionCount => "lesioncount",
            Strategy::BySize => "size",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unbalanced" | "u" | "random" => Ok(Strategy::Unbalanced),
            "bodypart" | "body-part" | "bp" | "label" => Ok(Strategy::ByBodyPart),
            "lesioncount" | "lesion-count" | "n" | "count" => Ok(Strategy::ByLesionCount),
            "size" | "s" => Ok(Strategy::BySize),
            other => Err(Error::Config(format!("unknown balancing strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    strategy: Strategy,
    seed: u64,
    target_total: Option<usize>,
}

impl BalanceSpec {
    /// `target_total` is required for `Unbalanced` and rejected otherwise.
    pub fn new(strategy: Strategy, seed: u64, target_total: Option<usize>) -> Result<Self> {
        match (strategy, target_total) {
            (Strategy::Unbalanced, None) => Err(Error::Config(
                "the unbalanced strategy needs a target lesion total".into(),
            )),
            (Strategy::Unbalanced, Some(_)) | (_, None) => Ok(Self {
                strategy,
                seed,
                target_total,
            }),
            (s, Some(_)) => Err(Error::Config(format!(
                "target total only applies to the unbalanced strategy, not {s}"
            ))),
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn target_total(&self) -> Option<usize> {
        self.target_total
    }
}

/// Apply whichever strategy `spec` names.
pub fn balance(train: &DatasetManifest, spec: &BalanceSpec) -> Result<DatasetManifest> {
    match spec.strategy {
        Strategy::Unbalanced => sample_unbalanced(train, spec.target_total.unwrap_or(0), spec.seed),
        Strategy::ByBodyPart => balance_by_bodypart(train, spec.seed),
        Strategy::ByLesionCount => balance_by_lesion_count(train, spec.seed),
        Strategy::BySize => balance_by_size(train, spec.seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LesionCountGroup {
    /// Patients with 1–2 lesions.
    G1,
    /// Patients with 3 or more lesions.
    G2,
}

impl LesionCountGroup {
    pub fn of_count(lesions: usize) -> Self {
        if lesions >= 3 {
            LesionCountGroup::G2
        } else {
            LesionCountGroup::G1
        }
    }
}

/// Lesion count per patient within `m`.
pub fn lesions_per_patient(m: &DatasetManifest) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for a in &m.annotations {
        *counts.entry(a.patient_id.as_str()).or_insert(0) += 1;
    }
    counts
}

fn canonical_order(mut lesions: Vec<LesionAnnotation>) -> Vec<LesionAnnotation> {
    lesions.sort_by(|a, b| {
        let code = |l: &LesionAnnotation| l.label.map_or(0, |l| l.code());
        code(a).cmp(&code(b)).then_with(|| a.lesion_id.cmp(&b.lesion_id))
    });
    lesions
}

/// Uniform sample of `k` items without replacement: sort by id for an
/// input-order-independent starting point, shuffle, take the prefix.
fn sample_k<'a>(
    mut pool: Vec<&'a LesionAnnotation>,
    k: usize,
    rng: &mut SeededRng,
) -> Vec<&'a LesionAnnotation> {
    pool.sort_by(|a, b| a.lesion_id.cmp(&b.lesion_id));
    rng.shuffle(&mut pool);
    pool.truncate(k);
    pool
}

fn finish(
    input: &DatasetManifest,
    chosen: Vec<&LesionAnnotation>,
    seed: u64,
    note: String,
) -> DatasetManifest {
    let lesions = canonical_order(chosen.into_iter().cloned().collect());
    let mut out = input.replace_annotations(lesions);
    out.provenance.seed = Some(seed);
    out.with_note(note)
}

/// Key slices that contribute a chosen lesion but also show a lesion of another
/// label that was left out. Those lesions still appear in training images.
fn slice_leaks(input: &DatasetManifest, chosen: &[&LesionAnnotation]) -> usize {
    let kept: HashSet<&str> = chosen.iter().map(|a| a.lesion_id.as_str()).collect();
    let mut by_slice: BTreeMap<String, (Vec<Option<BodyPartLabel>>, Vec<Option<BodyPartLabel>>)> =
        BTreeMap::new();
    for a in &input.annotations {
        let entry = by_slice.entry(a.image_key()).or_default();
        if kept.contains(a.lesion_id.as_str()) {
            entry.0.push(a.label);
        } else {
            entry.1.push(a.label);
        }
    }
    by_slice
        .values()
        .filter(|(inc, exc)| !inc.is_empty() && exc.iter().any(|l| !inc.contains(l)))
        .count()
}

/// D_BP: match every label present to the count of the rarest one.
pub fn balance_by_bodypart(train: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let mut by_label: BTreeMap<BodyPartLabel, Vec<&LesionAnnotation>> = BTreeMap::new();
    for a in &train.annotations {
        let label = a.label.ok_or_else(|| Error::Unlabeled(a.lesion_id.clone()))?;
        by_label.entry(label).or_default().push(a);
    }
    let per_class = by_label
        .values()
        .map(Vec::len)
        .min()
        .ok_or_else(|| Error::EmptyClass("(all)".into()))?;

    let mut chosen = Vec::with_capacity(per_class * by_label.len());
    for (label, pool) in by_label.iter() {
        let mut rng = SeededRng::derived(seed, label.code() as u64);
        chosen.extend(sample_k(pool.clone(), per_class, &mut rng));
    }
    let leaks = slice_leaks(train, &chosen);
    let classes: Vec<_> = by_label.keys().map(|l| l.code().to_string()).collect();
    Ok(finish(
        train,
        chosen,
        seed,
        format!(
            "balance strategy=bodypart seed={seed} classes={} per_class={per_class} residual_imbalance=0 slices_with_excluded_other_label_lesions={leaks}",
            classes.join("|")
        ),
    ))
}

/// Outcome of the D_N packing, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LesionCountBalance {
    pub g1_lesions: usize,
    pub g2_lesions: usize,
    pub g1_patients: usize,
    pub g2_patients: usize,
}

impl LesionCountBalance {
    pub fn residual(&self) -> usize {
        self.g1_lesions.abs_diff(self.g2_lesions)
    }
}

/// D_N: equalise lesion totals of the G1 (1–2 lesions) and G2 (3+) patient groups.
///
/// The group with fewer lesions is kept whole. Patients of the other group are
/// visited in seeded random order and taken whole whenever they still fit under
/// the smaller group's total (first fit), so no patient is ever split.
pub fn balance_by_lesion_count(train: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let (out, _) = balance_by_lesion_count_detailed(train, seed)?;
    Ok(out)
}

pub fn balance_by_lesion_count_detailed(
    train: &DatasetManifest,
    seed: u64,
) -> Result<(DatasetManifest, LesionCountBalance)> {
    let counts = lesions_per_patient(train);
    let mut groups: BTreeMap<LesionCountGroup, Vec<(&str, usize)>> = BTreeMap::new();
    for (&p, &n) in &counts {
        groups.entry(LesionCountGroup::of_count(n)).or_default().push((p, n));
    }
    for g in [LesionCountGroup::G1, LesionCountGroup::G2] {
        if !groups.contains_key(&g) {
            return Err(Error::EmptyGroup(format!("{g:?}")));
        }
    }
    let total = |g: LesionCountGroup| groups[&g].iter().map(|(_, n)| n).sum::<usize>();
    let (g1_total, g2_total) = (total(LesionCountGroup::G1), total(LesionCountGroup::G2));

    let mut keep: HashSet<&str> = HashSet::new();
    let (small, large) = if g1_total <= g2_total {
        (LesionCountGroup::G1, LesionCountGroup::G2)
    } else {
        (LesionCountGroup::G2, LesionCountGroup::G1)
    };
    let target = g1_total.min(g2_total);
    keep.extend(groups[&small].iter().map(|(p, _)| *p));

    let mut candidates = groups[&large].clone();
    candidates.sort();
    SeededRng::new(seed).shuffle(&mut candidates);
    let mut packed = 0;
    let mut packed_patients = 0;
    for (p, n) in candidates {
        if packed + n <= target {
            packed += n;
            packed_patients += 1;
            keep.insert(p);
        }
    }

    let stats = if small == LesionCountGroup::G1 {
        LesionCountBalance {
            g1_lesions: g1_total,
            g2_lesions: packed,
            g1_patients: groups[&small].len(),
            g2_patients: packed_patients,
        }
    } else {
        LesionCountBalance {
            g1_lesions: packed,
            g2_lesions: g2_total,
            g1_patients: packed_patients,
            g2_patients: groups[&small].len(),
        }
    };
    let chosen: Vec<_> = train
        .annotations
        .iter()
        .filter(|a| keep.contains(a.patient_id.as_str()))
        .collect();
    let out = finish(
        train,
        chosen,
        seed,
        format!(
            "balance strategy=lesioncount seed={seed} g1_lesions={} g2_lesions={} g1_patients={} g2_patients={} residual_imbalance={}",
            stats.g1_lesions,
            stats.g2_lesions,
            stats.g1_patients,
            stats.g2_patients,
            stats.residual()
        ),
    );
    Ok((out, stats))
}

/// D_S: equal numbers of large (SAD >= 10 mm) and small lesions.
pub fn balance_by_size(train: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let (large, small): (Vec<&LesionAnnotation>, Vec<&LesionAnnotation>) = train
        .annotations
        .iter()
        .partition(|a| a.stratum() == SizeStratum::Large);
    if large.is_empty() {
        return Err(Error::EmptyGroup(SizeStratum::Large.name().into()));
    }
    if small.is_empty() {
        return Err(Error::EmptyGroup(SizeStratum::Small.name().into()));
    }
    let per_stratum = large.len().min(small.len());
    let mut chosen = sample_k(large, per_stratum, &mut SeededRng::derived(seed, 0));
    chosen.extend(sample_k(small, per_stratum, &mut SeededRng::derived(seed, 1)));
    Ok(finish(
        train,
        chosen,
        seed,
        format!("balance strategy=size seed={seed} per_stratum={per_stratum} residual_imbalance=0"),
    ))
}

/// D_U: a plain random sample of `target_total` lesions.
pub fn sample_unbalanced(
    train: &DatasetManifest,
    target_total: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if target_total > train.len() {
        return Err(Error::SampleSize {
            requested: target_total,
            available: train.len(),
        });
    }
    let chosen = sample_k(
        train.annotations.iter().collect(),
        target_total,
        &mut SeededRng::new(seed),
    );
    Ok(finish(
        train,
        chosen,
        seed,
        format!("balance strategy=unbalanced seed={seed} target_total={target_total}"),
    ))
}
