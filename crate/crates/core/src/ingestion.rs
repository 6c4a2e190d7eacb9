//! Lesion manifests: CSV schema, curation filters and patient-disjoint splits.
//!
//! The manifest is a UTF-8 CSV with a fixed header:
//!
//! ```text
//! lesion_id,patient_id,study_id,visit_index,series_id,slice_index,image_width,image_height,spacing_mm_per_px,long_axis,short_axis,bbox,label,window_center,window_width
//! ```
//!
//! `long_axis`, `short_axis` and `bbox` hold four space-separated decimals
//! (`x1 y1 x2 y2`). An empty `bbox` is filled from the RECIST endpoints. Labels
//! are body-part codes 1..8; any other integer (conventionally -1) means
//! unlabeled.
//!
//! Lines starting with `#` before the header carry metadata and survive a
//! parse/write round trip:
//!
//! ```text
//! # provenance: <free text, one line per processing step>
//! # seed: <integer>
//! # split: <patient_id> <train|val|test>
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    box_from_recist, sad_mm, Axis, BodyPartLabel, BoundingBox, RecistMeasurement, SizeStratum,
};
use crate::rng::SeededRng;

pub const MANIFEST_COLUMNS: [&str; 15] = [
    "lesion_id",
    "patient_id",
    "study_id",
    "visit_index",
    "series_id",
    "slice_index",
    "image_width",
    "image_height",
    "spacing_mm_per_px",
    "long_axis",
    "short_axis",
    "bbox",
    "label",
    "window_center",
    "window_width",
];

/// Sentinel label code written for unlabeled lesions.
pub const UNLABELED_CODE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    pub lesion_id: String,
    pub patient_id: String,
    pub study_id: String,
    /// 1-based ordinal of the study among this patient's visits.
    pub visit_index: u32,
    pub series_id: String,
    pub slice_index: i64,
    pub image_width: u32,
    pub image_height: u32,
    pub spacing_mm_per_px: f64,
    pub recist: RecistMeasurement,
    pub bbox: BoundingBox,
    pub label: Option<BodyPartLabel>,
    pub window_center: f64,
    pub window_width: f64,
}

impl LesionAnnotation {
    /// Key of the key-slice image this lesion was annotated on.
    pub fn image_key(&self) -> String {
        image_key(&self.patient_id, &self.study_id, &self.series_id, self.slice_index)
    }

    pub fn sad_mm(&self) -> f64 {
        // spacing is validated positive at construction
        sad_mm(&self.recist, self.spacing_mm_per_px).unwrap_or(0.0)
    }

    pub fn stratum(&self) -> SizeStratum {
        SizeStratum::from_sad_mm(self.sad_mm())
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.lesion_id.is_empty() {
            return Err(("lesion_id", "empty lesion_id".into()));
        }
        if self.visit_index == 0 {
            return Err(("visit_index", "visit_index must be positive".into()));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(("image_width", "image dimensions must be positive".into()));
        }
        if !(self.spacing_mm_per_px > 0.0) || !self.spacing_mm_per_px.is_finite() {
            return Err((
                "spacing_mm_per_px",
                format!("spacing must be positive, got {}", self.spacing_mm_per_px),
            ));
        }
        if !self
            .bbox
            .within_image(self.image_width as f64, self.image_height as f64)
        {
            return Err((
                "bbox",
                format!(
                    "box {:?} exceeds image {}x{}",
                    self.bbox.coords(),
                    self.image_width,
                    self.image_height
                ),
            ));
        }
        if !(self.window_width > 0.0) || !self.window_center.is_finite() {
            return Err(("window_width", "window width must be positive".into()));
        }
        Ok(())
    }
}

/// Composite key `patient/study/series/slice` naming one key-slice image.
pub fn image_key(patient_id: &str, study_id: &str, series_id: &str, slice_index: i64) -> String {
    format!("{patient_id}/{study_id}/{series_id}/{slice_index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// One entry per processing step, oldest first.
    pub notes: Vec<String>,
    /// Seed of the most recent randomised step.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub annotations: Vec<LesionAnnotation>,
    pub split_assignment: Option<BTreeMap<String, Split>>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    /// Build a manifest, rejecting duplicate lesion ids.
    pub fn new(annotations: Vec<LesionAnnotation>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(annotations.len());
        for a in &annotations {
            if !seen.insert(a.lesion_id.as_str()) {
                return Err(Error::DuplicateId(a.lesion_id.clone()));
            }
        }
        Ok(Self {
            annotations,
            split_assignment: None,
            provenance: Provenance::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Distinct patient ids, sorted.
    pub fn patients(&self) -> BTreeSet<&str> {
        self.annotations.iter().map(|a| a.patient_id.as_str()).collect()
    }

    /// Distinct key-slice image keys, sorted.
    pub fn image_keys(&self) -> BTreeSet<String> {
        self.annotations.iter().map(|a| a.image_key()).collect()
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.provenance.notes.push(note.into());
        self
    }

    /// Keep the annotations matching `keep`, preserving order, pruning split
    /// entries of patients that no longer appear.
    pub fn retain(&self, mut keep: impl FnMut(&LesionAnnotation) -> bool) -> Self {
        let annotations: Vec<_> = self.annotations.iter().filter(|a| keep(a)).cloned().collect();
        self.replace_annotations(annotations)
    }

    pub(crate) fn replace_annotations(&self, annotations: Vec<LesionAnnotation>) -> Self {
        let split_assignment = self.split_assignment.as_ref().map(|map| {
            let present: HashSet<&str> = annotations.iter().map(|a| a.patient_id.as_str()).collect();
            map.iter()
                .filter(|(p, _)| present.contains(p.as_str()))
                .map(|(p, s)| (p.clone(), *s))
                .collect()
        });
        Self {
            annotations,
            split_assignment,
            provenance: self.provenance.clone(),
        }
    }

    /// Lesions of patients assigned to `split`.
    pub fn subset(&self, split: Split) -> Result<Self> {
        let map = self
            .split_assignment
            .as_ref()
            .ok_or_else(|| Error::Config("manifest has no split assignment".into()))?;
        Ok(self
            .retain(|a| map.get(&a.patient_id) == Some(&split))
            .with_note(format!("subset split={split}")))
    }

    fn check_split_assignment(&self) -> Result<()> {
        if let Some(map) = &self.split_assignment {
            for a in &self.annotations {
                if !map.contains_key(&a.patient_id) {
                    return Err(Error::Config(format!(
                        "patient {:?} has no split assignment",
                        a.patient_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParseOptions {
    /// Padding applied when a box is derived from RECIST endpoints.
    pub padding_px: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { padding_px: 0.0 }
    }
}

pub fn parse_manifest(source: impl Read) -> Result<DatasetManifest> {
    parse_manifest_with(source, &ParseOptions::default())
}

pub fn parse_manifest_with(mut source: impl Read, opts: &ParseOptions) -> Result<DatasetManifest> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;

    let mut provenance = Provenance::default();
    let mut splits: BTreeMap<String, Split> = BTreeMap::new();
    let mut body_start = 0;
    let mut meta_lines = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\r', '\n']);
        let Some(meta) = trimmed.strip_prefix('#') else {
            break;
        };
        meta_lines += 1;
        body_start += line.len();
        let meta = meta.trim_start();
        if let Some(note) = meta.strip_prefix("provenance:") {
            provenance.notes.push(note.trim().to_string());
        } else if let Some(seed) = meta.strip_prefix("seed:") {
            provenance.seed = Some(
                seed.trim()
                    .parse()
                    .map_err(|_| Error::parse(meta_lines, "seed", "seed is not an integer"))?,
            );
        } else if let Some(entry) = meta.strip_prefix("split:") {
            let mut parts = entry.split_whitespace();
            let (Some(patient), Some(split), None) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::parse(meta_lines, "split", "expected `<patient_id> <split>`"));
            };
            let split = split
                .parse()
                .map_err(|e: Error| Error::parse(meta_lines, "split", e.to_string()))?;
            splits.insert(patient.to_string(), split);
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(&text.as_bytes()[body_start..]);
    let header = reader
        .headers()
        .map_err(|e| Error::parse(meta_lines + 1, "header", e.to_string()))?
        .clone();
    if header.iter().map(str::trim).ne(MANIFEST_COLUMNS.iter().copied()) {
        return Err(Error::parse(
            meta_lines + 1,
            "header",
            format!("expected columns {}", MANIFEST_COLUMNS.join(",")),
        ));
    }

    let mut annotations = Vec::new();
    let mut ids: HashMap<String, u64> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line()) + meta_lines;
            Error::parse(line, "row", e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line()) + meta_lines;
        let ann = parse_row(&record, line, opts)?;
        if ids.insert(ann.lesion_id.clone(), line).is_some() {
            return Err(Error::DuplicateId(ann.lesion_id));
        }
        annotations.push(ann);
    }

    let manifest = DatasetManifest {
        annotations,
        split_assignment: (!splits.is_empty()).then_some(splits),
        provenance,
    };
    manifest.check_split_assignment()?;
    Ok(manifest)
}

fn parse_row(record: &csv::StringRecord, line: u64, opts: &ParseOptions) -> Result<LesionAnnotation> {
    if record.len() != MANIFEST_COLUMNS.len() {
        return Err(Error::parse(
            line,
            "row",
            format!("expected {} fields, found {}", MANIFEST_COLUMNS.len(), record.len()),
        ));
    }
    let field = |i: usize| record.get(i).unwrap_or("").trim();
    fn num<T: FromStr>(s: &str, line: u64, col: &str) -> Result<T> {
        s.parse()
            .map_err(|_| Error::parse(line, col, format!("cannot parse {s:?}")))
    }
    let quad = |i: usize| -> Result<[f64; 4]> {
        let parts: Vec<f64> = field(i)
            .split_whitespace()
            .map(|p| num::<f64>(p, line, MANIFEST_COLUMNS[i]))
            .collect::<Result<_>>()?;
        parts
            .try_into()
            .map_err(|_| Error::parse(line, MANIFEST_COLUMNS[i], "expected 4 space-separated numbers"))
    };
    let axis = |i: usize| -> Result<Axis> {
        Axis::from_coords(quad(i)?).map_err(|e| Error::parse(line, MANIFEST_COLUMNS[i], e.to_string()))
    };

    let recist = RecistMeasurement::new(axis(9)?, axis(10)?);
    let bbox = if field(11).is_empty() {
        box_from_recist(&recist, opts.padding_px)
    } else {
        BoundingBox::try_from(quad(11)?)
    }
    .map_err(|e| Error::parse(line, "bbox", e.to_string()))?;

    let label_code: i64 = num(field(12), line, "label")?;

    let ann = LesionAnnotation {
        lesion_id: field(0).to_string(),
        patient_id: field(1).to_string(),
        study_id: field(2).to_string(),
        visit_index: num(field(3), line, "visit_index")?,
        series_id: field(4).to_string(),
        slice_index: num(field(5), line, "slice_index")?,
        image_width: num(field(6), line, "image_width")?,
        image_height: num(field(7), line, "image_height")?,
        spacing_mm_per_px: num(field(8), line, "spacing_mm_per_px")?,
        recist,
        bbox,
        label: BodyPartLabel::from_code(label_code),
        window_center: num(field(13), line, "window_center")?,
        window_width: num(field(14), line, "window_width")?,
    };
    ann.validate().map_err(|(col, msg)| Error::parse(line, col, msg))?;
    Ok(ann)
}

fn quad_str(c: [f64; 4]) -> String {
    format!("{} {} {} {}", c[0], c[1], c[2], c[3])
}

/// Write a manifest in the CSV schema, metadata comments first.
pub fn write_manifest(m: &DatasetManifest, mut out: impl Write) -> Result<()> {
    for note in &m.provenance.notes {
        writeln!(out, "# provenance: {}", note.replace('\n', " "))?;
    }
    if let Some(seed) = m.provenance.seed {
        writeln!(out, "# seed: {seed}")?;
    }
    if let Some(map) = &m.split_assignment {
        for (patient, split) in map {
            writeln!(out, "# split: {patient} {split}")?;
        }
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(MANIFEST_COLUMNS).map_err(csv_io)?;
    for a in &m.annotations {
        w.write_record([
            a.lesion_id.clone(),
            a.patient_id.clone(),
            a.study_id.clone(),
            a.visit_index.to_string(),
            a.series_id.clone(),
            a.slice_index.to_string(),
            a.image_width.to_string(),
            a.image_height.to_string(),
            a.spacing_mm_per_px.to_string(),
            quad_str(a.recist.long_axis.coords()),
            quad_str(a.recist.short_axis.coords()),
            quad_str(a.bbox.coords()),
            a.label.map_or(UNLABELED_CODE, |l| l.code() as i64).to_string(),
            a.window_center.to_string(),
            a.window_width.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let mut buf = Vec::new();
    write_manifest(m, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("manifest output is UTF-8")
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// For each patient keep only lesions from their lowest `visit_index`.
pub fn keep_first_visit(m: &DatasetManifest) -> DatasetManifest {
    let mut first: HashMap<&str, u32> = HashMap::new();
    for a in &m.annotations {
        first
            .entry(a.patient_id.as_str())
            .and_modify(|v| *v = (*v).min(a.visit_index))
            .or_insert(a.visit_index);
    }
    let out = m.retain(|a| first[a.patient_id.as_str()] == a.visit_index);
    let dropped = m.len() - out.len();
    out.with_note(format!("keep_first_visit dropped={dropped}"))
}

pub fn keep_labeled(m: &DatasetManifest) -> DatasetManifest {
    let out = m.retain(|a| a.label.is_some());
    let dropped = m.len() - out.len();
    out.with_note(format!("keep_labeled dropped={dropped}"))
}

/// Train/val/test patient fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    fn validate(&self) -> Result<()> {
        let arr = self.as_array();
        if arr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::InvalidFractions(format!(
                "each fraction must lie in (0, 1), got {arr:?}"
            )));
        }
        let sum: f64 = arr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Patient counts per split by largest remainder; ties go to the earlier
    /// split. A split left empty takes one patient from the largest split.
    pub fn patient_counts(&self, n: usize) -> [usize; 3] {
        let quotas = self.as_array().map(|f| f * n as f64);
        let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - counts[a] as f64;
            let rb = quotas[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        if n >= 3 {
            for i in 0..3 {
                if counts[i] == 0 {
                    let largest = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
                    counts[largest] -= 1;
                    counts[i] += 1;
                }
            }
        }
        counts
    }
}

/// Assign whole patients to train/val/test.
///
/// Patients are sorted, shuffled with `seed`, then cut into consecutive runs
/// sized by [`SplitFractions::patient_counts`].
pub fn split_by_patient(
    m: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetManifest> {
    fractions.validate()?;
    let mut patients: Vec<&str> = m.patients().into_iter().collect();
    if patients.len() < 3 {
        return Err(Error::InsufficientPatients(patients.len()));
    }
    SeededRng::new(seed).shuffle(&mut patients);
    let counts = fractions.patient_counts(patients.len());

    let mut map = BTreeMap::new();
    let mut iter = patients.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for p in iter.by_ref().take(count) {
            map.insert(p.to_string(), split);
        }
    }

    let mut lesions = [0usize; 3];
    for a in &m.annotations {
        lesions[map[&a.patient_id] as usize] += 1;
    }
    let mut out = m.clone();
    out.split_assignment = Some(map);
    out.provenance.seed = Some(seed);
    Ok(out.with_note(format!(
        "split_by_patient fractions={}/{}/{} seed={seed} patients={}/{}/{} lesions={}/{}/{}",
        fractions.train,
        fractions.val,
        fractions.test,
        counts[0],
        counts[1],
        counts[2],
        lesions[0],
        lesions[1],
        lesions[2]
    )))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const HEADER: &str = "lesion_id,patient_id,study_id,visit_index,series_id,slice_index,image_width,image_height,spacing_mm_per_px,long_axis,short_axis,bbox,label,window_center,window_width";

    pub fn row(id: &str, patient: &str, visit: u32, label: i64) -> String {
        format!(
            "{id},{patient},{patient}_S{visit},{visit},1,10,512,512,0.8,10 10 30 30,15 25 25 15,,{label},50,400"
        )
    }

    pub fn csv_of(rows: &[String]) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn parses_single_row_and_derives_box() {
        let m = parse_manifest(csv_of(&[row("L1", "P1", 1, 5)]).as_bytes()).unwrap();
        assert_eq!(m.len(), 1);
        let a = &m.annotations[0];
        assert_eq!(a.bbox.coords(), [10.0, 10.0, 30.0, 30.0]);
        assert_eq!(a.label, Some(BodyPartLabel::Lung));
        assert_eq!(a.image_key(), "P1/P1_S1/1/10");
    }

    #[test]
    fn sentinel_and_out_of_range_labels_are_absent() {
        let m = parse_manifest(
            csv_of(&[row("L1", "P1", 1, -1), row("L2", "P1", 1, 9), row("L3", "P1", 1, 0)]).as_bytes(),
        )
        .unwrap();
        assert!(m.annotations.iter().all(|a| a.label.is_none()));
    }

    #[test]
    fn explicit_box_is_used() {
        let text = csv_of(&[
            "L1,P1,S1,1,2,134,512,512,0.7,10 10 30 30,15 25 25 15,8 8 33 33,4,50,400".to_string(),
        ]);
        let m = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(m.annotations[0].bbox.coords(), [8.0, 8.0, 33.0, 33.0]);
    }

    #[test]
    fn malformed_row_reports_line_and_column() {
        let text = csv_of(&[
            row("L1", "P1", 1, 5),
            "L2,P1,S1,1,1,10,512,512,abc,10 10 30 30,15 25 25 15,,5,50,400".to_string(),
        ]);
        match parse_manifest(text.as_bytes()) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "spacing_mm_per_px");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn line_numbers_account_for_metadata() {
        let text = format!(
            "# provenance: test\n{}",
            csv_of(&["L1,P1,S1,1,1,10,512,512,0.8,10 10 30,15 25 25 15,,5,50,400".to_string()])
        );
        match parse_manifest(text.as_bytes()) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "long_axis");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_header_and_duplicates() {
        assert!(matches!(
            parse_manifest("a,b,c\n1,2,3\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let dup = csv_of(&[row("L1", "P1", 1, 5), row("L1", "P2", 1, 5)]);
        assert!(matches!(parse_manifest(dup.as_bytes()), Err(Error::DuplicateId(id)) if id == "L1"));
    }

    #[test]
    fn rejects_box_outside_image() {
        let text = csv_of(&[
            "L1,P1,S1,1,1,10,20,20,0.8,10 10 30 30,15 25 25 15,,5,50,400".to_string(),
        ]);
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(Error::Parse { column, .. }) if column == "bbox"
        ));
    }

    #[test]
    fn first_visit_filter() {
        let rows = vec![
            row("A1", "P", 2, 5),
            row("A2", "P", 1, 5),
            row("A3", "P", 1, 4),
            row("A4", "P", 2, 4),
            row("A5", "P", 1, 3),
            row("B1", "Q", 3, 1),
        ];
        let m = parse_manifest(csv_of(&rows).as_bytes()).unwrap();
        let out = keep_first_visit(&m);
        let ids: Vec<_> = out.annotations.iter().map(|a| a.lesion_id.as_str()).collect();
        assert_eq!(ids, ["A2", "A3", "A5", "B1"]);

        let single = parse_manifest(csv_of(&[row("A", "P", 1, 1), row("B", "Q", 1, 2)]).as_bytes()).unwrap();
        assert_eq!(keep_first_visit(&single).annotations, single.annotations);
        assert!(keep_first_visit(&DatasetManifest::default()).is_empty());
    }

    #[test]
    fn labeled_filter() {
        let rows: Vec<String> = (0..10)
            .map(|i| row(&format!("L{i}"), "P", 1, if i < 4 { -1 } else { 5 }))
            .collect();
        let m = parse_manifest(csv_of(&rows).as_bytes()).unwrap();
        assert_eq!(keep_labeled(&m).len(), 6);
        let none: Vec<String> = (0..3).map(|i| row(&format!("L{i}"), "P", 1, -1)).collect();
        assert!(keep_labeled(&parse_manifest(csv_of(&none).as_bytes()).unwrap()).is_empty());
    }

    #[test]
    fn filters_commute() {
        let rows = vec![
            row("A1", "P", 2, -1),
            row("A2", "P", 1, 5),
            row("A3", "P", 1, -1),
            row("B1", "Q", 2, 4),
            row("B2", "Q", 3, 4),
        ];
        let m = parse_manifest(csv_of(&rows).as_bytes()).unwrap();
        assert_eq!(
            keep_first_visit(&keep_labeled(&m)).annotations,
            keep_labeled(&keep_first_visit(&m)).annotations
        );
    }

    fn patients_manifest(n: usize) -> DatasetManifest {
        let rows: Vec<String> = (0..n)
            .flat_map(|p| (0..=(p % 3)).map(move |l| row(&format!("L{p}_{l}"), &format!("P{p:03}"), 1, 5)))
            .collect();
        parse_manifest(csv_of(&rows).as_bytes()).unwrap()
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let m = patients_manifest(10);
        let out = split_by_patient(&m, SplitFractions::default(), 7).unwrap();
        let map = out.split_assignment.as_ref().unwrap();
        let count = |s| map.values().filter(|v| **v == s).count();
        assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [6, 2, 2]);
        let again = split_by_patient(&m, SplitFractions::default(), 7).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn largest_remainder_counts() {
        let f = SplitFractions::default();
        assert_eq!(f.patient_counts(10), [6, 2, 2]);
        assert_eq!(f.patient_counts(3), [1, 1, 1]);
        assert_eq!(f.patient_counts(7), [4, 2, 1]);
        for n in 3..200 {
            let c = f.patient_counts(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (count, frac) in c.iter().zip([0.6, 0.2, 0.2]) {
                assert!((*count as f64 - frac * n as f64).abs() <= 1.0 + 1e-9, "n={n} {c:?}");
                assert!(*count > 0);
            }
        }
    }

    #[test]
    fn split_errors() {
        let m = patients_manifest(2);
        assert!(matches!(
            split_by_patient(&m, SplitFractions::default(), 1),
            Err(Error::InsufficientPatients(2))
        ));
        assert!(SplitFractions::new(0.5, 0.3, 0.3).is_err());
        assert!(SplitFractions::new(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn round_trip_with_metadata() {
        let m = split_by_patient(&patients_manifest(12), SplitFractions::default(), 3).unwrap();
        let text = manifest_to_string(&m);
        let back = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest_to_string(&back), text);

        let train = back.subset(Split::Train).unwrap();
        assert!(train
            .annotations
            .iter()
            .all(|a| m.split_assignment.as_ref().unwrap()[&a.patient_id] == Split::Train));
        assert!(train.split_assignment.unwrap().values().all(|s| *s == Split::Train));
    }
}
