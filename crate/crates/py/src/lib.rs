//! Python bindings for lesionkit.
//!
//! Geometry, windowing, manifests, balancing, fusion, evaluation and the
//! Lesions report section. Evaluation reports are returned as JSON text.

use std::collections::HashMap;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use lesionkit::evaluation::{stratified_report, EvalConfig, FoldInput};
use lesionkit::fusion::{wbf_all, FusionConfig, Prediction, ScoreMode};
use lesionkit::geometry::{Axis, BodyPartLabel, BoundingBox, RecistMeasurement};
use lesionkit::ingestion::{self, DatasetManifest, Split, SplitFractions};
use lesionkit::preprocessing::{self, HuSlice};
use lesionkit::reporting::{self, SectionOptions};
use lesionkit::{balancing, synth, BalanceSpec, Strategy, SynthSpec};

create_exception!(lesionkit, LesionkitError, PyValueError);

fn err(e: lesionkit::Error) -> PyErr {
    LesionkitError::new_err(e.to_string())
}

fn parse_label(code: i64) -> PyResult<BodyPartLabel> {
    BodyPartLabel::from_code(code).ok_or_else(|| PyValueError::new_err(format!("label must be 1..8, got {code}")))
}

#[pyclass(name = "BoundingBox", module = "lesionkit", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyBox(BoundingBox);

#[pymethods]
impl PyBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        BoundingBox::new(x1, y1, x2, y2).map(PyBox).map_err(err)
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1()
    }
    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1()
    }
    #[getter]
    fn x2(&self) -> f64 {
        self.0.x2()
    }
    #[getter]
    fn y2(&self) -> f64 {
        self.0.y2()
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn coords(&self) -> (f64, f64, f64, f64) {
        let [a, b, c, d] = self.0.coords();
        (a, b, c, d)
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.coords();
        format!("BoundingBox({a}, {b}, {c}, {d})")
    }
}

#[pyfunction]
fn iou(a: PyRef<'_, PyBox>, b: PyRef<'_, PyBox>) -> f64 {
    lesionkit::iou(&a.0, &b.0)
}

fn recist(long: [f64; 4], short: [f64; 4]) -> PyResult<RecistMeasurement> {
    Ok(RecistMeasurement::new(
        Axis::from_coords(long).map_err(err)?,
        Axis::from_coords(short).map_err(err)?,
    ))
}

/// Tight box around the four RECIST endpoints, each axis given as (x1, y1, x2, y2).
#[pyfunction]
#[pyo3(signature = (long_axis, short_axis, padding=0.0))]
fn box_from_recist(long_axis: [f64; 4], short_axis: [f64; 4], padding: f64) -> PyResult<PyBox> {
    lesionkit::box_from_recist(&recist(long_axis, short_axis)?, padding)
        .map(PyBox)
        .map_err(err)
}

#[pyfunction]
fn sad_mm(long_axis: [f64; 4], short_axis: [f64; 4], spacing_mm_per_px: f64) -> PyResult<f64> {
    lesionkit::sad_mm(&recist(long_axis, short_axis)?, spacing_mm_per_px).map_err(err)
}

/// Window row-major HU values to 8-bit intensities.
#[pyfunction]
fn window_hu<'py>(
    py: Python<'py>,
    values: Vec<i16>,
    width: u32,
    height: u32,
    center: f64,
    window_width: f64,
) -> PyResult<Bound<'py, PyBytes>> {
    let slice = HuSlice::new(width, height, values).map_err(err)?;
    let out = preprocessing::window_hu(&slice, center, window_width).map_err(err)?;
    Ok(PyBytes::new(py, out.data()))
}

#[pyclass(name = "Prediction", module = "lesionkit", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPrediction(Prediction);

#[pymethods]
impl PyPrediction {
    #[new]
    #[pyo3(signature = (image_key, box_, label, score, source_id="py"))]
    fn new(image_key: String, box_: PyRef<'_, PyBox>, label: i64, score: f64, source_id: &str) -> PyResult<Self> {
        Prediction::new(image_key, box_.0, parse_label(label)?, score, source_id)
            .map(PyPrediction)
            .map_err(err)
    }

    #[getter]
    fn image_key(&self) -> &str {
        &self.0.image_key
    }
    #[getter(box_)]
    fn bbox(&self) -> PyBox {
        PyBox(self.0.bbox)
    }
    #[getter]
    fn label(&self) -> u8 {
        self.0.label.code()
    }
    #[getter]
    fn score(&self) -> f64 {
        self.0.score
    }
    #[getter]
    fn source_id(&self) -> &str {
        &self.0.source_id
    }

    fn __repr__(&self) -> String {
        format!(
            "Prediction({:?}, {:?}, label={}, score={})",
            self.0.image_key,
            self.0.bbox.coords(),
            self.0.label.code(),
            self.0.score
        )
    }
}

fn unwrap_preds(preds: &[PyRef<'_, PyPrediction>]) -> Vec<Prediction> {
    preds.iter().map(|p| p.0.clone()).collect()
}

#[pyfunction]
fn read_predictions(path: &str) -> PyResult<Vec<PyPrediction>> {
    let file = std::fs::File::open(path).map_err(|e| err(lesionkit::Error::from(e).in_file(path)))?;
    let preds = lesionkit::fusion::read_predictions(std::io::BufReader::new(file))
        .map_err(|e| err(e.in_file(path)))?;
    Ok(preds.into_iter().map(PyPrediction).collect())
}

/// Weighted boxes fusion over predictions from any number of images.
#[pyfunction]
#[pyo3(signature = (preds, iou_threshold=0.55, num_sources=5, score_mode="rescaled"))]
fn wbf(
    preds: Vec<PyRef<'_, PyPrediction>>,
    iou_threshold: f64,
    num_sources: usize,
    score_mode: &str,
) -> PyResult<Vec<PyPrediction>> {
    let score_mode = match score_mode {
        "rescaled" | "rescaled_average" => ScoreMode::RescaledAverage,
        "average" => ScoreMode::Average,
        other => return Err(PyValueError::new_err(format!("unknown score mode {other:?}"))),
    };
    let cfg = FusionConfig {
        iou_threshold,
        num_sources,
        score_mode,
    };
    let out = wbf_all(unwrap_preds(&preds), &cfg).map_err(err)?;
    Ok(out.into_iter().map(PyPrediction).collect())
}

#[pyclass(name = "Manifest", module = "lesionkit", frozen)]
struct PyManifest(DatasetManifest);

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        ingestion::parse_manifest(text.as_bytes()).map(PyManifest).map_err(err)
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| err(lesionkit::Error::from(e).in_file(path)))?;
        ingestion::parse_manifest(file)
            .map(PyManifest)
            .map_err(|e| err(e.in_file(path)))
    }

    fn to_csv(&self) -> String {
        ingestion::manifest_to_string(&self.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn patients(&self) -> Vec<String> {
        self.0.patients().into_iter().map(String::from).collect()
    }

    fn lesion_ids(&self) -> Vec<String> {
        self.0.annotations.iter().map(|a| a.lesion_id.clone()).collect()
    }

    /// Label code per lesion, `None` when unlabeled.
    fn labels(&self) -> Vec<Option<u8>> {
        self.0.annotations.iter().map(|a| a.label.map(|l| l.code())).collect()
    }

    fn image_keys(&self) -> Vec<String> {
        self.0.image_keys().into_iter().collect()
    }

    fn provenance(&self) -> Vec<String> {
        self.0.provenance.notes.clone()
    }

    fn keep_first_visit(&self) -> Self {
        PyManifest(ingestion::keep_first_visit(&self.0))
    }

    fn keep_labeled(&self) -> Self {
        PyManifest(ingestion::keep_labeled(&self.0))
    }

    #[pyo3(signature = (seed, fractions=(0.6, 0.2, 0.2)))]
    fn split(&self, seed: u64, fractions: (f64, f64, f64)) -> PyResult<Self> {
        let f = SplitFractions::new(fractions.0, fractions.1, fractions.2).map_err(err)?;
        ingestion::split_by_patient(&self.0, f, seed).map(PyManifest).map_err(err)
    }

    fn subset(&self, split: &str) -> PyResult<Self> {
        let s: Split = split.parse().map_err(err)?;
        self.0.subset(s).map(PyManifest).map_err(err)
    }

    #[pyo3(signature = (strategy, seed, target_total=None))]
    fn balance(&self, strategy: &str, seed: u64, target_total: Option<usize>) -> PyResult<Self> {
        let strategy: Strategy = strategy.parse().map_err(err)?;
        let spec = BalanceSpec::new(strategy, seed, target_total).map_err(err)?;
        balancing::balance(&self.0, &spec).map(PyManifest).map_err(err)
    }
}

/// Stratified FROC evaluation; one prediction list per fold. Returns the
/// report as JSON text.
#[pyfunction]
#[pyo3(signature = (manifest, folds, iou_threshold=0.3, fp_per_image=vec![4.0], class_aware=true, size_strata=true))]
fn evaluate(
    manifest: PyRef<'_, PyManifest>,
    folds: Vec<Vec<PyRef<'_, PyPrediction>>>,
    iou_threshold: f64,
    fp_per_image: Vec<f64>,
    class_aware: bool,
    size_strata: bool,
) -> PyResult<String> {
    let cfg = EvalConfig {
        iou_threshold,
        fp_per_image,
        class_aware_matching: class_aware,
        size_strata_enabled: size_strata,
    };
    let preds: Vec<Vec<Prediction>> = folds.iter().map(|f| unwrap_preds(f)).collect();
    let names: Vec<String> = (1..=preds.len()).map(|i| format!("fold{i}")).collect();
    let inputs: Vec<FoldInput<'_>> = names
        .iter()
        .zip(&preds)
        .map(|(name, p)| FoldInput {
            name,
            gts: &manifest.0.annotations,
            preds: p,
        })
        .collect();
    let report = stratified_report(&inputs, &cfg).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Render the Lesions sub-section for one study.
#[pyfunction]
#[pyo3(signature = (preds, manifest, study_id, top_k=3, min_confidence=0.5, generated_from="wbf"))]
fn lesions_section(
    preds: Vec<PyRef<'_, PyPrediction>>,
    manifest: PyRef<'_, PyManifest>,
    study_id: &str,
    top_k: usize,
    min_confidence: f64,
    generated_from: &str,
) -> PyResult<String> {
    let index = reporting::slice_index(&manifest.0);
    let study: HashMap<String, &str> = manifest
        .0
        .annotations
        .iter()
        .map(|a| (a.image_key(), a.study_id.as_str()))
        .collect();
    let preds: Vec<Prediction> = unwrap_preds(&preds)
        .into_iter()
        .filter(|p| study.get(&p.image_key).is_none_or(|s| *s == study_id))
        .collect();
    let opts = SectionOptions {
        top_k,
        min_confidence,
    };
    let section = reporting::build_lesions_section(&preds, &index, study_id, generated_from, &opts).map_err(err)?;
    Ok(reporting::render_text(&section))
}

/// Synthetic manifest; `spec_json` overrides the default SynthSpec fields.
#[pyfunction]
#[pyo3(signature = (seed=0, num_patients=100, spec_json=None))]
fn synth_dataset(seed: u64, num_patients: usize, spec_json: Option<&str>) -> PyResult<PyManifest> {
    let spec = synth_spec(seed, num_patients, spec_json)?;
    synth::generate_dataset(&spec).map(PyManifest).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (manifest, seed=0, source_id="synth", spec_json=None))]
fn synth_predictions(
    manifest: PyRef<'_, PyManifest>,
    seed: u64,
    source_id: &str,
    spec_json: Option<&str>,
) -> PyResult<Vec<PyPrediction>> {
    let spec = synth_spec(seed, 1, spec_json)?;
    let out = synth::generate_predictions(&manifest.0, &spec, source_id).map_err(err)?;
    Ok(out.predictions.into_iter().map(PyPrediction).collect())
}

fn synth_spec(seed: u64, num_patients: usize, spec_json: Option<&str>) -> PyResult<SynthSpec> {
    let mut spec: SynthSpec = match spec_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SynthSpec::default(),
    };
    spec.seed = seed;
    spec.num_patients = num_patients;
    Ok(spec)
}

#[pymodule]
#[pyo3(name = "lesionkit")]
fn lesionkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("LesionkitError", m.py().get_type::<LesionkitError>())?;
    m.add_class::<PyBox>()?;
    m.add_class::<PyPrediction>()?;
    m.add_class::<PyManifest>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(box_from_recist, m)?)?;
    m.add_function(wrap_pyfunction!(sad_mm, m)?)?;
    m.add_function(wrap_pyfunction!(window_hu, m)?)?;
    m.add_function(wrap_pyfunction!(read_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(wbf, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(lesions_section, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(synth_predictions, m)?)?;
    Ok(())
}
