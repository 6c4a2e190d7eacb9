//! Data-side tooling for class-imbalance-aware CT lesion detection.
//!
//! The crate covers the path from an annotation manifest to a radiology report:
//! curation and patient-disjoint splitting ([`ingestion`]), the four training-set
//! constructions ([`balancing`]), slice preprocessing ([`preprocessing`]),
//! weighted boxes fusion of detector outputs ([`fusion`]), FROC evaluation with
//! per-class and per-size strata ([`evaluation`]) and the structured "Lesions"
//! findings block ([`reporting`]). [`synth`] generates deterministic test data
//! with planted properties. Detectors themselves are external; their outputs
//! arrive as JSON Lines files.

pub mod balancing;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod ingestion;
pub mod preprocessing;
pub mod reporting;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{
    box_from_recist, iou, sad_mm, Axis, BodyPartLabel, BoundingBox, Point, RecistMeasurement,
    SizeStratum,
};
pub use ingestion::{DatasetManifest, LesionAnnotation, Split, SplitFractions};
pub use fusion::{FusionConfig, Prediction, ScoreMode};
pub use evaluation::{EvalConfig, EvalReport};
pub use balancing::{BalanceSpec, Strategy};
pub use synth::SynthSpec;
