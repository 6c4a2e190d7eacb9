//! `lesionkit` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to
//! standard error; data goes to `--out` (or standard output when omitted).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::balancing::{self, BalanceSpec, Strategy};
use crate::error::Error;
use crate::evaluation::{render_report_text, stratified_report, EvalConfig, FoldInput};
use crate::fusion::{self, FusionConfig, Prediction, ScoreMode};
use crate::ingestion::{
    self, keep_first_visit, keep_labeled, parse_manifest_with, split_by_patient, DatasetManifest,
    ParseOptions, Split, SplitFractions,
};
use crate::preprocessing::{self, HuSlice, WindowedSlice};
use crate::reporting::{self, SectionOptions};
use crate::synth::{self, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "lesionkit", version, about = "Lesion detection dataset, fusion and evaluation toolkit")]
pub struct Cli {
    /// Worker threads for per-image work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest and apply the curation filters.
    Ingest(IngestArgs),
    /// Assign whole patients to train/val/test.
    Split(SplitArgs),
    /// Build one of the balanced training sets.
    Balance(BalanceArgs),
    /// Window a raw HU slice to 8-bit intensities.
    Window(WindowArgs),
    /// Stack windowed neighbour slices into a 2.5D input.
    Stack(StackArgs),
    /// Weighted boxes fusion over one or more prediction files.
    Fuse(FuseArgs),
    /// FROC evaluation against ground truth.
    Evaluate(EvaluateArgs),
    /// Render the structured Lesions sub-section.
    Report(ReportArgs),
    /// Generate synthetic manifests, predictions and phantoms.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep lesions from follow-up visits too.
    #[arg(long)]
    keep_all_visits: bool,
    /// Keep lesions without a body part label.
    #[arg(long)]
    keep_unlabeled: bool,
    /// Padding (px) for boxes derived from RECIST endpoints.
    #[arg(long, default_value_t = 0.0)]
    padding: f64,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Manifest with the split assignment recorded in its header.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write train.csv, val.csv and test.csv here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train,val,test patient fractions.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    fractions: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Unbalanced,
    Bodypart,
    Lesioncount,
    Size,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Unbalanced => Strategy::Unbalanced,
            StrategyArg::Bodypart => Strategy::ByBodyPart,
            StrategyArg::Lesioncount => Strategy::ByLesionCount,
            StrategyArg::Size => Strategy::BySize,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct BalanceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lesion count for the unbalanced strategy.
    #[arg(long)]
    target_total: Option<usize>,
    /// Restrict to one split of a split manifest first.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Debug, Args)]
struct WindowArgs {
    /// Raw HUS1 slice.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    center: f64,
    #[arg(long)]
    width: f64,
    /// Resize to WxH after windowing, e.g. 512x512.
    #[arg(long)]
    resize: Option<String>,
}

#[derive(Debug, Args)]
struct StackArgs {
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    below: Option<PathBuf>,
    #[arg(long)]
    above: Option<PathBuf>,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    key_index: i64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScoreModeArg {
    Average,
    Rescaled,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Prediction JSONL files (one per epoch/model).
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.55)]
    iou_threshold: f64,
    #[arg(long, default_value_t = 5)]
    num_sources: usize,
    #[arg(long, value_enum, default_value = "rescaled")]
    score_mode: ScoreModeArg,
    /// Drop fused predictions below this score.
    #[arg(long)]
    min_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    gt: PathBuf,
    /// Evaluate only this split of a split manifest.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Prediction JSONL, one file per fold.
    #[arg(long = "pred", required = true, num_args = 1..)]
    preds: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    iou_threshold: f64,
    /// FP-per-image operating points, comma separated.
    #[arg(long, default_value = "4")]
    fp: String,
    /// Match on localisation only in the sensitivity tables.
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long)]
    no_size_strata: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Manifest resolving image keys to series and slice.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "pred")]
    pred: PathBuf,
    /// Only this study; by default every study with predictions.
    #[arg(long)]
    study: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long, default_value_t = 0.5)]
    min_confidence: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON SynthSpec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    /// Planted sensitivity applied to every class.
    #[arg(long)]
    sensitivity: Option<f64>,
    #[arg(long)]
    fp_rate: Option<f64>,
    /// Number of prediction files (independent "epochs").
    #[arg(long, default_value_t = 1)]
    sources: usize,
    /// Number of HU phantom slices to write.
    #[arg(long, default_value_t = 0)]
    phantoms: usize,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidFractions(_) => Failure::Usage(e.to_string()),
            e => Failure::Data(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        // only the first configuration in a process takes effect
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Balance(a) => balance(a),
        Command::Window(a) => window(a),
        Command::Stack(a) => stack(a),
        Command::Fuse(a) => fuse(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(Error::from(e).in_file(path)))
}

fn read_manifest(path: &Path, opts: &ParseOptions) -> CliResult<DatasetManifest> {
    parse_manifest_with(open(path)?, opts).map_err(|e| Failure::Data(e.in_file(path)))
}

fn read_preds(path: &Path) -> CliResult<Vec<Prediction>> {
    fusion::read_predictions(open(path)?).map_err(|e| Failure::Data(e.in_file(path)))
}

/// Write through a buffered sink: the file at `out`, or standard output.
fn emit(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> crate::Result<()>) -> CliResult {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut w = BufWriter::new(File::create(path).map_err(|e| Failure::Data(Error::from(e).in_file(path)))?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            f(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn write_manifest_to(out: Option<&Path>, m: &DatasetManifest) -> CliResult {
    emit(out, |w| ingestion::write_manifest(m, w))
}

fn ingest(a: IngestArgs) -> CliResult {
    if !(a.padding >= 0.0) {
        return Err(Failure::Usage("--padding must be nonnegative".into()));
    }
    let opts = ParseOptions { padding_px: a.padding };
    let mut m = read_manifest(&a.input, &opts)?.with_note(format!("ingest box_padding_px={}", a.padding));
    let before = m.len();
    if !a.keep_all_visits {
        m = keep_first_visit(&m);
    }
    if !a.keep_unlabeled {
        m = keep_labeled(&m);
    }
    let flagged = m.annotations.iter().filter(|x| x.recist.short_exceeds_long()).count();
    if flagged > 0 {
        eprintln!("warning: {flagged} lesions have a short axis longer than the long axis");
    }
    eprintln!("ingest: {before} lesions read, {} kept", m.len());
    write_manifest_to(a.out.as_deref(), &m)
}

fn parse_fractions(s: &str) -> CliResult<SplitFractions> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--fractions {s:?} is not three numbers")))?;
    match parts.as_slice() {
        [t, v, te] => Ok(SplitFractions::new(*t, *v, *te)?),
        _ => Err(Failure::Usage(format!("--fractions {s:?} is not three numbers"))),
    }
}

fn split(a: SplitArgs) -> CliResult {
    let fractions = parse_fractions(&a.fractions)?;
    if a.out.is_none() && a.out_dir.is_none() {
        return Err(Failure::Usage("split needs --out and/or --out-dir".into()));
    }
    let m = read_manifest(&a.input, &ParseOptions::default())?;
    let out = split_by_patient(&m, fractions, a.seed)?;
    if let Some(path) = &a.out {
        write_manifest_to(Some(path), &out)?;
    }
    if let Some(dir) = &a.out_dir {
        for s in Split::ALL {
            write_manifest_to(Some(&dir.join(format!("{s}.csv"))), &out.subset(s)?)?;
        }
    }
    eprintln!("{}", out.provenance.notes.last().map(String::as_str).unwrap_or(""));
    Ok(())
}

fn balance(a: BalanceArgs) -> CliResult {
    let spec = BalanceSpec::new(a.strategy.into(), a.seed, a.target_total)?;
    let mut m = read_manifest(&a.input, &ParseOptions::default())?;
    if let Some(s) = a.split {
        m = m.subset(s.into())?;
    }
    let out = balancing::balance(&m, &spec)?;
    eprintln!("{}", out.provenance.notes.last().map(String::as_str).unwrap_or(""));
    write_manifest_to(a.out.as_deref(), &out)
}

fn parse_size(s: &str) -> CliResult<(u32, u32)> {
    let bad = || Failure::Usage(format!("--resize {s:?} must look like 512x512"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn window(a: WindowArgs) -> CliResult {
    let size = a.resize.as_deref().map(parse_size).transpose()?;
    let raw = HuSlice::read_from(open(&a.input)?).map_err(|e| Failure::Data(e.in_file(&a.input)))?;
    let mut out = preprocessing::window_hu(&raw, a.center, a.width).map_err(|e| match e {
        Error::InvalidWindow(_) => Failure::Usage(e.to_string()),
        e => Failure::Data(e),
    })?;
    if let Some((w, h)) = size {
        out = preprocessing::resize(&out, w, h)?;
    }
    emit(Some(&a.out), |w| out.write_to(w))
}

fn read_windowed(path: &Path) -> CliResult<WindowedSlice> {
    WindowedSlice::read_from(open(path)?).map_err(|e| Failure::Data(e.in_file(path)))
}

fn stack(a: StackArgs) -> CliResult {
    let key = read_windowed(&a.key)?;
    let below = a.below.as_deref().map(read_windowed).transpose()?;
    let above = a.above.as_deref().map(read_windowed).transpose()?;
    let s = preprocessing::stack_25d(below.as_ref(), &key, above.as_ref(), a.key_index)?;
    emit(Some(&a.out), |w| s.write_to(w))
}

fn fuse(a: FuseArgs) -> CliResult {
    let cfg = FusionConfig {
        iou_threshold: a.iou_threshold,
        num_sources: a.num_sources,
        score_mode: match a.score_mode {
            ScoreModeArg::Average => ScoreMode::Average,
            ScoreModeArg::Rescaled => ScoreMode::RescaledAverage,
        },
    };
    cfg.validate()?;
    if let Some(s) = a.min_score {
        if !(0.0..=1.0).contains(&s) {
            return Err(Failure::Usage("--min-score must lie in [0, 1]".into()));
        }
    }
    let mut all = Vec::new();
    for path in &a.inputs {
        all.extend(read_preds(path)?);
    }
    let n_in = all.len();
    let mut fused = fusion::wbf_all(all, &cfg)?;
    if let Some(s) = a.min_score {
        fused = fusion::filter_by_score(&fused, s);
    }
    eprintln!("fuse: {n_in} predictions from {} file(s) -> {}", a.inputs.len(), fused.len());
    emit(a.out.as_deref(), |w| fusion::write_predictions(&fused, w))
}

fn parse_fp_points(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--fp {s:?} is not a comma-separated list of numbers")))
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let cfg = EvalConfig {
        iou_threshold: a.iou_threshold,
        fp_per_image: parse_fp_points(&a.fp)?,
        class_aware_matching: !a.class_agnostic,
        size_strata_enabled: !a.no_size_strata,
    };
    cfg.validate()?;
    let mut gt = read_manifest(&a.gt, &ParseOptions::default())?;
    if let Some(s) = a.split {
        gt = gt.subset(s.into())?;
    }
    let preds: Vec<Vec<Prediction>> = a.preds.iter().map(|p| read_preds(p)).collect::<CliResult<_>>()?;
    let names: Vec<String> = a.preds.iter().map(|p| p.display().to_string()).collect();
    let folds: Vec<FoldInput<'_>> = names
        .iter()
        .zip(&preds)
        .map(|(name, p)| FoldInput {
            name,
            gts: &gt.annotations,
            preds: p,
        })
        .collect();
    let report = stratified_report(&folds, &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(a.out.as_deref(), |w| {
        match a.format {
            Format::Json => {
                serde_json::to_writer_pretty(&mut *w, &report)?;
                w.write_all(b"\n")?;
            }
            Format::Text => w.write_all(render_report_text(&report).as_bytes())?,
        }
        Ok(())
    })
}

fn report(a: ReportArgs) -> CliResult {
    if !(0.0..=1.0).contains(&a.min_confidence) {
        return Err(Failure::Usage("--min-confidence must lie in [0, 1]".into()));
    }
    let opts = SectionOptions {
        top_k: a.top_k,
        min_confidence: a.min_confidence,
    };
    let m = read_manifest(&a.manifest, &ParseOptions::default())?;
    let preds = read_preds(&a.pred)?;
    let index = reporting::slice_index(&m);
    let study_of: BTreeMap<String, &str> = m
        .annotations
        .iter()
        .map(|x| (x.image_key(), x.study_id.as_str()))
        .collect();
    if let Some(p) = preds.iter().find(|p| !study_of.contains_key(&p.image_key)) {
        return Err(Failure::Data(Error::MissingIndex(p.image_key.clone())));
    }
    let mut by_study: BTreeMap<&str, Vec<Prediction>> = BTreeMap::new();
    if let Some(s) = &a.study {
        by_study.insert(s.as_str(), Vec::new());
    }
    for p in preds {
        let study = study_of[&p.image_key];
        if a.study.as_deref().is_none_or(|s| s == study) {
            by_study.entry(study).or_default().push(p);
        }
    }
    let source = a.pred.display().to_string();
    let sections: Vec<_> = by_study
        .iter()
        .map(|(study, preds)| reporting::build_lesions_section(preds, &index, study, &source, &opts))
        .collect::<crate::Result<_>>()?;

    emit(a.out.as_deref(), |w| {
        match a.format {
            Format::Json => {
                if a.study.is_some() {
                    serde_json::to_writer_pretty(&mut *w, &sections[0])?;
                } else {
                    serde_json::to_writer_pretty(&mut *w, &sections)?;
                }
                w.write_all(b"\n")?;
            }
            Format::Text if a.study.is_some() => w.write_all(reporting::render_text(&sections[0]).as_bytes())?,
            Format::Text => {
                for s in &sections {
                    writeln!(w, "# study {}", s.study_id)?;
                    w.write_all(reporting::render_text(s).as_bytes())?;
                }
            }
        }
        Ok(())
    })
}

fn synth_cmd(a: SynthArgs) -> CliResult {
    let mut spec: SynthSpec = match &a.spec {
        Some(path) => serde_json::from_reader(open(path)?).map_err(|e| Failure::Data(Error::from(e).in_file(path)))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.patients {
        spec.num_patients = n;
    }
    if let Some(s) = a.sensitivity {
        spec.planted_sensitivity = [s; 8];
    }
    if let Some(r) = a.fp_rate {
        spec.planted_fp_rate = r;
    }
    if a.sources == 0 {
        return Err(Failure::Usage("--sources must be at least 1".into()));
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    fs::create_dir_all(&a.out_dir)?;
    let m = synth::generate_dataset(&spec)?;
    write_manifest_to(Some(&a.out_dir.join("manifest.csv")), &m)?;
    for i in 0..a.sources {
        let (name, source) = if a.sources == 1 {
            ("predictions.jsonl".to_string(), "synth".to_string())
        } else {
            (format!("predictions_{}.jsonl", i + 1), format!("synth-e{}", i + 1))
        };
        let s = SynthSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..spec.clone()
        };
        let preds = synth::generate_predictions(&m, &s, &source)?;
        emit(Some(&a.out_dir.join(name)), |w| fusion::write_predictions(&preds.predictions, w))?;
    }
    for i in 0..a.phantoms {
        let slice = synth::generate_phantom(512, 512, spec.seed.wrapping_add(i as u64))?;
        emit(Some(&a.out_dir.join(format!("phantom_{}.hus", i + 1))), |w| slice.write_to(w))?;
    }
    eprintln!(
        "synth: {} lesions on {} key slices, {} prediction file(s)",
        m.len(),
        m.image_keys().len(),
        a.sources
    );
    Ok(())
}
