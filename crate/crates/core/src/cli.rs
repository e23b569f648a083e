//! Command-line front end. Every subcommand reads and writes only the paths
//! named by its flags; progress goes to stderr.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::clinical::{
    bland_altman, clinical_report, compare_variants, read_clinical_csv, write_bland_altman_csv,
    write_clinical_csv, write_points_csv, ClinicalError, Variant, PARAMETERS,
};
use crate::data_io::{
    is_nifti_path, read_nifti, write_mask, DatasetError, DatasetIndex, LabelMask, NiftiError,
    Phase, Split, LV_CAVITY, MYOCARDIUM,
};
use crate::metrics::{
    aggregate_report, evaluate_volume, write_metrics_csv, Aggregation, MetricsError,
};
use crate::phantom::{generate_cohort, CohortConfig, PhantomError};
use crate::preprocess::{canonicalize, clean_mask, Connectivity, PreprocessError, CANONICAL_SHAPE};
use crate::reconstruct::{export_obj, export_stl, marching_cubes, MeshError};
use crate::tensor::verify::{adjoint_suite, gradient_suite};
use crate::training::{load_split, train, write_epoch_log, TrainConfig, TrainError, TrainOptions};
use crate::unet::{load_model, save_model, sliding_window_infer, UNet, UNetError, DEFAULT_STRIDE};

/// Process exit status of a subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Usage = 1,
    InputFormat = 2,
    Numeric = 3,
    Io = 4,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub message: String,
}

impl Failure {
    fn new(status: Status, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

macro_rules! classify {
    ($ty:ty, |$e:ident| $status:expr) => {
        impl From<$ty> for Failure {
            fn from($e: $ty) -> Self {
                let status = $status;
                Failure::new(status, $e.to_string())
            }
        }
    };
}

classify!(NiftiError, |e| match e {
    NiftiError::Io { .. } => Status::Io,
    _ => Status::InputFormat,
});
classify!(DatasetError, |e| match e {
    DatasetError::Io { .. } => Status::Io,
    _ => Status::InputFormat,
});
classify!(UNetError, |e| match e {
    UNetError::Io(_) => Status::Io,
    UNetError::Tensor(_) => Status::Numeric,
    _ => Status::InputFormat,
});
classify!(MetricsError, |e| match e {
    MetricsError::Io(_) => Status::Io,
    _ => Status::InputFormat,
});
classify!(ClinicalError, |e| match e {
    ClinicalError::Io(_) => Status::Io,
    ClinicalError::NonPositiveEdv(_) | ClinicalError::NegativeEsv(_) => Status::Numeric,
    _ => Status::InputFormat,
});
classify!(MeshError, |e| match e {
    MeshError::Io { .. } => Status::Io,
});
classify!(PreprocessError, |_e| Status::InputFormat);
classify!(std::io::Error, |_e| Status::Io);

impl From<PhantomError> for Failure {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Nifti(n) => n.into(),
            PhantomError::Dataset(d) => d.into(),
            PhantomError::Io { .. } => Failure::new(Status::Io, e.to_string()),
            PhantomError::Invalid(_) => Failure::new(Status::Usage, e.to_string()),
            PhantomError::BlobOutsideCavity { .. } => Failure::new(Status::Numeric, e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Nifti { path, source } => {
                let f: Failure = source.into();
                Failure::new(f.status, format!("{}: {}", path.display(), f.message))
            }
            TrainError::Dataset(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::Io(_) => Failure::new(Status::Io, e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => {
                Failure::new(Status::Numeric, e.to_string())
            }
            TrainError::Config(_) | TrainError::EmptySplit(_) | TrainError::Preprocess { .. } => {
                Failure::new(Status::InputFormat, e.to_string())
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cardioseg",
    version,
    about = "Cardiac MRI segmentation, volumetry and surface reconstruction"
)]
pub struct Cli {
    /// Worker threads for the numeric kernels; 1 gives the reference
    /// deterministic schedule.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort of ED/ES images and masks.
    Phantom(PhantomArgs),
    /// Relabel papillary muscles and fragments in every mask of a directory.
    CleanMasks(CleanArgs),
    /// Train a network on a dataset directory holding index.json.
    Train(TrainArgs),
    /// Segment one image with a trained model.
    Segment(SegmentArgs),
    /// Score predicted masks against reference masks.
    Eval(EvalArgs),
    /// Ventricular volumes, ejection fraction and myocardial mass.
    Clinical(ClinicalArgs),
    /// Agreement statistics between two clinical tables.
    BlandAltman(BlandAltmanArgs),
    /// Extract a surface mesh of one label.
    Reconstruct(ReconstructArgs),
    /// Run the randomized gradient and adjoint self-checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_name = "N")]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Embed papillary-muscle blobs in the ventricular cavity.
    #[arg(long)]
    pub papillary: bool,
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Only NIfTI files whose name contains this text are treated as masks.
    #[arg(long, default_value = "mask")]
    pub pattern: String,
    /// Group components over the whole volume instead of per slice.
    #[arg(long)]
    pub volume: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration JSON.
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Directory containing index.json and the files it lists.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "MODEL")]
    pub out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    #[arg(long, value_name = "DIR")]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long, value_name = "MODEL")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    #[arg(long, value_name = "MASK")]
    pub out: PathBuf,
    /// Skip papillary-muscle relabeling of the prediction.
    #[arg(long)]
    pub keep_papillary: bool,
    /// Sliding-window step as x,y,z.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = DEFAULT_STRIDE)]
    pub stride: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    /// Only NIfTI files whose name contains this text are scored.
    #[arg(long, default_value = "mask")]
    pub pattern: String,
    /// Relabel papillary muscles in the reference masks before scoring.
    #[arg(long)]
    pub clean_gt: bool,
    /// Aggregate pooled confusion counts instead of per-volume means.
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Included,
    Excluded,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Included => Variant::PapillaryIncluded,
            VariantArg::Excluded => Variant::PapillaryExcluded,
        }
    }
}

#[derive(Debug, Args)]
pub struct ClinicalArgs {
    #[arg(long, value_name = "FILE")]
    pub seg_ed: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub seg_es: PathBuf,
    /// Uncleaned ED mask; with --raw-es reports both variants.
    #[arg(long, value_name = "FILE", requires = "raw_es")]
    pub raw_ed: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "raw_ed")]
    pub raw_es: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    #[arg(long, default_value = "subject")]
    pub subject: String,
    /// Variant label of --seg-ed/--seg-es when no raw masks are given.
    #[arg(long, value_enum, default_value_t = VariantArg::Excluded)]
    pub variant: VariantArg,
}

#[derive(Debug, Args)]
pub struct BlandAltmanArgs {
    /// Clinical table of the first method; differences are a − b.
    #[arg(long, value_name = "FILE")]
    pub a: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub b: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Rows of this variant are paired by subject.
    #[arg(long, value_enum, default_value_t = VariantArg::Excluded)]
    pub variant: VariantArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LabelArg {
    Lv,
    Myo,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, value_name = "FILE")]
    pub seg: PathBuf,
    #[arg(long, value_enum)]
    pub label: LabelArg,
    /// Output mesh; the extension selects STL or OBJ.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 50)]
    pub adjoint_cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// reports failures on stderr.
pub fn run<I, T>(argv: I) -> Status
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                Status::Usage
            } else {
                Status::Ok
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return Status::Usage;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return Status::Usage;
        }
    }
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::CleanMasks(a) => clean_masks(a),
        Command::Train(a) => train_cmd(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Clinical(a) => clinical(a),
        Command::BlandAltman(a) => bland_altman_cmd(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => Status::Ok,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.status
        }
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::new(Status::Io, format!("{}: {e}", path.display())))
}

fn read_mask(path: &Path) -> CliResult<LabelMask> {
    Ok(read_nifti(path)?.into_label_mask()?)
}

/// NIfTI files in `dir` whose name contains `pattern`, sorted by name.
fn nifti_files(dir: &Path, pattern: &str) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::new(Status::Io, format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if path.is_file() && is_nifti_path(&path) && name.contains(pattern) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Subject and phase from names such as `ph003_ED_mask.nii.gz`.
fn subject_phase(path: &Path) -> CliResult<(String, Phase)> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.trim_end_matches(".gz").trim_end_matches(".nii");
    let tokens: Vec<&str> = stem.split('_').collect();
    for (i, t) in tokens.iter().enumerate() {
        if let Ok(phase) = t.to_ascii_uppercase().parse::<Phase>() {
            let subject = if i == 0 {
                stem.to_string()
            } else {
                tokens[..i].join("_")
            };
            return Ok((subject, phase));
        }
    }
    Err(Failure::new(
        Status::InputFormat,
        format!("{name}: cannot find an ED or ES token in the file name"),
    ))
}

fn phantom(a: PhantomArgs) -> CliResult {
    let mut config = CohortConfig::default();
    if !a.papillary {
        config.blob_offsets.clear();
    }
    let index = generate_cohort(a.count, &config, a.seed, &a.out)?;
    eprintln!(
        "wrote {} subjects to {} (train {}, val {}, test {} volumes)",
        a.count,
        a.out.display(),
        index.count(Split::Train),
        index.count(Split::Val),
        index.count(Split::Test)
    );
    Ok(())
}

fn clean_masks(a: CleanArgs) -> CliResult {
    let files = nifti_files(&a.input, &a.pattern)?;
    if files.is_empty() {
        return Err(Failure::new(
            Status::InputFormat,
            format!(
                "no NIfTI files matching {:?} in {}",
                a.pattern,
                a.input.display()
            ),
        ));
    }
    fs::create_dir_all(&a.out)?;
    let conn = if a.volume {
        Connectivity::Volume26
    } else {
        Connectivity::Slice8
    };
    for f in &files {
        let mask = read_mask(f)?;
        let cleaned = clean_mask(&mask, conn);
        let moved = mask
            .labels
            .iter()
            .zip(&cleaned.labels)
            .filter(|(a, b)| a != b)
            .count();
        let dest = a.out.join(f.file_name().expect("listed files have names"));
        write_mask(&cleaned, &dest, dest.to_string_lossy().ends_with(".gz"))?;
        eprintln!("{}: {moved} voxels relabeled", dest.display());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Failure::new(Status::Io, format!("{}: {e}", a.config.display())))?;
    let cfg = TrainConfig::from_json(&text)?;
    let index = DatasetIndex::load(a.data.join("index.json"))?;
    let train_set = load_split(&index, &a.data, Split::Train, cfg.clean_masks)?;
    let val_set = load_split(&index, &a.data, Split::Val, cfg.clean_masks)?;
    eprintln!(
        "{} training and {} validation volumes",
        train_set.len(),
        val_set.len()
    );
    let model = UNet::build(cfg.unet_config())?;
    eprintln!("{} parameters", model.parameter_count());
    let opts = TrainOptions {
        checkpoint_dir: a.checkpoints.clone(),
        on_epoch: Some(Box::new(|e| {
            let val = e
                .val
                .map_or(String::new(), |v| format!("  val dice {:.4}", v.dice));
            eprintln!(
                "epoch {:3}  lr {:.6}  loss {:.4}  dice {:.4}{val}",
                e.epoch, e.lr, e.train_loss, e.train_dice
            );
        })),
    };
    let outcome = train(model, &train_set, &val_set, &cfg, opts)?;
    save_model(&outcome.model, &a.out)?;
    if let Some(log) = &a.log {
        write_epoch_log(&outcome.log, create(log)?)?;
    }
    Ok(())
}

fn segment(a: SegmentArgs) -> CliResult {
    if !is_nifti_path(&a.image) {
        return Err(Failure::new(
            Status::InputFormat,
            format!("{}: expected a .nii or .nii.gz image", a.image.display()),
        ));
    }
    let model = load_model(&a.model)?;
    let image = read_nifti(&a.image)?.into_volume();
    let canon = canonicalize(&image, None, CANONICAL_SHAPE)?;
    let stride = [a.stride[0], a.stride[1], a.stride[2]];
    let pred = sliding_window_infer(&model, &canon.image, stride)?;
    let mut mask = LabelMask::new(image.header, canon.window.uncrop(&pred.labels));
    if !a.keep_papillary {
        mask = clean_mask(&mask, Connectivity::Slice8);
    }
    write_mask(&mask, &a.out, a.out.to_string_lossy().ends_with(".gz"))?;
    eprintln!(
        "{}: {} myocardium, {} cavity voxels",
        a.out.display(),
        mask.count(MYOCARDIUM),
        mask.count(LV_CAVITY)
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let gt_files = nifti_files(&a.gt, &a.pattern)?;
    if gt_files.is_empty() {
        return Err(Failure::new(
            Status::InputFormat,
            format!(
                "no reference masks matching {:?} in {}",
                a.pattern,
                a.gt.display()
            ),
        ));
    }
    let mut rows = Vec::new();
    for gt_path in &gt_files {
        let name = gt_path.file_name().expect("listed files have names");
        let pred_path = a.pred.join(name);
        if !pred_path.is_file() {
            return Err(Failure::new(
                Status::InputFormat,
                format!(
                    "no prediction {} for reference {}",
                    pred_path.display(),
                    gt_path.display()
                ),
            ));
        }
        let (subject, phase) = subject_phase(gt_path)?;
        let mut gt = read_mask(gt_path)?;
        if a.clean_gt {
            gt = clean_mask(&gt, Connectivity::Slice8);
        }
        let pred = read_mask(&pred_path)?;
        rows.extend(evaluate_volume(&subject, phase, &pred, &gt)?);
    }
    let mode = if a.pooled {
        Aggregation::Pooled
    } else {
        Aggregation::PerVolume
    };
    let report = aggregate_report(rows, mode)?;
    write_metrics_csv(&report, create(&a.report)?)?;
    eprintln!("scored {} volumes", gt_files.len());
    Ok(())
}

fn clinical(a: ClinicalArgs) -> CliResult {
    let ed = read_mask(&a.seg_ed)?;
    let es = read_mask(&a.seg_es)?;
    let reports = match (&a.raw_ed, &a.raw_es) {
        (Some(red), Some(res)) => {
            let (raw_ed, raw_es) = (read_mask(red)?, read_mask(res)?);
            let cmp = compare_variants(&a.subject, (&raw_ed, &raw_es), (&ed, &es))?;
            if !cmp.direction_consistent() {
                eprintln!("warning: the cleaned masks do not only add cavity at the expense of myocardium");
            }
            vec![cmp.included, cmp.excluded]
        }
        _ => vec![clinical_report(&a.subject, a.variant.into(), &ed, &es)?],
    };
    for r in &reports {
        if r.esv_exceeds_edv {
            eprintln!("warning: {} {}: ESV exceeds EDV", r.subject, r.variant);
        }
    }
    write_clinical_csv(&reports, create(&a.report)?)?;
    Ok(())
}

fn bland_altman_cmd(a: BlandAltmanArgs) -> CliResult {
    let read = |p: &Path| -> CliResult<_> {
        let f =
            File::open(p).map_err(|e| Failure::new(Status::Io, format!("{}: {e}", p.display())))?;
        Ok(read_clinical_csv(f)?)
    };
    let variant: Variant = a.variant.into();
    let (ta, tb) = (read(&a.a)?, read(&a.b)?);
    let pairs: Vec<_> = ta
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|ra| {
            tb.iter()
                .find(|rb| rb.variant == variant && rb.subject == ra.subject)
                .map(|rb| (ra, rb))
        })
        .collect();
    let mut stats = Vec::new();
    for name in PARAMETERS {
        let values: Vec<(f64, f64)> = pairs
            .iter()
            .map(|(ra, rb)| {
                (
                    ra.parameter(name).expect("known parameter"),
                    rb.parameter(name).expect("known parameter"),
                )
            })
            .collect();
        stats.push((name.to_string(), bland_altman(&values)?));
    }
    write_bland_altman_csv(&stats, create(&a.out)?)?;
    // per-parameter plot data beside the summary: <stem>_<parameter>_points.csv
    let stem = a.out.file_stem().unwrap_or_default().to_string_lossy();
    for (name, st) in &stats {
        write_points_csv(
            st,
            create(&a.out.with_file_name(format!("{stem}_{name}_points.csv")))?,
        )?;
    }
    eprintln!("{} subjects paired", pairs.len());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> CliResult {
    let mask = read_mask(&a.seg)?;
    let label = match a.label {
        LabelArg::Lv => LV_CAVITY,
        LabelArg::Myo => MYOCARDIUM,
    };
    let mesh = marching_cubes(&mask, label);
    let ext = a
        .out
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase());
    match ext.as_deref() {
        Some("stl") => export_stl(&mesh, &a.out)?,
        Some("obj") => export_obj(&mesh, &a.out)?,
        _ => {
            return Err(Failure::new(
                Status::Usage,
                format!("{}: output must end in .stl or .obj", a.out.display()),
            ))
        }
    }
    eprintln!(
        "{}: {} vertices, {} triangles, enclosed volume {:.1} ml",
        a.out.display(),
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.enclosed_volume_mm3() / 1000.0
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let numeric = |e: crate::tensor::TensorError| Failure::new(Status::Numeric, e.to_string());
    let layers = gradient_suite(a.trials, a.seed, a.tolerance).map_err(numeric)?;
    let mut ok = true;
    for l in &layers {
        eprintln!(
            "{:<18} {} trials  max rel error {:.3e}  {}",
            l.layer,
            l.trials,
            l.max_rel_error,
            if l.passed() { "ok" } else { "FAILED" }
        );
        ok &= l.passed();
    }
    let cases = adjoint_suite(a.adjoint_cases, a.seed).map_err(numeric)?;
    let worst = cases.iter().map(|c| c.rel_error()).fold(0.0, f64::max);
    let adjoint_ok = worst <= a.tolerance;
    eprintln!(
        "adjoint identity   {} cases  max rel error {worst:.3e}  {}",
        cases.len(),
        if adjoint_ok { "ok" } else { "FAILED" }
    );
    if ok && adjoint_ok {
        Ok(())
    } else {
        Err(Failure::new(Status::Numeric, "gradient self-check failed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names_yield_subject_and_phase() {
        let (s, p) = subject_phase(Path::new("/d/ph003_ED_mask.nii.gz")).unwrap();
        assert_eq!((s.as_str(), p), ("ph003", Phase::ED));
        let (s, p) = subject_phase(Path::new("patient_12_es.nii")).unwrap();
        assert_eq!((s.as_str(), p), ("patient_12", Phase::ES));
        assert_eq!(
            subject_phase(Path::new("scan.nii")).unwrap_err().status,
            Status::InputFormat
        );
    }

    #[test]
    fn usage_errors_and_help_statuses() {
        assert_eq!(run(["cardioseg", "--help"]), Status::Ok);
        assert_eq!(run(["cardioseg", "segment", "--help"]), Status::Ok);
        assert_eq!(run(["cardioseg", "frobnicate"]), Status::Usage);
        assert_eq!(run(["cardioseg", "eval", "--bogus"]), Status::Usage);
        assert_eq!(run(["cardioseg", "phantom", "--out", "x"]), Status::Usage);
    }
}
