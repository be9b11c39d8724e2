//! Command-line entry point.
//!
//! Every command writes a run manifest (`<artifact>.run.json`, or `run.json`
//! inside a directory artifact) holding the tool version, the full config,
//! its hash, the seed and the hashes of every input. Paths are left out so
//! two runs from identical inputs produce identical manifests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baseline_lut::Codebook;
use crate::config::{ConfigError, LabelVariant, RunConfig};
use crate::cvae::{checkpoint_hash, Cvae, CvaeError};
use crate::datasets::{
    generate_synthetic_dataset, load_bop_scene, load_models, write_models, DatasetError,
    DatasetManifest, DirSource, ObjectModel, Split,
};
use crate::eval::{read_results, write_results, Report, ResultRow, AR_LABEL};
use crate::pipeline::{self, PipelineError};
use crate::regression::{Estimator, HeadBundle, RegressionError};

/// Environment variable selecting the compute device. Only `cpu` exists.
pub const DEVICE_VAR: &str = "POSEVAE_DEVICE";

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "posevae", version, about = "Label-conditioned autoencoder pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or import datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the autoencoder or the pose heads.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Estimate poses for the test split.
    Infer(InferArgs),
    /// Baseline estimators.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Score a results file against the test split.
    Evaluate(EvaluateArgs),
    /// Retrain and evaluate the pipeline along one ablation axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Render a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert BOP scene annotations into a dataset directory.
    ImportBop {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// BOP models directory; defaults to `<dir>/models` or `<dir>/../models`.
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; defaults to `paths.data` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum TrainCommand {
    Cvae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Label-embedding variant (only the autoencoder part applies here).
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
    },
    Heads {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cvae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train label-free heads regardless of `heads.use_labels`.
        #[arg(long)]
        no_labels: bool,
    },
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    cvae: PathBuf,
    #[arg(long)]
    heads: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum BaselineCommand {
    /// Nearest-latent lookup table.
    Lut {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cvae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codebook file: loaded if present, otherwise built and saved there.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    Alpha,
    Latent,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Full,
    OriginalCvae,
    NoLabelMlp,
}

impl From<VariantArg> for LabelVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => LabelVariant::Full,
            VariantArg::OriginalCvae => LabelVariant::OriginalCvae,
            VariantArg::NoLabelMlp => LabelVariant::NoLabelMlp,
        }
    }
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Output directory; defaults to `paths.out` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the axis values concurrently.
    #[arg(long)]
    parallel: bool,
}

/// A failed command: exit code plus a one-line diagnostic.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.into(),
        }
    }

    fn data(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.into(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) => EXIT_USAGE,
            e if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: one_line(&e),
        }
    }
}

macro_rules! via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                PipelineError::from(e).into()
            }
        }
    )*};
}

via_pipeline!(
    ConfigError,
    DatasetError,
    CvaeError,
    RegressionError,
    crate::baseline_lut::LutError,
    crate::eval::EvalError
);

impl From<crate::cvae::CheckpointError> for CliError {
    fn from(e: crate::cvae::CheckpointError) -> Self {
        CvaeError::from(e).into()
    }
}

/// The error and its sources joined on one line.
fn one_line(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut src = e.source();
    while let Some(inner) = src {
        let m = inner.to_string();
        if !s.contains(&m) {
            s.push_str(": ");
            s.push_str(&m);
        }
        src = inner.source();
    }
    s.replace('\n', " ")
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error");
            eprintln!("{first} (see --help)");
            return EXIT_USAGE;
        }
    };
    match check_device().and_then(|_| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn check_device() -> CliResult<()> {
    match std::env::var(DEVICE_VAR) {
        Ok(v) if !v.eq_ignore_ascii_case("cpu") => Err(CliError::usage(format!(
            "{DEVICE_VAR}={v} is not available; only `cpu` is supported"
        ))),
        _ => Ok(()),
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Dataset(DatasetCommand::Gen { config, out }) => dataset_gen(config, &out),
        Command::Dataset(DatasetCommand::ImportBop { dir, out, models }) => {
            import_bop(&dir, &out, models)
        }
        Command::Train(TrainCommand::Cvae {
            common,
            out,
            variant,
        }) => train_cvae(&common, &out, variant.into()),
        Command::Train(TrainCommand::Heads {
            common,
            cvae,
            out,
            no_labels,
        }) => train_heads(&common, &cvae, &out, no_labels),
        Command::Infer(a) => infer(&a),
        Command::Baseline(BaselineCommand::Lut {
            common,
            cvae,
            out,
            codebook,
        }) => baseline_lut(&common, &cvae, &out, codebook.as_deref()),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

struct Loaded {
    config: RunConfig,
    data: PathBuf,
    manifest: DatasetManifest,
}

fn load_common(common: &Common) -> CliResult<Loaded> {
    let config = load_config(common.config.as_deref())?;
    let data = common
        .data
        .clone()
        .or_else(|| config.paths.data.clone())
        .ok_or_else(|| CliError::usage("no dataset given: pass --data or set paths.data"))?;
    let manifest = DatasetManifest::load(&data)?;
    Ok(Loaded {
        config,
        data,
        manifest,
    })
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of a dataset's manifest files.
fn dataset_hash(dir: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    let names = std::iter::once("dataset.json").chain(Split::ALL.iter().map(|s| s.file_name()));
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            h.update(name.as_bytes());
            h.update(fs::read(&p).map_err(|e| DatasetError::io(&p, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    options: BTreeMap<&'static str, String>,
    inputs: BTreeMap<&'static str, String>,
    parallel: bool,
    device: &'static str,
}

struct RunInfo<'a> {
    command: &'a str,
    config: &'a RunConfig,
    options: BTreeMap<&'static str, String>,
    inputs: BTreeMap<&'static str, String>,
}

impl<'a> RunInfo<'a> {
    fn new(command: &'a str, config: &'a RunConfig) -> Self {
        Self {
            command,
            config,
            options: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    fn option(mut self, k: &'static str, v: impl ToString) -> Self {
        self.options.insert(k, v.to_string());
        self
    }

    fn input(mut self, k: &'static str, hash: String) -> Self {
        self.inputs.insert(k, hash);
        self
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        let m = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed: self.config.seed,
            config_hash: self.config.hash(),
            config: self.config,
            options: self.options.clone(),
            inputs: self.inputs.clone(),
            parallel: crate::parallel::is_parallel(),
            device: "cpu",
        };
        let text = serde_json::to_string_pretty(&m).expect("serialisable") + "\n";
        fs::write(path, text).map_err(|e| DatasetError::io(path, e))?;
        Ok(())
    }

    /// Writes `<artifact>.run.json`.
    fn write_beside(&self, artifact: &Path) -> CliResult<()> {
        self.write(&suffixed(artifact, ".run.json"))
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| DatasetError::io(path, e))?;
    Ok(())
}

fn dataset_gen(config: Option<PathBuf>, out: &Path) -> CliResult<()> {
    let config = load_config(config.as_deref())?;
    let ds = generate_synthetic_dataset(&config.dataset)?;
    ds.write(out)?;
    log::info!(
        "wrote {} records from {} images to {}",
        ds.manifest.records.len(),
        ds.scenes().len(),
        out.display()
    );
    RunInfo::new("dataset gen", &config).write(&out.join("run.json"))
}

fn import_bop(dir: &Path, out: &Path, models: Option<PathBuf>) -> CliResult<()> {
    let mut manifest = load_bop_scene(dir)?;
    let root = fs::canonicalize(dir).map_err(|e| DatasetError::io(dir, e))?;
    for r in &mut manifest.records {
        r.image = DatasetManifest::resolve(&root, &r.image).display().to_string();
    }
    let models_dir = models.or_else(|| {
        [dir.join("models"), dir.join("../models")]
            .into_iter()
            .find(|p| p.join("models_info.json").exists())
    });
    manifest.write(out)?;
    let config = RunConfig::default();
    let mut info = RunInfo::new("dataset import-bop", &config).input("annotations", dataset_hash(out)?);
    match models_dir {
        Some(m) => {
            let models = load_models(&m)?;
            write_models(&out.join("models"), &models, &[])?;
            info = info.input("models", sha256_file(&m.join("models_info.json"))?);
        }
        None => log::warn!("no models directory found; evaluation will need one at {}/models", out.display()),
    }
    log::info!("imported {} records", manifest.records.len());
    info.write(&out.join("run.json"))
}

fn train_cvae(common: &Common, out: &Path, variant: LabelVariant) -> CliResult<()> {
    let l = load_common(common)?;
    let src = DirSource::new(&l.data);
    let train = pipeline::crop_split(&src, &l.manifest, Split::Train, &l.config, true)?;
    let val = pipeline::crop_split(&src, &l.manifest, Split::Val, &l.config, true)?;
    let cc = pipeline::cvae_config_for(&l.config, &l.manifest, Some(variant));
    let (cvae, log) = pipeline::fit_cvae(&train, &val, &cc, &l.config)?;
    ensure_parent(out)?;
    cvae.save(out)?;
    write_text(&suffixed(out, ".log.csv"), &log.to_csv())?;
    RunInfo::new("train cvae", &l.config)
        .option("variant", variant.name())
        .input("data", dataset_hash(&l.data)?)
        .write_beside(out)
}

fn load_cvae(path: &Path) -> CliResult<(Cvae<f32>, String)> {
    let cvae = Cvae::<f32>::load(path)?;
    Ok((cvae, checkpoint_hash(path)?))
}

fn train_heads(common: &Common, cvae_path: &Path, out: &Path, no_labels: bool) -> CliResult<()> {
    let l = load_common(common)?;
    let (cvae, hash) = load_cvae(cvae_path)?;
    let src = DirSource::new(&l.data);
    let train = pipeline::crop_split(&src, &l.manifest, Split::Train, &l.config, false)?;
    let val = pipeline::crop_split(&src, &l.manifest, Split::Val, &l.config, false)?;
    let use_labels = l.config.heads.use_labels && !no_labels;
    let (heads, logs) = pipeline::fit_heads(&cvae, &hash, &train, &val, &l.config, use_labels)?;
    ensure_parent(out)?;
    heads.save(out)?;
    for log in &logs {
        write_text(&suffixed(out, &format!(".{}.log.csv", log.head.name())), &log.to_csv())?;
    }
    RunInfo::new("train heads", &l.config)
        .option("use_labels", use_labels)
        .input("data", dataset_hash(&l.data)?)
        .input("cvae", hash)
        .write_beside(out)
}

fn infer(a: &InferArgs) -> CliResult<()> {
    let l = load_common(&a.common)?;
    let (cvae, hash) = load_cvae(&a.cvae)?;
    let heads = HeadBundle::load(&a.heads)?;
    heads.check_compatible(&hash)?;
    let heads_hash = sha256_file(&a.heads)?;
    let est = Estimator::new(cvae, heads)?;
    let test = pipeline::crop_split(&DirSource::new(&l.data), &l.manifest, Split::Test, &l.config, false)?;
    let (rows, failures) = pipeline::infer(&est, &test)?;
    if failures > 0 {
        log::warn!("{failures} instances without an estimate");
    }
    ensure_parent(&a.out)?;
    write_results(&a.out, &rows)?;
    RunInfo::new("infer", &l.config)
        .input("data", dataset_hash(&l.data)?)
        .input("cvae", hash)
        .input("heads", heads_hash)
        .write_beside(&a.out)
}

fn baseline_lut(common: &Common, cvae_path: &Path, out: &Path, codebook_path: Option<&Path>) -> CliResult<()> {
    let l = load_common(common)?;
    let (cvae, hash) = load_cvae(cvae_path)?;
    let src = DirSource::new(&l.data);
    let codebook = match codebook_path.filter(|p| p.exists()) {
        Some(p) => {
            let cb = Codebook::load(p)?;
            if cb.cvae_hash != hash {
                return Err(CliError::data(format!(
                    "{}: codebook was built with a different encoder",
                    p.display()
                )));
            }
            cb
        }
        None => {
            let train = pipeline::crop_split(&src, &l.manifest, Split::Train, &l.config, false)?;
            let cb = pipeline::fit_codebook(&cvae, &hash, &train)?;
            if let Some(p) = codebook_path {
                ensure_parent(p)?;
                cb.save(p)?;
                RunInfo::new("baseline lut codebook", &l.config)
                    .input("data", dataset_hash(&l.data)?)
                    .input("cvae", hash.clone())
                    .write_beside(p)?;
            }
            cb
        }
    };
    let test = pipeline::crop_split(&src, &l.manifest, Split::Test, &l.config, false)?;
    let rows: Vec<ResultRow> = pipeline::lut_infer(&cvae, &codebook, &test)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    ensure_parent(out)?;
    write_results(out, &rows)?;
    RunInfo::new("baseline lut", &l.config)
        .input("data", dataset_hash(&l.data)?)
        .input("cvae", hash)
        .input("codebook", hex::encode(Sha256::digest(codebook.to_bytes())))
        .write_beside(out)
}

fn load_dataset_models(data: &Path) -> CliResult<Vec<ObjectModel>> {
    Ok(load_models(&data.join("models"))?)
}

fn write_report(report: &Report, out: &Path) -> CliResult<()> {
    ensure_parent(out)?;
    report.write_json(out)?;
    report.write_bins_csv(&out.with_extension("bins.csv"))?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let l = load_common(&a.common)?;
    let models = load_dataset_models(&l.data)?;
    let rows = read_results(&a.results)?;
    let report = pipeline::evaluate(&l.manifest, &rows, &models, &l.config)?;
    write_report(&report, &a.out)?;
    println!("{AR_LABEL}: {:.4}", report.ar_no_vsd);
    RunInfo::new("evaluate", &l.config)
        .input("data", dataset_hash(&l.data)?)
        .input("results", sha256_file(&a.results)?)
        .write_beside(&a.out)
}

/// One point of an ablation axis.
#[derive(Debug, Clone)]
struct AblationPoint {
    name: String,
    config: RunConfig,
    variant: LabelVariant,
}

fn ablation_points(config: &RunConfig, axis: Axis) -> Vec<AblationPoint> {
    let point = |name: String, config: RunConfig, variant| AblationPoint {
        name,
        config,
        variant,
    };
    match axis {
        Axis::Alpha => config
            .ablation
            .alpha
            .iter()
            .map(|&a| {
                let mut c = config.clone();
                c.cvae.alpha = a;
                point(format!("alpha-{a}"), c, LabelVariant::Full)
            })
            .collect(),
        Axis::Latent => config
            .ablation
            .latent
            .iter()
            .map(|&n| {
                let mut c = config.clone();
                c.cvae.latent_dim = n;
                point(format!("latent-{n}"), c, LabelVariant::Full)
            })
            .collect(),
        Axis::Label => config
            .ablation
            .label
            .iter()
            .map(|&v| point(format!("label-{}", v.name()), config.clone(), v))
            .collect(),
    }
}

struct Splits {
    train: crate::datasets::CropSet,
    val: crate::datasets::CropSet,
    test: crate::datasets::CropSet,
}

/// Trains fresh weights for one ablation point and evaluates them.
fn run_point(
    p: &AblationPoint,
    splits: &Splits,
    l: &Loaded,
    models: &[ObjectModel],
    dir: &Path,
) -> CliResult<Report> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let cc = pipeline::cvae_config_for(&p.config, &l.manifest, Some(p.variant));
    let (cvae, log) = pipeline::fit_cvae(&splits.train, &splits.val, &cc, &p.config)?;
    let ckpt = dir.join("cvae.ckpt");
    cvae.save(&ckpt)?;
    write_text(&suffixed(&ckpt, ".log.csv"), &log.to_csv())?;
    let hash = checkpoint_hash(&ckpt)?;
    let (heads, logs) = pipeline::fit_heads(
        &cvae,
        &hash,
        &splits.train,
        &splits.val,
        &p.config,
        p.variant.head_labels(),
    )?;
    let heads_path = dir.join("heads.json");
    heads.save(&heads_path)?;
    for log in &logs {
        write_text(
            &suffixed(&heads_path, &format!(".{}.log.csv", log.head.name())),
            &log.to_csv(),
        )?;
    }
    let est = Estimator::new(cvae, heads)?;
    let (rows, _) = pipeline::infer(&est, &splits.test)?;
    let results = dir.join("results.csv");
    write_results(&results, &rows)?;
    let report = pipeline::evaluate(&l.manifest, &rows, models, &p.config)?;
    write_report(&report, &dir.join("report.json"))?;
    RunInfo::new("ablate", &p.config)
        .option("point", &p.name)
        .option("variant", p.variant.name())
        .input("data", dataset_hash(&l.data)?)
        .write(&dir.join("run.json"))?;
    Ok(report)
}

/// Comparison table, one row per axis value.
pub fn ablation_table(names: &[String], reports: &[Report]) -> String {
    let mut s = String::from("value,ar_no_vsd,ar_mssd,ar_mspd,mae_centre_px,mae_distance_mm,failures\n");
    for (n, r) in names.iter().zip(reports) {
        s.push_str(&format!(
            "{n},{:.4},{:.4},{:.4},{:.3},{:.3},{}\n",
            r.ar_no_vsd, r.ar_mssd, r.ar_mspd, r.mae_centre_px, r.mae_distance_mm, r.failures
        ));
    }
    s
}

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let l = load_common(&a.common)?;
    let out = a
        .out
        .clone()
        .or_else(|| l.config.paths.out.clone())
        .ok_or_else(|| CliError::usage("no output directory: pass --out or set paths.out"))?;
    let models = load_dataset_models(&l.data)?;
    let src = DirSource::new(&l.data);
    // Crops depend on the seed and crop settings only, never on the axis.
    let splits = Splits {
        train: pipeline::crop_split(&src, &l.manifest, Split::Train, &l.config, true)?,
        val: pipeline::crop_split(&src, &l.manifest, Split::Val, &l.config, true)?,
        test: pipeline::crop_split(&src, &l.manifest, Split::Test, &l.config, false)?,
    };
    let points = ablation_points(&l.config, a.axis);
    if points.is_empty() {
        return Err(CliError::usage("ablation axis has no values"));
    }
    let run = |p: &AblationPoint| run_point(p, &splits, &l, &models, &out.join(&p.name));
    let reports: Vec<CliResult<Report>> = if a.parallel {
        if !crate::parallel::is_parallel() {
            log::warn!("built without the `parallel` feature; running sequentially");
        }
        crate::parallel::map_slice(&points, run)
    } else {
        points.iter().map(run).collect()
    };
    let reports = reports.into_iter().collect::<CliResult<Vec<_>>>()?;
    let names: Vec<String> = points.iter().map(|p| p.name.clone()).collect();
    let axis = match a.axis {
        Axis::Alpha => "alpha",
        Axis::Latent => "latent",
        Axis::Label => "label",
    };
    let table = out.join(format!("ablation-{axis}.csv"));
    let text = ablation_table(&names, &reports);
    write_text(&table, &text)?;
    print!("{text}");
    RunInfo::new("ablate", &l.config)
        .option("axis", axis)
        .input("data", dataset_hash(&l.data)?)
        .write_beside(&table)
}
