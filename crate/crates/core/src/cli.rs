//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 IO or runtime failure, 2 usage error, 3 geometric-fit failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{evaluate, records_csv, report_csv, EvalOptions, FemurMethod, Routing};
use crate::geometry::{
    detect_keypoint_pair, ellipse_circumference, fit_dashed_outline, fit_ellipse_mask, fit_min_rect, largest_component,
    Connectivity, EllipseParams,
};
use crate::network::{load_model, save_model, Model, OrganClass, UNetConfig};
use crate::pgm;
use crate::synth::{
    generate_dataset, load_dataset, Dataset, GenOptions, ScanSample, Split, ANNOT_CROSS_ARM, ANNOT_LINK_RADIUS,
};
use crate::training::{
    gradient_suite, lambda_sweep, train_with, EpochReport, SweepOptions, TrainConfig, ABLATION_LAMBDAS, PIPELINE_TOL,
    PRIMITIVE_TOL,
};
use crate::util::write_atomic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FIT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "fetometry",
    version,
    about = "Multi-task fetal biometry on synthetic ultrasound phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with manifest.
    Gen(GenArgs),
    /// Train a model on the train split and write the model file.
    Train(TrainArgs),
    /// Evaluate a model and print a one-row report.
    Eval(EvalArgs),
    /// Train and evaluate one model per lambda.
    Sweep(SweepArgs),
    /// Fit an ellipse or rectangle to a mask image.
    Fit(FitArgs),
    /// Recover geometry from an annotation image.
    Preprocess(PreprocessArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Fit(_) => "fit",
            Command::Preprocess(_) => "preprocess",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn config(&self) -> Option<&Path> {
        let c = match self {
            Command::Gen(a) => &a.config,
            Command::Train(a) => &a.config,
            Command::Eval(a) => &a.config,
            Command::Sweep(a) => &a.config,
            Command::Fit(a) => &a.config,
            Command::Preprocess(a) => &a.config,
            Command::Gradcheck(a) => &a.config,
        };
        c.path.as_deref()
    }
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// `key = value` file of defaults; flags on the command line win.
    #[arg(long = "config", value_name = "FILE")]
    path: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of subjects.
    #[arg(long, default_value_t = 50)]
    subjects: usize,
    /// Scans per subject.
    #[arg(long = "per-subject", default_value_t = 6)]
    per_subject: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the annotation channel under `annot/`.
    #[arg(long)]
    annotate: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args, Clone, Copy)]
struct ModelArgs {
    /// Number of downsampling steps.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Channels at the first level.
    #[arg(long, default_value_t = 8)]
    base: usize,
}

#[derive(Debug, Args, Clone, Copy)]
struct OptimArgs {
    /// Passes over the train split.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Batch size (at least 2).
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Per-epoch learning-rate multiplier.
    #[arg(long, default_value_t = 0.97)]
    decay: f64,
    /// Seed for initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl OptimArgs {
    fn config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            lr0: self.lr,
            decay_gamma: self.decay,
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Weight of the classification loss, in [0, 1].
    #[arg(long, default_value_t = 0.001, value_parser = parse_lambda)]
    lambda: f64,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    /// `predicted` or `true` (class used to pick the post-processing).
    #[arg(long, default_value = "predicted")]
    routing: Routing,
    /// `rect-length`, `rect-perimeter` or `endpoints`.
    #[arg(long = "femur-method", default_value = "rect-length")]
    femur_method: FemurMethod,
    /// Samples to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Per-sample records CSV.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Also write the report CSV here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Label for the report's lambda column.
    #[arg(long, value_parser = parse_lambda)]
    lambda: Option<f64>,
    /// Inference batch size.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated lambda grid; defaults to the 12-value ablation grid.
    #[arg(long, value_parser = parse_lambda_list)]
    lambdas: Option<LambdaList>,
    /// Report CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// `predicted` or `true`; lambda 0 always routes by the true class.
    #[arg(long, default_value = "predicted")]
    routing: Routing,
    /// `rect-length`, `rect-perimeter` or `endpoints`.
    #[arg(long = "femur-method", default_value = "rect-length")]
    femur_method: FemurMethod,
    /// Worker threads over lambda values.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FitShape {
    Ellipse,
    Rect,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Binary PGM mask; non-zero pixels are set.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_enum)]
    shape: FitShape,
    /// Millimetres per pixel.
    #[arg(long, default_value_t = 0.5, value_parser = parse_positive)]
    spacing: f64,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Annotation PGM (dashed outline or endpoint crosses).
    #[arg(long)]
    annot: PathBuf,
    /// `brain`, `abdomen` or `femur`.
    #[arg(long)]
    organ: OrganClass,
    /// Millimetres per pixel.
    #[arg(long, default_value_t = 0.5, value_parser = parse_positive)]
    spacing: f64,
    /// Dilation radius that links outline dashes.
    #[arg(long, default_value_t = ANNOT_LINK_RADIUS)]
    radius: usize,
    /// Arm length of the cross template.
    #[arg(long, default_value_t = ANNOT_CROSS_ARM)]
    arm: usize,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Number of seeds (1..=N) per check.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Clone)]
struct LambdaList(Vec<f64>);

fn parse_lambda(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("lambda must be in [0, 1], got {v}"))
    }
}

fn parse_lambda_list(s: &str) -> std::result::Result<LambdaList, String> {
    let v = s
        .split(',')
        .map(parse_lambda)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(LambdaList(v))
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

/// Failure that already knows its exit code.
struct Failure {
    code: i32,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let mut msg = e.to_string();
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            if !msg.contains(&s.to_string()) {
                msg.push_str(&format!(": {s}"));
            }
            src = s.source();
        }
        Failure {
            code: exit_code(&e),
            msg,
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Fit(_) => EXIT_FIT,
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Sweep { source, .. } => exit_code(source),
        _ => EXIT_RUNTIME,
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`, got {raw:?}", i + 1));
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key {key:?}", i + 1));
        }
    }
    Ok(out)
}

fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

fn parse(argv: &[OsString]) -> std::result::Result<Cli, clap::Error> {
    let m = command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&m)
}

/// Config-file entries turned into flags placed before the user's own, so
/// the user's flags override them.
fn expand_config(argv: &[OsString], cli: &Cli) -> std::result::Result<Vec<OsString>, Failure> {
    let Some(path) = cli.command.config() else {
        return Ok(argv.to_vec());
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    let entries = parse_config(&text).map_err(|m| usage(format!("{}: {m}", path.display())))?;
    let name = cli.command.name();
    let cmd = command();
    let sub = cmd.find_subcommand(name).expect("known subcommand");
    let mut extra = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config" && key != "help")
            .ok_or_else(|| usage(format!("{}: unknown key {key:?} for `{name}`", path.display())))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => extra.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                _ => {
                    return Err(usage(format!(
                        "{}: {key} expects true or false, got {value:?}",
                        path.display()
                    )))
                }
            }
        } else {
            extra.push(OsString::from(format!("--{key}={value}")));
        }
    }
    // argv = [program, subcommand, user flags...]
    let mut out = argv[..2].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// Runs one invocation, writing normal output to `out` and diagnostics to
/// `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let report_clap = |e: clap::Error, out: &mut dyn Write, err: &mut dyn Write| -> i32 {
        let text = e.render().to_string();
        if e.use_stderr() {
            let _ = write!(err, "{text}");
            EXIT_USAGE
        } else {
            let _ = write!(out, "{text}");
            EXIT_OK
        }
    };
    let first = match parse(&argv) {
        Ok(c) => c,
        Err(e) => return report_clap(e, out, err),
    };
    let cli = match expand_config(&argv, &first) {
        Ok(full) if full.len() != argv.len() => match parse(&full) {
            Ok(c) => c,
            Err(e) => return report_clap(e, out, err),
        },
        Ok(_) => first,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            return f.code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<i32, Failure> {
    match cmd {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sweep(a) => cmd_sweep(a, out, err),
        Command::Fit(a) => cmd_fit(a, out),
        Command::Preprocess(a) => cmd_preprocess(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn io_out(e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn cmd_gen(a: GenArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let opts = GenOptions {
        n_subjects: a.subjects,
        scans_per_subject: a.per_subject,
        size: a.size,
        seed: a.seed,
        annotate: a.annotate,
    };
    let d = generate_dataset(&a.out, &opts)?;
    let count = |s| d.split(s).len();
    let organs = OrganClass::ALL.map(|o| d.samples.iter().filter(|s| s.organ == o).count());
    writeln!(
        out,
        "wrote {} samples to {}: train {}, val {}, test {}; brain {}, abdomen {}, femur {}",
        d.samples.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        organs[0],
        organs[1],
        organs[2]
    )
    .map_err(io_out)?;
    Ok(EXIT_OK)
}

fn unet_for(data: &Dataset, m: ModelArgs) -> Result<UNetConfig> {
    let size = data
        .image_size()
        .ok_or_else(|| Error::Consistency("dataset has no samples".into()))?;
    let cfg = UNetConfig {
        depth: m.depth,
        base_channels: m.base,
        input_size: size,
        ..UNetConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let cfg = a.optim.config(a.lambda);
    cfg.validate()?;
    let data = load_dataset(&a.data)?;
    let unet = unet_for(&data, a.model)?;
    let (train, val) = (data.split(Split::Train), data.split(Split::Val));
    let mut model = Model::new(unet, cfg.seed)?;
    writeln!(out, "{}", EpochReport::CSV_HEADER).map_err(io_out)?;
    let mut write_err = None;
    train_with(&mut model, &train, &val, &cfg, |r| {
        if let Err(e) = writeln!(out, "{}", r.csv_line()).and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_out(e));
    }
    save_model(&model, &a.out)?;
    Ok(EXIT_OK)
}

fn pick(data: &Dataset, split: SplitArg) -> Vec<&ScanSample> {
    match split {
        SplitArg::Train => data.split(Split::Train),
        SplitArg::Val => data.split(Split::Val),
        SplitArg::Test => data.split(Split::Test),
        SplitArg::All => data.samples.iter().collect(),
    }
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let data = load_dataset(&a.data)?;
    let model = load_model(&a.model)?;
    let samples = pick(&data, a.split);
    let opts = EvalOptions {
        routing: a.routing,
        femur: a.femur_method,
        batch_size: a.batch,
        lambda: a.lambda.unwrap_or(f64::NAN),
    };
    let (records, row) = evaluate(&model, &samples, &opts)?;
    if let Some(p) = &a.records {
        write_atomic(p, records_csv(&records).as_bytes())?;
    }
    let report = report_csv(&[row]);
    if let Some(p) = &a.report {
        write_atomic(p, report.as_bytes())?;
    }
    write!(out, "{report}").map_err(io_out)?;
    Ok(EXIT_OK)
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let lambdas = a.lambdas.map(|l| l.0).unwrap_or_else(|| ABLATION_LAMBDAS.to_vec());
    let template = a.optim.config(lambdas[0]);
    template.validate()?;
    let data = load_dataset(&a.data)?;
    let opts = SweepOptions {
        unet: unet_for(&data, a.model)?,
        template,
        eval: EvalOptions {
            routing: a.routing,
            femur: a.femur_method,
            ..EvalOptions::default()
        },
        jobs: a.jobs,
    };
    let (train, val, test) = (
        data.split(Split::Train),
        data.split(Split::Val),
        data.split(Split::Test),
    );
    let runs = lambda_sweep(&train, &val, &test, &lambdas, &opts)?;
    let rows: Vec<_> = runs.iter().map(|r| r.row).collect();
    for r in &rows {
        let _ = writeln!(err, "{r}");
    }
    let report = report_csv(&rows);
    write_atomic(&a.out, report.as_bytes())?;
    write!(out, "{report}").map_err(io_out)?;
    Ok(EXIT_OK)
}

fn ellipse_line(e: &EllipseParams, spacing: f64) -> Result<String> {
    Ok(format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        e.cx,
        e.cy,
        e.a,
        e.b,
        e.theta,
        ellipse_circumference(e)? * spacing
    ))
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let mask = pgm::read_mask(&a.mask)?;
    let line = match a.shape {
        FitShape::Ellipse => ellipse_line(&fit_ellipse_mask(&mask)?, a.spacing)?,
        FitShape::Rect => {
            let r = fit_min_rect(&largest_component(&mask, Connectivity::Eight))?;
            format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.center.0,
                r.center.1,
                r.length,
                r.breadth,
                r.angle,
                r.length * a.spacing
            )
        }
    };
    writeln!(out, "{line}").map_err(io_out)?;
    Ok(EXIT_OK)
}

fn cmd_preprocess(a: PreprocessArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let line = if a.organ.is_elliptical() {
        let outline = pgm::read_mask(&a.annot)?;
        ellipse_line(&fit_dashed_outline(&outline, a.radius)?, a.spacing)?
    } else {
        let img = pgm::read_image(&a.annot)?;
        let p = detect_keypoint_pair(&img, a.arm)?;
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.p1.0,
            p.p1.1,
            p.p2.0,
            p.p2.1,
            p.distance() * a.spacing
        )
    };
    writeln!(out, "{line}").map_err(io_out)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be ≥ 1"));
    }
    let seeds: Vec<u64> = (1..=a.seeds).collect();
    let entries = gradient_suite(&seeds)?;
    let mut all_ok = true;
    for e in &entries {
        if !e.passed() {
            all_ok = false;
            writeln!(
                out,
                "FAIL {} seed {}: {:.3e} > {:.0e}",
                e.name, e.seed, e.max_rel_err, e.tol
            )
            .map_err(io_out)?;
        }
    }
    let worst = |pipeline: bool| {
        entries
            .iter()
            .filter(|e| (e.tol == PIPELINE_TOL) == pipeline)
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    };
    let (prim, pipe) = (worst(false), worst(true));
    let n_prim = entries.iter().filter(|e| e.tol == PRIMITIVE_TOL).count();
    writeln!(out, "primitives: {n_prim} checks, max_rel_err {prim:.3e} (tol 1e-4)").map_err(io_out)?;
    writeln!(
        out,
        "pipeline: {} checks, max_rel_err {pipe:.3e} (tol 1e-3)",
        entries.len() - n_prim
    )
    .map_err(io_out)?;
    let overall = prim.max(pipe);
    if all_ok {
        writeln!(out, "max_rel_err {overall:.3e} ≤ 1e-3: ok").map_err(io_out)?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "max_rel_err {overall:.3e}: FAILED").map_err(io_out)?;
        Ok(EXIT_RUNTIME)
    }
}
