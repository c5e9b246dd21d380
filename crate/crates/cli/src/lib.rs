//! The `sgi` command line: encode, decode, eval and sweep.
//!
//! Settings resolve as flags, then an optional TOML file (`--config`), then
//! built-in defaults. `SGI_THREADS` caps the worker pool (0 or unset = auto).

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sgi_core::trainer::{self, LearningRates};
use sgi_core::{
    decode_model, evaluate, load_image, render_at_scale, save_image, Image, ModelConfig, SgiError, SizeReport,
    TrainConfig,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_CORRUPT: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<SgiError> for CliError {
    fn from(e: SgiError) -> Self {
        let code = match e {
            SgiError::Io(_) | SgiError::Image(_) => EXIT_IO,
            SgiError::Dimension(_) | SgiError::Config(_) => EXIT_USAGE,
            SgiError::Numeric(_) => EXIT_NUMERIC,
            SgiError::Corrupt(_) => EXIT_CORRUPT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sgi", version, about = "Seed-based Gaussian image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an image and write a .sgi stream.
    Encode(EncodeArgs),
    /// Render a .sgi stream to PNG, optionally at another scale.
    Decode(DecodeArgs),
    /// Compare a stream's render with an image and write a JSON report.
    Eval(EvalArgs),
    /// Encode once per value of one parameter and write a CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Total Gaussian count; the seed count is round(gaussians / k).
    #[arg(long)]
    pub gaussians: Option<usize>,
    /// Gaussians per seed [default: 10].
    #[arg(long)]
    pub k: Option<usize>,
    /// Rate weight [default: 0.001].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Pyramid levels [default: 3].
    #[arg(long)]
    pub levels: Option<usize>,
    /// Total optimization steps [default: 15000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Random seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with any of the above plus `decay`, `log_every` and `[lr]`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Per-step training losses as CSV.
    #[arg(long)]
    pub train_log: Option<PathBuf>,
    /// Training summary as JSON.
    #[arg(long)]
    pub train_summary: Option<PathBuf>,
    /// Print progress to stderr.
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Vary {
    Lambda,
    Gaussians,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum)]
    pub vary: Vary,
    /// Comma-separated values, at least two.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gaussians: Option<usize>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub levels: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub decay: Option<bool>,
    pub log_every: Option<usize>,
    pub lr: Option<LearningRates>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved encode settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub gaussians: usize,
    pub k: usize,
    pub train: TrainConfig,
}

pub const DEFAULT_K: usize = 10;

impl Settings {
    pub fn resolve(flags: &TrainFlags) -> CliResult<Self> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let defaults = TrainConfig::default();
        let gaussians = flags
            .gaussians
            .or(file.gaussians)
            .ok_or_else(|| CliError::usage("--gaussians is required (flag or config file)"))?;
        let k = flags.k.or(file.k).unwrap_or(DEFAULT_K);
        let train = TrainConfig {
            steps: flags.steps.or(file.steps).unwrap_or(defaults.steps),
            levels: flags.levels.or(file.levels).unwrap_or(defaults.levels),
            lambda: flags.lambda.or(file.lambda).unwrap_or(defaults.lambda),
            lr: file.lr.unwrap_or(defaults.lr),
            decay: file.decay.unwrap_or(defaults.decay),
            seed: flags.seed.or(file.seed).unwrap_or(defaults.seed),
            log_every: file.log_every.unwrap_or(100),
        };
        let s = Self { gaussians, k, train };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> CliResult<()> {
        if self.k == 0 || self.gaussians < self.k {
            return Err(CliError::usage(format!(
                "need gaussians >= k >= 1 (got {} and {})",
                self.gaussians, self.k
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> usize {
        seed_count(self.gaussians, self.k)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.seeds(), self.k)
    }

    pub fn describe(&self) -> String {
        format!(
            "gaussians={} K={} N={} M={} lambda={} steps={} seed={}",
            self.seeds() * self.k,
            self.k,
            self.seeds(),
            self.train.levels,
            self.train.lambda,
            self.train.steps,
            self.train.seed
        )
    }
}

/// `round(gaussians / k)`, at least one.
pub fn seed_count(gaussians: usize, k: usize) -> usize {
    ((gaussians as f64 / k as f64).round() as usize).max(1)
}

/// Bits per pixel of a `bytes`-long stream for a `width`×`height` image.
pub fn bpp(bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * bytes as f64 / (width * height) as f64
}

/// Finite numbers as-is, infinities as the string `"inf"`.
pub fn json_number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!("inf")
    }
}

fn read_image(path: &Path) -> CliResult<Image> {
    load_image(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> CliResult<std::fs::File> {
    std::fs::File::create(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn size_table(report: &SizeReport) -> String {
    report.to_string()
}

pub fn cmd_encode(args: &EncodeArgs) -> CliResult<()> {
    let settings = Settings::resolve(&args.train)?;
    let image = read_image(&args.input)?;
    println!("{}", settings.describe());
    let verbose = args.verbose;
    let (model, report) = trainer::train_with_progress(&image, &settings.model_config(), &settings.train, |r| {
        if verbose {
            eprintln!(
                "step {:>6} level {} l1 {:.5} entropy {:.0} bits grid {:.0} bits",
                r.step, r.level, r.l_img, r.entropy_bits, r.hash_bits
            );
        }
    })?;
    let encoded = sgi_core::encode_model(&model)?;
    let metrics = evaluate(&image, &encoded.decoded)?;
    write_file(&args.output, &encoded.bytes)?;
    println!("{}", size_table(&encoded.report));
    println!(
        "psnr {} dB  ssim {:.4}  bpp {:.4}  time {:.1} s",
        fmt_psnr(metrics.psnr_db),
        metrics.ssim,
        bpp(encoded.report.total, image.width, image.height),
        report.wall_ms / 1000.0
    );
    if let Some(p) = &args.train_log {
        report.write_csv(create_file(p)?)?;
    }
    if let Some(p) = &args.train_summary {
        let text = serde_json::to_string_pretty(&report.summary_json()).expect("summary serializes");
        write_file(p, text.as_bytes())?;
    }
    Ok(())
}

fn fmt_psnr(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "inf".into()
    }
}

fn read_stream(path: &Path) -> CliResult<sgi_core::SgiModel> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(decode_model(&bytes)?)
}

pub fn cmd_decode(args: &DecodeArgs) -> CliResult<()> {
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(CliError::usage(format!("--scale must be positive, got {}", args.scale)));
    }
    let model = read_stream(&args.input)?;
    let img = render_at_scale(&model, args.scale)?;
    save_image(&img, &args.output)?;
    println!("wrote {}x{} to {}", img.width, img.height, args.output.display());
    Ok(())
}

/// Everything `eval` writes.
pub fn eval_report(image: &Image, stream: &[u8]) -> CliResult<serde_json::Value> {
    let model = decode_model(stream)?;
    let metrics = evaluate(image, &model)?;
    let sizes = sgi_core::codec::size_report(stream)?;
    let components: serde_json::Map<String, serde_json::Value> =
        sizes.rows().into_iter().map(|(name, bytes)| (name.to_string(), bytes.into())).collect();
    Ok(serde_json::json!({
        "width": image.width,
        "height": image.height,
        "psnr_db": json_number(metrics.psnr_db),
        "ssim": metrics.ssim,
        "bytes_total": stream.len(),
        "bytes_per_component": components,
        "bpp": bpp(stream.len(), image.width, image.height),
    }))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let image = read_image(&args.image)?;
    let stream = std::fs::read(&args.stream).map_err(|e| CliError::io(format!("{}: {e}", args.stream.display())))?;
    let report = eval_report(&image, &stream)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&args.report, text.as_bytes())?;
    println!("{text}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bytes: usize,
    pub bpp: f64,
    pub wall_s: f64,
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    if args.values.len() < 2 {
        return Err(CliError::usage("--values needs at least two entries"));
    }
    let image = read_image(&args.image)?;
    let mut rows = Vec::with_capacity(args.values.len());
    for raw in &args.values {
        let raw = raw.trim();
        let mut flags = args.train.clone();
        let value = match args.vary {
            Vary::Lambda => {
                let v: f64 = raw.parse().map_err(|_| CliError::usage(format!("bad lambda value {raw:?}")))?;
                flags.lambda = Some(v);
                v.to_string()
            }
            Vary::Gaussians => {
                let v: usize = raw.parse().map_err(|_| CliError::usage(format!("bad gaussian count {raw:?}")))?;
                flags.gaussians = Some(v);
                v.to_string()
            }
        };
        let s = Settings::resolve(&flags)?;
        let t = Instant::now();
        let c = trainer::compress(&image, &s.model_config(), &s.train)?;
        let row = SweepRow {
            value,
            psnr: c.metrics.psnr_db,
            ssim: c.metrics.ssim,
            bytes: c.encoded.report.total,
            bpp: bpp(c.encoded.report.total, image.width, image.height),
            wall_s: t.elapsed().as_secs_f64(),
        };
        println!(
            "{}={} psnr {} dB ssim {:.4} bytes {} bpp {:.4} ({:.1} s)",
            match args.vary {
                Vary::Lambda => "lambda",
                Vary::Gaussians => "gaussians",
            },
            row.value,
            fmt_psnr(row.psnr),
            row.ssim,
            row.bytes,
            row.bpp,
            row.wall_s
        );
        rows.push(row);
    }
    let mut w = csv::Writer::from_writer(create_file(&args.out)?);
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::io(format!("{}: {e}", args.out.display())))?;
    }
    w.flush().map_err(|e| CliError::io(format!("{}: {e}", args.out.display())))?;
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("SGI_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::usage(format!("SGI_THREADS must be a non-negative integer, got {v:?}")))?;
    if n > 0 {
        // Fails only if a pool already exists, which then stays in charge.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
