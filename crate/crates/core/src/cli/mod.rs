//! `quantcal` command-line interface.

mod config;

pub use config::{DataConfig, OutputConfig, RunConfig, SweepSection};

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{load_cifar_dir, CifarVariant, Dataset, Normalization, Split};
use crate::metrics::bin_bounds;
use crate::model::{load_bundle, save_bundle, Model};
use crate::swap::{run_sweep, SweepConfig, SweepReport};
use crate::trainer::train_arch;
use crate::Error;

pub const THREADS_ENV: &str = "QUANTCAL_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "quantcal",
    version,
    about = "Quantization and calibration analysis for small CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Calibrate, sweep weight bit widths and write report.json.
    Sweep(SweepArgs),
    /// Flatten report.json into plottable CSV files.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "8,7,6,5,4")]
    pub w_bits: Vec<u32>,
    #[arg(long, default_value_t = 8)]
    pub a_bits: u32,
    #[arg(long, default_value_t = 1024)]
    pub calib_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "cifar10")]
    pub variant: CifarVariant,
    /// Confidence bins for reliability and histograms.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = crate::quant::observer::DEFAULT_BINS)]
    pub observer_bins: usize,
    /// Evaluate only the first N test images.
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Per-channel normalization mean, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub mean: Option<Vec<f32>>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub std: Option<Vec<f32>>,
}

/// Files written by the current command, removed again if it fails.
#[derive(Default)]
struct Outputs {
    written: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn create_dir(&mut self, dir: &Path) -> Result<(), Error> {
        if !dir.exists() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    /// Writes through a temporary sibling and renames into place.
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), Error> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.create_dir(parent)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        self.written.push(tmp.clone());
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
            .map_err(|e| Error::io(&tmp, e))?;
        self.written.push(path.to_path_buf());
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn track(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    fn discard(self) {
        for p in self.written.iter().rev() {
            let _ = fs::remove_file(p);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print one JSON object on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            emit_error("usage", &e.to_string());
            return 2;
        }
    };
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            emit_error(e.kind(), &e.to_string());
            1
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message.trim_end() } });
    eprintln!("{line}");
}

/// Caps the global worker pool at `QUANTCAL_THREADS` when set.
pub fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    // A pool that is already initialized keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<(), Error> {
    let mut outputs = Outputs::default();
    let result = match command {
        Command::Train { config } => cmd_train(&config, &mut outputs),
        Command::Sweep(args) => cmd_sweep(&args, &mut outputs),
        Command::Report { input, out_dir } => cmd_report(&input, &out_dir, &mut outputs),
    };
    if result.is_err() {
        outputs.discard();
    }
    result
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn cmd_train(config: &Path, outputs: &mut Outputs) -> Result<(), Error> {
    let cfg = RunConfig::from_json(&read(config)?)?;
    let d = &cfg.data;
    let train = load_cifar_dir(
        &d.dir,
        d.variant,
        d.normalization,
        Split::Train,
        Some(cfg.train.train_samples),
    )?;
    let test = load_cifar_dir(
        &d.dir,
        d.variant,
        d.normalization,
        Split::Test,
        Some(cfg.train.test_samples),
    )?;
    let trained = train_arch(cfg.architecture, &train, &test, &cfg.train)?;

    outputs.create_dir(&cfg.output.model_dir)?;
    outputs.track(
        cfg.output
            .model_dir
            .join(crate::model::bundle::MANIFEST_FILE),
    );
    outputs.track(
        cfg.output
            .model_dir
            .join(crate::model::bundle::WEIGHTS_FILE),
    );
    save_bundle(&trained.model, &cfg.output.model_dir)?;

    let mut log = csv::Writer::from_writer(Vec::new());
    log.write_record(["epoch", "train_loss", "train_acc", "test_acc"])?;
    for e in &trained.log {
        log.serialize((e.epoch, e.train_loss, e.train_acc, e.test_acc))?;
    }
    outputs.write(&cfg.train_log_path(), &finish(log)?)?;

    if let Some(report_path) = &cfg.output.report {
        let s = &cfg.sweep;
        let sweep = SweepConfig {
            w_bits: s.w_bits.clone(),
            a_bits: s.a_bits,
            num_bins: s.num_bins,
            observer_bins: s.observer_bins,
            seed: cfg.seed(),
            ..SweepConfig::default()
        };
        let report = sweep_on_dir(
            &trained.model,
            &d.dir,
            d.variant,
            d.normalization,
            s.calib_samples,
            None,
            sweep,
        )?;
        outputs.write(report_path, report.to_json().as_bytes())?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, outputs: &mut Outputs) -> Result<(), Error> {
    let defaults = Normalization::default();
    let to3 = |v: &Option<Vec<f32>>, d: [f32; 3]| v.as_ref().map_or(d, |v| [v[0], v[1], v[2]]);
    let norm = Normalization {
        mean: to3(&args.mean, defaults.mean),
        std: to3(&args.std, defaults.std),
    };
    norm.validate()?;
    let model = load_bundle(&args.model)?;
    let cfg = SweepConfig {
        w_bits: args.w_bits.clone(),
        a_bits: args.a_bits,
        num_bins: args.bins,
        observer_bins: args.observer_bins,
        seed: args.seed,
        ..SweepConfig::default()
    };
    let report = sweep_on_dir(
        &model,
        &args.data,
        args.variant,
        norm,
        args.calib_samples,
        args.eval_samples,
        cfg,
    )?;
    outputs.write(&args.out, report.to_json().as_bytes())
}

/// Calibrates on the first `calib_samples` training images and evaluates on
/// the test split.
fn sweep_on_dir(
    model: &Model,
    dir: &Path,
    variant: CifarVariant,
    norm: Normalization,
    calib_samples: usize,
    eval_samples: Option<usize>,
    mut cfg: SweepConfig,
) -> Result<SweepReport, Error> {
    if calib_samples == 0 {
        return Err(Error::Config("calib-samples must be positive".into()));
    }
    if model.num_classes() != variant.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but {} has {}",
            model.num_classes(),
            variant.name(),
            variant.num_classes()
        )));
    }
    let calib: Dataset = load_cifar_dir(dir, variant, norm, Split::Calib, Some(calib_samples))?;
    let eval = load_cifar_dir(dir, variant, norm, Split::Test, eval_samples)?;
    cfg.calib_split = format!("train[0..{}]", calib.len());
    Ok(run_sweep(model, &eval, &calib, &cfg)?)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, Error> {
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// The four plot tables, each a pure function of the report.
pub fn report_csvs(report: &SweepReport) -> Result<Vec<(&'static str, Vec<u8>)>, Error> {
    let nb = report.num_bins;
    let mut rel = csv::Writer::from_writer(Vec::new());
    rel.write_record(["bin_lower", "bin_upper", "count", "accuracy", "avg_conf"])?;
    for b in &report.baseline.reliability {
        rel.serialize((b.lower, b.upper, b.count, b.accuracy, b.mean_confidence))?;
    }

    let mut hist = csv::Writer::from_writer(Vec::new());
    hist.write_record(["bin_lower", "bin_upper", "count"])?;
    for (i, &c) in report.baseline.confidence_hist.iter().enumerate() {
        let (lo, hi) = bin_bounds(i, nb);
        hist.serialize((lo, hi, c))?;
    }

    let mut sweep = csv::Writer::from_writer(Vec::new());
    sweep.write_record([
        "w_bits",
        "swap_pct",
        "delta_err_pct",
        "ratio",
        "acc_q",
        "ece_q",
    ])?;
    let mut swapped = csv::Writer::from_writer(Vec::new());
    swapped.write_record(["w_bits", "bin_lower", "bin_upper", "count"])?;
    for e in &report.entries {
        let s = &e.stats;
        sweep.serialize((
            e.w_bits,
            s.swap_pct,
            s.delta_err_pct,
            s.ratio,
            e.accuracy_q,
            e.ece_q,
        ))?;
        for (i, &c) in s.swapped_conf_hist.iter().enumerate() {
            let (lo, hi) = bin_bounds(i, nb);
            swapped.serialize((e.w_bits, lo, hi, c))?;
        }
    }
    Ok(vec![
        ("reliability.csv", finish(rel)?),
        ("conf_hist.csv", finish(hist)?),
        ("sweep.csv", finish(sweep)?),
        ("swapped_hist.csv", finish(swapped)?),
    ])
}

fn cmd_report(input: &Path, out_dir: &Path, outputs: &mut Outputs) -> Result<(), Error> {
    let report = SweepReport::from_json(&read(input)?)?;
    let tables = report_csvs(&report)?;
    outputs.create_dir(out_dir)?;
    for (name, bytes) in tables {
        outputs.write(&out_dir.join(name), &bytes)?;
    }
    Ok(())
}
