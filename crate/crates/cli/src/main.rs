//! `watt`: describe, ablate, train and evaluate WATT-EffNet variants.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use watt_core::data::synthetic::{write_synthetic_tree, CLASS_NAMES};
use watt_core::data::INPUT_SIZE;
use watt_core::model::ArchConfig;
use watt_core::run::{ablation, ablation_csv, default_grid, run_eval, run_train, RunConfig};
use watt_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "watt",
    version,
    about = "Compact attention CNNs: describe, ablate, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and MAC table for one variant.
    Describe {
        #[command(flatten)]
        arch: ArchArgs,
        /// Also write `summary.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Params and MACs over a d×k grid, attention on and off.
    Ablate(AblateArgs),
    /// Train on a class-per-directory tree (or manifest CSV).
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the seeded five-class synthetic set as `out/<class>/*.ppm`.
    Synth {
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ArchArgs {
    /// Number of MBConv stages.
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// Width multiplier.
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long)]
    no_attention: bool,
    /// Images are resized to this side length.
    #[arg(long, default_value_t = INPUT_SIZE)]
    input_size: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Train on the raw class distribution.
    #[arg(long)]
    no_undersample: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated depths; defaults to the reference grid.
    #[arg(long, value_delimiter = ',')]
    d: Vec<usize>,
    /// Comma-separated widths; defaults to the reference grid.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Train every variant on this data and append its test macro F1.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    input_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Calibration(_) => EXIT_USAGE,
        Error::Decode { .. }
        | Error::Ingest(_)
        | Error::Split { .. }
        | Error::Checkpoint(_)
        | Error::Path { .. }
        | Error::Io(_)
        | Error::Json(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::DimensionMismatch { .. } | Error::Contract(_) => 1,
    }
}

fn write(path: PathBuf, contents: String) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Path {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(&path, contents).map_err(|source| Error::Path { path, source })
}

fn arch_config(a: &ArchArgs) -> Result<ArchConfig, Error> {
    let cfg = ArchConfig::watt(a.d, a.k)?
        .with_attention(!a.no_attention)
        .with_input(a.input_size, a.input_size);
    cfg.validate()?;
    Ok(cfg)
}

fn describe(arch: &ArchArgs, out: Option<PathBuf>) -> Result<ExitCode, Error> {
    let summary = arch_config(arch)?.summary()?;
    println!("{summary}");
    if let Some(dir) = out {
        write(dir.join("summary.csv"), summary.to_csv())?;
        let resolved = RunConfig {
            command: "describe".into(),
            d: arch.d,
            k: arch.k,
            attention: !arch.no_attention,
            input_size: arch.input_size,
            out: dir,
            ..Default::default()
        };
        resolved.write()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: &AblateArgs) -> Result<ExitCode, Error> {
    let grid: Vec<(usize, usize)> = if a.d.is_empty() && a.k.is_empty() {
        default_grid()
    } else {
        let ds = if a.d.is_empty() { vec![1] } else { a.d.clone() };
        let ks = if a.k.is_empty() { vec![2] } else { a.k.clone() };
        ds.iter()
            .flat_map(|&d| ks.iter().map(move |&k| (d, k)))
            .collect()
    };
    let mut rows = ablation(&grid)?;
    if let Some(data) = &a.data {
        let root = a.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        for r in &mut rows {
            let cfg = RunConfig {
                command: "ablate".into(),
                d: r.d,
                k: r.k,
                attention: r.attention,
                data: Some(data.clone()),
                input_size: a.input_size,
                seed: a.seed,
                epochs: a.epochs,
                lr: a.lr,
                batch: a.batch,
                out: root.join(format!(
                    "d{}_k{}_{}",
                    r.d,
                    r.k,
                    if r.attention { "att" } else { "noatt" }
                )),
                ..Default::default()
            };
            let art = run_train(&cfg)?;
            if let Some(msg) = &art.outcome.aborted {
                return Err(Error::Numeric(msg.clone()));
            }
            r.f1 = Some(art.test_f1);
        }
    }
    let csv = ablation_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &a.out {
        write(dir.join("ablation.csv"), csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train(arch: &ArchArgs, run: &RunArgs) -> Result<ExitCode, Error> {
    let cfg = RunConfig {
        command: "train".into(),
        d: arch.d,
        k: arch.k,
        attention: !arch.no_attention,
        data: Some(run.data.clone()),
        checkpoint: None,
        input_size: arch.input_size,
        seed: run.seed,
        epochs: run.epochs,
        lr: run.lr,
        batch: run.batch,
        undersample: !run.no_undersample,
        out: run.out.clone(),
    };
    let art = run_train(&cfg)?;
    if !art.load.skipped.is_empty() {
        eprintln!("skipped {} unreadable file(s)", art.load.skipped.len());
    }
    println!("history: {}", art.history.display());
    println!("checkpoint: {}", art.checkpoint.display());
    println!("config: {}", art.config.display());
    if let Some(e) = art.outcome.best_epoch {
        println!(
            "best epoch: {e} (valid macro F1 {:.2}%)",
            art.outcome.best_f1
        );
    }
    println!("test macro F1: {:.2}%", art.test_f1);
    if let Some(msg) = &art.outcome.aborted {
        eprintln!("error: training aborted: {msg}");
        return Ok(ExitCode::from(EXIT_NUMERIC));
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(checkpoint: PathBuf, data: PathBuf, batch: usize, out: PathBuf) -> Result<ExitCode, Error> {
    let cfg = RunConfig {
        command: "eval".into(),
        data: Some(data),
        checkpoint: Some(checkpoint),
        batch,
        out,
        ..Default::default()
    };
    let report = run_eval(&cfg)?;
    for (c, name) in report.class_names.iter().enumerate() {
        println!(
            "{name}: precision {:.4} recall {:.4}",
            report.precision[c], report.recall[c]
        );
    }
    println!("macro F1: {:.2}%", report.macro_f1);
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("WATT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "WATT_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    log::info!("WATT_THREADS={n} ignored in a sequential build");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Describe { arch, out } => describe(&arch, out),
        Command::Ablate(a) => ablate(&a),
        Command::Train { arch, run } => train(&arch, &run),
        Command::Eval {
            checkpoint,
            data,
            batch,
            out,
        } => eval(checkpoint, data, batch, out),
        Command::Synth {
            per_class,
            size,
            seed,
            out,
        } => write_synthetic_tree(&out, per_class, size, seed).map(|()| {
            println!(
                "wrote {} images to {}",
                per_class * CLASS_NAMES.len(),
                out.display()
            );
            ExitCode::SUCCESS
        }),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
