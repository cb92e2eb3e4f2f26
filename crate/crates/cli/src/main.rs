use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semcf::{Error, ErrorKind};

mod commands;
mod config;
mod manifest;

use commands::Step;
use config::RunConfig;
use manifest::{check_files, RunManifest};

const OUT_DIR_ENV: &str = "SEMCF_OUT_DIR";
const THREADS_ENV: &str = "SEMCF_THREADS";
const DEFAULT_OUT_DIR: &str = "semcf-out";

/// Semantic counterfactual diagnosis of image models in a seeded toy world.
///
/// Every command reads one TOML run config and writes its outputs plus a
/// `<command>.manifest.json` into the output directory.
#[derive(Parser)]
#[command(name = "semcf", version)]
struct Cli {
    /// Worker threads for per-sample work (0 = all cores). Also read from SEMCF_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run config file.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a scalar config field, e.g. `--set search.step_size=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the toy world and record its hash.
    WorldInit(RunArgs),
    /// Train the configured target model.
    TrainTarget(RunArgs),
    /// Estimate the style-to-embedding relevance matrix.
    Probe(RunArgs),
    /// Build the attribute edit directions.
    Direction(RunArgs),
    /// Search one counterfactual and dump its trace and images.
    Counterfactual(RunArgs),
    /// Sensitivity histogram, with the ground-truth histogram alongside.
    Diagnose(RunArgs),
    /// Sensitivity of attribute pairs searched jointly.
    Combine(RunArgs),
    /// Attribute confusion matrix.
    Confusion(RunArgs),
    /// PSNR and SSIM of attribute-space versus raw-style counterfactuals.
    Quality(RunArgs),
    /// Counterfactual training of the target classifier.
    Ct(RunArgs),
    /// Plain versus signed gradient updates across classifiers.
    AblateOpt(RunArgs),
    /// Surviving channels and edit strips across thresholds.
    SweepLambda(RunArgs),
    /// Agreement of histograms across prompt phrasings.
    Stability(RunArgs),
    /// Check every file a manifest lists against its hash.
    VerifyManifest {
        manifest: PathBuf,
        /// Also re-run the command in a scratch directory and compare outputs.
        #[arg(long)]
        rerun: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Verification(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Precondition => 3,
                ErrorKind::Numerical => 4,
                ErrorKind::Io => 1,
            },
            Failure::Verification(_) => 5,
        }
    }
}

fn out_dir(config: &RunConfig) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
    }
}

fn threads(flag: Option<usize>) -> Result<usize, Error> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a thread count, got `{v}`")))
        }
        _ => Ok(0),
    }
}

fn run_step(step: Step, args: &RunArgs) -> Result<(), Failure> {
    let config = RunConfig::load(&args.config, &args.overrides)?;
    let dir = out_dir(&config);
    let manifest = commands::run(step, config, &dir)?;
    for f in &manifest.outputs {
        println!("wrote {}", dir.join(&f.path).display());
    }
    println!("manifest {}", dir.join(RunManifest::file_name(step.name())).display());
    Ok(())
}

fn copy_into(src_base: &Path, dst_base: &Path, rel: &str) -> Result<(), Error> {
    let (src, dst) = (src_base.join(rel), dst_base.join(rel));
    if let Some(parent) = dst.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
    Ok(())
}

fn verify(path: &Path, rerun: bool) -> Result<(), Failure> {
    let manifest = RunManifest::read(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut problems: Vec<String> = check_files(&base, &manifest.inputs)
        .into_iter()
        .map(|m| format!("input {m}"))
        .chain(check_files(&base, &manifest.outputs).into_iter().map(|m| format!("output {m}")))
        .collect();
    if rerun && problems.is_empty() {
        let step = Step::from_name(&manifest.command)
            .ok_or_else(|| Error::Config(format!("manifest names unknown command `{}`", manifest.command)))?;
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        for f in &manifest.inputs {
            copy_into(&base, scratch.path(), &f.path)?;
        }
        let again = commands::run(step, manifest.config.clone(), scratch.path())?;
        if again != manifest {
            problems.extend(check_files(scratch.path(), &manifest.outputs).into_iter().map(|m| format!("rerun {m}")));
            if problems.is_empty() {
                problems.push("rerun produced a different manifest".into());
            }
        }
    }
    if !problems.is_empty() {
        return Err(Failure::Verification(problems));
    }
    let n = manifest.inputs.len() + manifest.outputs.len();
    println!("ok: {n} files match {}{}", path.display(), if rerun { " (re-run reproduced)" } else { "" });
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let step = match &cli.command {
        Command::WorldInit(a) => (Step::WorldInit, a),
        Command::TrainTarget(a) => (Step::TrainTarget, a),
        Command::Probe(a) => (Step::Probe, a),
        Command::Direction(a) => (Step::Direction, a),
        Command::Counterfactual(a) => (Step::Counterfactual, a),
        Command::Diagnose(a) => (Step::Diagnose, a),
        Command::Combine(a) => (Step::Combine, a),
        Command::Confusion(a) => (Step::Confusion, a),
        Command::Quality(a) => (Step::Quality, a),
        Command::Ct(a) => (Step::Ct, a),
        Command::AblateOpt(a) => (Step::AblateOpt, a),
        Command::SweepLambda(a) => (Step::SweepLambda, a),
        Command::Stability(a) => (Step::Stability, a),
        Command::VerifyManifest { manifest, rerun } => {
            let threads = threads(cli.threads)?;
            return semcf::parallel::with_threads(threads, || verify(manifest, *rerun));
        }
    };
    let threads = threads(cli.threads)?;
    semcf::parallel::with_threads(threads, || run_step(step.0, step.1))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Verification(problems) => {
                    for p in problems {
                        eprintln!("mismatch: {p}");
                    }
                }
            }
            ExitCode::from(f.exit_code())
        }
    }
}
