//! `pllkit` command line. [`run`] parses arguments, executes one stage and
//! returns the process exit code: 0 on success, 2 for usage, configuration,
//! format and I/O errors, 3 for numerical failures.

pub mod config;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pllkit::formats::{write_labels_file, write_matrix_file};
use pllkit::synth::{gaussian_blobs, noisy_text, BlobSpec};
use pllkit::{Error, Result};

use crate::config::{ExperimentConfig, Overrides};
use crate::stages::Experiment;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "pllkit",
    version,
    about = "Partial-label learning on frozen embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate candidate sets (and the long-tail subsample when configured).
    Gen(StageArgs),
    /// Restrict candidate sets to the zero-shot top-k.
    Filter(StageArgs),
    /// Train the classifier.
    Train(StageArgs),
    /// Evaluate a trained model on the test split.
    Eval(StageArgs),
    /// Run every configured stage in order.
    Pipeline(StageArgs),
    /// Write a synthetic Gaussian-blob experiment.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl StageArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            eta: self.eta,
            gamma: self.gamma,
            k: self.k,
            objective: self.objective.clone(),
            seed: self.seed,
            epochs: self.epochs,
        }
    }

    fn experiment(&self) -> Result<Experiment> {
        let o = self.overrides();
        Ok(Experiment::new(
            ExperimentConfig::load(&self.config, &o)?,
            o.describe(),
        ))
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory for the fixture files and `exp.toml`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// `PLL_THREADS` sizes the worker pool; unset or 0 means one per core.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PLL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Error::config(format!(
            "PLL_THREADS must be a non-negative integer, got {raw:?}"
        ))
    })?;
    // a second call in the same process finds the pool already built
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

const SYNTH_CONFIG: &str = r#"seed = 0
out_dir = "out"

[paths]
features = "features.pllf"
labels = "labels.plly"
text_embeddings = "text.pllf"
test_features = "test_features.pllf"
test_labels = "test_labels.plly"

[gen]
strategy = "fps"
eta = 0.3

[filter]
k = 5

[train]
objective = "proden"
epochs = 10
"#;

fn write_synth(args: &SynthArgs) -> Result<()> {
    let out = &args.out;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    let spec = BlobSpec {
        k: args.classes,
        d: args.dim,
        per_class: args.per_class,
        separation: 4.0,
        noise: 1.0,
        offset: 0.0,
        seed: args.seed,
    };
    if spec.k < 2 || spec.d < spec.k || spec.per_class == 0 {
        return Err(Error::config(format!(
            "synth needs 2 <= classes <= dim and per_class >= 1 (got K={}, d={})",
            spec.k, spec.d
        )));
    }
    let train = gaussian_blobs(&spec);
    let test = gaussian_blobs(&BlobSpec {
        per_class: spec.per_class.div_ceil(2),
        seed: args.seed.wrapping_add(1),
        ..spec
    });
    let text = noisy_text(&train.means, 0.25, args.seed);
    let write = |name: &str, m: &ndarray::Array2<f32>| write_matrix_file(m, out.join(name));
    write("features.pllf", train.features.rows())?;
    write("test_features.pllf", test.features.rows())?;
    write("text.pllf", text.rows())?;
    write_labels_file(&train.labels, spec.k, out.join("labels.plly"))?;
    write_labels_file(&test.labels, spec.k, out.join("test_labels.plly"))?;
    let cfg_path = out.join("exp.toml");
    fs::write(&cfg_path, SYNTH_CONFIG).map_err(|source| Error::Io {
        path: cfg_path.clone(),
        source,
    })?;
    println!("wrote {}", cfg_path.display());
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<()> {
    init_threads()?;
    match cmd {
        Command::Gen(a) => a.experiment()?.gen(),
        Command::Filter(a) => a.experiment()?.filter(),
        Command::Train(a) => a.experiment()?.train(),
        Command::Eval(a) => a.experiment()?.eval(),
        Command::Pipeline(a) => a.experiment()?.pipeline(),
        Command::Synth(a) => write_synth(a),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Convenience for tests: the synth fixture's config path under `dir`.
pub fn synth_config_path(dir: &Path) -> PathBuf {
    dir.join("exp.toml")
}
