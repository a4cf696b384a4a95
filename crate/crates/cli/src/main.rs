use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvscan::artifacts::{write_json, Run};
use mvscan::config::RunConfig;
use mvscan::error::{CliError, CliResult};
use mvscan::pipeline::{run_chain, run_pipeline, Command, GradcamArgs};
use mvscan::synth::{generate_synthetic, SyntheticSpec};
use mvscan_core::cohort::View;

#[derive(Debug, Parser)]
#[command(name = "mvscan", version, about = "Multi-view MRI scan classification pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set tune.max_trials=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for data loading and per-fold work.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Validate the manifest and record cohort counts.
    Ingest,
    /// Patient-grouped stratified train/validation/test split.
    Split,
    /// Hyperband search per view and architecture.
    Tune,
    /// Stratified k-fold cross-validation of the tuned candidates.
    Cv,
    /// Pick one architecture per view from the CV results.
    Select,
    /// Retrain the selected architecture on the train partition.
    Retrain,
    /// Ensemble, calibrate the threshold and score the test partition.
    Evaluate,
    /// Run every stage from ingest to evaluate.
    All,
    /// Grad-CAM overlay for one slice of one study.
    Gradcam {
        #[arg(long)]
        study: String,
        #[arg(long)]
        view: View,
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Domain pretraining and architecture screening.
    Pretrain {
        #[arg(long)]
        profile: PathBuf,
    },
    /// Generate a synthetic cohort with planted lesions.
    Synth {
        /// Spec file (TOML); flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_studies: Option<usize>,
        #[arg(long)]
        positive_fraction: Option<f64>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        slices: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn synth(
    spec_path: Option<PathBuf>,
    n: Option<usize>,
    f: Option<f64>,
    views: Option<usize>,
    slices: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
) -> CliResult<()> {
    let mut spec: SyntheticSpec = match &spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    spec.n_studies = n.unwrap_or(spec.n_studies);
    spec.positive_fraction = f.unwrap_or(spec.positive_fraction);
    spec.views = views.unwrap_or(spec.views);
    spec.slices = slices.unwrap_or(spec.slices);
    spec.seed = seed.unwrap_or(spec.seed);
    let (manifest, lesions) = generate_synthetic(&spec, &out)?;
    write_json(&out.join("synth.json"), &spec)?;
    println!("wrote {} studies ({} positive, {} with lesions) to {}", manifest.len(), manifest.positives(), lesions.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let g = cli.global;
    if let Some(n) = g.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(format!("--workers: {e}")))?;
    }
    let command = match cli.command {
        Cmd::Synth { spec, n_studies, positive_fraction, views, slices, out } => {
            return synth(spec, n_studies, positive_fraction, views, slices, g.seed, out);
        }
        Cmd::Ingest => Command::Ingest,
        Cmd::Split => Command::Split,
        Cmd::Tune => Command::Tune,
        Cmd::Cv => Command::Cv,
        Cmd::Select => Command::Select,
        Cmd::Retrain => Command::Retrain,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Gradcam { study, view, slice, out } => Command::Gradcam(GradcamArgs { study, view, slice, out }),
        Cmd::Pretrain { profile } => Command::Pretrain { profile },
        Cmd::All => {
            let run = Run::new(load_config(&g)?);
            for p in run_chain(&run)? {
                println!("{}", p.display());
            }
            return Ok(());
        }
    };
    let run = Run::new(load_config(&g)?);
    for p in run_pipeline(&run, &command)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn load_config(g: &Global) -> CliResult<RunConfig> {
    let mut overrides = g.set.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &g.out_dir {
        overrides.push(format!("out_dir={:?}", o.to_string_lossy()));
    }
    RunConfig::load(g.config.as_deref(), &overrides)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
