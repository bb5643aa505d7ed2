use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctflow_cli::{emit_plotdata, run, selftest, sweep_h, CliError, ExperimentSpec, Manifest};

#[derive(Parser)]
#[command(name = "ctflow", version, about = "Continuous-time flow experiments")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec and write its outputs and manifest.
    Run {
        spec: PathBuf,
        /// Overrides the spec's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run an h_sweep spec over the given step sizes.
    SweepH {
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        grid: Vec<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Turn a manifest's CSV files into long-form `series,x,y,seed` tables.
    Plotdata {
        manifest: PathBuf,
        /// Defaults to `plotdata/` next to the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick property checks of the numerical core.
    Selftest,
}

fn load(path: &Path, output: Option<PathBuf>) -> Result<ExperimentSpec, CliError> {
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(o) = output {
        spec.output = o;
    }
    Ok(spec)
}

fn report(m: &Manifest) {
    println!("{}", serde_json::to_string_pretty(&m.summaries).expect("summaries serialize"));
    eprintln!("wrote {} files", m.files.len() + 1);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run { spec, output } => load(&spec, output).and_then(|s| run(&s)).map(|m| report(&m)),
        Command::SweepH { spec, grid, output } => load(&spec, output).and_then(|s| sweep_h(&s, &grid)).map(|m| report(&m)),
        Command::Plotdata { manifest, out } => emit_plotdata(&manifest, out.as_deref()).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{:<13} {}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                return ExitCode::from(3);
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
