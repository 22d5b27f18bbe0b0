use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fedm_core::harness::overlay::{overlay, OverlayOptions};
use fedm_core::harness::plot::render_svg;
use fedm_core::harness::presets::{preset, PRESET_D, PRESET_LOGISTIC_TAU1};
use fedm_core::harness::validate::run_validation;
use fedm_core::harness::{self, run_experiment_with, ExperimentSpec, HarnessOptions, ResultRow, SweepAxis};
use fedm_core::theory::TheoryConstants;
use fedm_core::FedError;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "fedm", version, about = "Differentially private federated M-estimation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML file.
    Run {
        spec: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// SVG chart of mean MSE against the sweep axis.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Record wall-clock run times (output is then not reproducible).
        #[arg(long)]
        record_timing: bool,
    },
    /// Run a built-in study (fig1 to fig6).
    Sweep {
        #[arg(long)]
        preset: String,
        /// Repetitions per design point (default 100).
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory receiving one SVG chart per experiment.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Print the experiment specs as TOML and exit.
        #[arg(long)]
        print_spec: bool,
        #[arg(long)]
        record_timing: bool,
    },
    /// Run the fast invariant suite.
    Validate,
    /// Add theory curves to an empirical CSV.
    Theory {
        #[arg(long)]
        overlay: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, default_value_t = PRESET_D)]
        d: usize,
        #[arg(long, default_value_t = PRESET_LOGISTIC_TAU1)]
        tau1: f64,
        /// Smoothness constant; defaults to 0.25 (d) for logistic covariates.
        #[arg(long)]
        tau2: Option<f64>,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        /// Treat axis values as iteration counts.
        #[arg(long)]
        iterations_axis: bool,
        /// Keep raw bound values instead of anchoring each curve to the data.
        #[arg(long)]
        no_calibrate: bool,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<FedError>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("FEDM_THREADS") {
        let threads: usize = value.trim().parse().with_context(|| format!("FEDM_THREADS must be a positive integer, got `{value}`"))?;
        if threads == 0 {
            bail!("FEDM_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn write_rows(rows: &[ResultRow], out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => harness::write_csv_file(rows, path)?,
        None => harness::write_csv(rows, io::stdout().lock())?,
    }
    Ok(())
}

fn axis_label(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::ClientsFixedLocalN | SweepAxis::ClientsFixedTotalN => "number of clients m",
        SweepAxis::Iterations => "iterations K",
        SweepAxis::LocalSizeDistribution => "local sample size n",
    }
}

fn write_plot(rows: &[ResultRow], title: &str, axis: &str, path: &Path) -> anyhow::Result<()> {
    fs::write(path, render_svg(rows, title, axis)).with_context(|| format!("writing {}", path.display()))
}

/// Success unless some run failed numerically.
fn status(rows: &[ResultRow]) -> u8 {
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed", rows.len());
        EXIT_NUMERICAL
    } else {
        0
    }
}

fn run(spec_path: &Path, out: Option<&Path>, plot: Option<&Path>, record_timing: bool) -> anyhow::Result<u8> {
    let text = fs::read_to_string(spec_path).map_err(|e| FedError::Io(format!("{}: {e}", spec_path.display())))?;
    let spec = ExperimentSpec::from_toml(&text)?;
    for w in spec.fixed.step_size_warnings(&spec.model) {
        log::warn!("{w}");
    }
    let rows = run_experiment_with(&spec, HarnessOptions { record_timing })?;
    write_rows(&rows, out)?;
    if let Some(p) = plot {
        write_plot(&rows, &spec.name, axis_label(spec.sweep_axis), p)?;
    }
    Ok(status(&rows))
}

fn sweep(name: &str, reps: Option<usize>, out: Option<&Path>, plot: Option<&Path>, print_spec: bool, record_timing: bool) -> anyhow::Result<u8> {
    let specs = preset(name, reps)?;
    if print_spec {
        let mut stdout = io::stdout().lock();
        for s in &specs {
            writeln!(stdout, "# experiment {}\n{}", s.name, s.to_toml())?;
        }
        return Ok(0);
    }
    let mut rows = Vec::new();
    for s in &specs {
        let block = run_experiment_with(s, HarnessOptions { record_timing })?;
        if let Some(dir) = plot {
            fs::create_dir_all(dir)?;
            write_plot(&block, &s.name, axis_label(s.sweep_axis), &dir.join(format!("{}.svg", s.name)))?;
        }
        rows.extend(block);
    }
    write_rows(&rows, out)?;
    Ok(status(&rows))
}

fn validate() -> anyhow::Result<u8> {
    let checks = run_validation();
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}", c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { 0 } else { EXIT_NUMERICAL })
}

#[allow(clippy::too_many_arguments)]
fn theory(
    input: &Path,
    out: Option<&Path>,
    plot: Option<&Path>,
    d: usize,
    tau1: f64,
    tau2: Option<f64>,
    k: usize,
    r: usize,
    iterations_axis: bool,
    no_calibrate: bool,
) -> anyhow::Result<u8> {
    let rows = harness::read_csv_file(input)?;
    let opts = OverlayOptions {
        d,
        tau1,
        tau2: tau2.unwrap_or(0.25 * d as f64),
        k,
        r,
        iterations_axis,
        constants: TheoryConstants::default(),
        calibrate: !no_calibrate,
    };
    let merged = overlay(&rows, &opts)?;
    write_rows(&merged, out)?;
    if let Some(p) = plot {
        let label = if iterations_axis { "iterations K" } else { "axis value" };
        write_plot(&merged, "empirical and theoretical rates", label, p)?;
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    configure_threads()?;
    match cli.command {
        Command::Run { spec, out, plot, record_timing } => run(&spec, out.as_deref(), plot.as_deref(), record_timing),
        Command::Sweep {
            preset,
            reps,
            out,
            plot,
            print_spec,
            record_timing,
        } => sweep(&preset, reps, out.as_deref(), plot.as_deref(), print_spec, record_timing),
        Command::Validate => validate(),
        Command::Theory {
            overlay,
            out,
            plot,
            d,
            tau1,
            tau2,
            k,
            r,
            iterations_axis,
            no_calibrate,
        } => theory(&overlay, out.as_deref(), plot.as_deref(), d, tau1, tau2, k, r, iterations_axis, no_calibrate),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
