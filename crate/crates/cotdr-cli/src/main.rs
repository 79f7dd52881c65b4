//! Command-line runner for measurement scenarios.
//!
//! `cotdr run <scenario>` executes a campaign and writes the report (and,
//! when requested, per-step correlation trace CSVs) into the output
//! directory. `validate` checks a scenario without running it; `budget`
//! evaluates the closed-form error budget only. Outputs are fully
//! deterministic for a fixed scenario and seed.
//!
//! Exit codes: 0 success, 2 scenario validation failure, 3 measurement
//! failure, 4 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cotdr_core::report::{write_trace_dumps, ReportDoc};
use cotdr_core::scenario::Scenario;
use cotdr_core::Error;

#[derive(Parser)]
#[command(name = "cotdr", version, about = "Correlation-OTDR link delay measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its report.
    Run {
        scenario: PathBuf,
        /// Output directory for the report and trace dumps.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the scenario's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-step correlation trace CSVs next to the report.
        #[arg(long)]
        emit_traces: bool,
        /// Report format.
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Record the wall-clock time in the report's one timestamp field.
        #[arg(long)]
        stamp: bool,
    },
    /// Parse and validate a scenario without running it.
    Validate { scenario: PathBuf },
    /// Evaluate the closed-form error budget only (no simulation).
    Budget {
        scenario: PathBuf,
        /// Also write the budget report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::ScenarioParse(_)
        | Error::ScenarioKey { .. }
        | Error::Topology(_)
        | Error::Probe(_)
        | Error::Waveform(_) => 2,
        Error::Measurement { .. }
        | Error::NoPath(_)
        | Error::Fit(_)
        | Error::WindowClip(_)
        | Error::RateMismatch { .. } => 3,
        Error::Io(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            emit_traces,
            format,
            stamp,
        } => run(&scenario, &out, seed, emit_traces, format, stamp),
        Command::Validate { scenario } => validate(&scenario),
        Command::Budget { scenario, out } => budget(&scenario, out.as_deref()),
    }
}

fn run(
    scenario_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    emit_traces: bool,
    format: Format,
    stamp: bool,
) -> Result<(), Error> {
    let mut scenario = Scenario::load(scenario_path)?;
    if emit_traces {
        scenario.output.emit_traces = true;
    }
    let outcome = scenario.run(seed)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;

    let generated_at = stamp.then(|| {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("unix:{secs}")
    });
    let doc = ReportDoc::from_report(
        scenario.campaign,
        &outcome.report,
        scenario.budget.fit_tol_ps * 1e-12,
        generated_at,
    );

    let (name, contents) = match format {
        Format::Json => ("report.json", doc.to_json_string()),
        Format::Csv => ("report.csv", doc.to_csv_string()),
    };
    let report_path = out_dir.join(name);
    std::fs::write(&report_path, contents)
        .map_err(|e| Error::Io(format!("{}: {e}", report_path.display())))?;

    if scenario.output.emit_traces {
        let names = write_trace_dumps(&outcome.trace_dumps, out_dir)?;
        for n in names {
            println!("wrote {}", out_dir.join(n).display());
        }
    }

    println!("wrote {}", report_path.display());
    println!(
        "total_one_way_fs {} ({} sections)",
        doc.total_one_way_fs,
        doc.sections.len()
    );
    if let Some(a) = doc.asymmetry_fs {
        println!("asymmetry_fs {a}");
    }
    Ok(())
}

fn validate(scenario_path: &Path) -> Result<(), Error> {
    let scenario = Scenario::load(scenario_path)?;
    println!(
        "ok: {} campaign, {} section(s), probe {} bits at {} Gbit/s",
        scenario.campaign.as_str(),
        scenario.link.sections.len(),
        scenario.probe.length_bits,
        scenario.probe.bit_rate_hz / 1e9
    );
    Ok(())
}

fn budget(scenario_path: &Path, out: Option<&Path>) -> Result<(), Error> {
    let scenario = Scenario::load(scenario_path)?;
    let report = scenario.closed_form_budget();
    let doc = ReportDoc::from_report(
        cotdr_core::scenario::CampaignKind::Budget,
        &report,
        scenario.budget.fit_tol_ps * 1e-12,
        None,
    );
    let text = doc.to_json_string();
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
