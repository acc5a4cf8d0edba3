//! `capsim`: run, check and fuzz capability traces.
//!
//! Exit codes: 0 when nothing was found, 2 when violations, expectation
//! mismatches or discrepancies were found, 1 on usage, parse or internal
//! errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use capsim_core::fuzz::{run_differential, Discrepancy, FuzzConfig, FuzzReport};
use capsim_core::kernel::{KernelConfig, KernelFault};
use capsim_core::machine::{Machine, MachineConfig, Mode, OnViolation, DEFAULT_POOL_SIZE};
use capsim_core::report::{check_expectations, RunSummary};
use capsim_core::trace::{parse, serialize, TraceProgram};

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_FOUND: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "capsim", version, about = "Revoke-on-use capability simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute a trace and report violations.
    Run {
        path: PathBuf,
        #[command(flatten)]
        machine: MachineFlags,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Match the `expect` directives of traces against actual verdicts.
    Check {
        /// Trace files or directories of `.cap` files.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[command(flatten)]
        machine: MachineFlags,
    },
    /// Run the differential fuzzer.
    Fuzz(FuzzArgs),
}

#[derive(Args, Debug)]
struct MachineFlags {
    #[arg(long, value_enum, default_value_t = ModeArg::Compat)]
    mode: ModeArg,
    /// Default: halt for `run`, continue for `check`.
    #[arg(long, value_enum)]
    on_violation: Option<OnViolationArg>,
    #[arg(long, default_value_t = DEFAULT_POOL_SIZE)]
    pool_size: usize,
    /// Disable the raw pointer relaxation.
    #[arg(long)]
    no_raw_relax: bool,
    /// Disable the interior mutability relaxation.
    #[arg(long)]
    no_cell_relax: bool,
    /// Report ambiguous provenance as a violation instead of a note.
    #[arg(long)]
    ambiguity_fatal: bool,
}

impl MachineFlags {
    fn kernel(&self) -> KernelConfig {
        KernelConfig {
            raw_pointer_relaxation: !self.no_raw_relax,
            cell_relaxation: !self.no_cell_relax,
        }
    }

    fn config(&self, default_on_violation: OnViolation) -> MachineConfig {
        MachineConfig {
            kernel: self.kernel(),
            mode: self.mode.into(),
            on_violation: self.on_violation.map_or(default_on_violation, Into::into),
            pool_size: self.pool_size,
            ambiguity_fatal: self.ambiguity_fatal,
            ..MachineConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct FuzzArgs {
    /// Overridden by the CAPSIM_SEED environment variable.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    traces: usize,
    #[arg(long, default_value_t = 128)]
    events: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Directory for reproducers, written only when something is found.
    #[arg(long, default_value = "capsim-repro")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Compat)]
    mode: ModeArg,
    #[arg(long)]
    no_raw_relax: bool,
    #[arg(long)]
    no_cell_relax: bool,
    /// Skip the second pass on a machine backed by the oracle.
    #[arg(long)]
    no_end_to_end: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Compat,
    Strict,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Compat => Mode::Compat,
            ModeArg::Strict => Mode::Strict,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OnViolationArg {
    Halt,
    Continue,
}

impl From<OnViolationArg> for OnViolation {
    fn from(o: OnViolationArg) -> Self {
        match o {
            OnViolationArg::Halt => OnViolation::Halt,
            OnViolationArg::Continue => OnViolation::Continue,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    SkipDisconnect,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    let result = match cli.command {
        Command::Run { path, machine, report } => cmd_run(&path, &machine, report),
        Command::Check { paths, machine } => cmd_check(&paths, &machine),
        Command::Fuzz(args) => cmd_fuzz(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn load(path: &Path) -> Result<TraceProgram> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse(&text).map_err(|e| anyhow::anyhow!("{}:{e}", path.display()))
}

fn cmd_run(path: &Path, flags: &MachineFlags, format: ReportFormat) -> Result<u8> {
    let program = load(path)?;
    let mut machine = Machine::new(flags.config(OnViolation::Halt));
    machine.capture_trees(true);
    let start = Instant::now();
    let outcome = machine.run(&program).with_context(|| path.display().to_string())?;
    let summary = RunSummary::new(
        path.display().to_string(),
        &program,
        outcome,
        machine.diagnostics(),
        machine.stats(),
        start.elapsed(),
    );
    match format {
        ReportFormat::Text => print!("{}", summary.render_text()),
        ReportFormat::Json => println!("{}", summary.render_json()),
    }
    Ok(if summary.is_clean() { EXIT_OK } else { EXIT_FOUND })
}

fn collect_traces(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("cannot list {}", path.display()))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "cap"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    if files.is_empty() {
        bail!("no .cap files found");
    }
    Ok(files)
}

fn cmd_check(paths: &[PathBuf], flags: &MachineFlags) -> Result<u8> {
    let files = collect_traces(paths)?;
    let config = flags.config(OnViolation::Continue);
    let mut errors = 0;
    let mut failed = 0;
    for file in &files {
        let program = match load(file) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("error: {e:#}");
                errors += 1;
                continue;
            }
        };
        let mut machine = Machine::new(config);
        let outcome = match machine.run(&program) {
            Ok(o) => o,
            Err(e) => {
                eprintln!("error: {}: {e}", file.display());
                errors += 1;
                continue;
            }
        };
        let expectations = program.events.iter().filter(|e| e.expect.is_some()).count();
        let mismatches = check_expectations(&program, &outcome, machine.diagnostics());
        if mismatches.is_empty() {
            println!("ok    {} ({expectations} expectations)", file.display());
        } else {
            failed += 1;
            println!("FAIL  {}", file.display());
            for m in &mismatches {
                println!("  {}:{m}", file.display());
            }
        }
    }
    println!(
        "{} files, {} passed, {failed} failed, {errors} errors",
        files.len(),
        files.len() - failed - errors
    );
    Ok(if errors > 0 {
        EXIT_ERROR
    } else if failed > 0 {
        EXIT_FOUND
    } else {
        EXIT_OK
    })
}

#[derive(Serialize)]
struct ReproSummary<'a> {
    seed: u64,
    traces: u64,
    events: u64,
    discrepancies: Vec<ReproEntry<'a>>,
}

#[derive(Serialize)]
struct ReproEntry<'a> {
    trace_index: u64,
    kind: String,
    step: Option<usize>,
    kernel_verdict: Option<&'a str>,
    oracle_verdict: Option<&'a str>,
    detail: &'a str,
    trace_file: String,
    shrunk_file: String,
    shrunk_events: usize,
}

fn seed_from_env(flag: u64) -> Result<u64> {
    match std::env::var("CAPSIM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("CAPSIM_SEED is not an unsigned integer: `{v}`")),
        Err(_) => Ok(flag),
    }
}

fn cmd_fuzz(args: &FuzzArgs) -> Result<u8> {
    let config = FuzzConfig {
        seed: seed_from_env(args.seed)?,
        trace_count: args.traces,
        events_per_trace: args.events,
        kernel: KernelConfig {
            raw_pointer_relaxation: !args.no_raw_relax,
            cell_relaxation: !args.no_cell_relax,
        },
        mode: args.mode.into(),
        end_to_end: !args.no_end_to_end,
        jobs: args.jobs,
        fault: args.inject_fault.map(|f| match f {
            FaultArg::SkipDisconnect => KernelFault::SkipDisconnect,
        }),
        ..FuzzConfig::default()
    };
    let start = Instant::now();
    let report = run_differential(&config);
    let elapsed = start.elapsed();
    let summary_path = if report.is_clean() {
        None
    } else {
        Some(write_reproducers(&args.out, &report)?)
    };
    match args.report {
        ReportFormat::Text => print_fuzz_text(&config, &report, elapsed.as_secs_f64(), summary_path.as_deref()),
        ReportFormat::Json => {
            let json = serde_json::json!({
                "seed": report.seed,
                "traces": report.traces,
                "events": report.events,
                "kernel_ops": report.kernel_ops,
                "traces_with_rejection": report.traces_with_rejection,
                "verdicts": report.verdicts,
                "caps_created": report.caps_created,
                "caps_invalidated": report.caps_invalidated,
                "discrepancies": report.discrepancies.len(),
                "summary": summary_path.as_ref().map(|p| p.display().to_string()),
            });
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
    }
    Ok(if report.is_clean() { EXIT_OK } else { EXIT_FOUND })
}

fn print_fuzz_text(config: &FuzzConfig, report: &FuzzReport, secs: f64, summary: Option<&Path>) {
    println!(
        "seed {} ({}): {} traces, {} events, {} kernel operations in {secs:.2}s",
        config.seed, config.kernel, report.traces, report.events, report.kernel_ops
    );
    println!(
        "traces with a rejected event: {} ({:.1}%)",
        report.traces_with_rejection,
        100.0 * report.rejection_rate()
    );
    println!(
        "capabilities: {} created, {} invalidated",
        report.caps_created, report.caps_invalidated
    );
    println!("verdicts:");
    for (kind, count) in &report.verdicts {
        println!("  {kind:<26} {count}");
    }
    if report.is_clean() {
        println!("no discrepancies");
    } else {
        println!("{} discrepancies:", report.discrepancies.len());
        for d in &report.discrepancies {
            println!(
                "  trace {}: {} at step {} ({} -> {} events): {}",
                d.trace_index,
                d.finding.kind,
                d.finding.step.map_or("-".into(), |s| s.to_string()),
                d.trace.len(),
                d.shrunk.len(),
                d.finding.detail
            );
        }
        if let Some(path) = summary {
            println!("reproducers written; summary at {}", path.display());
        }
    }
}

fn reproducer_text(d: &Discrepancy, program: &TraceProgram) -> String {
    let mut header = format!(
        "# seed {} trace {}: {} at step {}\n# {}\n",
        d.seed,
        d.trace_index,
        d.finding.kind,
        d.finding.step.map_or("-".into(), |s| s.to_string()),
        d.finding.detail
    );
    if let (Some(k), Some(o)) = (&d.finding.kernel_verdict, &d.finding.oracle_verdict) {
        header.push_str(&format!("# kernel: {k}\n# oracle: {o}\n"));
    }
    header + &serialize(program)
}

fn write_reproducers(dir: &Path, report: &FuzzReport) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut entries = Vec::new();
    for d in &report.discrepancies {
        let full = dir.join(format!("trace-{}.cap", d.trace_index));
        let shrunk = dir.join(format!("trace-{}.min.cap", d.trace_index));
        fs::write(&full, reproducer_text(d, &d.trace))?;
        fs::write(&shrunk, reproducer_text(d, &d.shrunk))?;
        entries.push(ReproEntry {
            trace_index: d.trace_index,
            kind: d.finding.kind.to_string(),
            step: d.finding.step,
            kernel_verdict: d.finding.kernel_verdict.as_deref(),
            oracle_verdict: d.finding.oracle_verdict.as_deref(),
            detail: &d.finding.detail,
            trace_file: full.display().to_string(),
            shrunk_file: shrunk.display().to_string(),
            shrunk_events: d.shrunk.len(),
        });
    }
    let summary = ReproSummary {
        seed: report.seed,
        traces: report.traces,
        events: report.events,
        discrepancies: entries,
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    Ok(path)
}
