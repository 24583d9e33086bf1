//! The `dsnsim` command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
//! 3 malformed input file, 4 more anomalies than `--max-anomalies`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::mmu::{build_register_file, virtualization_cost, RegisterFile, RegisterOutcome, WalkMode, WorkloadCounters};
use crate::report::{self, emit, segment_histogram, OutputFormat, SimulationReport};
use crate::scheduler::{MachineView, ONE_WEEK};
use crate::segment::{AllocationPolicy, SegmentDescriptor};
use crate::sim::{self, SimConfig, SimVariant};
use crate::trace::{self, FleetSpec, SyntheticParams, TimeDistribution, TraceError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_ANOMALIES: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dsnsim", version, about = "Direct-segment VM memory simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a start/stop trace against a fleet.
    Replay(ReplayArgs),
    /// Start every VM of a cluster snapshot at once, then replay.
    Bootstorm(BootstormArgs),
    /// Write a synthetic trace.
    GenTrace(GenTraceArgs),
    /// Translate a guest physical address through a DS-n register file.
    Translate(TranslateArgs),
    /// Print the memory virtualization cost of a workload as JSON.
    Costmodel(CostmodelArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Opt1,
    Opt2,
    Dynamic,
    /// Every variant, each in its own output files.
    All,
}

impl VariantArg {
    fn variants(self) -> Vec<SimVariant> {
        match self {
            VariantArg::Baseline => vec![SimVariant::BaseLine],
            VariantArg::Opt1 => vec![SimVariant::ImprovPlacementOpt1],
            VariantArg::Opt2 => vec![SimVariant::ImprovPlacementOpt2],
            VariantArg::Dynamic => vec![SimVariant::DynamicOptionSelec],
            VariantArg::All => SimVariant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
    Plotdata,
}

impl From<FormatArg> for OutputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Json => OutputFormat::Json,
            FormatArg::Plotdata => OutputFormat::Plotdata,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Opt1,
    Opt2,
}

impl From<PolicyArg> for AllocationPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Opt1 => AllocationPolicy::Opt1,
            PolicyArg::Opt2 => AllocationPolicy::Opt2,
        }
    }
}

/// Options shared by the simulation subcommands.
#[derive(Debug, Args)]
pub struct SimArgs {
    /// Placement and allocation variant.
    #[arg(long, value_enum, default_value = "dynamic")]
    pub variant: VariantArg,
    /// Largest segment count that still runs in DS-n mode (1..=8).
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Starting option of the dynamic variant.
    #[arg(long, value_enum, default_value = "opt1")]
    pub policy: PolicyArg,
    /// Hours of simulated time between option reselections.
    #[arg(long = "period-hours", default_value_t = (ONE_WEEK / 3600) as f64)]
    pub period_hours: f64,
    /// Seed recorded in the report.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; a summary is printed when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// Record allocator wall time (reports are then not reproducible).
    #[arg(long)]
    pub timing: bool,
    /// Exit with status 4 when a run records more anomalies than this.
    #[arg(long = "max-anomalies")]
    pub max_anomalies: Option<usize>,
    /// Runs to execute in parallel with `--variant all`.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Trace CSV: vm_id,kind,time,cores,memory_bytes.
    #[arg(long)]
    pub trace: PathBuf,
    /// Fleet TOML file.
    #[arg(long)]
    pub fleet: PathBuf,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Args)]
pub struct BootstormArgs {
    /// Snapshot CSV: vm_id,cores,memory_bytes,host_id,host_ram_bytes,host_cores.
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Fleet TOML file replacing the snapshot's own hosts.
    #[arg(long)]
    pub fleet: Option<PathBuf>,
    /// Simulated second at which every VM stops.
    #[arg(long, default_value_t = 3600)]
    pub horizon: u64,
    /// Bytes reserved per host when the fleet comes from the snapshot.
    #[arg(long = "reserved-bytes", default_value_t = 0)]
    pub reserved_bytes: u64,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, default_value_t = 1000)]
    pub vms: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flavor CSV (cores,memory_bytes,weight); fourteen built-in flavors when absent.
    #[arg(long)]
    pub flavors: Option<PathBuf>,
    /// `const:S`, `exp:MEAN`, `uniform:LOW:HIGH` (seconds).
    #[arg(long = "inter-arrival", default_value = "exp:60")]
    pub inter_arrival: String,
    /// As `--inter-arrival`, or `never`.
    #[arg(long, default_value = "exp:86400")]
    pub lifetime: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Register file (`n`, `guest_bases`, `host_bases`, `limit`); mutually
    /// exclusive with `--segments`.
    #[arg(long, required_unless_present = "segments", conflicts_with = "segments")]
    pub registers: Option<PathBuf>,
    /// Host segments `base-limit,base-limit,...` to build registers from.
    #[arg(long)]
    pub segments: Option<String>,
    /// DS-n threshold used with `--segments`.
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Guest physical address, decimal or 0x-prefixed hex.
    #[arg(long, value_parser = parse_u64_arg)]
    pub gpa: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Native,
    Dsn,
    Ept,
    Shadow,
    /// DS-n, EPT and shadow paging.
    All,
}

#[derive(Debug, Args)]
pub struct CostmodelArgs {
    /// Counter file (`name = value` lines).
    #[arg(long)]
    pub counters: PathBuf,
    #[arg(long, value_enum, default_value = "dsn")]
    pub mode: ModeArg,
}

fn parse_u64_arg(s: &str) -> Result<u64, String> {
    crate::kvfile::parse_u64(s)
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn parse(path: &Path, err: impl std::fmt::Display) -> Self {
        Self { code: EXIT_PARSE, message: format!("{}: {err}", path.display()) }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self { code: EXIT_IO, message: format!("{}: {err}", path.display()) }
    }
}

fn trace_failure(path: &Path, err: TraceError) -> Failure {
    match err {
        TraceError::Io(e) => Failure::io(path, e),
        TraceError::Csv(e) if e.is_io_error() => Failure::io(path, e),
        TraceError::InvalidFleet(_) | TraceError::InvalidParams(_) | TraceError::Alloc(_) => {
            Failure { code: EXIT_USAGE, message: format!("{}: {err}", path.display()) }
        }
        other => Failure::parse(path, other),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn open(path: &Path) -> Result<fs::File, Failure> {
    fs::File::open(path).map_err(|e| Failure::io(path, e))
}

/// Runs the command line with `args` (program name first). Returns the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                stdout.write_all(rendered.as_bytes())
            } else {
                stderr.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Replay(a) => cmd_replay(&a, stdout, stderr),
        Command::Bootstorm(a) => cmd_bootstorm(&a, stdout, stderr),
        Command::GenTrace(a) => cmd_gen_trace(&a, stdout),
        Command::Translate(a) => cmd_translate(&a, stdout),
        Command::Costmodel(a) => cmd_costmodel(&a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

/// Entry point for the binary.
pub fn main_from_env() -> i32 {
    run(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock())
}

fn sim_config(args: &SimArgs) -> Result<SimConfig, Failure> {
    if !(1..=crate::mmu::MAX_SEGMENTS).contains(&args.n) {
        return Err(Failure::usage(format!("--n must be in 1..={}", crate::mmu::MAX_SEGMENTS)));
    }
    if !(args.period_hours > 0.0 && args.period_hours.is_finite()) {
        return Err(Failure::usage("--period-hours must be positive"));
    }
    if args.jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    Ok(SimConfig {
        n: args.n,
        initial_policy: args.policy.into(),
        reselect_period: ((args.period_hours * 3600.0).round() as u64).max(1),
        measure_latency: args.timing,
        seed: args.seed,
        ..SimConfig::default()
    })
}

fn load_fleet(path: &Path) -> Result<Vec<MachineView>, Failure> {
    let spec = FleetSpec::from_toml_str(&read(path)?).map_err(|e| trace_failure(path, e))?;
    trace::build_fleet(&spec).map_err(|e| trace_failure(path, e))
}

fn cmd_replay(args: &ReplayArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, Failure> {
    let config = sim_config(&args.sim)?;
    let fleet = load_fleet(&args.fleet)?;
    let events = trace::parse_trace(open(&args.trace)?).map_err(|e| trace_failure(&args.trace, e))?;
    simulate(&events, &fleet, &args.sim, &config, stdout, stderr)
}

fn cmd_bootstorm(args: &BootstormArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, Failure> {
    let config = sim_config(&args.sim)?;
    let snapshot = trace::parse_snapshot(open(&args.snapshot)?).map_err(|e| trace_failure(&args.snapshot, e))?;
    let fleet = match &args.fleet {
        Some(path) => {
            let _ = writeln!(stderr, "note: hosts from {} replace the snapshot's hosts", path.display());
            load_fleet(path)?
        }
        None => {
            trace::fleet_from_snapshot(&snapshot, args.reserved_bytes).map_err(|e| trace_failure(&args.snapshot, e))?
        }
    };
    if fleet.is_empty() {
        return Err(Failure::usage("the fleet has no machines"));
    }
    let events = trace::derive_bootstorm(&snapshot, args.horizon);
    simulate(&events, &fleet, &args.sim, &config, stdout, stderr)
}

fn simulate(
    events: &[trace::VmEvent],
    fleet: &[MachineView],
    args: &SimArgs,
    config: &SimConfig,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32, Failure> {
    let variants = args.variant.variants();
    let reports =
        run_variants(events, fleet, &variants, config, args.jobs).map_err(|e| Failure::usage(e.to_string()))?;
    let mut code = EXIT_OK;
    for report in &reports {
        match &args.out {
            Some(dir) => {
                for path in emit(report, args.format.into(), dir).map_err(|e| Failure::io(dir, e))? {
                    let _ = writeln!(stdout, "{}", path.display());
                }
            }
            None => print_summary(report, stdout),
        }
        for a in &report.anomalies {
            let _ = writeln!(stderr, "anomaly [{}] t={} vm={}: {}", report.variant, a.time, a.vm_id, a.reason);
        }
        if args.max_anomalies.is_some_and(|max| report.anomalies.len() > max) {
            let _ = writeln!(stderr, "error: {} anomalies in the {} run", report.anomalies.len(), report.variant);
            code = EXIT_ANOMALIES;
        }
    }
    Ok(code)
}

/// One report per variant, in `variants` order, using up to `jobs` threads.
pub fn run_variants(
    events: &[trace::VmEvent],
    fleet: &[MachineView],
    variants: &[SimVariant],
    config: &SimConfig,
    jobs: usize,
) -> Result<Vec<SimulationReport>, crate::segment::AllocError> {
    let mut out = Vec::with_capacity(variants.len());
    for batch in variants.chunks(jobs.max(1)) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = batch.iter().map(|&v| s.spawn(move || sim::run(events, fleet, v, config))).collect();
            handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn print_summary(report: &SimulationReport, out: &mut dyn Write) {
    let h = segment_histogram(report);
    let [p1, p2, p3, p4] = h.as_array().map(report::format_pct);
    let _ = writeln!(
        out,
        "{}: starts={} placed={} rejected={} anomalies={} dsn={} k1={p1} k2={p2} k3={p3} k>3={p4}",
        report.variant,
        report.start_count,
        report.records.len(),
        report.rejections.len(),
        report.anomalies.len(),
        report.dsn_count(),
    );
    if let Some(l) = report::latency_stats(&report.latency_samples_ms()) {
        let _ = writeln!(out, "{}: alloc latency mean={:.6} ms stdev={:.6} ms", report.variant, l.mean, l.stdev);
    }
}

/// Parses `const:S`, `exp:MEAN`, `uniform:LOW:HIGH` or `never`.
pub fn parse_distribution(text: &str) -> Result<TimeDistribution, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number in `{text}`"));
    match parts.as_slice() {
        ["never"] => Ok(TimeDistribution::Never),
        ["const", v] => Ok(TimeDistribution::Constant(num(v)?)),
        ["exp", mean] => Ok(TimeDistribution::Exponential { mean: num(mean)? }),
        ["uniform", low, high] => Ok(TimeDistribution::Uniform { low: num(low)?, high: num(high)? }),
        _ => Err(format!("unknown distribution `{text}`")),
    }
}

fn cmd_gen_trace(args: &GenTraceArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let flavors = match &args.flavors {
        Some(path) => trace::parse_flavors(open(path)?).map_err(|e| trace_failure(path, e))?,
        None => trace::azure_like_flavors(),
    };
    let params = SyntheticParams {
        vm_count: args.vms,
        flavors,
        inter_arrival: parse_distribution(&args.inter_arrival).map_err(Failure::usage)?,
        lifetime: parse_distribution(&args.lifetime).map_err(Failure::usage)?,
        seed: args.seed,
    };
    let events = trace::gen_synthetic(&params).map_err(|e| Failure::usage(e.to_string()))?;
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| Failure::io(path, e))?;
            trace::write_trace(&events, io::BufWriter::new(file)).map_err(|e| Failure::io(path, e))?;
        }
        None => {
            let _ = stdout.write_all(trace::trace_to_string(&events).as_bytes());
        }
    }
    Ok(EXIT_OK)
}

fn parse_segments(text: &str) -> Result<Vec<SegmentDescriptor>, String> {
    text.split(',')
        .map(|part| {
            let (b, l) = part.trim().split_once('-').ok_or_else(|| format!("`{part}` is not base-limit"))?;
            let base = crate::kvfile::parse_u64(b.trim())?;
            let limit = crate::kvfile::parse_u64(l.trim())?;
            SegmentDescriptor::new(base, limit, 0).map_err(|e| e.to_string())
        })
        .collect()
}

fn cmd_translate(args: &TranslateArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let registers = match (&args.registers, &args.segments) {
        (Some(path), _) => RegisterFile::from_kv_str(&read(path)?).map_err(|e| Failure::parse(path, e))?,
        (None, Some(text)) => {
            let segments = parse_segments(text).map_err(Failure::usage)?;
            let allocation =
                crate::segment::VmAllocation { vm_id: "cli".into(), alloc_latency: Default::default(), segments };
            let guest = allocation.total_bytes();
            match build_register_file(&allocation, guest, args.n).map_err(|e| Failure::usage(e.to_string()))? {
                RegisterOutcome::Dsn(r) => r,
                RegisterOutcome::Fallback { k } => {
                    let _ = writeln!(stdout, "fallback: {k} segments exceed n = {}", args.n);
                    return Ok(EXIT_OK);
                }
            }
        }
        (None, None) => return Err(Failure::usage("--registers or --segments is required")),
    };
    match registers.translate(args.gpa) {
        Ok(hpa) => {
            let _ = writeln!(stdout, "{hpa:#x}");
        }
        Err(v) => {
            let _ = writeln!(stdout, "violation: {v}");
        }
    }
    Ok(EXIT_OK)
}

fn cmd_costmodel(args: &CostmodelArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let counters =
        WorkloadCounters::from_kv_str(&read(&args.counters)?).map_err(|e| Failure::parse(&args.counters, e))?;
    let json = match args.mode {
        ModeArg::All => serde_json::to_string_pretty(
            &[WalkMode::Dsn, WalkMode::Ept, WalkMode::Shadow].map(|m| virtualization_cost(m, &counters)),
        ),
        single => {
            let mode = match single {
                ModeArg::Native => WalkMode::Native1D,
                ModeArg::Dsn => WalkMode::Dsn,
                ModeArg::Ept => WalkMode::Ept,
                _ => WalkMode::Shadow,
            };
            serde_json::to_string_pretty(&virtualization_cost(mode, &counters))
        }
    }
    .expect("cost breakdown serializes");
    let _ = writeln!(stdout, "{json}");
    Ok(EXIT_OK)
}
