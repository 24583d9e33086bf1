//! Aggregation of replay output: segment histograms, latency statistics,
//! allocation frequency, demand-size CDFs, cost summaries, and file emission.
//!
//! # Emitted files
//!
//! Every file name is prefixed with the variant (`opt1-vms.csv`, ...).
//!
//! `csv`:
//! - `<v>-vms.csv`: `vm_id,machine_id,time,memory_bytes,k,mode,alloc_latency_ns`
//! - `<v>-histogram.csv`: `pct_1,pct_2,pct_3,pct_gt3` and one row
//! - `<v>-summary.csv`: `key,value` rows
//! - `<v>-switches.csv`: `time,policy`
//! - `<v>-layouts.csv`: `machine_id,base,limit`, one row per free segment
//!
//! `json`: `<v>-report.json`, the full report plus the histogram and latency
//! summary.
//!
//! `plotdata` (format version 1): whitespace-separated columns after `#`
//! comment lines.
//! - `<v>-histogram.dat`: `k_bucket pct`
//! - `<v>-vms.dat`: `index k memory_bytes alloc_latency_ns`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mmu::{virtualization_cost, WalkMode, WorkloadCounters};
use crate::segment::{AllocationPolicy, FreeSegmentList, VmMode};
use crate::sim::SimVariant;
use crate::trace::VmEvent;

pub const PLOTDATA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("trace spans zero seconds")]
    ZeroDuration,
    #[error("machine count must be positive")]
    NoMachines,
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One placed VM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmRecord {
    pub vm_id: String,
    pub machine_id: u32,
    pub time: u64,
    pub memory_bytes: u64,
    pub k: usize,
    pub mode: VmMode,
    /// Zero unless latency measurement was enabled.
    pub alloc_latency_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub vm_id: String,
    pub time: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub vm_id: String,
    pub time: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSwitch {
    pub time: u64,
    pub policy: AllocationPolicy,
}

/// Free memory of one machine as `[base, limit)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineLayout {
    pub machine_id: u32,
    pub total_bytes: u64,
    pub reserved_bytes: u64,
    pub free: Vec<[u64; 2]>,
}

impl MachineLayout {
    pub fn from_list(list: &FreeSegmentList) -> Self {
        Self {
            machine_id: list.machine_id(),
            total_bytes: list.total_bytes(),
            reserved_bytes: list.reserved_bytes(),
            free: list.segments().iter().map(|s| [s.base, s.limit]).collect(),
        }
    }
}

/// Invariant: `records.len() + rejections.len() == start_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub variant: SimVariant,
    pub n: usize,
    pub seed: u64,
    pub start_count: usize,
    pub records: Vec<VmRecord>,
    pub rejections: Vec<Rejection>,
    pub anomalies: Vec<Anomaly>,
    pub option_switches: Vec<OptionSwitch>,
    pub final_layouts: Vec<MachineLayout>,
    pub implicit_stops: usize,
}

impl SimulationReport {
    pub fn dsn_count(&self) -> usize {
        self.records.iter().filter(|r| r.mode == VmMode::Dsn).count()
    }

    pub fn total_segments(&self) -> usize {
        self.records.iter().map(|r| r.k).sum()
    }

    /// Non-zero allocator latencies in milliseconds.
    pub fn latency_samples_ms(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.alloc_latency_ns > 0).map(|r| r.alloc_latency_ns as f64 / 1e6).collect()
    }
}

/// Share of placed VMs using 1, 2, 3 and more than 3 segments, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentHistogram {
    pub pct_1: f64,
    pub pct_2: f64,
    pub pct_3: f64,
    pub pct_gt3: f64,
    pub placed: usize,
    /// Set when no VM was placed; all percentages are then zero.
    pub empty: bool,
}

impl SegmentHistogram {
    pub fn from_counts(k_values: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = [0usize; 4];
        for k in k_values {
            counts[k.clamp(1, 4) - 1] += 1;
        }
        let placed: usize = counts.iter().sum();
        if placed == 0 {
            return Self { pct_1: 0.0, pct_2: 0.0, pct_3: 0.0, pct_gt3: 0.0, placed, empty: true };
        }
        let pct = |c: usize| 100.0 * c as f64 / placed as f64;
        Self {
            pct_1: pct(counts[0]),
            pct_2: pct(counts[1]),
            pct_3: pct(counts[2]),
            pct_gt3: pct(counts[3]),
            placed,
            empty: false,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.pct_1, self.pct_2, self.pct_3, self.pct_gt3]
    }
}

/// Histogram over placed VMs; rejected VMs are not in the denominator.
pub fn segment_histogram(report: &SimulationReport) -> SegmentHistogram {
    SegmentHistogram::from_counts(report.records.iter().map(|r| r.k))
}

/// Fixed-point with 3 decimals, or `d.ddE-XX` for magnitudes below 1e-3.
pub fn format_pct(value: f64) -> String {
    if value == 0.0 || value.abs() >= 1e-3 || !value.is_finite() {
        return format!("{value:.3}");
    }
    let raw = format!("{value:.2E}");
    let (mantissa, exp) = raw.split_once('E').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}E{sign}{:02}", exp.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stdev: f64,
}

impl LatencyStats {
    pub fn coefficient_of_variation(&self) -> f64 {
        self.stdev / self.mean
    }
}

/// Mean and population standard deviation (single pass). `None` when empty.
pub fn latency_stats(samples: &[f64]) -> Option<LatencyStats> {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    (!samples.is_empty()).then(|| LatencyStats {
        count: samples.len(),
        mean,
        stdev: (m2 / samples.len() as f64).max(0.0).sqrt(),
    })
}

/// Allocations per hour per server: starts / trace hours / machines.
/// A trace without starts yields 0.
pub fn alloc_frequency(trace: &[VmEvent], machines: usize) -> Result<f64, ReportError> {
    if machines == 0 {
        return Err(ReportError::NoMachines);
    }
    let starts = trace.iter().filter(|e| e.is_start()).count();
    if starts == 0 {
        return Ok(0.0);
    }
    let first = trace.iter().map(|e| e.time).min().unwrap_or(0);
    let last = trace.iter().map(|e| e.time).max().unwrap_or(0);
    alloc_frequency_over(starts, last - first, machines)
}

/// Same as [`alloc_frequency`] with an explicit duration in seconds.
pub fn alloc_frequency_over(starts: usize, duration_secs: u64, machines: usize) -> Result<f64, ReportError> {
    if machines == 0 {
        return Err(ReportError::NoMachines);
    }
    if starts == 0 {
        return Ok(0.0);
    }
    if duration_secs == 0 {
        return Err(ReportError::ZeroDuration);
    }
    Ok(starts as f64 / (duration_secs as f64 / 3600.0) / machines as f64)
}

/// Empirical CDF of start demands: `(size, fraction of starts <= size)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandCdf {
    pub points: Vec<(u64, f64)>,
    pub distinct: usize,
}

pub fn demand_size_cdf(trace: &[VmEvent]) -> DemandCdf {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for size in trace.iter().filter_map(VmEvent::memory_bytes) {
        *counts.entry(size).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    let mut seen = 0;
    let points = counts
        .iter()
        .map(|(&size, &c)| {
            seen += c;
            (size, seen as f64 / total as f64)
        })
        .collect();
    DemandCdf { points, distinct: counts.len() }
}

/// One line of the per-workload cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub workload: String,
    pub mode: WalkMode,
    pub total_cycles: f64,
    pub total_seconds: Option<f64>,
}

/// DS-n, EPT and shadow-paging cost for every workload, three rows each.
pub fn cost_summary(workloads: &[(String, WorkloadCounters)]) -> Vec<CostRow> {
    workloads
        .iter()
        .flat_map(|(name, counters)| {
            [WalkMode::Dsn, WalkMode::Ept, WalkMode::Shadow].map(|mode| {
                let cost = virtualization_cost(mode, counters);
                CostRow {
                    workload: name.clone(),
                    mode,
                    total_cycles: cost.total_cycles,
                    total_seconds: cost.total_seconds,
                }
            })
        })
        .collect()
}

pub fn cost_summary_csv(rows: &[CostRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["workload", "mode", "total_cycles", "total_seconds"])?;
    for r in rows {
        let secs = r.total_seconds.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([r.workload.as_str(), &r.mode.to_string(), &r.total_cycles.to_string(), &secs])?;
    }
    Ok(into_string(w))
}

/// `(cloud, k bucket, proportion)` triples for a per-cloud segment chart.
pub fn cloud_k_triples(reports: &[(String, &SimulationReport)]) -> Vec<(String, &'static str, f64)> {
    let mut out = Vec::new();
    for (cloud, report) in reports {
        let h = segment_histogram(report);
        for (bucket, pct) in ["1", "2", "3", ">3"].into_iter().zip(h.as_array()) {
            out.push((cloud.clone(), bucket, pct / 100.0));
        }
    }
    out
}

pub fn cloud_k_plotdata(triples: &[(String, &'static str, f64)]) -> String {
    let mut out = format!("# dsnsim plotdata v{PLOTDATA_VERSION}\n# cloud k proportion\n");
    for (cloud, k, p) in triples {
        writeln!(out, "{cloud} {k} {p}").unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputFormat {
    Csv,
    Json,
    Plotdata,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "plotdata" => Ok(OutputFormat::Plotdata),
            other => Err(format!("unknown format `{other}` (expected csv, json or plotdata)")),
        }
    }
}

#[derive(Serialize)]
struct JsonReport<'a> {
    histogram: SegmentHistogram,
    latency_ms: Option<LatencyStats>,
    report: &'a SimulationReport,
}

/// Writes `report` into `dir` (created if needed). Returns the written paths.
pub fn emit(report: &SimulationReport, format: OutputFormat, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let files = render(report, format)?;
    fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_owned(), source })?;
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(format!("{}-{name}", report.variant));
        fs::write(&path, contents).map_err(|source| ReportError::Io { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}

/// The `(file suffix, contents)` pairs [`emit`] writes.
pub fn render(report: &SimulationReport, format: OutputFormat) -> Result<Vec<(&'static str, String)>, ReportError> {
    let histogram = segment_histogram(report);
    Ok(match format {
        OutputFormat::Json => {
            let doc = JsonReport { histogram, latency_ms: latency_stats(&report.latency_samples_ms()), report };
            vec![("report.json", serde_json::to_string_pretty(&doc)? + "\n")]
        }
        OutputFormat::Csv => vec![
            ("vms.csv", vms_csv(report)?),
            ("histogram.csv", histogram_csv(&histogram)?),
            ("summary.csv", summary_csv(report, &histogram)?),
            ("switches.csv", switches_csv(report)?),
            ("layouts.csv", layouts_csv(report)?),
        ],
        OutputFormat::Plotdata => {
            vec![("histogram.dat", histogram_plotdata(report, &histogram)), ("vms.dat", vms_plotdata(report))]
        }
    })
}

fn into_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
}

fn vms_csv(report: &SimulationReport) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["vm_id", "machine_id", "time", "memory_bytes", "k", "mode", "alloc_latency_ns"])?;
    for r in &report.records {
        w.write_record([
            r.vm_id.clone(),
            r.machine_id.to_string(),
            r.time.to_string(),
            r.memory_bytes.to_string(),
            r.k.to_string(),
            r.mode.to_string(),
            r.alloc_latency_ns.to_string(),
        ])?;
    }
    Ok(into_string(w))
}

pub fn histogram_csv(histogram: &SegmentHistogram) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pct_1", "pct_2", "pct_3", "pct_gt3"])?;
    w.write_record(histogram.as_array().map(format_pct))?;
    Ok(into_string(w))
}

fn summary_csv(report: &SimulationReport, histogram: &SegmentHistogram) -> Result<String, ReportError> {
    let latency = latency_stats(&report.latency_samples_ms());
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into());
    let rows = [
        ("variant", report.variant.to_string()),
        ("n", report.n.to_string()),
        ("seed", report.seed.to_string()),
        ("starts", report.start_count.to_string()),
        ("placed", report.records.len().to_string()),
        ("rejected", report.rejections.len().to_string()),
        ("anomalies", report.anomalies.len().to_string()),
        ("implicit_stops", report.implicit_stops.to_string()),
        ("dsn_vms", report.dsn_count().to_string()),
        ("total_segments", report.total_segments().to_string()),
        ("histogram_empty", histogram.empty.to_string()),
        ("latency_mean_ms", fmt_opt(latency.map(|l| l.mean))),
        ("latency_stdev_ms", fmt_opt(latency.map(|l| l.stdev))),
    ];
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["key", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v.as_str()])?;
    }
    Ok(into_string(w))
}

fn switches_csv(report: &SimulationReport) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time", "policy"])?;
    for s in &report.option_switches {
        w.write_record([s.time.to_string(), s.policy.to_string()])?;
    }
    Ok(into_string(w))
}

fn layouts_csv(report: &SimulationReport) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["machine_id", "base", "limit"])?;
    for layout in &report.final_layouts {
        for [base, limit] in &layout.free {
            w.write_record([layout.machine_id.to_string(), base.to_string(), limit.to_string()])?;
        }
    }
    Ok(into_string(w))
}

fn histogram_plotdata(report: &SimulationReport, histogram: &SegmentHistogram) -> String {
    let mut out = format!(
        "# dsnsim plotdata v{PLOTDATA_VERSION}\n# variant {} n {} placed {}\n# k_bucket pct\n",
        report.variant, report.n, histogram.placed
    );
    for (bucket, pct) in ["1", "2", "3", ">3"].into_iter().zip(histogram.as_array()) {
        writeln!(out, "{bucket} {}", format_pct(pct)).unwrap();
    }
    out
}

fn vms_plotdata(report: &SimulationReport) -> String {
    let mut out = format!("# dsnsim plotdata v{PLOTDATA_VERSION}\n# index k memory_bytes alloc_latency_ns\n");
    for (i, r) in report.records.iter().enumerate() {
        writeln!(out, "{i} {} {} {}", r.k, r.memory_bytes, r.alloc_latency_ns).unwrap();
    }
    out
}
