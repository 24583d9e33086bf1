//! VM trace files, bootstorm derivation, synthetic traces and fleet building.
//!
//! Trace CSV, UTF-8, integer seconds:
//!
//! ```text
//! vm_id,kind,time,cores,memory_bytes
//! vm1,start,0,2,4294967296
//! vm1,stop,100,,
//! ```
//!
//! The header is optional on input and always written on output. Stop rows may
//! omit the two trailing empty columns.
//!
//! Snapshot CSV: `vm_id,cores,memory_bytes,host_id,host_ram_bytes,host_cores`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::MachineView;
use crate::segment::{AllocError, GIB, MIB};

pub const TRACE_HEADER: [&str; 5] = ["vm_id", "kind", "time", "cores", "memory_bytes"];
pub const SNAPSHOT_HEADER: [&str; 6] = ["vm_id", "cores", "memory_bytes", "host_id", "host_ram_bytes", "host_cores"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("line {line}: duplicate start for vm `{vm_id}`")]
    DuplicateStart { line: u64, vm_id: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid fleet: {0}")]
    InvalidFleet(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start { cores: u32, memory_bytes: u64 },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmEvent {
    pub vm_id: String,
    pub time: u64,
    pub kind: EventKind,
}

impl VmEvent {
    pub fn start(vm_id: impl Into<String>, time: u64, cores: u32, memory_bytes: u64) -> Self {
        Self { vm_id: vm_id.into(), time, kind: EventKind::Start { cores, memory_bytes } }
    }

    pub fn stop(vm_id: impl Into<String>, time: u64) -> Self {
        Self { vm_id: vm_id.into(), time, kind: EventKind::Stop }
    }

    pub fn is_start(&self) -> bool {
        matches!(self.kind, EventKind::Start { .. })
    }

    pub fn memory_bytes(&self) -> Option<u64> {
        match self.kind {
            EventKind::Start { memory_bytes, .. } => Some(memory_bytes),
            EventKind::Stop => None,
        }
    }
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(input)
}

fn is_header(record: &csv::StringRecord, header: &[&str]) -> bool {
    record.len() == header.len() && record.iter().zip(header).all(|(a, b)| a.eq_ignore_ascii_case(b))
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T, TraceError> {
    let raw = record.get(idx).unwrap_or("");
    raw.parse().map_err(|_| TraceError::Malformed { line, reason: format!("invalid {name} `{raw}`") })
}

/// Reads a trace and returns its events ordered by time (stable for equal times).
pub fn parse_trace<R: Read>(input: R) -> Result<Vec<VmEvent>, TraceError> {
    let mut events: Vec<(u64, VmEvent)> = Vec::new();
    let mut started: HashSet<String> = HashSet::new();
    for (idx, record) in csv_reader(input).records().enumerate() {
        let record = record?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if idx == 0 && is_header(&record, &TRACE_HEADER) {
            continue;
        }
        let vm_id = record.get(0).unwrap_or("").to_owned();
        if vm_id.is_empty() {
            return Err(TraceError::Malformed { line, reason: "empty vm_id".into() });
        }
        let kind = record.get(1).unwrap_or("").to_ascii_lowercase();
        let time: u64 = field(&record, 2, "time", line)?;
        let event = match kind.as_str() {
            "start" => {
                if record.len() != 5 {
                    return Err(TraceError::Malformed {
                        line,
                        reason: format!("start rows need 5 fields, got {}", record.len()),
                    });
                }
                let cores: u32 = field(&record, 3, "cores", line)?;
                let memory_bytes: u64 = field(&record, 4, "memory_bytes", line)?;
                if cores == 0 || memory_bytes == 0 {
                    return Err(TraceError::Malformed { line, reason: "cores and memory must be positive".into() });
                }
                if !started.insert(vm_id.clone()) {
                    return Err(TraceError::DuplicateStart { line, vm_id });
                }
                VmEvent::start(vm_id, time, cores, memory_bytes)
            }
            "stop" => {
                let extra_filled = record.iter().skip(3).any(|f| !f.is_empty());
                if !(record.len() == 3 || record.len() == 5) || extra_filled {
                    return Err(TraceError::Malformed {
                        line,
                        reason: "stop rows carry only vm_id, kind and time".into(),
                    });
                }
                VmEvent::stop(vm_id, time)
            }
            other => {
                return Err(TraceError::Malformed { line, reason: format!("unknown event kind `{other}`") });
            }
        };
        events.push((line, event));
    }

    let mut start_time: HashMap<&str, u64> = HashMap::new();
    let mut stopped: HashSet<&str> = HashSet::new();
    for (_, e) in &events {
        if e.is_start() {
            start_time.insert(&e.vm_id, e.time);
        }
    }
    for (line, e) in &events {
        if e.is_start() {
            continue;
        }
        if !stopped.insert(&e.vm_id) {
            return Err(TraceError::Malformed { line: *line, reason: format!("duplicate stop for vm `{}`", e.vm_id) });
        }
        if start_time.get(e.vm_id.as_str()).is_some_and(|&t| e.time < t) {
            return Err(TraceError::Malformed {
                line: *line,
                reason: format!("vm `{}` stops before it starts", e.vm_id),
            });
        }
    }

    let mut events: Vec<VmEvent> = events.into_iter().map(|(_, e)| e).collect();
    events.sort_by_key(|e| e.time);
    Ok(events)
}

/// Writes the canonical form of a trace: header, then one row per event.
/// An empty trace is written as an empty file.
pub fn write_trace<W: Write>(events: &[VmEvent], output: W) -> Result<(), TraceError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(output);
    if events.is_empty() {
        return Ok(());
    }
    w.write_record(TRACE_HEADER)?;
    for e in events {
        match e.kind {
            EventKind::Start { cores, memory_bytes } => w.write_record([
                e.vm_id.as_str(),
                "start",
                &e.time.to_string(),
                &cores.to_string(),
                &memory_bytes.to_string(),
            ])?,
            EventKind::Stop => w.write_record([e.vm_id.as_str(), "stop", &e.time.to_string(), "", ""])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn trace_to_string(events: &[VmEvent]) -> String {
    let mut buf = Vec::new();
    write_trace(events, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("trace output is UTF-8")
}

/// Adds a stop at the last event time for every VM the trace never stops.
pub fn close_trace(events: &[VmEvent]) -> Vec<VmEvent> {
    let end = events.iter().map(|e| e.time).max().unwrap_or(0);
    let stopped: HashSet<&str> = events.iter().filter(|e| !e.is_start()).map(|e| e.vm_id.as_str()).collect();
    let mut out = events.to_vec();
    out.extend(
        events
            .iter()
            .filter(|e| e.is_start() && !stopped.contains(e.vm_id.as_str()))
            .map(|e| VmEvent::stop(e.vm_id.clone(), end)),
    );
    out
}

/// One running VM of a cluster snapshot, with its host.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub vm_id: String,
    pub cores: u32,
    pub memory_bytes: u64,
    pub host_id: String,
    pub host_ram_bytes: u64,
    pub host_cores: u32,
}

pub fn parse_snapshot<R: Read>(input: R) -> Result<Vec<SnapshotRecord>, TraceError> {
    let mut out = Vec::new();
    for (idx, record) in csv_reader(input).records().enumerate() {
        let record = record?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if idx == 0 && is_header(&record, &SNAPSHOT_HEADER) {
            continue;
        }
        if record.len() != SNAPSHOT_HEADER.len() {
            return Err(TraceError::Malformed {
                line,
                reason: format!("expected {} fields, got {}", SNAPSHOT_HEADER.len(), record.len()),
            });
        }
        let rec = SnapshotRecord {
            vm_id: record[0].to_owned(),
            cores: field(&record, 1, "cores", line)?,
            memory_bytes: field(&record, 2, "memory_bytes", line)?,
            host_id: record[3].to_owned(),
            host_ram_bytes: field(&record, 4, "host_ram_bytes", line)?,
            host_cores: field(&record, 5, "host_cores", line)?,
        };
        if rec.vm_id.is_empty() || rec.host_id.is_empty() {
            return Err(TraceError::Malformed { line, reason: "empty identifier".into() });
        }
        if rec.cores == 0 || rec.memory_bytes == 0 || rec.host_ram_bytes == 0 || rec.host_cores == 0 {
            return Err(TraceError::Malformed { line, reason: "sizes must be positive".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Every VM of the snapshot starts at t=0 (in `vm_id` order) and stops at `horizon`.
pub fn derive_bootstorm(snapshot: &[SnapshotRecord], horizon: u64) -> Vec<VmEvent> {
    let mut vms: Vec<&SnapshotRecord> = snapshot.iter().collect();
    vms.sort_by(|a, b| a.vm_id.cmp(&b.vm_id));
    let starts = vms.iter().map(|r| VmEvent::start(r.vm_id.clone(), 0, r.cores, r.memory_bytes));
    let stops = vms.iter().map(|r| VmEvent::stop(r.vm_id.clone(), horizon));
    starts.chain(stops).collect()
}

/// The hosts described by a snapshot, ordered by `host_id`.
pub fn fleet_from_snapshot(snapshot: &[SnapshotRecord], reserved_bytes: u64) -> Result<Vec<MachineView>, TraceError> {
    let mut hosts: BTreeMap<&str, (u64, u32)> = BTreeMap::new();
    for r in snapshot {
        let spec = (r.host_ram_bytes, r.host_cores);
        if let Some(prev) = hosts.insert(&r.host_id, spec) {
            if prev != spec {
                return Err(TraceError::InvalidFleet(format!("host `{}` is described inconsistently", r.host_id)));
            }
        }
    }
    hosts
        .values()
        .enumerate()
        .map(|(id, &(ram, cores))| MachineView::new(id as u32, cores, ram, reserved_bytes).map_err(TraceError::from))
        .collect()
}

/// One server generation of a fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub name: String,
    pub ram_bytes: u64,
    pub cores: u32,
    /// Share of the fleet, in percent.
    pub proportion: f64,
}

/// Fleet description, read from TOML:
///
/// ```toml
/// machine_count = 100
/// reserved_bytes = 0          # optional
///
/// [[generation]]
/// name = "HPC"
/// ram_bytes = 137438953472
/// cores = 24
/// proportion = 20
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub machine_count: usize,
    #[serde(default)]
    pub reserved_bytes: u64,
    #[serde(rename = "generation")]
    pub generations: Vec<Generation>,
}

impl FleetSpec {
    /// Five equally represented server generations (HPC, Gen4, Gen5, Gen6, Godzilla).
    pub fn table4(machine_count: usize) -> Self {
        let gen = |name: &str, ram_gib: u64, cores: u32| Generation {
            name: name.into(),
            ram_bytes: ram_gib * GIB,
            cores,
            proportion: 20.0,
        };
        Self {
            machine_count,
            reserved_bytes: 0,
            generations: vec![
                gen("HPC", 128, 24),
                gen("Gen4", 192, 24),
                gen("Gen5", 256, 40),
                gen("Gen6", 192, 48),
                gen("Godzilla", 512, 32),
            ],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TraceError> {
        let spec: Self = toml::from_str(text).map_err(|e| TraceError::InvalidFleet(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("fleet spec serializes")
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.machine_count == 0 {
            return Err(TraceError::InvalidFleet("machine_count must be at least 1".into()));
        }
        if self.generations.is_empty() {
            return Err(TraceError::InvalidFleet("at least one generation is required".into()));
        }
        for g in &self.generations {
            if !(g.proportion >= 0.0 && g.proportion.is_finite()) {
                return Err(TraceError::InvalidFleet(format!("generation `{}` has an invalid proportion", g.name)));
            }
            if g.cores == 0 || g.ram_bytes <= self.reserved_bytes {
                return Err(TraceError::InvalidFleet(format!("generation `{}` has no usable capacity", g.name)));
            }
        }
        let sum: f64 = self.generations.iter().map(|g| g.proportion).sum();
        if (sum - 100.0).abs() > 1e-6 {
            return Err(TraceError::InvalidFleet(format!("proportions sum to {sum}, expected 100")));
        }
        Ok(())
    }

    /// Machines per generation by largest-remainder rounding; ties go to the
    /// earlier generation.
    pub fn generation_counts(&self) -> Result<Vec<usize>, TraceError> {
        self.validate()?;
        let quotas: Vec<f64> =
            self.generations.iter().map(|g| g.proportion * self.machine_count as f64 / 100.0).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(self.machine_count.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

/// Instantiates the fleet with every machine's memory free. Machine ids are
/// assigned generation by generation.
pub fn build_fleet(spec: &FleetSpec) -> Result<Vec<MachineView>, TraceError> {
    let counts = spec.generation_counts()?;
    let mut machines = Vec::with_capacity(spec.machine_count);
    for (gen, count) in spec.generations.iter().zip(counts) {
        for _ in 0..count {
            let id = machines.len() as u32;
            machines.push(MachineView::new(id, gen.cores, gen.ram_bytes, spec.reserved_bytes)?);
        }
    }
    Ok(machines)
}

/// A VM size offered to users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flavor {
    pub cores: u32,
    pub memory_bytes: u64,
    pub weight: f64,
}

/// Fourteen public-cloud style flavors, from 0.75 GiB to 112 GiB, skewed
/// towards small VMs.
pub fn azure_like_flavors() -> Vec<Flavor> {
    let table: [(u32, u64, f64); 14] = [
        (1, 768 * MIB, 10.0),
        (1, 1792 * MIB, 15.0),
        (1, 2 * GIB, 10.0),
        (2, 3584 * MIB, 15.0),
        (2, 4 * GIB, 10.0),
        (2, 7 * GIB, 10.0),
        (2, 8 * GIB, 8.0),
        (4, 14 * GIB, 6.0),
        (4, 16 * GIB, 5.0),
        (4, 28 * GIB, 4.0),
        (8, 32 * GIB, 3.0),
        (8, 56 * GIB, 2.0),
        (16, 64 * GIB, 1.0),
        (16, 112 * GIB, 1.0),
    ];
    table.iter().map(|&(cores, memory_bytes, weight)| Flavor { cores, memory_bytes, weight }).collect()
}

/// Reads flavors from CSV rows `cores,memory_bytes,weight` (header optional).
pub fn parse_flavors<R: Read>(input: R) -> Result<Vec<Flavor>, TraceError> {
    let mut out = Vec::new();
    for (idx, record) in csv_reader(input).records().enumerate() {
        let record = record?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if idx == 0 && is_header(&record, &["cores", "memory_bytes", "weight"]) {
            continue;
        }
        if record.len() != 3 {
            return Err(TraceError::Malformed { line, reason: "expected cores,memory_bytes,weight".into() });
        }
        out.push(Flavor {
            cores: field(&record, 0, "cores", line)?,
            memory_bytes: field(&record, 1, "memory_bytes", line)?,
            weight: field(&record, 2, "weight", line)?,
        });
    }
    Ok(out)
}

/// Distribution of a duration in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeDistribution {
    Constant(f64),
    Exponential {
        mean: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// Lifetimes only: the VM is never stopped.
    Never,
}

impl TimeDistribution {
    fn validate(&self, what: &str) -> Result<(), TraceError> {
        let ok = match *self {
            TimeDistribution::Constant(v) => v >= 0.0 && v.is_finite(),
            TimeDistribution::Exponential { mean } => mean > 0.0 && mean.is_finite(),
            TimeDistribution::Uniform { low, high } => low >= 0.0 && low <= high && high.is_finite(),
            TimeDistribution::Never => what == "lifetime",
        };
        if ok {
            Ok(())
        } else {
            Err(TraceError::InvalidParams(format!("invalid {what} distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Option<f64> {
        match *self {
            TimeDistribution::Constant(v) => Some(v),
            TimeDistribution::Exponential { mean } => Some(Exp::new(1.0 / mean).expect("validated").sample(rng)),
            TimeDistribution::Uniform { low, high } => Some(if low == high { low } else { rng.gen_range(low..high) }),
            TimeDistribution::Never => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub vm_count: usize,
    pub flavors: Vec<Flavor>,
    pub inter_arrival: TimeDistribution,
    pub lifetime: TimeDistribution,
    pub seed: u64,
}

/// Generates a reproducible trace. VM `i` is named `vm{i}`; arrival times are
/// cumulative inter-arrival samples and every lifetime is at least one second.
pub fn gen_synthetic(params: &SyntheticParams) -> Result<Vec<VmEvent>, TraceError> {
    if params.flavors.is_empty() {
        return Err(TraceError::InvalidParams("flavor set is empty".into()));
    }
    let mut sizes = HashSet::new();
    for f in &params.flavors {
        if f.cores == 0 || f.memory_bytes == 0 || !(f.weight > 0.0 && f.weight.is_finite()) {
            return Err(TraceError::InvalidParams(format!("invalid flavor {f:?}")));
        }
        if !sizes.insert(f.memory_bytes) {
            return Err(TraceError::InvalidParams(format!("duplicate flavor memory size {}", f.memory_bytes)));
        }
    }
    params.inter_arrival.validate("inter-arrival")?;
    params.lifetime.validate("lifetime")?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let pick = WeightedIndex::new(params.flavors.iter().map(|f| f.weight))
        .map_err(|e| TraceError::InvalidParams(e.to_string()))?;
    let mut clock = 0.0f64;
    let mut events = Vec::with_capacity(params.vm_count * 2);
    for i in 0..params.vm_count {
        clock += params.inter_arrival.sample(&mut rng).expect("arrivals always sample");
        let start = clock.round() as u64;
        let flavor = params.flavors[pick.sample(&mut rng)];
        let vm_id = format!("vm{i}");
        events.push(VmEvent::start(vm_id.clone(), start, flavor.cores, flavor.memory_bytes));
        if let Some(life) = params.lifetime.sample(&mut rng) {
            events.push(VmEvent::stop(vm_id, start + (life.round() as u64).max(1)));
        }
    }
    events.sort_by_key(|e| e.time);
    Ok(events)
}
