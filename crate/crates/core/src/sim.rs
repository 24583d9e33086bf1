//! Discrete-event replay of a VM trace against a fleet.
//!
//! Each start goes through the scheduler's filter chain, is allocated by the
//! chosen machine's hypervisor allocator and gets its DS-n registers (or a
//! fallback mode). Each stop returns the memory. Events are processed in time
//! order; at equal times stops come before starts, otherwise input order is
//! kept.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::buddy::{BuddyAllocator, DEFAULT_CHUNK_ORDER, DEFAULT_MAX_ORDER};
use crate::mmu::{build_register_file, RegisterOutcome};
use crate::report::{Anomaly, MachineLayout, OptionSwitch, Rejection, SimulationReport, VmRecord};
use crate::scheduler::{
    baseline_pick, filter_min_segments, filter_resources, reselect_option, EventLog, MachineView, PlacementRequest,
    SchedulerConfig, SchedulerVariant, ONE_WEEK,
};
use crate::segment::{AllocError, AllocationPolicy, FreeSegmentList, VmAllocation, VmMode};
use crate::trace::{EventKind, VmEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimVariant {
    /// Load-balancing placement and a buddy page allocator.
    BaseLine,
    ImprovPlacementOpt1,
    ImprovPlacementOpt2,
    /// Segment-aware placement with weekly option reselection.
    DynamicOptionSelec,
}

impl SimVariant {
    pub const ALL: [SimVariant; 4] = [
        SimVariant::BaseLine,
        SimVariant::ImprovPlacementOpt1,
        SimVariant::ImprovPlacementOpt2,
        SimVariant::DynamicOptionSelec,
    ];

    pub fn scheduler_variant(self) -> SchedulerVariant {
        match self {
            SimVariant::BaseLine => SchedulerVariant::BaseLine,
            SimVariant::ImprovPlacementOpt1 | SimVariant::ImprovPlacementOpt2 => SchedulerVariant::ImprovPlacement,
            SimVariant::DynamicOptionSelec => SchedulerVariant::DynamicOptionSelec,
        }
    }
}

impl fmt::Display for SimVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimVariant::BaseLine => "baseline",
            SimVariant::ImprovPlacementOpt1 => "opt1",
            SimVariant::ImprovPlacementOpt2 => "opt2",
            SimVariant::DynamicOptionSelec => "dynamic",
        })
    }
}

impl FromStr for SimVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(SimVariant::BaseLine),
            "opt1" | "improvplacement+opt1" => Ok(SimVariant::ImprovPlacementOpt1),
            "opt2" | "improvplacement+opt2" => Ok(SimVariant::ImprovPlacementOpt2),
            "dynamic" | "dynamicoptionselec" => Ok(SimVariant::DynamicOptionSelec),
            other => Err(format!("unknown variant `{other}` (expected baseline, opt1, opt2 or dynamic)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    /// DS-n threshold.
    pub n: usize,
    /// Starting option for the dynamic variant.
    pub initial_policy: AllocationPolicy,
    /// Simulated seconds between reselections (dynamic variant).
    pub reselect_period: u64,
    /// Record allocator wall time. Off by default so reports are reproducible.
    pub measure_latency: bool,
    pub buddy_max_order: u32,
    pub buddy_chunk_order: u32,
    /// Recorded in the report; the replay itself draws no random numbers.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 3,
            initial_policy: AllocationPolicy::Opt1,
            reselect_period: ONE_WEEK,
            measure_latency: false,
            buddy_max_order: DEFAULT_MAX_ORDER,
            buddy_chunk_order: DEFAULT_CHUNK_ORDER,
            seed: 0,
        }
    }
}

/// Hypervisor-side memory state of one machine.
#[derive(Debug, Clone)]
enum HostMemory {
    Segments(FreeSegmentList),
    Buddy(BuddyAllocator),
}

impl HostMemory {
    fn free_view(&self, machine_id: u32) -> FreeSegmentList {
        match self {
            HostMemory::Segments(list) => list.clone(),
            HostMemory::Buddy(b) => b.free_view(machine_id),
        }
    }
}

#[derive(Debug, Clone)]
struct LiveVm {
    machine: usize,
    cores: u32,
    allocation: VmAllocation,
}

/// Mutable state of one replay.
#[derive(Debug, Clone)]
pub struct SimulationState {
    clock: u64,
    variant: SimVariant,
    config: SimConfig,
    policy: AllocationPolicy,
    fleet_template: Vec<MachineView>,
    machines: Vec<MachineView>,
    memory: Vec<HostMemory>,
    position: HashMap<u32, usize>,
    live: BTreeMap<String, LiveVm>,
    rejected_ids: HashSet<String>,
    log: EventLog,
    next_reselect: Option<u64>,
    start_count: usize,
    records: Vec<VmRecord>,
    rejections: Vec<Rejection>,
    anomalies: Vec<Anomaly>,
    switches: Vec<OptionSwitch>,
}

impl SimulationState {
    /// Fresh state over `fleet`. Machines are used with their memory as given.
    pub fn new(fleet: &[MachineView], variant: SimVariant, config: &SimConfig) -> Result<Self, AllocError> {
        let memory = fleet
            .iter()
            .map(|m| -> Result<HostMemory, AllocError> {
                Ok(match variant {
                    SimVariant::BaseLine => {
                        let list = &m.free_list;
                        if list.allocated_bytes() != 0 {
                            return Err(AllocError::InvalidSize(
                                "the baseline allocator needs machines with all memory free".into(),
                            ));
                        }
                        HostMemory::Buddy(
                            BuddyAllocator::new(list.total_bytes(), list.reserved_bytes(), config.buddy_max_order)?
                                .with_chunk_order(config.buddy_chunk_order),
                        )
                    }
                    _ => HostMemory::Segments(m.free_list.clone()),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let machines = fleet
            .iter()
            .zip(&memory)
            .map(|(m, mem)| MachineView { free_list: mem.free_view(m.machine_id), ..m.clone() })
            .collect();
        let policy = match variant {
            SimVariant::ImprovPlacementOpt1 => AllocationPolicy::Opt1,
            SimVariant::ImprovPlacementOpt2 => AllocationPolicy::Opt2,
            SimVariant::BaseLine | SimVariant::DynamicOptionSelec => config.initial_policy,
        };
        Ok(Self {
            clock: 0,
            variant,
            config: config.clone(),
            policy,
            fleet_template: fleet.to_vec(),
            machines,
            memory,
            position: fleet.iter().enumerate().map(|(i, m)| (m.machine_id, i)).collect(),
            live: BTreeMap::new(),
            rejected_ids: HashSet::new(),
            log: EventLog::new(),
            next_reselect: None,
            start_count: 0,
            records: Vec::new(),
            rejections: Vec::new(),
            anomalies: Vec::new(),
            switches: Vec::new(),
        })
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn policy(&self) -> AllocationPolicy {
        self.policy
    }

    pub fn machines(&self) -> &[MachineView] {
        &self.machines
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn anomalies(&self) -> &[Anomaly] {
        &self.anomalies
    }

    pub fn records(&self) -> &[VmRecord] {
        &self.records
    }

    /// Hypervisor-side free list of the machine at `position`.
    pub fn authoritative_free_list(&self, position: usize) -> FreeSegmentList {
        let id = self.machines[position].machine_id;
        self.memory[position].free_view(id)
    }

    /// Whether every scheduler replica holds the same free ranges and byte
    /// counts as its hypervisor. Segment dates are not compared.
    pub fn mirrors_consistent(&self) -> bool {
        (0..self.machines.len()).all(|i| {
            let (mirror, truth) = (&self.machines[i].free_list, self.authoritative_free_list(i));
            MachineLayout::from_list(mirror) == MachineLayout::from_list(&truth)
                && mirror.allocated_bytes() == truth.allocated_bytes()
        })
    }

    /// Checks free-list invariants, per-machine byte and core conservation,
    /// and that no live allocation overlaps free memory or another VM.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (pos, view) in self.machines.iter().enumerate() {
            let free = self.authoritative_free_list(pos);
            free.check_invariants().map_err(|e| format!("machine {}: {e}", view.machine_id))?;
            let mut owned: Vec<(u64, u64)> = Vec::new();
            let mut cores = 0u32;
            for vm in self.live.values().filter(|vm| vm.machine == pos) {
                cores += vm.cores;
                owned.extend(vm.allocation.segments.iter().map(|s| (s.base, s.limit)));
            }
            owned.extend(free.segments().iter().map(|s| (s.base, s.limit)));
            owned.sort_unstable();
            if owned.windows(2).any(|w| w[0].1 > w[1].0) {
                return Err(format!("machine {}: overlapping memory ownership", view.machine_id));
            }
            let covered: u64 = owned.iter().map(|(b, l)| l - b).sum();
            if covered + free.reserved_bytes() != free.total_bytes() {
                return Err(format!(
                    "machine {}: free + live + reserved = {} of {} bytes",
                    view.machine_id,
                    covered + free.reserved_bytes(),
                    free.total_bytes()
                ));
            }
            if view.cores_free + cores != view.cores_total {
                return Err(format!("machine {}: core accounting broken", view.machine_id));
            }
        }
        Ok(())
    }

    /// Applies one event.
    pub fn step(&mut self, event: &VmEvent) {
        if event.time < self.clock {
            self.anomaly(event, "event older than the simulation clock");
        } else {
            self.clock = event.time;
        }
        if self.variant == SimVariant::DynamicOptionSelec {
            self.maybe_reselect(event.time);
            self.log.record_event(event.clone());
        }
        match event.kind {
            EventKind::Start { cores, memory_bytes } => self.start(event, cores, memory_bytes),
            EventKind::Stop => self.stop(event),
        }
    }

    fn maybe_reselect(&mut self, now: u64) {
        let period = self.config.reselect_period.max(1);
        let Some(due) = self.next_reselect else {
            self.next_reselect = Some(now.saturating_add(period));
            return;
        };
        if now < due {
            return;
        }
        let config = SchedulerConfig {
            n: self.config.n,
            current_policy: self.policy,
            reselect_period: period,
            variant: SchedulerVariant::DynamicOptionSelec,
        };
        let chosen = reselect_option(&mut self.log, &self.fleet_template, &config);
        if chosen != self.policy {
            self.switches.push(OptionSwitch { time: due, policy: chosen });
            self.policy = chosen;
        }
        let mut next = due;
        while next <= now {
            next = next.saturating_add(period);
        }
        self.next_reselect = Some(next);
    }

    fn start(&mut self, event: &VmEvent, cores: u32, memory_bytes: u64) {
        self.start_count += 1;
        if self.live.contains_key(&event.vm_id) {
            self.anomaly(event, "duplicate start for a running vm");
            self.reject(event, "duplicate start".into());
            return;
        }
        let request = match PlacementRequest::new(event.vm_id.clone(), cores, memory_bytes) {
            Ok(r) => r,
            Err(e) => return self.reject(event, e.to_string()),
        };
        let candidates = filter_resources(&self.machines, &request);
        let choice = match self.variant {
            SimVariant::BaseLine => baseline_pick(&candidates, &request),
            _ => filter_min_segments(&candidates, &request, self.policy),
        };
        let machine_id = match choice {
            Ok(id) => id,
            Err(e) => return self.reject(event, e.to_string()),
        };
        let pos = self.position[&machine_id];
        let allocated = match &mut self.memory[pos] {
            HostMemory::Segments(list) => list.allocate(&event.vm_id, memory_bytes, self.policy, event.time),
            HostMemory::Buddy(b) => b.allocate(&event.vm_id, memory_bytes, event.time),
        };
        let allocation = match allocated {
            Ok(a) => a,
            Err(e) => {
                if !matches!(e, AllocError::InsufficientMemory { .. }) {
                    self.anomaly(event, &e.to_string());
                }
                return self.reject(event, e.to_string());
            }
        };
        self.sync_mirror(pos, &allocation, event.time, true);
        self.machines[pos].cores_free -= cores;

        let mode = match build_register_file(&allocation, memory_bytes, self.config.n) {
            Ok(RegisterOutcome::Dsn(_)) => VmMode::Dsn,
            Ok(RegisterOutcome::Fallback { .. }) => VmMode::Fallback,
            Err(e) => {
                self.anomaly(event, &e.to_string());
                allocation.mode(self.config.n)
            }
        };
        let latency = if self.config.measure_latency { allocation.alloc_latency.as_nanos() as u64 } else { 0 };
        self.records.push(VmRecord {
            vm_id: event.vm_id.clone(),
            machine_id,
            time: event.time,
            memory_bytes,
            k: allocation.k(),
            mode,
            alloc_latency_ns: latency,
        });
        self.live.insert(event.vm_id.clone(), LiveVm { machine: pos, cores, allocation });
    }

    fn stop(&mut self, event: &VmEvent) {
        let Some(vm) = self.live.remove(&event.vm_id) else {
            if !self.rejected_ids.contains(&event.vm_id) {
                self.anomaly(event, "stop for an unknown vm");
            }
            return;
        };
        let released = match &mut self.memory[vm.machine] {
            HostMemory::Segments(list) => list.release(&vm.allocation),
            HostMemory::Buddy(b) => b.release(&vm.allocation),
        };
        if let Err(e) = released {
            self.anomaly(event, &e.to_string());
            return;
        }
        self.sync_mirror(vm.machine, &vm.allocation, event.time, false);
        self.machines[vm.machine].cores_free += vm.cores;
    }

    /// Applies the same change to the scheduler replica. A buddy heap's free
    /// pages coalesce into exactly the runs a segment list holds, so one
    /// incremental update serves both memory kinds.
    fn sync_mirror(&mut self, pos: usize, allocation: &VmAllocation, now: u64, allocated: bool) {
        let mirror = &mut self.machines[pos].free_list;
        let synced =
            if allocated { mirror.reserve_exact(&allocation.segments, now) } else { mirror.release(allocation) };
        if synced.is_err() {
            let id = self.machines[pos].machine_id;
            self.machines[pos].free_list = self.memory[pos].free_view(id);
        }
    }

    fn reject(&mut self, event: &VmEvent, reason: String) {
        self.rejected_ids.insert(event.vm_id.clone());
        self.rejections.push(Rejection { vm_id: event.vm_id.clone(), time: event.time, reason });
    }

    fn anomaly(&mut self, event: &VmEvent, reason: &str) {
        self.anomalies.push(Anomaly { vm_id: event.vm_id.clone(), time: event.time, reason: reason.to_owned() });
    }

    /// Report of everything processed so far, with the current machine layouts.
    pub fn report(&self) -> SimulationReport {
        SimulationReport {
            variant: self.variant,
            n: self.config.n,
            seed: self.config.seed,
            start_count: self.start_count,
            records: self.records.clone(),
            rejections: self.rejections.clone(),
            anomalies: self.anomalies.clone(),
            option_switches: self.switches.clone(),
            final_layouts: (0..self.machines.len())
                .map(|i| MachineLayout::from_list(&self.authoritative_free_list(i)))
                .collect(),
            implicit_stops: 0,
        }
    }

    /// Stops every VM still running at the current clock. Returns how many.
    pub fn stop_all(&mut self) -> usize {
        let ids: Vec<String> = self.live.keys().cloned().collect();
        for id in &ids {
            let event = VmEvent::stop(id.clone(), self.clock);
            self.stop(&event);
        }
        ids.len()
    }
}

/// Orders events by time, stops before starts at equal times, otherwise stable.
pub fn order_events(trace: &[VmEvent]) -> Vec<VmEvent> {
    let mut events = trace.to_vec();
    events.sort_by_key(|e| (e.time, e.is_start()));
    events
}

/// Replays `trace` on `fleet`.
///
/// The report's layouts describe the machines after the last trace event.
/// VMs the trace never stops are then stopped at that time and counted in
/// `implicit_stops`.
pub fn run(
    trace: &[VmEvent],
    fleet: &[MachineView],
    variant: SimVariant,
    config: &SimConfig,
) -> Result<SimulationReport, AllocError> {
    let mut state = SimulationState::new(fleet, variant, config)?;
    for event in order_events(trace) {
        state.step(&event);
    }
    let mut report = state.report();
    report.implicit_stops = state.stop_all();
    Ok(report)
}

/// Replay with segment-aware placement and a fixed option, without timing.
pub(crate) fn replay_with_policy(
    events: &[VmEvent],
    fleet: &[MachineView],
    policy: AllocationPolicy,
    n: usize,
) -> SimulationReport {
    let variant = match policy {
        AllocationPolicy::Opt1 => SimVariant::ImprovPlacementOpt1,
        AllocationPolicy::Opt2 => SimVariant::ImprovPlacementOpt2,
    };
    let config = SimConfig { n, ..SimConfig::default() };
    run(events, fleet, variant, &config).expect("segment variants accept any fleet")
}
