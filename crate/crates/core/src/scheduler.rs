//! Filter-chain VM placement and periodic allocation-option selection.
//!
//! The scheduler keeps a replica of every machine's free segment list. The
//! segment filter runs last in the chain: it dry-runs the hypervisor
//! allocator on each remaining candidate and keeps the machine that would
//! use the fewest segments, so it never picks a machine the resource filters
//! rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{AllocError, AllocationPolicy, FreeSegmentList};
use crate::sim;
use crate::trace::VmEvent;

pub const ONE_WEEK: u64 = 7 * 24 * 3600;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedError {
    #[error("no machine can host vm `{0}`")]
    NoCandidate(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// The scheduler's view of one machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineView {
    pub machine_id: u32,
    pub cores_total: u32,
    pub cores_free: u32,
    /// Replica of the hypervisor's free list.
    pub free_list: FreeSegmentList,
}

impl MachineView {
    pub fn new(machine_id: u32, cores: u32, ram_bytes: u64, reserved_bytes: u64) -> Result<Self, AllocError> {
        Ok(Self {
            machine_id,
            cores_total: cores,
            cores_free: cores,
            free_list: FreeSegmentList::new(machine_id, ram_bytes, reserved_bytes)?,
        })
    }

    pub fn free_bytes(&self) -> u64 {
        self.free_list.free_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRequest {
    pub vm_id: String,
    pub cores: u32,
    pub memory_bytes: u64,
}

impl PlacementRequest {
    pub fn new(vm_id: impl Into<String>, cores: u32, memory_bytes: u64) -> Result<Self, SchedError> {
        let vm_id = vm_id.into();
        if cores == 0 || memory_bytes == 0 {
            return Err(SchedError::InvalidRequest(format!("vm `{vm_id}` asks for zero cores or memory")));
        }
        Ok(Self { vm_id, cores, memory_bytes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedulerVariant {
    BaseLine,
    ImprovPlacement,
    DynamicOptionSelec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// A VM with at most `n` segments runs in DS-n mode.
    pub n: usize,
    pub current_policy: AllocationPolicy,
    /// Simulated seconds between two option reselections.
    pub reselect_period: u64,
    pub variant: SchedulerVariant,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            n: 3,
            current_policy: AllocationPolicy::Opt1,
            reselect_period: ONE_WEEK,
            variant: SchedulerVariant::ImprovPlacement,
        }
    }
}

/// Resource matchmaking: enough free cores and enough free memory in total.
pub fn filter_resources<'a>(machines: &'a [MachineView], request: &PlacementRequest) -> Vec<&'a MachineView> {
    machines.iter().filter(|m| m.cores_free >= request.cores && m.free_bytes() >= request.memory_bytes).collect()
}

/// Picks the candidate on which the allocator would use the fewest segments.
/// Ties go to the machine with the most free memory, then the lowest id.
pub fn filter_min_segments(
    candidates: &[&MachineView],
    request: &PlacementRequest,
    policy: AllocationPolicy,
) -> Result<u32, SchedError> {
    candidates
        .iter()
        .filter_map(|m| {
            m.free_list
                .peek_segment_count(request.memory_bytes, policy)
                .map(|k| (k, std::cmp::Reverse(m.free_bytes()), m.machine_id))
        })
        .min()
        .map(|(_, _, id)| id)
        .ok_or_else(|| SchedError::NoCandidate(request.vm_id.clone()))
}

/// Load-balancing pick: the candidate with the most free cores, lowest id on ties.
pub fn baseline_pick(candidates: &[&MachineView], request: &PlacementRequest) -> Result<u32, SchedError> {
    candidates
        .iter()
        .max_by(|a, b| a.cores_free.cmp(&b.cores_free).then(b.machine_id.cmp(&a.machine_id)))
        .map(|m| m.machine_id)
        .ok_or_else(|| SchedError::NoCandidate(request.vm_id.clone()))
}

/// Append-only record of VM starts and stops since the last reselection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    events: Vec<VmEvent>,
    out_of_order: usize,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `event`. Returns `false` (and counts it) when the event is
    /// older than the last recorded one; it is kept anyway.
    pub fn record_event(&mut self, event: VmEvent) -> bool {
        let in_order = self.events.last().is_none_or(|last| last.time <= event.time);
        if !in_order {
            self.out_of_order += 1;
        }
        self.events.push(event);
        in_order
    }

    pub fn events(&self) -> &[VmEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn out_of_order(&self) -> usize {
        self.out_of_order
    }

    pub fn reset(&mut self) {
        self.events.clear();
        self.out_of_order = 0;
    }
}

/// What one allocation option achieves when the log is replayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionScore {
    pub policy: AllocationPolicy,
    pub dsn_vms: usize,
    pub total_segments: usize,
}

/// Replays the logged events on an empty copy of `fleet`, once per option.
pub fn score_options(events: &[VmEvent], fleet: &[MachineView], n: usize) -> [OptionScore; 2] {
    [AllocationPolicy::Opt1, AllocationPolicy::Opt2].map(|policy| {
        let report = sim::replay_with_policy(events, fleet, policy, n);
        OptionScore {
            policy,
            dsn_vms: report.records.iter().filter(|r| r.k <= n).count(),
            total_segments: report.records.iter().map(|r| r.k).sum(),
        }
    })
}

/// Chooses the option producing more DS-n VMs over the logged events, then
/// fewer segments in total, else keeps the current one. The log is reset.
pub fn reselect_option(log: &mut EventLog, fleet: &[MachineView], config: &SchedulerConfig) -> AllocationPolicy {
    if log.is_empty() {
        return config.current_policy;
    }
    let [a, b] = score_options(log.events(), fleet, config.n);
    log.reset();
    let key = |s: &OptionScore| (s.dsn_vms, std::cmp::Reverse(s.total_segments));
    match key(&a).cmp(&key(&b)) {
        std::cmp::Ordering::Greater => a.policy,
        std::cmp::Ordering::Less => b.policy,
        std::cmp::Ordering::Equal => config.current_policy,
    }
}

impl fmt::Display for SchedulerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerVariant::BaseLine => "baseline",
            SchedulerVariant::ImprovPlacement => "improv-placement",
            SchedulerVariant::DynamicOptionSelec => "dynamic",
        })
    }
}

impl FromStr for SchedulerVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(SchedulerVariant::BaseLine),
            "improv-placement" | "improvplacement" => Ok(SchedulerVariant::ImprovPlacement),
            "dynamic" | "dynamicoptionselec" => Ok(SchedulerVariant::DynamicOptionSelec),
            other => Err(format!("unknown scheduler variant `{other}`")),
        }
    }
}
