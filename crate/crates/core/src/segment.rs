//! Hypervisor free-memory bookkeeping and the direct-segment allocator.
//!
//! Physical memory of a machine is split in two parts: a reserved region at
//! the bottom of the address space (hypervisor and privileged VM) and the
//! user region handed out to VMs as a small number of large segments. The
//! free part of the user region is tracked by [`FreeSegmentList`], an ordered,
//! fully coalesced list of [`SegmentDescriptor`]s.
//!
//! All addresses are byte addresses; every `limit` is exclusive.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SIZE: u64 = 4096;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("insufficient memory: {requested} bytes requested, {free} bytes free")]
    InsufficientMemory { requested: u64, free: u64 },
    #[error("segment [{base:#x}, {limit:#x}) overlaps free memory or lies outside the user region")]
    Overlap { base: u64, limit: u64 },
}

/// A contiguous range of host physical memory, `[base, limit)`.
///
/// `date` is the simulated time at which the segment ending at `base - 1`
/// was allocated, or 0 when unknown. It is kept for diagnostics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentDescriptor {
    pub base: u64,
    pub limit: u64,
    pub date: u64,
}

impl SegmentDescriptor {
    pub fn new(base: u64, limit: u64, date: u64) -> Result<Self, AllocError> {
        if base >= limit {
            return Err(AllocError::InvalidSize(format!("segment base {base:#x} must be below limit {limit:#x}")));
        }
        Ok(Self { base, limit, date })
    }

    pub fn size(&self) -> u64 {
        self.limit - self.base
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.base <= addr && addr < self.limit
    }

    pub fn overlaps(&self, other: &SegmentDescriptor) -> bool {
        self.base < other.limit && other.base < self.limit
    }
}

impl fmt::Display for SegmentDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}, {:#x})", self.base, self.limit)
    }
}

/// How a demand is composed when no single free segment can satisfy it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationPolicy {
    /// Use the smallest free segments first, keeping large ones for later VMs.
    Opt1,
    /// Take the largest free segment whole and recurse on the remainder.
    Opt2,
}

impl AllocationPolicy {
    pub fn other(self) -> Self {
        match self {
            AllocationPolicy::Opt1 => AllocationPolicy::Opt2,
            AllocationPolicy::Opt2 => AllocationPolicy::Opt1,
        }
    }
}

impl fmt::Display for AllocationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocationPolicy::Opt1 => "opt1",
            AllocationPolicy::Opt2 => "opt2",
        })
    }
}

impl FromStr for AllocationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "opt1" => Ok(AllocationPolicy::Opt1),
            "opt2" => Ok(AllocationPolicy::Opt2),
            other => Err(format!("unknown allocation policy `{other}`")),
        }
    }
}

/// Translation mode a VM ends up in once its segment count is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VmMode {
    /// `k <= n`: translated through the DS-n registers.
    Dsn,
    /// `k > n`: runs with EPT or shadow paging.
    Fallback,
}

impl fmt::Display for VmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VmMode::Dsn => "dsn",
            VmMode::Fallback => "fallback",
        })
    }
}

impl VmMode {
    pub fn for_segments(k: usize, n: usize) -> Self {
        if k <= n {
            VmMode::Dsn
        } else {
            VmMode::Fallback
        }
    }
}

/// Host segments granted to one VM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmAllocation {
    pub vm_id: String,
    /// Granted segments, in the order the allocator picked them.
    pub segments: Vec<SegmentDescriptor>,
    pub alloc_latency: Duration,
}

impl VmAllocation {
    pub fn k(&self) -> usize {
        self.segments.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.segments.iter().map(SegmentDescriptor::size).sum()
    }

    pub fn mode(&self, n: usize) -> VmMode {
        VmMode::for_segments(self.k(), n)
    }
}

/// Ordered, fully coalesced list of the free segments of one machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeSegmentList {
    machine_id: u32,
    total_bytes: u64,
    reserved_bytes: u64,
    allocated_bytes: u64,
    segments: Vec<SegmentDescriptor>,
}

impl FreeSegmentList {
    /// A machine whose user region `[reserved_bytes, total_bytes)` is entirely free.
    pub fn new(machine_id: u32, total_bytes: u64, reserved_bytes: u64) -> Result<Self, AllocError> {
        if total_bytes == 0 || reserved_bytes >= total_bytes {
            return Err(AllocError::InvalidSize(format!(
                "reserved region ({reserved_bytes} bytes) must be smaller than total memory ({total_bytes} bytes)"
            )));
        }
        Ok(Self {
            machine_id,
            total_bytes,
            reserved_bytes,
            allocated_bytes: 0,
            segments: vec![SegmentDescriptor { base: reserved_bytes, limit: total_bytes, date: 0 }],
        })
    }

    /// Rebuilds a list from an explicit set of free segments. Used to mirror
    /// allocators that keep their own state.
    pub(crate) fn from_parts(
        machine_id: u32,
        total_bytes: u64,
        reserved_bytes: u64,
        segments: Vec<SegmentDescriptor>,
    ) -> Self {
        let free: u64 = segments.iter().map(SegmentDescriptor::size).sum();
        Self { machine_id, total_bytes, reserved_bytes, allocated_bytes: total_bytes - reserved_bytes - free, segments }
    }

    pub fn machine_id(&self) -> u32 {
        self.machine_id
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved_bytes
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated_bytes
    }

    pub fn segments(&self) -> &[SegmentDescriptor] {
        &self.segments
    }

    pub fn free_bytes(&self) -> u64 {
        self.segments.iter().map(SegmentDescriptor::size).sum()
    }

    pub fn largest_free(&self) -> u64 {
        self.segments.iter().map(SegmentDescriptor::size).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Checks ordering, coalescing, bounds and byte conservation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for s in &self.segments {
            if s.base >= s.limit {
                return Err(format!("empty or inverted segment {s}"));
            }
            if s.base < self.reserved_bytes || s.limit > self.total_bytes {
                return Err(format!("segment {s} outside the user region"));
            }
        }
        for pair in self.segments.windows(2) {
            if pair[0].limit >= pair[1].base {
                return Err(format!(
                    "segments {} and {} are unordered, overlapping or not coalesced",
                    pair[0], pair[1]
                ));
            }
        }
        let accounted = self.free_bytes() + self.allocated_bytes + self.reserved_bytes;
        if accounted != self.total_bytes {
            return Err(format!(
                "conservation broken: free + allocated + reserved = {accounted}, total = {}",
                self.total_bytes
            ));
        }
        Ok(())
    }

    /// Allocates `demand` bytes for `vm_id`.
    ///
    /// An exact-size segment is taken whole (lowest base first). Otherwise the
    /// low end of the largest segment bigger than the demand is used. When no
    /// single segment is large enough, `policy` decides how several segments
    /// are combined. Fails atomically when the demand exceeds free memory.
    pub fn allocate(
        &mut self,
        vm_id: &str,
        demand: u64,
        policy: AllocationPolicy,
        now: u64,
    ) -> Result<VmAllocation, AllocError> {
        let started = Instant::now();
        let grants = self.plan(demand, policy)?;
        let mut segments = Vec::with_capacity(grants.len());
        for (base, limit) in grants {
            self.remove_range(base, limit, now)?;
            segments.push(SegmentDescriptor { base, limit, date: now });
        }
        self.allocated_bytes += demand;
        Ok(VmAllocation { vm_id: vm_id.to_owned(), segments, alloc_latency: started.elapsed() })
    }

    /// Number of segments [`allocate`](Self::allocate) would grant, without
    /// touching the list. `None` when the demand cannot be met.
    pub fn peek_segment_count(&self, demand: u64, policy: AllocationPolicy) -> Option<usize> {
        self.plan(demand, policy).ok().map(|g| g.len())
    }

    /// Returns every segment of `allocation` to the free list.
    pub fn release(&mut self, allocation: &VmAllocation) -> Result<(), AllocError> {
        self.release_segments(&allocation.segments)
    }

    /// Returns segments to the free list, extending neighbours whose borders
    /// coincide and inserting the rest in base order. Nothing is modified if
    /// any segment intersects free memory.
    pub fn release_segments(&mut self, segments: &[SegmentDescriptor]) -> Result<(), AllocError> {
        for (i, s) in segments.iter().enumerate() {
            let bad = s.base >= s.limit
                || s.base < self.reserved_bytes
                || s.limit > self.total_bytes
                || self.intersects_free(s.base, s.limit)
                || segments[..i].iter().any(|o| o.overlaps(s));
            if bad {
                return Err(AllocError::Overlap { base: s.base, limit: s.limit });
            }
        }
        let released: u64 = segments.iter().map(SegmentDescriptor::size).sum();
        if released > self.allocated_bytes {
            let s = segments[0];
            return Err(AllocError::Overlap { base: s.base, limit: s.limit });
        }
        for s in segments {
            self.insert_free(s.base, s.limit);
        }
        self.allocated_bytes -= released;
        Ok(())
    }

    /// Marks exactly the given segments as allocated. This is how a scheduler
    /// replica follows the hypervisor's decision without re-running the policy.
    pub fn reserve_exact(&mut self, segments: &[SegmentDescriptor], now: u64) -> Result<(), AllocError> {
        for s in segments {
            if !self.covers(s.base, s.limit) {
                return Err(AllocError::Overlap { base: s.base, limit: s.limit });
            }
        }
        for s in segments {
            self.remove_range(s.base, s.limit, now)?;
            self.allocated_bytes += s.size();
        }
        Ok(())
    }

    fn intersects_free(&self, base: u64, limit: u64) -> bool {
        let idx = self.segments.partition_point(|s| s.limit <= base);
        self.segments.get(idx).is_some_and(|s| s.base < limit)
    }

    fn covers(&self, base: u64, limit: u64) -> bool {
        let idx = self.segments.partition_point(|s| s.base <= base);
        idx > 0 && self.segments[idx - 1].limit >= limit && base < limit
    }

    fn insert_free(&mut self, base: u64, limit: u64) {
        let idx = self.segments.partition_point(|s| s.base < base);
        let joins_prev = idx > 0 && self.segments[idx - 1].limit == base;
        let joins_next = idx < self.segments.len() && self.segments[idx].base == limit;
        match (joins_prev, joins_next) {
            (true, true) => {
                self.segments[idx - 1].limit = self.segments[idx].limit;
                self.segments.remove(idx);
            }
            (true, false) => self.segments[idx - 1].limit = limit,
            (false, true) => {
                // base - 1 now lies in some unknown allocated segment
                self.segments[idx].base = base;
                self.segments[idx].date = 0;
            }
            (false, false) => self.segments.insert(idx, SegmentDescriptor { base, limit, date: 0 }),
        }
    }

    fn remove_range(&mut self, base: u64, limit: u64, now: u64) -> Result<(), AllocError> {
        let idx = self.segments.partition_point(|s| s.base <= base);
        if idx == 0 || self.segments[idx - 1].limit < limit {
            return Err(AllocError::Overlap { base, limit });
        }
        let i = idx - 1;
        let seg = self.segments[i];
        match (seg.base == base, seg.limit == limit) {
            (true, true) => {
                self.segments.remove(i);
            }
            (true, false) => {
                self.segments[i].base = limit;
                self.segments[i].date = now;
            }
            (false, true) => self.segments[i].limit = base,
            (false, false) => {
                self.segments[i].limit = base;
                self.segments.insert(i + 1, SegmentDescriptor { base: limit, limit: seg.limit, date: now });
            }
        }
        Ok(())
    }

    /// Computes the `[base, limit)` ranges the allocator would grant.
    fn plan(&self, demand: u64, policy: AllocationPolicy) -> Result<Vec<(u64, u64)>, AllocError> {
        if demand == 0 {
            return Err(AllocError::InvalidSize("memory demand must be positive".into()));
        }
        let free_total = self.free_bytes();
        if demand > free_total {
            return Err(AllocError::InsufficientMemory { requested: demand, free: free_total });
        }

        let mut free: Vec<(u64, u64)> = self.segments.iter().map(|s| (s.base, s.limit)).collect();
        let mut grants = Vec::new();
        let mut residual = demand;
        let size = |r: &(u64, u64)| r.1 - r.0;

        loop {
            // exact fit; `free` stays base-ordered so the first hit has the lowest base
            if let Some(i) = free.iter().position(|r| size(r) == residual) {
                grants.push(free.remove(i));
                return Ok(grants);
            }
            if let Some(i) = largest(&free, |r| size(r) > residual) {
                let (base, _) = free[i];
                grants.push((base, base + residual));
                return Ok(grants);
            }
            match policy {
                AllocationPolicy::Opt1 => {
                    let mut order: Vec<usize> = (0..free.len()).collect();
                    order.sort_by_key(|&i| (size(&free[i]), free[i].0));
                    let mut taken = Vec::new();
                    for i in order {
                        if size(&free[i]) > residual {
                            break;
                        }
                        residual -= size(&free[i]);
                        taken.push(i);
                        if residual == 0 {
                            break;
                        }
                    }
                    grants.extend(taken.iter().map(|&i| free[i]));
                    taken.sort_unstable_by(|a, b| b.cmp(a));
                    for i in taken {
                        free.remove(i);
                    }
                    if residual == 0 {
                        return Ok(grants);
                    }
                }
                AllocationPolicy::Opt2 => {
                    let i = largest(&free, |_| true).expect("free bytes cover the residual demand");
                    let seg = free.remove(i);
                    residual -= size(&seg);
                    grants.push(seg);
                }
            }
        }
    }
}

/// Index of the largest range matching `pred`; the lowest base wins ties.
fn largest(free: &[(u64, u64)], pred: impl Fn(&(u64, u64)) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in free.iter().enumerate() {
        if !pred(r) {
            continue;
        }
        match best {
            Some(b) if free[b].1 - free[b].0 >= r.1 - r.0 => {}
            _ => best = Some(i),
        }
    }
    best
}
