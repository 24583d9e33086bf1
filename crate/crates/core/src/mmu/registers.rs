use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvfile::{KvError, KvFile};
use crate::segment::{SegmentDescriptor, VmAllocation};

/// Largest `n` the register model supports.
pub const MAX_SEGMENTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MmuError {
    #[error("n must be in 1..={MAX_SEGMENTS}, got {0}")]
    UnsupportedN(usize),
    #[error("inconsistent register file: {0}")]
    InvalidRegisters(String),
    #[error("allocation covers {allocated} bytes but the guest has {guest} bytes")]
    Inconsistent { allocated: u64, guest: u64 },
    #[error("page-table levels must be at least 1")]
    InvalidLevels,
    #[error(transparent)]
    File(#[from] KvError),
}

/// Raised when a guest physical address falls outside every mapped segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("DS-n violation at gpa {gpa:#x}")]
pub struct DsnViolation {
    pub gpa: u64,
}

/// GBReg/HBReg/limit registers of one DS-n VM.
///
/// Guest segment `i` starts at `GBReg_i` (`GBReg_0` is implicitly 0) and maps
/// to the host range starting at `HBReg_i`. The last host segment ends at
/// `limit`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterFile {
    n: usize,
    guest_bases: Vec<u64>,
    host_bases: Vec<u64>,
    limit: u64,
}

impl RegisterFile {
    /// `guest_bases` holds `GBReg_1..GBReg_{k-1}`, `host_bases` holds
    /// `HBReg_0..HBReg_{k-1}`.
    pub fn new(n: usize, guest_bases: Vec<u64>, host_bases: Vec<u64>, limit: u64) -> Result<Self, MmuError> {
        if !(1..=MAX_SEGMENTS).contains(&n) {
            return Err(MmuError::UnsupportedN(n));
        }
        let k = host_bases.len();
        if k == 0 || k > n {
            return Err(MmuError::InvalidRegisters(format!("{k} host segments for n = {n}")));
        }
        if guest_bases.len() != k - 1 {
            return Err(MmuError::InvalidRegisters(format!(
                "{} guest bases for {k} segments (expected {})",
                guest_bases.len(),
                k - 1
            )));
        }
        let mut prev = 0u64;
        for &gb in &guest_bases {
            if gb <= prev {
                return Err(MmuError::InvalidRegisters("guest bases must be positive and strictly increasing".into()));
            }
            prev = gb;
        }
        let regs = Self { n, guest_bases, host_bases, limit };
        let mut host: Vec<(u64, u64)> = Vec::with_capacity(k);
        for i in 0..k {
            let start = regs.host_bases[i];
            let end = regs
                .host_end(i)
                .ok_or_else(|| MmuError::InvalidRegisters(format!("host segment {i} overflows the address space")))?;
            if end <= start {
                return Err(MmuError::InvalidRegisters(format!("host segment {i} is empty")));
            }
            host.push((start, end));
        }
        host.sort_unstable();
        if host.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(MmuError::InvalidRegisters("host segments overlap".into()));
        }
        Ok(regs)
    }

    /// Reads a register file written as `name = value` lines:
    /// `n`, `guest_bases` (comma list, may be absent), `host_bases`, `limit`.
    pub fn from_kv_str(text: &str) -> Result<Self, MmuError> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(&["n", "guest_bases", "host_bases", "limit"])?;
        let n = kv.u64("n")? as usize;
        Self::new(n, kv.u64_list("guest_bases")?, kv.u64_list("host_bases")?, kv.u64("limit")?)
    }

    pub fn to_kv_string(&self) -> String {
        let list = |v: &[u64]| v.iter().map(|x| format!("{x:#x}")).collect::<Vec<_>>().join(", ");
        let mut out = format!("n = {}\n", self.n);
        if !self.guest_bases.is_empty() {
            out.push_str(&format!("guest_bases = {}\n", list(&self.guest_bases)));
        }
        out.push_str(&format!("host_bases = {}\nlimit = {:#x}\n", list(&self.host_bases), self.limit));
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.host_bases.len()
    }

    pub fn guest_bases(&self) -> &[u64] {
        &self.guest_bases
    }

    pub fn host_bases(&self) -> &[u64] {
        &self.host_bases
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    /// `GBReg_i`, with `GBReg_0 = 0`.
    pub fn guest_base(&self, i: usize) -> u64 {
        if i == 0 {
            0
        } else {
            self.guest_bases[i - 1]
        }
    }

    /// Size of the guest physical space the registers map.
    pub fn guest_size(&self) -> u64 {
        let last = self.k() - 1;
        self.guest_base(last) + (self.limit - self.host_bases[last])
    }

    /// Exclusive host end of segment `i`.
    fn host_end(&self, i: usize) -> Option<u64> {
        if i + 1 == self.k() {
            Some(self.limit)
        } else {
            self.host_bases[i].checked_add(self.guest_base(i + 1) - self.guest_base(i))
        }
    }

    /// `hpa = HBReg_i + (gpa - GBReg_i)` for the last `i` with `GBReg_i <= gpa`,
    /// checked against the end of host segment `i`.
    pub fn translate(&self, gpa: u64) -> Result<u64, DsnViolation> {
        let i = (1..self.k()).rev().find(|&i| self.guest_base(i) <= gpa).unwrap_or(0);
        let end = self.host_end(i).ok_or(DsnViolation { gpa })?;
        match self.host_bases[i].checked_add(gpa - self.guest_base(i)) {
            Some(hpa) if hpa < end => Ok(hpa),
            _ => Err(DsnViolation { gpa }),
        }
    }
}

/// Result of configuring a VM's translation hardware.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegisterOutcome {
    Dsn(RegisterFile),
    /// More segments than registers; the VM runs with EPT or shadow paging.
    Fallback {
        k: usize,
    },
}

/// Lays the guest physical space `[0, guest_mem_bytes)` over the allocation's
/// host segments in ascending host-address order.
pub fn build_register_file(
    allocation: &VmAllocation,
    guest_mem_bytes: u64,
    n: usize,
) -> Result<RegisterOutcome, MmuError> {
    build_from_segments(&allocation.segments, guest_mem_bytes, n)
}

pub(crate) fn build_from_segments(
    segments: &[SegmentDescriptor],
    guest_mem_bytes: u64,
    n: usize,
) -> Result<RegisterOutcome, MmuError> {
    if !(1..=MAX_SEGMENTS).contains(&n) {
        return Err(MmuError::UnsupportedN(n));
    }
    if segments.is_empty() {
        return Err(MmuError::Inconsistent { allocated: 0, guest: guest_mem_bytes });
    }
    let allocated: u64 = segments.iter().map(SegmentDescriptor::size).sum();
    if allocated != guest_mem_bytes {
        return Err(MmuError::Inconsistent { allocated, guest: guest_mem_bytes });
    }
    if segments.len() > n {
        return Ok(RegisterOutcome::Fallback { k: segments.len() });
    }
    let mut sorted = segments.to_vec();
    sorted.sort_unstable_by_key(|s| s.base);
    let mut guest_bases = Vec::with_capacity(sorted.len() - 1);
    let mut cursor = 0u64;
    for s in &sorted[..sorted.len() - 1] {
        cursor += s.size();
        guest_bases.push(cursor);
    }
    let host_bases = sorted.iter().map(|s| s.base).collect();
    let limit = sorted[sorted.len() - 1].limit;
    RegisterFile::new(n, guest_bases, host_bases, limit).map(RegisterOutcome::Dsn)
}
