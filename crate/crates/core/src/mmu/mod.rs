//! DS-n address translation hardware model and TLB-miss cost estimators.

mod cost;
mod registers;

pub use cost::{estimate_runtime_dsn, virtualization_cost, CostBreakdown, CountersError, WorkloadCounters};
pub use registers::{build_register_file, DsnViolation, MmuError, RegisterFile, RegisterOutcome, MAX_SEGMENTS};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Page-table levels of the radix tree walked on a TLB miss.
pub const DEFAULT_LEVELS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WalkMode {
    Native1D,
    #[serde(rename = "DSn")]
    Dsn,
    #[serde(rename = "EPT")]
    Ept,
    Shadow,
}

impl WalkMode {
    pub const ALL: [WalkMode; 4] = [WalkMode::Native1D, WalkMode::Dsn, WalkMode::Ept, WalkMode::Shadow];
}

impl fmt::Display for WalkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WalkMode::Native1D => "native",
            WalkMode::Dsn => "dsn",
            WalkMode::Ept => "ept",
            WalkMode::Shadow => "shadow",
        })
    }
}

impl FromStr for WalkMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "native" | "native1d" => Ok(WalkMode::Native1D),
            "dsn" | "ds-n" => Ok(WalkMode::Dsn),
            "ept" => Ok(WalkMode::Ept),
            "shadow" | "sha" => Ok(WalkMode::Shadow),
            other => Err(format!("unknown walk mode `{other}`")),
        }
    }
}

/// Memory references per TLB miss with radix-4 tables.
pub fn walk_refs(mode: WalkMode) -> u32 {
    walk_refs_with_levels(mode, DEFAULT_LEVELS)
}

/// Memory references per TLB miss for an `levels`-deep radix tree.
///
/// A nested walk translates each of the `levels` guest table pointers and
/// the final guest physical address through the host tree, on top of the
/// guest references themselves: `levels * (levels + 1) + levels`.
pub fn walk_refs_with_levels(mode: WalkMode, levels: u32) -> u32 {
    match mode {
        WalkMode::Native1D | WalkMode::Dsn | WalkMode::Shadow => levels,
        WalkMode::Ept => (levels + 1) * (levels + 1) - 1,
    }
}

/// Upper bound on DS-n register operations per TLB miss: one offset addition
/// and one bounds comparison for every guest physical address the walk extracts.
pub fn dsn_reg_ops(levels: u32) -> Result<u32, MmuError> {
    if levels == 0 {
        return Err(MmuError::InvalidLevels);
    }
    Ok(levels * 2)
}
