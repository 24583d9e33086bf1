use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::WalkMode;
use crate::kvfile::{KvError, KvFile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CountersError {
    #[error(transparent)]
    File(#[from] KvError),
    #[error("counter `{0}` must be non-negative")]
    Negative(&'static str),
}

/// Measured inputs of the runtime and cost estimators.
///
/// Counter file keys (one per line, `name = number`):
///
/// | key         | unit                                         |
/// |-------------|----------------------------------------------|
/// | `n_tlb`     | TLB misses                                   |
/// | `n_exit`    | shadow-paging VM exits on page-table writes  |
/// | `c_1d`      | cycles per 1D walk                           |
/// | `c_2d`      | cycles per 2D walk                           |
/// | `c_exit`    | cycles per VM exit + VM entry pair           |
/// | `c_handler` | mean cycles in the hypervisor handler        |
/// | `t_1d`      | seconds, runtime with 1D walks               |
/// | `t_reg2reg` | seconds of register arithmetic per TLB miss  |
/// | `cpu_hz`    | optional, converts cycles to seconds         |
///
/// Missing counters default to zero except `cpu_hz`, which stays unset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkloadCounters {
    pub n_tlb: f64,
    pub n_exit: f64,
    pub c_1d: f64,
    pub c_2d: f64,
    pub c_exit: f64,
    pub c_handler: f64,
    pub t_1d: f64,
    pub t_reg2reg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cpu_hz: Option<f64>,
}

const KEYS: [&str; 9] = ["n_tlb", "n_exit", "c_1d", "c_2d", "c_exit", "c_handler", "t_1d", "t_reg2reg", "cpu_hz"];

impl WorkloadCounters {
    pub fn from_kv_str(text: &str) -> Result<Self, CountersError> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(&KEYS)?;
        let counters = Self {
            n_tlb: kv.f64_or("n_tlb", 0.0)?,
            n_exit: kv.f64_or("n_exit", 0.0)?,
            c_1d: kv.f64_or("c_1d", 0.0)?,
            c_2d: kv.f64_or("c_2d", 0.0)?,
            c_exit: kv.f64_or("c_exit", 0.0)?,
            c_handler: kv.f64_or("c_handler", 0.0)?,
            t_1d: kv.f64_or("t_1d", 0.0)?,
            t_reg2reg: kv.f64_or("t_reg2reg", 0.0)?,
            cpu_hz: if kv.contains("cpu_hz") { Some(kv.f64("cpu_hz")?) } else { None },
        };
        counters.validate()?;
        Ok(counters)
    }

    pub fn validate(&self) -> Result<(), CountersError> {
        let fields = [
            ("n_tlb", self.n_tlb),
            ("n_exit", self.n_exit),
            ("c_1d", self.c_1d),
            ("c_2d", self.c_2d),
            ("c_exit", self.c_exit),
            ("c_handler", self.c_handler),
            ("t_1d", self.t_1d),
            ("t_reg2reg", self.t_reg2reg),
            ("cpu_hz", self.cpu_hz.unwrap_or(0.0)),
        ];
        for (name, v) in fields {
            if v.is_nan() || v < 0.0 {
                return Err(CountersError::Negative(name));
            }
        }
        Ok(())
    }
}

/// Estimated DS-n runtime: the 1D-walk runtime plus the register arithmetic
/// performed on every TLB miss.
pub fn estimate_runtime_dsn(counters: &WorkloadCounters) -> f64 {
    counters.t_1d + counters.n_tlb * counters.t_reg2reg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub mode: WalkMode,
    /// Cycles spent walking page tables.
    pub walk_cycles: f64,
    /// Cycles spent in VM exits and their handlers (shadow paging only).
    pub exit_cycles: f64,
    pub total_cycles: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_seconds: Option<f64>,
}

/// Memory virtualization cost of running the workload in `mode`.
pub fn virtualization_cost(mode: WalkMode, counters: &WorkloadCounters) -> CostBreakdown {
    let (walk_cycles, exit_cycles) = match mode {
        WalkMode::Native1D | WalkMode::Dsn => (counters.c_1d * counters.n_tlb, 0.0),
        WalkMode::Ept => (counters.c_2d * counters.n_tlb, 0.0),
        WalkMode::Shadow => (counters.c_1d * counters.n_tlb, counters.n_exit * (counters.c_exit + counters.c_handler)),
    };
    let total_cycles = walk_cycles + exit_cycles;
    CostBreakdown {
        mode,
        walk_cycles,
        exit_cycles,
        total_cycles,
        total_seconds: counters.cpu_hz.filter(|hz| *hz > 0.0).map(|hz| total_cycles / hz),
    }
}
