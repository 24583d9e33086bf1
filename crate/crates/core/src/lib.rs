//! Simulator for direct-segment (DS-n) virtual machine memory.
//!
//! Hypervisor memory is handed out as a few large contiguous host segments
//! per VM so that guest physical addresses translate with register
//! arithmetic instead of a second page-table walk. The crate models the
//! segment allocator, the DS-n registers and their cost, a segment-aware
//! placement scheduler, and a trace-driven fleet simulator with reporting.

pub mod buddy;
pub mod cli;
pub mod kvfile;
pub mod mmu;
pub mod report;
pub mod scheduler;
pub mod segment;
pub mod sim;
pub mod trace;
