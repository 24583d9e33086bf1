//! Compares the virtualization cost of two workloads under DS-n, EPT and shadow paging.
//!
//! `cargo run --example cost_model`

use dsn_sim::mmu::{dsn_reg_ops, estimate_runtime_dsn, walk_refs, WalkMode, WorkloadCounters};
use dsn_sim::report::{cost_summary, cost_summary_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for mode in [WalkMode::Native1D, WalkMode::Ept, WalkMode::Shadow, WalkMode::Dsn] {
        println!("{mode}: {} memory references per miss", walk_refs(mode));
    }
    println!("dsn register ops per miss with 4 levels: {}", dsn_reg_ops(4)?);

    let graph = WorkloadCounters::from_kv_str(
        "n_tlb = 2e9\nn_exit = 1e6\nc_1d = 40\nc_2d = 180\nc_exit = 1500\nc_handler = 3000\nt_1d = 120\nt_reg2reg = 2e-9\ncpu_hz = 2.4e9\n",
    )?;
    let kv = WorkloadCounters::from_kv_str(
        "n_tlb = 5e8\nn_exit = 4e7\nc_1d = 30\nc_2d = 110\nc_exit = 1500\nc_handler = 3000\nt_1d = 60\nt_reg2reg = 2e-9\ncpu_hz = 2.4e9\n",
    )?;
    for (name, c) in [("graph", &graph), ("kv", &kv)] {
        println!("{name}: estimated DS-n runtime {:.1} s", estimate_runtime_dsn(c));
    }
    print!("{}", cost_summary_csv(&cost_summary(&[("graph".into(), graph), ("kv".into(), kv)]))?);
    Ok(())
}
