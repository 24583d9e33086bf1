//! Builds DS-3 registers for a two-segment VM and translates a few addresses.
//!
//! `cargo run --example translate_gpa`

use dsn_sim::mmu::{build_register_file, RegisterOutcome};
use dsn_sim::segment::{AllocationPolicy, FreeSegmentList, GIB};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut list = FreeSegmentList::new(0, 8 * GIB, GIB)?;
    let a = list.allocate("a", 2 * GIB, AllocationPolicy::Opt1, 0)?;
    list.allocate("b", GIB, AllocationPolicy::Opt1, 0)?;
    list.release(&a)?;
    // 2 GiB free at 1 GiB, 4 GiB free at 4 GiB: a 5 GiB VM needs both
    let vm = list.allocate("vm", 5 * GIB, AllocationPolicy::Opt2, 1)?;

    let regs = match build_register_file(&vm, 5 * GIB, 3)? {
        RegisterOutcome::Dsn(regs) => regs,
        RegisterOutcome::Fallback { k } => return Err(format!("{k} segments do not fit in DS-3").into()),
    };
    print!("{}", regs.to_kv_string());
    for gpa in [0, 0x1000, 2 * GIB - 1, 2 * GIB, 5 * GIB - 1, 5 * GIB] {
        match regs.translate(gpa) {
            Ok(hpa) => println!("{gpa:#x} -> {hpa:#x}"),
            Err(v) => println!("{gpa:#x} -> {v}"),
        }
    }
    Ok(())
}
