//! Fragments a 16 GiB machine, then shows how each option splits one demand.
//!
//! `cargo run --example allocate_segments`

use dsn_sim::buddy::BuddyAllocator;
use dsn_sim::segment::{AllocationPolicy, FreeSegmentList, GIB};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut list = FreeSegmentList::new(0, 16 * GIB, GIB)?;
    let mut held = Vec::new();
    for (i, size) in [2, 1, 3, 1, 2, 1].into_iter().enumerate() {
        held.push(list.allocate(&format!("vm{i}"), size * GIB, AllocationPolicy::Opt1, i as u64)?);
    }
    // free every other VM: holes of 2, 3 and 2 GiB below a 5 GiB tail
    for a in held.iter().step_by(2) {
        list.release(a)?;
    }
    println!("free: {}", list.segments().iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));

    for policy in [AllocationPolicy::Opt1, AllocationPolicy::Opt2] {
        let mut copy = list.clone();
        let a = copy.allocate("big", 9 * GIB, policy, 10)?;
        copy.check_invariants()?;
        let parts: Vec<_> = a.segments.iter().map(ToString::to_string).collect();
        println!("{policy}: k={} {}", a.k(), parts.join(" "));
    }

    let mut buddy = BuddyAllocator::new(16 * GIB, GIB, 18)?;
    let a = buddy.allocate("big", 9 * GIB, 0)?;
    println!("buddy: k={} free blocks by order {:?}", a.k(), buddy.free_block_counts());
    Ok(())
}
