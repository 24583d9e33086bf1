//! Places one request on a small fragmented fleet with each scheduler policy.
//!
//! `cargo run --example placement`

use dsn_sim::scheduler::{baseline_pick, filter_min_segments, filter_resources, MachineView, PlacementRequest};
use dsn_sim::segment::{AllocationPolicy, GIB};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut fleet = Vec::new();
    for (id, holes) in [[1u64, 1, 1], [2, 2, 0], [0, 0, 4]].into_iter().enumerate() {
        let mut m = MachineView::new(id as u32, 16, 16 * GIB, GIB)?;
        // occupy the machine, then punch holes of the given sizes
        let mut keep = Vec::new();
        for (i, h) in holes.into_iter().enumerate() {
            if h > 0 {
                let hole = m.free_list.allocate(&format!("h{i}"), h * GIB, AllocationPolicy::Opt1, 0)?;
                keep.push(hole);
            }
            m.free_list.allocate(&format!("w{i}"), GIB, AllocationPolicy::Opt1, 0)?;
        }
        let rest = m.free_list.free_bytes();
        m.free_list.allocate("rest", rest, AllocationPolicy::Opt1, 0)?;
        for hole in &keep {
            m.free_list.release(hole)?;
        }
        m.cores_free = 16 - 2 * id as u32;
        println!("machine {id}: {} GiB free, {} cores free", m.free_bytes() / GIB, m.cores_free);
        fleet.push(m);
    }

    let request = PlacementRequest::new("vm", 2, 3 * GIB)?;
    let candidates = filter_resources(&fleet, &request);
    println!("baseline picks machine {}", baseline_pick(&candidates, &request)?);
    for policy in [AllocationPolicy::Opt1, AllocationPolicy::Opt2] {
        println!("{policy} picks machine {}", filter_min_segments(&candidates, &request, policy)?);
    }
    Ok(())
}
