//! Boots a whole snapshot at once and reports how many VMs got DS-n.
//!
//! `cargo run --example bootstorm`

use dsn_sim::report::{format_pct, segment_histogram};
use dsn_sim::sim::{run, SimConfig, SimVariant};
use dsn_sim::trace::{derive_bootstorm, fleet_from_snapshot, parse_snapshot};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut csv = String::from("vm_id,cores,memory_bytes,host_id,host_ram_bytes,host_cores\n");
    for i in 0..24u64 {
        let gib: u64 = [1, 2, 4, 8][(i % 4) as usize];
        csv.push_str(&format!("vm{i:02},2,{},host{},68719476736,32\n", gib << 30, i % 3));
    }
    let snapshot = parse_snapshot(csv.as_bytes())?;
    let fleet = fleet_from_snapshot(&snapshot, 1 << 30)?;
    let events = derive_bootstorm(&snapshot, 3600);

    for variant in SimVariant::ALL {
        let report = run(&events, &fleet, variant, &SimConfig::default())?;
        let h = segment_histogram(&report);
        let [a, b, c, d] = h.as_array().map(format_pct);
        println!("{variant}: placed={} rejected={} k=1 {a} k=2 {b} k=3 {c} k>3 {d}", h.placed, report.rejections.len());
    }
    Ok(())
}
