//! Scores both allocation options on a logged window and shows the dynamic variant switching.
//!
//! `cargo run --release --example option_reselection`

use dsn_sim::scheduler::{reselect_option, score_options, EventLog, SchedulerConfig};
use dsn_sim::sim::{run, SimConfig, SimVariant};
use dsn_sim::trace::{azure_like_flavors, build_fleet, gen_synthetic, FleetSpec, SyntheticParams, TimeDistribution};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trace = gen_synthetic(&SyntheticParams {
        vm_count: 4_000,
        flavors: azure_like_flavors(),
        inter_arrival: TimeDistribution::Exponential { mean: 300.0 },
        lifetime: TimeDistribution::Exponential { mean: 86_400.0 },
        seed: 3,
    })?;
    let fleet = build_fleet(&FleetSpec::table4(10))?;

    let mut log = EventLog::new();
    for e in trace.iter().take(2_000) {
        log.record_event(e.clone());
    }
    for s in score_options(log.events(), &fleet, 3) {
        println!("{}: {} DS-n VMs, {} segments", s.policy, s.dsn_vms, s.total_segments);
    }
    println!("reselected: {}", reselect_option(&mut log, &fleet, &SchedulerConfig::default()));

    let config = SimConfig { reselect_period: 86_400, ..SimConfig::default() };
    let report = run(&trace, &fleet, SimVariant::DynamicOptionSelec, &config)?;
    println!("{} switches over {} placements", report.option_switches.len(), report.records.len());
    for s in report.option_switches.iter().take(10) {
        println!("  t={} -> {}", s.time, s.policy);
    }
    Ok(())
}
