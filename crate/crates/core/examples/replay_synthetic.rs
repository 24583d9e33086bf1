//! Replays a seeded churn trace on a 20-machine fleet with every variant.
//!
//! `cargo run --release --example replay_synthetic -- [vms] [seed] [mean lifetime s]`

use dsn_sim::report::{format_pct, latency_stats, segment_histogram};
use dsn_sim::sim::{run, SimConfig, SimVariant};
use dsn_sim::trace::{azure_like_flavors, build_fleet, gen_synthetic, FleetSpec, SyntheticParams, TimeDistribution};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let vms: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10_000);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let lifetime: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10_800.0);

    let trace = gen_synthetic(&SyntheticParams {
        vm_count: vms,
        flavors: azure_like_flavors(),
        inter_arrival: TimeDistribution::Exponential { mean: 60.0 },
        lifetime: TimeDistribution::Exponential { mean: lifetime },
        seed,
    })?;
    let fleet = build_fleet(&FleetSpec::table4(20))?;
    let config = SimConfig { measure_latency: true, seed, ..SimConfig::default() };

    println!(
        "{:<9} {:>7} {:>8} {:>8} {:>8} {:>8} {:>12} {:>12}",
        "variant", "placed", "k=1", "k=2", "k=3", "k>3", "mean ms", "stdev ms"
    );
    for variant in SimVariant::ALL {
        let report = run(&trace, &fleet, variant, &config)?;
        let h = segment_histogram(&report);
        let lat = latency_stats(&report.latency_samples_ms());
        let [a, b, c, d] = h.as_array().map(format_pct);
        let (mean, stdev) = lat.map_or((f64::NAN, f64::NAN), |l| (l.mean, l.stdev));
        println!("{:<9} {:>7} {a:>8} {b:>8} {c:>8} {d:>8} {mean:>12.6} {stdev:>12.6}", variant.to_string(), h.placed);
    }
    Ok(())
}
