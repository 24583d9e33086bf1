//! Generates a synthetic trace, round-trips it through CSV and prints its statistics.
//!
//! `cargo run --example trace_stats -- [vms] [seed]`

use dsn_sim::report::{alloc_frequency, demand_size_cdf};
use dsn_sim::trace::{
    azure_like_flavors, gen_synthetic, parse_trace, trace_to_string, SyntheticParams, TimeDistribution,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let vms: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5_000);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let trace = gen_synthetic(&SyntheticParams {
        vm_count: vms,
        flavors: azure_like_flavors(),
        inter_arrival: TimeDistribution::Exponential { mean: 60.0 },
        lifetime: TimeDistribution::Exponential { mean: 10_800.0 },
        seed,
    })?;
    let text = trace_to_string(&trace);
    assert_eq!(parse_trace(text.as_bytes())?, trace);

    println!("{} events, {} bytes of csv", trace.len(), text.len());
    println!("allocations per server-hour on 20 machines: {:.3}", alloc_frequency(&trace, 20)?);
    let cdf = demand_size_cdf(&trace);
    println!("{} distinct demand sizes", cdf.distinct);
    for (size, frac) in cdf.points {
        println!("{:>8} MiB {frac:.3}", size >> 20);
    }
    Ok(())
}
