//! Relays a robot-like workload over a simulated link and summarizes what
//! made it across. Takes a scenario file or a bundled scenario name.
//!
//!     cargo run --example sim_relay -- perfect-link
//!     cargo run --example sim_relay -- scenarios/flaky-link.toml

use std::collections::BTreeMap;

use pubduct::netsim::{run_scenario, Scenario};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "perfect-link".into());
    let scenario = match Scenario::load(&which) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    let report = run_scenario(&scenario).expect("scenario was validated on load");

    let mut per_topic: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for p in &report.published {
        per_topic.entry(&p.topic).or_default().0 += 1;
    }
    for r in &report.received {
        per_topic.entry(&r.topic).or_default().1 += 1;
    }
    println!("{:<16} {:>9} {:>9}", "topic", "published", "received");
    for (topic, (p, r)) in per_topic {
        println!("{topic:<16} {p:>9} {r:>9}");
    }
    let bytes: usize = report.frames.iter().filter(|f| f.fate == pubduct::netsim::FrameFate::Delivered).map(|f| f.len).sum();
    println!("{} frames carried {} KiB in {} ms", report.frames.len(), bytes / 1024, report.duration_us / 1000);

    let failures = report.check(&scenario.expect);
    for f in &failures {
        println!("FAILED: {f}");
    }
    std::process::exit(if failures.is_empty() { 0 } else { 1 });
}
