//! Runs the bundled flaky-link scenario: the tunnel breaks for 500 ms every
//! ten seconds and the duct has to find its way back each time.
//!
//!     cargo run --example flaky_link [-- --trace]

use pubduct::netsim::{run_scenario, Direction, FrameFate, Scenario};

fn main() {
    let scenario = Scenario::load("flaky-link").expect("bundled scenario");
    let report = run_scenario(&scenario).expect("valid scenario");

    if std::env::args().any(|a| a == "--trace") {
        print!("{}", report.trace_text());
        return;
    }

    println!("{} simulated ms, {} trace lines", report.duration_us / 1000, report.trace.len());
    println!("published {} / received {}", report.published.len(), report.received.len());
    println!("fresh sessions {}, resumes {}", report.fresh_sessions, report.resumes);
    for (down, up) in &report.outages {
        match up {
            Some(up) => println!("  outage at {:>9.3} ms, back after {:>7.3} ms", *down as f64 / 1e3, (up - down) as f64 / 1e3),
            None => println!("  outage at {:>9.3} ms, not back before the end", *down as f64 / 1e3),
        }
    }
    let lost = report.frames_matching(Direction::Up, FrameFate::Lost).count();
    println!("upstream frames lost in flight: {lost}");
    let failures = report.check(&scenario.expect);
    if failures.is_empty() {
        println!("all scenario expectations hold");
    } else {
        for f in failures {
            println!("FAILED: {f}");
        }
        std::process::exit(1);
    }
}
