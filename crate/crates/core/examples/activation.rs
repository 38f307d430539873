//! Mission-state driven relays. Runs the bundled pick-cycle scenario
//! (explore, then pick, then explore again) and prints the activation
//! report: the arm camera is only relayed while picking.
//!
//!     cargo run --example activation

use pubduct::netsim::{run_scenario, Direction, FrameFate, Scenario};

fn main() {
    let scenario = Scenario::load("pick-cycle").expect("bundled scenario");
    let report = run_scenario(&scenario).expect("valid scenario");

    for line in report.trace.iter().filter(|t| t.event == "state" || t.event == "relay") {
        println!("{line}");
    }

    let arm_frames: Vec<u64> = report
        .frames_matching(Direction::Up, FrameFate::Sent)
        .filter(|f| f.op == "publish" && f.subject == "/arm_camera")
        .map(|f| f.time_us)
        .collect();
    if let (Some(first), Some(last)) = (arm_frames.first(), arm_frames.last()) {
        println!(
            "\n{} /arm_camera frames sent up the link, between {:.3} s and {:.3} s",
            arm_frames.len(),
            *first as f64 / 1e6,
            *last as f64 / 1e6
        );
    }

    let activation = report.activation.expect("scenario has rules");
    println!();
    println!("{:<16} {:>8} {:>10} {:>10} {:>12}", "relay", "enabled", "active ms", "suppressed", "bytes saved");
    for (topic, r) in &activation.relays {
        println!(
            "{topic:<16} {:>8} {:>10.0} {:>10} {:>12}",
            r.enabled, r.active_ms, r.suppressed_messages, r.bytes_saved
        );
    }
    println!("total bytes kept off the link: {}", activation.total_bytes_saved);
}
