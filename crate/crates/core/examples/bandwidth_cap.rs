//! Offers twice what the link can carry and watches the duct cope: the
//! link is capped at 1 MiB/s, a camera pushes 16 KiB frames at 128 Hz.
//! Backpressure holds frames back, the relay queue drops the oldest, and
//! no one-second window ever carries more than the cap.
//!
//!     cargo run --example bandwidth_cap

use pubduct::duct::{DuctConfig, RelaySpec};
use pubduct::netsim::{run_scenario, Direction, LinkProfile, PayloadKind, Scenario, WorkloadItem, SIM_BRIDGE_URL};

const MIB: f64 = 1024.0 * 1024.0;

fn main() {
    let mut duct = DuctConfig::new(SIM_BRIDGE_URL);
    duct.local_topics.push(RelaySpec {
        queue_length: 4,
        ..RelaySpec::new("/camera", "sensor/CompressedImage")
    });
    let link = LinkProfile {
        latency_ms: 25.0,
        bandwidth_bytes_per_s: Some(MIB),
        ..LinkProfile::perfect(7)
    };
    let mut scenario = Scenario::new("bandwidth-cap", 20_000.0, link, duct);
    scenario.workload.push(WorkloadItem {
        topic: "/camera".into(),
        rate_hz: 128.0,
        payload_bytes: 16 * 1024,
        payload: PayloadKind::Bytes,
        start_ms: 500.0,
        stop_ms: None,
    });
    let report = run_scenario(&scenario).expect("valid scenario");

    let peak = report.max_delivered_in_window(Direction::Up, 1_000_000);
    println!("offered   {:.2} MiB/s", 128.0 * 16.0 / 1024.0);
    println!("peak      {:.3} MiB in any one-second window", peak as f64 / MIB);
    println!(
        "delivered {:.3} MiB/s on average",
        report.received.len() as f64 * 16.0 / 1024.0 / (report.duration_us as f64 / 1e6 - 0.5)
    );

    let stats = &report.duct_relays["/camera"];
    let t = stats.throttle;
    println!(
        "relay: admitted {} = emitted {} + queued {} + dropped {}",
        t.admitted, t.emitted, stats.queued, t.dropped
    );
    println!("published {}, received {}", report.published.len(), report.received.len());
}
