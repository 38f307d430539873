//! Throttles a 100 Hz source to one message per 100 ms and prints what
//! comes out each second. Everything runs on a virtual clock.
//!
//!     cargo run --example throttle

use pubduct::flow::{Admission, ThrottleSpec, ThrottleState};

fn main() {
    let spec = ThrottleSpec::new(100, 1);
    let mut state: ThrottleState<u32> = ThrottleState::new();
    let mut per_second = [0u32; 5];

    // source ticks every 10 ms; the throttle is also polled on each tick
    for n in 0..500u32 {
        let now_us = n as u64 * 10_000;
        let mut out = state.tick(&spec, now_us);
        match state.admit(&spec, n, now_us) {
            Admission::Emit(m) => out.push(m),
            Admission::Queued | Admission::Dropped(_) => {}
        }
        per_second[(now_us / 1_000_000) as usize] += out.len() as u32;
    }

    for (s, n) in per_second.iter().enumerate() {
        println!("second {s}: {n} emitted");
    }
    let c = state.counters();
    println!(
        "admitted {} = emitted {} + queued {} + dropped {}",
        c.admitted,
        c.emitted,
        state.queued(),
        c.dropped
    );
    assert!(state.is_conserved());
}
