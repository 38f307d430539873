//! The in-process bus on its own: typed topics, bounded subscriber queues
//! that drop their oldest entry, and request/response services.
//!
//!     cargo run --example local_bus

use std::sync::Arc;
use std::time::Duration;

use pubduct::bus::LocalBus;
use pubduct::clock::SystemClock;
use pubduct::value::Value;

fn main() {
    let bus = LocalBus::new(Arc::new(SystemClock::new()));

    let odom = bus.advertise("/odom", "nav/Odometry").unwrap();
    let fast = bus.subscribe("/odom", 100).unwrap();
    let slow = bus.subscribe("/odom", 3).unwrap();
    for i in 0..10 {
        odom.publish(Value::map([("x", Value::Float(i as f64 * 0.1))])).unwrap();
    }
    println!("fast subscriber holds {} messages, dropped {}", fast.len(), fast.dropped());
    let kept: Vec<i64> = slow.drain().iter().map(|m| m.seq).collect();
    println!("slow subscriber kept seqs {kept:?}, dropped {}", slow.dropped());

    match bus.advertise("/odom", "geometry/Pose") {
        Err(e) => println!("second advertiser with another type: {e}"),
        Ok(_) => unreachable!(),
    }

    let _svc = bus
        .register_fn("/add", "math/Add", |args| {
            let list = match args {
                Value::List(l) => l,
                _ => return Err("expected a list".into()),
            };
            Ok(Value::Int(list.iter().filter_map(Value::as_i64).sum()))
        })
        .unwrap();
    let sum = bus.call("/add", Value::List(vec![Value::Int(2), Value::Int(40)]), Duration::from_secs(1));
    println!("/add [2, 40] -> {sum:?}");
    let bad = bus.call("/add", Value::Text("nope".into()), Duration::from_secs(1));
    println!("/add \"nope\" -> {bad:?}");
    println!("/missing -> {:?}", bus.call("/missing", Value::Null, Duration::from_secs(1)));

    for t in bus.topics() {
        println!("topic {} ({}) pubs={} subs={}", t.name, t.type_name.unwrap_or_default(), t.publishers, t.subscribers);
    }
}
