//! A bridge and a duct talking over a real websocket on localhost. The
//! edge publishes a scan and offers a gripper service; the cloud side
//! sees the scan on its own bus and calls the gripper.
//!
//!     cargo run --example live_tunnel

use std::sync::Arc;
use std::time::Duration;

use pubduct::bridge::BridgeConfig;
use pubduct::bus::LocalBus;
use pubduct::clock::SystemClock;
use pubduct::duct::{DuctConfig, RelaySpec};
use pubduct::runtime::{BridgeServer, DuctClient};
use pubduct::value::Value;

async fn wait_for(what: &str, mut ok: impl FnMut() -> bool) {
    for _ in 0..500 {
        if ok() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("gave up waiting for {what}");
}

#[tokio::main]
async fn main() {
    let cloud = LocalBus::new(Arc::new(SystemClock::new()));
    let edge = LocalBus::new(Arc::new(SystemClock::new()));

    let server = BridgeServer::start(
        BridgeConfig {
            listen_address: "127.0.0.1:0".into(),
            auth_token: Some("demo-token".into()),
            ..BridgeConfig::default()
        },
        cloud.clone(),
    )
    .await
    .expect("bind");
    println!("bridge listening at {}", server.url());

    let _grip = edge
        .register_fn("/arm/grip", "arm/Grip", |force| Ok(Value::Text(format!("gripped with {force:?}"))))
        .unwrap();

    let mut cfg = DuctConfig::new(&server.url());
    cfg.auth_token = Some("demo-token".into());
    cfg.local_topics.push(RelaySpec::new("/scan", "sensor/LaserScan"));
    cfg.local_services.push("/arm/grip".into());
    let client = DuctClient::start(cfg, edge.clone(), None).expect("valid config");
    wait_for("a session", || server.sessions() == 1).await;
    let status = client.handle().status().await.unwrap();
    println!("duct {:?} with session {}", status.phase, status.session_id);

    let seen = cloud.subscribe("/scan", 8).unwrap();
    wait_for("the scan advertisement", || cloud.topics().iter().any(|t| t.name == "/scan" && t.publishers > 0)).await;
    let scan = edge.advertise("/scan", "sensor/LaserScan").unwrap();
    scan.publish(Value::List(vec![Value::Float(1.25), Value::Float(1.5), Value::Float(4.0)]))
        .unwrap();
    wait_for("the scan", || !seen.is_empty()).await;
    let m = seen.try_recv().unwrap();
    println!("cloud got {} seq {}: {:?}", m.topic, m.seq, m.payload);

    let c = cloud.clone();
    wait_for("the service offer", || c.services().iter().any(|s| s.name == "/arm/grip")).await;
    let reply = tokio::task::spawn_blocking(move || c.call("/arm/grip", Value::Float(12.5), Duration::from_secs(5)))
        .await
        .unwrap();
    println!("cloud called /arm/grip: {reply:?}");

    client.shutdown().await;
    server.shutdown().await;
}
