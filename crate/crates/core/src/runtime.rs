//! Real-network drivers: an axum websocket server around [`Bridge`] and a
//! tokio-tungstenite client around [`Duct`].
//!
//! Each driver is one task that owns its state machine. Socket readers and
//! writers are separate tasks talking to it over channels, so the state
//! machine itself never awaits.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message as AxMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, Notify};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message as TgMessage;
use tracing::{debug, info, warn};

use crate::activation::{ActivationController, ActivationReport, RuleSet};
use crate::bridge::{Bridge, BridgeConfig, BridgeError, ConnControl, ConnId};
use crate::bus::LocalBus;
use crate::duct::{Duct, DuctConfig, DuctError, DuctEvent, DuctRequest, Phase};
use crate::transport::{Transport, TransportError};
use crate::wire::Frame;

/// Smallest sleep of a driver loop that still has due work (for example a
/// congested link that has to drain first).
const RETRY_GRANULARITY: Duration = Duration::from_millis(1);
/// Upper bound on driver sleeps, as a backstop against missed wakeups.
const MAX_IDLE: Duration = Duration::from_millis(250);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

enum Outgoing {
    Frame(Frame),
    Close,
}

/// Write side of a websocket, handed to the state machines.
struct WsOut {
    tx: mpsc::UnboundedSender<Outgoing>,
    backlog: Arc<AtomicUsize>,
}

impl WsOut {
    fn new() -> (Self, mpsc::UnboundedReceiver<Outgoing>, Arc<AtomicUsize>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let backlog = Arc::new(AtomicUsize::new(0));
        (
            WsOut {
                tx,
                backlog: backlog.clone(),
            },
            rx,
            backlog,
        )
    }
}

impl Transport for WsOut {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        let len = frame.len();
        self.tx
            .send(Outgoing::Frame(frame))
            .map_err(|_| TransportError::Closed)?;
        self.backlog.fetch_add(len, Ordering::Relaxed);
        Ok(())
    }

    fn backlog(&self) -> usize {
        self.backlog.load(Ordering::Relaxed)
    }

    fn close(&mut self) {
        let _ = self.tx.send(Outgoing::Close);
    }
}

fn sleep_for(next_wakeup_us: Option<u64>, now_us: u64) -> Duration {
    match next_wakeup_us {
        Some(t) if t <= now_us => RETRY_GRANULARITY,
        Some(t) => Duration::from_micros(t - now_us).min(MAX_IDLE),
        None => MAX_IDLE,
    }
}

fn waker(bus: &LocalBus) -> (Arc<Notify>, u64) {
    let notify = Arc::new(Notify::new());
    let n = notify.clone();
    let key = bus.add_activity_hook(Arc::new(move || n.notify_one()));
    (notify, key)
}

enum ConnEvent {
    Open {
        token: Option<String>,
        reply: oneshot::Sender<Result<Accepted, BridgeError>>,
    },
    Frame(ConnId, Frame),
    Closed(ConnId),
}

struct Accepted {
    conn: ConnId,
    outgoing: mpsc::UnboundedReceiver<Outgoing>,
    backlog: Arc<AtomicUsize>,
}

#[derive(Clone)]
struct HttpState {
    events: mpsc::UnboundedSender<ConnEvent>,
    sessions: Arc<AtomicUsize>,
}

/// A bridge listening for ducts.
pub struct BridgeServer {
    addr: SocketAddr,
    path: String,
    sessions: Arc<AtomicUsize>,
    shutdown: Option<oneshot::Sender<()>>,
    http: JoinHandle<()>,
    driver: JoinHandle<()>,
}

impl BridgeServer {
    /// Binds `cfg.listen_address` and starts serving. Port 0 picks a free
    /// port; see [`local_addr`](Self::local_addr).
    pub async fn start(cfg: BridgeConfig, bus: LocalBus) -> Result<Self, BridgeError> {
        let bridge = Bridge::new(cfg.clone(), bus.clone())?;
        let listener = TcpListener::bind(&cfg.listen_address)
            .await
            .map_err(|e| BridgeError::BindFailure {
                addr: cfg.listen_address.clone(),
                reason: e.to_string(),
            })?;
        let addr = listener.local_addr().map_err(|e| BridgeError::BindFailure {
            addr: cfg.listen_address.clone(),
            reason: e.to_string(),
        })?;
        let sessions = Arc::new(AtomicUsize::new(0));
        let (events_tx, events_rx) = mpsc::unbounded_channel();
        let (shutdown_tx, shutdown_rx) = oneshot::channel();

        let driver = tokio::spawn(drive_bridge(bridge, bus, events_rx, sessions.clone(), shutdown_rx));
        let state = HttpState {
            events: events_tx,
            sessions: sessions.clone(),
        };
        let app = Router::new()
            .route(&cfg.path, get(ws_handler))
            .route("/healthz", get(healthz))
            .with_state(state);
        let http = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                warn!(target: "bridge", "http server stopped: {e}");
            }
        });
        info!(target: "bridge", %addr, path = %cfg.path, "listening");
        Ok(BridgeServer {
            addr,
            path: cfg.path,
            sessions,
            shutdown: Some(shutdown_tx),
            http,
            driver,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// The websocket URL a duct should dial.
    pub fn url(&self) -> String {
        format!("ws://{}{}", self.addr, self.path)
    }

    /// Sessions currently attached to a connection.
    pub fn sessions(&self) -> usize {
        self.sessions.load(Ordering::Relaxed)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.http.abort();
        // the listener lives in the http task; wait so the port is free on return
        let _ = (&mut self.http).await;
        let _ = (&mut self.driver).await;
    }

    /// Serves until the process is interrupted.
    pub async fn wait(self) {
        let _ = tokio::signal::ctrl_c().await;
        self.shutdown().await;
    }
}

async fn healthz(State(st): State<HttpState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "sessions": st.sessions.load(Ordering::Relaxed) }))
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let v = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    v.strip_prefix("Bearer ").map(|t| t.trim().to_owned())
}

async fn ws_handler(State(st): State<HttpState>, headers: HeaderMap, ws: WebSocketUpgrade) -> Response {
    let (reply, answer) = oneshot::channel();
    let open = ConnEvent::Open {
        token: bearer(&headers),
        reply,
    };
    if st.events.send(open).is_err() {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    let accepted = match answer.await {
        Ok(Ok(a)) => a,
        Ok(Err(BridgeError::AuthFailure)) => return StatusCode::UNAUTHORIZED.into_response(),
        _ => return StatusCode::SERVICE_UNAVAILABLE.into_response(),
    };
    let conn = accepted.conn;
    let failed = st.events.clone();
    let events = st.events.clone();
    ws.on_failed_upgrade(move |e| {
        debug!(target: "bridge", "upgrade failed: {e}");
        let _ = failed.send(ConnEvent::Closed(conn));
    })
    .on_upgrade(move |socket| serve_socket(socket, accepted, events))
}

async fn serve_socket(socket: WebSocket, accepted: Accepted, events: mpsc::UnboundedSender<ConnEvent>) {
    let Accepted {
        conn,
        mut outgoing,
        backlog,
    } = accepted;
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(out) = outgoing.recv().await {
            match out {
                Outgoing::Frame(frame) => {
                    let len = frame.len();
                    let msg = match frame {
                        Frame::Binary(b) => AxMessage::Binary(b.into()),
                        Frame::Text(t) => AxMessage::Text(t.into()),
                    };
                    let ok = sink.send(msg).await.is_ok();
                    backlog.fetch_sub(len, Ordering::Relaxed);
                    if !ok {
                        break;
                    }
                }
                Outgoing::Close => {
                    let _ = sink.send(AxMessage::Close(None)).await;
                    break;
                }
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        let frame = match msg {
            AxMessage::Binary(b) => Frame::Binary(b.to_vec()),
            AxMessage::Text(t) => Frame::Text(t.as_str().to_owned()),
            AxMessage::Close(_) => break,
            AxMessage::Ping(_) | AxMessage::Pong(_) => continue,
        };
        if events.send(ConnEvent::Frame(conn, frame)).is_err() {
            break;
        }
    }
    let _ = events.send(ConnEvent::Closed(conn));
    writer.abort();
}

async fn drive_bridge(
    mut bridge: Bridge,
    bus: LocalBus,
    mut events: mpsc::UnboundedReceiver<ConnEvent>,
    sessions: Arc<AtomicUsize>,
    mut shutdown: oneshot::Receiver<()>,
) {
    let (notify, hook) = waker(&bus);
    let mut conns: BTreeMap<ConnId, WsOut> = BTreeMap::new();
    loop {
        let now = bus.now_us();
        for c in bridge.poll(now, &mut conns) {
            if let Some(mut out) = conns.remove(&c) {
                out.close();
            }
            bridge.on_close(c, now);
        }
        sessions.store(bridge.session_count(), Ordering::Relaxed);
        let idle = sleep_for(bridge.next_wakeup(), now);

        tokio::select! {
            ev = events.recv() => {
                let Some(ev) = ev else { break };
                let now = bus.now_us();
                match ev {
                    ConnEvent::Open { token, reply } => {
                        let result = bridge.open(token.as_deref(), now).map(|conn| {
                            let (out, outgoing, backlog) = WsOut::new();
                            conns.insert(conn, out);
                            Accepted { conn, outgoing, backlog }
                        });
                        let _ = reply.send(result);
                    }
                    ConnEvent::Frame(conn, frame) => {
                        if let Some(out) = conns.get_mut(&conn) {
                            if bridge.on_frame(conn, &frame, now, out) == ConnControl::Close {
                                out.close();
                                conns.remove(&conn);
                                bridge.on_close(conn, now);
                            }
                        }
                    }
                    ConnEvent::Closed(conn) => {
                        conns.remove(&conn);
                        bridge.on_close(conn, now);
                    }
                }
            }
            _ = notify.notified() => {}
            _ = tokio::time::sleep(idle) => {}
            _ = &mut shutdown => break,
        }
    }
    for (_, mut out) in conns {
        out.close();
    }
    bus.remove_activity_hook(hook);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuctStatus {
    pub phase: Phase,
    pub session_id: String,
    pub resumes: u64,
    pub sessions: u64,
}

enum Control {
    SetRelay(String, bool),
    Status(oneshot::Sender<DuctStatus>),
    Report(oneshot::Sender<Option<ActivationReport>>),
    Shutdown,
}

/// Cloneable, thread-safe handle to a running duct.
#[derive(Clone)]
pub struct DuctHandle {
    ctl: mpsc::UnboundedSender<Control>,
    relays: Arc<BTreeSet<String>>,
}

impl DuctHandle {
    /// Queues a relay toggle. Callable from any thread, async or not.
    pub fn set_relay_enabled(&self, topic: &str, enabled: bool) -> Result<(), DuctError> {
        if !self.relays.contains(topic) {
            return Err(DuctError::UnknownRelay(topic.to_owned()));
        }
        let _ = self.ctl.send(Control::SetRelay(topic.to_owned(), enabled));
        Ok(())
    }

    /// `None` once the duct has stopped.
    pub async fn status(&self) -> Option<DuctStatus> {
        let (tx, rx) = oneshot::channel();
        self.ctl.send(Control::Status(tx)).ok()?;
        rx.await.ok()
    }

    /// Activation report, if the duct runs with rules.
    pub async fn activation_report(&self) -> Option<ActivationReport> {
        let (tx, rx) = oneshot::channel();
        self.ctl.send(Control::Report(tx)).ok()?;
        rx.await.ok().flatten()
    }

    pub fn shutdown(&self) {
        let _ = self.ctl.send(Control::Shutdown);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuctExit {
    Shutdown,
    /// The reconnect policy's `give_up_after_ms` ran out.
    GaveUp,
}

pub struct DuctClient {
    handle: DuctHandle,
    task: JoinHandle<DuctExit>,
}

impl DuctClient {
    /// Validates `cfg`, installs the relays on `bus` and starts connecting.
    /// Must be called inside a tokio runtime.
    pub fn start(cfg: DuctConfig, bus: LocalBus, rules: Option<RuleSet>) -> Result<Self, DuctError> {
        let seed = rand::random();
        let duct = Duct::new(cfg, bus.clone(), seed)?;
        let now = bus.now_us();
        let controller = match rules {
            Some(r) => Some(
                ActivationController::listening(r, &duct, &bus, now)
                    .map_err(|e| DuctError::ConfigInvalid(e.to_string()))?,
            ),
            None => None,
        };
        let relays = Arc::new(duct.config().relay_topics().map(str::to_owned).collect());
        let (ctl, ctl_rx) = mpsc::unbounded_channel();
        let task = tokio::spawn(drive_duct(duct, bus, controller, ctl_rx));
        Ok(DuctClient {
            handle: DuctHandle { ctl, relays },
            task,
        })
    }

    pub fn handle(&self) -> DuctHandle {
        self.handle.clone()
    }

    /// Waits for the duct to stop.
    pub async fn join(self) -> DuctExit {
        self.task.await.unwrap_or(DuctExit::Shutdown)
    }

    pub async fn shutdown(self) -> DuctExit {
        self.handle.shutdown();
        self.join().await
    }
}

type WsStream = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn dial(url: String, token: Option<String>) -> Result<WsStream, String> {
    let mut request = url.as_str().into_client_request().map_err(|e| e.to_string())?;
    if let Some(t) = token {
        let value = format!("Bearer {t}").parse().map_err(|_| "token is not a valid header value".to_string())?;
        request.headers_mut().insert(header::AUTHORIZATION, value);
    }
    match tokio::time::timeout(CONNECT_TIMEOUT, tokio_tungstenite::connect_async(request)).await {
        Ok(Ok((ws, _))) => Ok(ws),
        Ok(Err(e)) => Err(e.to_string()),
        Err(_) => Err("connect timed out".into()),
    }
}

struct Link {
    out: WsOut,
    incoming: mpsc::UnboundedReceiver<Frame>,
    tasks: [JoinHandle<()>; 2],
}

impl Link {
    fn open(ws: WsStream) -> Self {
        let (mut sink, mut stream) = ws.split();
        let (out, mut outgoing, backlog) = WsOut::new();
        let (in_tx, incoming) = mpsc::unbounded_channel();
        let writer = tokio::spawn(async move {
            while let Some(o) = outgoing.recv().await {
                match o {
                    Outgoing::Frame(frame) => {
                        let len = frame.len();
                        let msg = match frame {
                            Frame::Binary(b) => TgMessage::Binary(b.into()),
                            Frame::Text(t) => TgMessage::Text(t.into()),
                        };
                        let ok = sink.send(msg).await.is_ok();
                        backlog.fetch_sub(len, Ordering::Relaxed);
                        if !ok {
                            break;
                        }
                    }
                    Outgoing::Close => {
                        let _ = sink.close().await;
                        break;
                    }
                }
            }
        });
        let reader = tokio::spawn(async move {
            while let Some(Ok(msg)) = stream.next().await {
                let frame = match msg {
                    TgMessage::Binary(b) => Frame::Binary(b.to_vec()),
                    TgMessage::Text(t) => Frame::Text(t.as_str().to_owned()),
                    TgMessage::Close(_) => break,
                    _ => continue,
                };
                if in_tx.send(frame).is_err() {
                    break;
                }
            }
        });
        Link {
            out,
            incoming,
            tasks: [writer, reader],
        }
    }

    fn close(mut self) {
        self.out.close();
        // let the writer flush the close frame; the reader can go now
        self.tasks[1].abort();
    }
}

async fn drive_duct(
    mut duct: Duct,
    bus: LocalBus,
    mut controller: Option<ActivationController>,
    mut ctl: mpsc::UnboundedReceiver<Control>,
) -> DuctExit {
    let (notify, hook) = waker(&bus);
    let mut link: Option<Link> = None;
    let mut connecting: Option<JoinHandle<Result<WsStream, String>>> = None;
    let (mut resumes, mut sessions) = (0u64, 0u64);

    let exit = loop {
        let now = bus.now_us();
        if let Some(c) = controller.as_mut() {
            c.poll(&mut duct, now);
        }
        let req = duct.poll(now, link.as_mut().map(|l| &mut l.out as &mut dyn Transport));
        match req {
            Some(DuctRequest::Connect) => {
                let cfg = duct.config();
                info!(target: "duct", url = %cfg.bridge_url, "connecting");
                connecting = Some(tokio::spawn(dial(cfg.bridge_url.clone(), cfg.auth_token.clone())));
            }
            Some(DuctRequest::Close) => {
                if let Some(l) = link.take() {
                    l.close();
                }
                duct.on_disconnected(now, "keepalive expired");
            }
            None => {}
        }
        for ev in duct.take_events() {
            match ev {
                DuctEvent::Established { resumed: true, .. } => resumes += 1,
                DuctEvent::Established { .. } => sessions += 1,
                DuctEvent::GaveUp => {}
                _ => {}
            }
        }
        if duct.phase() == Phase::GaveUp {
            break DuctExit::GaveUp;
        }
        let idle = sleep_for(duct.next_wakeup(), now);

        tokio::select! {
            dialed = async { connecting.as_mut().expect("guarded").await }, if connecting.is_some() => {
                connecting = None;
                let now = bus.now_us();
                match dialed {
                    Ok(Ok(ws)) => {
                        let mut l = Link::open(ws);
                        duct.on_connected(now, &mut l.out);
                        link = Some(l);
                    }
                    Ok(Err(e)) => {
                        warn!(target: "duct", "connect failed: {e}");
                        duct.on_connect_failed(now);
                    }
                    Err(_) => duct.on_connect_failed(now),
                }
            }
            frame = async { link.as_mut().expect("guarded").incoming.recv().await }, if link.is_some() => {
                let now = bus.now_us();
                match frame {
                    Some(frame) => {
                        let l = link.as_mut().expect("guarded");
                        if duct.on_frame(&frame, now, &mut l.out) == Some(DuctRequest::Close) {
                            link.take().expect("guarded").close();
                            duct.on_disconnected(now, "session refused");
                        }
                    }
                    None => {
                        link.take();
                        duct.on_disconnected(now, "connection closed");
                    }
                }
            }
            c = ctl.recv() => match c {
                Some(Control::SetRelay(topic, enabled)) => {
                    if let Err(e) = duct.set_relay_enabled(&topic, enabled) {
                        warn!(target: "duct", "{e}");
                    }
                }
                Some(Control::Status(reply)) => {
                    let _ = reply.send(DuctStatus {
                        phase: duct.phase(),
                        session_id: duct.session_id().to_owned(),
                        resumes,
                        sessions,
                    });
                }
                Some(Control::Report(reply)) => {
                    let _ = reply.send(controller.as_ref().map(|c| c.report(&duct, bus.now_us())));
                }
                Some(Control::Shutdown) | None => break DuctExit::Shutdown,
            },
            _ = notify.notified() => {}
            _ = tokio::time::sleep(idle) => {}
        }
    };
    if let Some(l) = link.take() {
        l.close();
    }
    if let Some(c) = connecting {
        c.abort();
    }
    bus.remove_activity_hook(hook);
    exit
}
