//! Command-line front ends for `pubduct-bridge` and `pubduct-duct`.
//!
//! Settings are resolved as environment over flag over config file over
//! built-in default. Exit codes: 0 success, 1 runtime failure, 2 usage
//! error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{CommandFactory, Parser, Subcommand};
use thiserror::Error;

use crate::activation::load_rules;
use crate::bridge::BridgeConfig;
use crate::bus::LocalBus;
use crate::clock::SystemClock;
use crate::duct::{Duct, DuctConfig};
use crate::netsim::{run_scenario, Scenario, SimReport};
use crate::runtime::{BridgeServer, DuctClient, DuctExit};

pub const ENV_TOKEN: &str = "PUBDUCT_TOKEN";
pub const ENV_BRIDGE_URL: &str = "PUBDUCT_BRIDGE_URL";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Cloud-side relay endpoint: accepts duct websocket sessions.
#[derive(Debug, Clone, PartialEq, Eq, Parser)]
#[command(name = "pubduct-bridge", version)]
pub struct BridgeArgs {
    /// Bridge configuration file (TOML, or JSON)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Address to listen on, e.g. 0.0.0.0:9090
    #[arg(long, value_name = "ADDR")]
    pub listen: Option<String>,
    /// Bearer token ducts must present (PUBDUCT_TOKEN takes precedence)
    #[arg(long, value_name = "TOKEN")]
    pub token: Option<String>,
    /// How long a disconnected session is kept for resume
    #[arg(long, value_name = "SECS")]
    pub retention_secs: Option<u64>,
    /// Largest accepted frame
    #[arg(long, value_name = "MIB")]
    pub max_frame_mib: Option<u64>,
    /// Log filter, e.g. info or bridge=debug (RUST_LOG works too)
    #[arg(long, value_name = "FILTER")]
    pub log: Option<String>,
}

/// Edge-side relay: holds one outbound websocket to a bridge.
#[derive(Debug, Clone, PartialEq, Eq, Parser)]
#[command(name = "pubduct-duct", version)]
pub struct DuctArgs {
    /// Duct configuration file (TOML, or JSON)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Bridge websocket URL (PUBDUCT_BRIDGE_URL takes precedence)
    #[arg(long, value_name = "URL")]
    pub bridge_url: Option<String>,
    /// Session id to claim; generated when absent
    #[arg(long, value_name = "ID")]
    pub session_id: Option<String>,
    /// Bearer token for the bridge (PUBDUCT_TOKEN takes precedence)
    #[arg(long, value_name = "TOKEN")]
    pub token: Option<String>,
    /// Activation rules file; states arrive on /pubduct/state
    #[arg(long, value_name = "PATH")]
    pub rules: Option<PathBuf>,
    /// Write the activation report here on exit
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Log filter, e.g. info or duct=debug (RUST_LOG works too)
    #[arg(long, value_name = "FILTER", global = true)]
    pub log: Option<String>,
    #[command(subcommand)]
    pub command: Option<DuctCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum DuctCommand {
    /// Check the configuration and list the relays it sets up
    Inspect,
    /// Run a simulated scenario; exits 0 only if its expectations hold
    Demo {
        /// Scenario file, or a bundled name (perfect-link, flaky-link, pick-cycle)
        scenario: String,
        /// Where to write the trace [default: <scenario name>.trace]
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Run a scenario and print its activation report as JSON
    Report {
        scenario: String,
        /// Write the report to a file instead of stdout
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

/// Environment variables relevant to either tool.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnvOverrides {
    pub token: Option<String>,
    pub bridge_url: Option<String>,
}

impl EnvOverrides {
    pub fn from_vars<K: AsRef<str>, V: Into<String>>(vars: impl IntoIterator<Item = (K, V)>) -> Self {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in vars {
            map.insert(k.as_ref().to_owned(), v.into());
        }
        let nonempty = |k: &str| map.get(k).filter(|v| !v.is_empty()).cloned();
        EnvOverrides {
            token: nonempty(ENV_TOKEN),
            bridge_url: nonempty(ENV_BRIDGE_URL),
        }
    }

    pub fn from_process() -> Self {
        Self::from_vars(std::env::vars())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeInvocation {
    pub args: BridgeArgs,
    pub env: EnvOverrides,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuctInvocation {
    pub args: DuctArgs,
    pub env: EnvOverrides,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Invocation {
    Bridge(BridgeInvocation),
    Duct(DuctInvocation),
}

/// Parsing stopped: either a real usage error (exit 2) or a help/version
/// request (exit 0). `text` is what to print.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{text}")]
pub struct UsageError {
    pub text: String,
    pub exit_code: i32,
}

impl From<clap::Error> for UsageError {
    fn from(e: clap::Error) -> Self {
        let exit_code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        UsageError {
            text: e.render().to_string(),
            exit_code,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("scenario assertions failed:\n  {}", .0.join("\n  "))]
    AssertionFailed(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn parse_bridge<I, T>(argv: I, env: EnvOverrides) -> Result<BridgeInvocation, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Ok(BridgeInvocation {
        args: BridgeArgs::try_parse_from(argv)?,
        env,
    })
}

pub fn parse_duct<I, T>(argv: I, env: EnvOverrides) -> Result<DuctInvocation, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Ok(DuctInvocation {
        args: DuctArgs::try_parse_from(argv)?,
        env,
    })
}

/// Picks the tool from the program name in `argv[0]`.
pub fn parse(argv: &[String], env: EnvOverrides) -> Result<Invocation, UsageError> {
    let program = argv.first().map(|p| {
        Path::new(p)
            .file_name()
            .map_or(p.clone(), |f| f.to_string_lossy().into_owned())
    });
    if program.is_some_and(|p| p.contains("bridge")) {
        parse_bridge(argv, env).map(Invocation::Bridge)
    } else {
        parse_duct(argv, env).map(Invocation::Duct)
    }
}

pub fn help_text(tool: &str) -> String {
    let mut cmd = if tool.contains("bridge") {
        BridgeArgs::command()
    } else {
        DuctArgs::command()
    };
    cmd.render_help().to_string()
}

fn read_config(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl BridgeInvocation {
    pub fn resolve(&self) -> Result<BridgeConfig, CliError> {
        let mut cfg = match &self.args.config {
            Some(p) => {
                let text = read_config(p)?;
                let parsed = if text.trim_start().starts_with('{') {
                    serde_json::from_str(&text).map_err(|e| e.to_string())
                } else {
                    toml::from_str(&text).map_err(|e| e.to_string())
                };
                parsed.map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => BridgeConfig::default(),
        };
        if let Some(l) = &self.args.listen {
            cfg.listen_address = l.clone();
        }
        if let Some(t) = &self.args.token {
            cfg.auth_token = Some(t.clone());
        }
        if let Some(s) = self.args.retention_secs {
            cfg.session_retention_ms = s * 1000;
        }
        if let Some(m) = self.args.max_frame_mib {
            cfg.max_frame_size = (m as usize) << 20;
        }
        if let Some(t) = &self.env.token {
            cfg.auth_token = Some(t.clone());
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

impl DuctInvocation {
    pub fn resolve(&self) -> Result<DuctConfig, CliError> {
        let mut cfg = match &self.args.config {
            Some(p) => {
                let text = read_config(p)?;
                let mut value: toml::Table = if text.trim_start().starts_with('{') {
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                } else {
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                };
                // the URL may come from a flag or the environment instead
                value
                    .entry("bridge_url")
                    .or_insert_with(|| toml::Value::String(String::new()));
                value
                    .try_into::<DuctConfig>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => DuctConfig::new(""),
        };
        if let Some(u) = &self.args.bridge_url {
            cfg.bridge_url = u.clone();
        }
        if let Some(s) = &self.args.session_id {
            cfg.session_id = Some(s.clone());
        }
        if let Some(t) = &self.args.token {
            cfg.auth_token = Some(t.clone());
        }
        if let Some(u) = &self.env.bridge_url {
            cfg.bridge_url = u.clone();
        }
        if let Some(t) = &self.env.token {
            cfg.auth_token = Some(t.clone());
        }
        if cfg.bridge_url.is_empty() {
            return Err(CliError::Config(format!(
                "no bridge URL: pass --bridge-url, set {ENV_BRIDGE_URL}, or put bridge_url in the config file"
            )));
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn init_logging(filter: Option<&str>) {
    use tracing_subscriber::EnvFilter;
    let filter = match filter {
        Some(f) => EnvFilter::new(f),
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn fail(e: impl std::fmt::Display) -> i32 {
    eprintln!("error: {e}");
    EXIT_FAILURE
}

fn usage(e: UsageError) -> i32 {
    if e.exit_code == EXIT_OK {
        print!("{}", e.text);
    } else {
        eprint!("{}", e.text);
    }
    e.exit_code
}

pub fn bridge_main(argv: Vec<String>, env: EnvOverrides) -> i32 {
    let inv = match parse_bridge(argv, env) {
        Ok(i) => i,
        Err(e) => return usage(e),
    };
    init_logging(inv.args.log.as_deref());
    let cfg = match inv.resolve() {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(e),
    };
    rt.block_on(async {
        let bus = LocalBus::new(Arc::new(SystemClock::new()));
        match BridgeServer::start(cfg, bus).await {
            Ok(server) => {
                eprintln!("pubduct-bridge listening on {}", server.url());
                server.wait().await;
                EXIT_OK
            }
            Err(e) => fail(e),
        }
    })
}

pub fn duct_main(argv: Vec<String>, env: EnvOverrides) -> i32 {
    let inv = match parse_duct(argv, env) {
        Ok(i) => i,
        Err(e) => return usage(e),
    };
    init_logging(inv.args.log.as_deref());
    let result = match &inv.args.command {
        Some(DuctCommand::Demo { scenario, trace }) => run_demo(scenario, trace.as_deref()).map(|r| {
            println!(
                "{}: {} published, {} received, {} resumes, trace has {} lines",
                r.scenario,
                r.published.len(),
                r.received.len(),
                r.resumes,
                r.trace.len()
            );
        }),
        Some(DuctCommand::Report { scenario, out }) => run_report(scenario, out.as_deref()),
        Some(DuctCommand::Inspect) => inspect(&inv),
        None => run_duct(&inv),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => fail(e),
    }
}

/// Runs a scenario under the simulator and writes its trace. Fails with
/// [`CliError::AssertionFailed`] if the scenario's expectations do not
/// hold.
pub fn run_demo(scenario: &str, trace_path: Option<&Path>) -> Result<SimReport, CliError> {
    let s = Scenario::load(scenario).map_err(|e| CliError::Config(e.to_string()))?;
    let report = run_scenario(&s).map_err(|e| CliError::Config(e.to_string()))?;
    let default_path = PathBuf::from(format!("{}.trace", s.name));
    std::fs::write(trace_path.unwrap_or(&default_path), report.trace_text())?;
    let failures = report.check(&s.expect);
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(CliError::AssertionFailed(failures))
    }
}

fn run_report(scenario: &str, out: Option<&Path>) -> Result<(), CliError> {
    let s = Scenario::load(scenario).map_err(|e| CliError::Config(e.to_string()))?;
    let report = run_scenario(&s).map_err(|e| CliError::Config(e.to_string()))?;
    let Some(activation) = report.activation else {
        return Err(CliError::Config(format!("scenario {} has no activation rules", s.name)));
    };
    let json = activation.to_json();
    match out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn inspect(inv: &DuctInvocation) -> Result<(), CliError> {
    let mut cfg = inv.resolve().or_else(|_| {
        // inspecting does not need a reachable bridge
        let mut probe = inv.clone();
        probe.env.bridge_url = Some("ws://unset/duct".into());
        probe.resolve()
    })?;
    cfg.reconnect.give_up_after_ms = None;
    let bus = LocalBus::new(Arc::new(SystemClock::new()));
    // building the duct is the real validation: it installs every relay
    let duct = Duct::new(cfg.clone(), bus.clone(), 0).map_err(|e| CliError::Config(e.to_string()))?;
    println!("bridge {}  session {}", cfg.bridge_url, duct.session_id());
    println!();
    println!("{:<5} {:<28} {:<28} {:>8} {:>6}", "DIR", "TOPIC", "TYPE", "THROTTLE", "QUEUE");
    let up = cfg.local_topics.iter().map(|r| ("up", r));
    let down = cfg.remote_topics.iter().map(|r| ("down", r));
    for (dir, r) in up.chain(down) {
        let throttle = if r.throttle_rate == 0 { "-".to_owned() } else { format!("{}ms", r.throttle_rate) };
        let off = if r.enabled { "" } else { "  (disabled)" };
        println!("{dir:<5} {:<28} {:<28} {throttle:>8} {:>6}{off}", r.topic, r.type_name, r.queue_length);
    }
    println!();
    println!("{:<5} SERVICE", "DIR");
    for s in &cfg.local_services {
        println!("{:<5} {s}", "up");
    }
    for s in &cfg.remote_services {
        println!("{:<5} {s}", "down");
    }
    Ok(())
}

fn run_duct(inv: &DuctInvocation) -> Result<(), CliError> {
    let cfg = inv.resolve()?;
    let rules = match &inv.args.rules {
        Some(p) => Some(load_rules(&read_config(p)?, cfg.relay_topics()).map_err(|e| CliError::Config(e.to_string()))?),
        None => None,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let bus = LocalBus::new(Arc::new(SystemClock::new()));
        let client = DuctClient::start(cfg, bus, rules).map_err(|e| CliError::Config(e.to_string()))?;
        let handle = client.handle();
        let mut join = tokio::spawn(client.join());
        let exit = tokio::select! {
            r = &mut join => r.unwrap_or(DuctExit::Shutdown),
            _ = tokio::signal::ctrl_c() => {
                let report = handle.activation_report().await;
                handle.shutdown();
                if let (Some(path), Some(report)) = (&inv.args.report, report) {
                    std::fs::write(path, report.to_json() + "\n")?;
                }
                join.await.unwrap_or(DuctExit::Shutdown)
            }
        };
        match exit {
            DuctExit::Shutdown => Ok(()),
            DuctExit::GaveUp => Err(CliError::Config("gave up reconnecting to the bridge".into())),
        }
    })
}
