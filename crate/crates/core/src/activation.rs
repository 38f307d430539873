//! Behavior-state driven relay switching.
//!
//! Applications publish their current behavior state (a Text payload) on
//! [`STATE_TOPIC`]. Each state names the relays it needs. The controller
//! turns the rest off and accounts for what that saved.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::bus::{BusError, LocalBus, Subscription};
use crate::duct::{Duct, DuctError};
use crate::value::Value;

pub const STATE_TOPIC: &str = "/pubduct/state";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefaultPolicy {
    /// Relays not listed for a state are turned off.
    #[default]
    Disable,
    /// Relays not listed for a state keep whatever flag they have.
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationRule {
    pub state: String,
    pub enabled_relays: BTreeSet<String>,
    pub default: DefaultPolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleSet {
    rules: BTreeMap<String, ActivationRule>,
}

impl RuleSet {
    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn get(&self, state: &str) -> Option<&ActivationRule> {
        self.rules.get(state)
    }

    pub fn states(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleProblem {
    UnknownRelay { state: String, relay: String },
    DuplicateState(String),
}

impl std::fmt::Display for RuleProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RuleProblem::UnknownRelay { state, relay } => {
                write!(f, "state {state:?} enables unknown relay {relay}")
            }
            RuleProblem::DuplicateState(s) => write!(f, "state {s:?} has more than one rule"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActivationError {
    #[error("malformed rules document: {0}")]
    Malformed(String),
    #[error("invalid rules: {}", list(.0))]
    Rejected(Vec<RuleProblem>),
    #[error("no rule for state {0:?}")]
    UnknownState(String),
    #[error(transparent)]
    Duct(#[from] DuctError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

fn list(problems: &[RuleProblem]) -> String {
    problems.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RulesDoc {
    #[serde(default)]
    default: DefaultPolicy,
    #[serde(default)]
    rule: Vec<RuleDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    state: String,
    #[serde(default)]
    enabled: Vec<String>,
    default: Option<DefaultPolicy>,
}

/// Parses a rules document (TOML, or JSON if it starts with `{`) and checks
/// it against the relays a duct actually has. All problems are reported
/// together.
///
/// ```toml
/// default = "disable"
///
/// [[rule]]
/// state = "pick"
/// enabled = ["/front_camera", "/arm_camera"]
/// ```
pub fn load_rules<'a>(
    document: &str,
    known_relays: impl IntoIterator<Item = &'a str>,
) -> Result<RuleSet, ActivationError> {
    let doc: RulesDoc = if document.trim_start().starts_with('{') {
        serde_json::from_str(document).map_err(|e| ActivationError::Malformed(e.to_string()))?
    } else {
        toml::from_str(document).map_err(|e| ActivationError::Malformed(e.to_string()))?
    };
    let known: BTreeSet<&str> = known_relays.into_iter().collect();
    let mut problems = Vec::new();
    let mut rules = BTreeMap::new();
    for r in doc.rule {
        for relay in &r.enabled {
            if !known.contains(relay.as_str()) {
                problems.push(RuleProblem::UnknownRelay {
                    state: r.state.clone(),
                    relay: relay.clone(),
                });
            }
        }
        if rules.contains_key(&r.state) {
            if !problems.contains(&RuleProblem::DuplicateState(r.state.clone())) {
                problems.push(RuleProblem::DuplicateState(r.state.clone()));
            }
            continue;
        }
        rules.insert(
            r.state.clone(),
            ActivationRule {
                state: r.state,
                enabled_relays: r.enabled.into_iter().collect(),
                default: r.default.unwrap_or(doc.default),
            },
        );
    }
    if !problems.is_empty() {
        return Err(ActivationError::Rejected(problems));
    }
    Ok(RuleSet { rules })
}

/// Brings the duct's relay flags in line with `state`'s rule and returns
/// the flips actually made, in topic order.
pub fn apply_state(rules: &RuleSet, state: &str, duct: &mut Duct) -> Result<Vec<(String, bool)>, ActivationError> {
    let rule = rules
        .get(state)
        .ok_or_else(|| ActivationError::UnknownState(state.to_owned()))?;
    let mut topics: Vec<String> = duct.config().relay_topics().map(str::to_owned).collect();
    topics.sort();
    let mut changes = Vec::new();
    for topic in topics {
        let current = duct.relay_enabled(&topic).unwrap_or(false);
        let target = if rule.enabled_relays.contains(&topic) {
            true
        } else {
            match rule.default {
                DefaultPolicy::Disable => false,
                DefaultPolicy::Keep => current,
            }
        };
        if duct.set_relay_enabled(&topic, target)? {
            changes.push((topic, target));
        }
    }
    Ok(changes)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelayActivity {
    pub enabled: bool,
    pub active_ms: f64,
    pub inactive_ms: f64,
    pub transitions: u64,
    pub suppressed_messages: u64,
    pub bytes_saved: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub window_ms: f64,
    pub current_state: Option<String>,
    pub states_applied: u64,
    pub unknown_states: u64,
    pub relays: BTreeMap<String, RelayActivity>,
    pub total_bytes_saved: u64,
}

impl ActivationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

#[derive(Debug, Clone)]
struct Timeline {
    enabled: bool,
    since_us: u64,
    active_us: u64,
    inactive_us: u64,
    transitions: u64,
}

impl Timeline {
    fn close(&mut self, now_us: u64) {
        let span = now_us.saturating_sub(self.since_us);
        if self.enabled {
            self.active_us += span;
        } else {
            self.inactive_us += span;
        }
        self.since_us = now_us;
    }
}

/// Consumes state changes from the bus and applies them to a duct, keeping
/// per-relay timelines for [`report`](Self::report).
#[derive(Debug)]
pub struct ActivationController {
    rules: RuleSet,
    states: Option<Subscription>,
    started_us: u64,
    current: Option<String>,
    applied: u64,
    unknown: u64,
    timelines: BTreeMap<String, Timeline>,
}

impl ActivationController {
    /// A controller fed only through [`apply`](Self::apply).
    pub fn new(rules: RuleSet, duct: &Duct, now_us: u64) -> Self {
        let timelines = duct
            .config()
            .relay_topics()
            .map(|t| {
                (
                    t.to_owned(),
                    Timeline {
                        enabled: duct.relay_enabled(t).unwrap_or(false),
                        since_us: now_us,
                        active_us: 0,
                        inactive_us: 0,
                        transitions: 0,
                    },
                )
            })
            .collect();
        ActivationController {
            rules,
            states: None,
            started_us: now_us,
            current: None,
            applied: 0,
            unknown: 0,
            timelines,
        }
    }

    /// A controller that also listens on [`STATE_TOPIC`] of `bus`.
    pub fn listening(rules: RuleSet, duct: &Duct, bus: &LocalBus, now_us: u64) -> Result<Self, ActivationError> {
        let mut c = Self::new(rules, duct, now_us);
        c.states = Some(bus.subscribe(STATE_TOPIC, 64)?);
        Ok(c)
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn current_state(&self) -> Option<&str> {
        self.current.as_deref()
    }

    pub fn apply(&mut self, state: &str, duct: &mut Duct, now_us: u64) -> Result<Vec<(String, bool)>, ActivationError> {
        let changes = apply_state(&self.rules, state, duct)?;
        self.applied += 1;
        self.current = Some(state.to_owned());
        for (topic, enabled) in &changes {
            if let Some(tl) = self.timelines.get_mut(topic) {
                tl.close(now_us);
                tl.enabled = *enabled;
                tl.transitions += 1;
            }
        }
        info!(target: "activation", %state, changes = changes.len(), "state applied");
        Ok(changes)
    }

    /// Applies every state message received since the last call, in order.
    /// Unknown states are counted and skipped.
    pub fn poll(&mut self, duct: &mut Duct, now_us: u64) -> Vec<(String, Vec<(String, bool)>)> {
        let Some(sub) = &self.states else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for m in sub.drain() {
            let Value::Text(state) = m.payload else {
                warn!(target: "activation", "ignoring non-text state message");
                self.unknown += 1;
                continue;
            };
            match self.apply(&state, duct, now_us) {
                Ok(changes) => out.push((state, changes)),
                Err(e) => {
                    warn!(target: "activation", "{e}");
                    self.unknown += 1;
                }
            }
        }
        out
    }

    pub fn report(&self, duct: &Duct, now_us: u64) -> ActivationReport {
        let mut relays = BTreeMap::new();
        let mut total = 0;
        for (topic, tl) in &self.timelines {
            let mut tl = tl.clone();
            tl.close(now_us);
            let stats = duct.relay_stats(topic).unwrap_or_default();
            total += stats.suppressed_bytes;
            relays.insert(
                topic.clone(),
                RelayActivity {
                    enabled: tl.enabled,
                    active_ms: tl.active_us as f64 / 1000.0,
                    inactive_ms: tl.inactive_us as f64 / 1000.0,
                    transitions: tl.transitions,
                    suppressed_messages: stats.suppressed,
                    bytes_saved: stats.suppressed_bytes,
                },
            );
        }
        ActivationReport {
            window_ms: now_us.saturating_sub(self.started_us) as f64 / 1000.0,
            current_state: self.current.clone(),
            states_applied: self.applied,
            unknown_states: self.unknown,
            relays,
            total_bytes_saved: total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::duct::{DuctConfig, RelaySpec};
    use std::sync::Arc;

    const RELAYS: [&str; 2] = ["/front_camera", "/arm_camera"];

    const PICK_RULES: &str = r#"
        default = "disable"
        [[rule]]
        state = "explore"
        enabled = ["/front_camera"]
        [[rule]]
        state = "pick"
        enabled = ["/front_camera", "/arm_camera"]
    "#;

    fn duct() -> Duct {
        let mut cfg = DuctConfig::new("ws://bridge/duct");
        cfg.local_topics = RELAYS.iter().map(|t| RelaySpec::new(t, "sensor/Image")).collect();
        let bus = LocalBus::new(Arc::new(ManualClock::new(0)));
        Duct::new(cfg, bus, 1).unwrap()
    }

    #[test]
    fn empty_document() {
        let rules = load_rules("", RELAYS).unwrap();
        assert!(rules.is_empty());
        let mut d = duct();
        assert_eq!(
            apply_state(&rules, "explore", &mut d),
            Err(ActivationError::UnknownState("explore".into()))
        );
        assert_eq!(d.relay_enabled("/arm_camera"), Some(true));
    }

    #[test]
    fn unknown_relay_named() {
        let doc = "[[rule]]\nstate = \"pick\"\nenabled = [\"/gripper\"]\n";
        let err = load_rules(doc, RELAYS).unwrap_err();
        assert_eq!(
            err,
            ActivationError::Rejected(vec![RuleProblem::UnknownRelay {
                state: "pick".into(),
                relay: "/gripper".into()
            }])
        );
    }

    #[test]
    fn all_problems_reported() {
        let doc = r#"
            [[rule]]
            state = "pick"
            enabled = ["/a"]
            [[rule]]
            state = "pick"
            enabled = ["/b"]
        "#;
        let ActivationError::Rejected(p) = load_rules(doc, RELAYS).unwrap_err() else {
            panic!()
        };
        assert_eq!(p.len(), 3);
        assert!(p.contains(&RuleProblem::DuplicateState("pick".into())));
    }

    #[test]
    fn malformed_document() {
        assert!(matches!(load_rules("[[rule]]\nstat = 1", RELAYS), Err(ActivationError::Malformed(_))));
    }

    #[test]
    fn explore_disables_arm_camera() {
        let rules = load_rules(PICK_RULES, RELAYS).unwrap();
        let mut d = duct();
        let changes = apply_state(&rules, "explore", &mut d).unwrap();
        assert_eq!(changes, vec![("/arm_camera".to_string(), false)]);
        assert!(apply_state(&rules, "explore", &mut d).unwrap().is_empty());
        assert_eq!(
            apply_state(&rules, "pick", &mut d).unwrap(),
            vec![("/arm_camera".to_string(), true)]
        );
    }

    #[test]
    fn keep_policy_leaves_unlisted() {
        let doc = r#"
            default = "keep"
            [[rule]]
            state = "idle"
            enabled = []
        "#;
        let rules = load_rules(doc, RELAYS).unwrap();
        let mut d = duct();
        assert!(apply_state(&rules, "idle", &mut d).unwrap().is_empty());
    }

    #[test]
    fn json_rules_accepted() {
        let doc = r#"{"default": "disable", "rule": [{"state": "explore", "enabled": ["/front_camera"]}]}"#;
        assert_eq!(load_rules(doc, RELAYS).unwrap().len(), 1);
    }

    #[test]
    fn controller_reads_state_topic_and_times_relays() {
        let clock = Arc::new(ManualClock::new(0));
        let bus = LocalBus::new(clock.clone());
        let mut cfg = DuctConfig::new("ws://bridge/duct");
        cfg.local_topics = RELAYS.iter().map(|t| RelaySpec::new(t, "sensor/Image")).collect();
        let mut d = Duct::new(cfg, bus.clone(), 1).unwrap();
        let rules = load_rules(PICK_RULES, RELAYS).unwrap();
        let mut c = ActivationController::listening(rules, &d, &bus, 0).unwrap();

        let states = bus.advertise(STATE_TOPIC, "std/String").unwrap();
        states.publish(Value::Text("explore".into())).unwrap();
        states.publish(Value::Text("dance".into())).unwrap();
        let applied = c.poll(&mut d, 1_000_000);
        assert_eq!(applied.len(), 1);

        states.publish(Value::Text("pick".into())).unwrap();
        c.poll(&mut d, 3_000_000);
        let r = c.report(&d, 4_000_000);
        let arm = &r.relays["/arm_camera"];
        assert_eq!((arm.active_ms, arm.inactive_ms), (2000.0, 2000.0));
        assert_eq!(arm.transitions, 2);
        assert_eq!(r.unknown_states, 1);
        assert_eq!(r.current_state.as_deref(), Some("pick"));
        for a in r.relays.values() {
            assert_eq!(a.active_ms + a.inactive_ms, r.window_ms);
        }
    }
}
