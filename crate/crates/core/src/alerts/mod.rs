//! Poaching alert rules, duplicate suppression and the dispatch and
//! acknowledgement lifecycle.

mod book;
mod channel;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ingest::{sha256_hex, CameraRegistry};
use crate::store::DetectionEvent;

pub use book::{backoff_delay, AckOutcome, AlertBook, Transition, DEFAULT_MAX_ATTEMPTS};
pub use channel::{Channel, FileChannel, MemoryChannel};

#[derive(Debug, Error)]
pub enum AlertError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown alert `{0}`")]
    UnknownAlert(String),
    #[error("illegal transition: {op} on a {state} alert")]
    Violation { op: &'static str, state: AlertState },
    #[error("alert already acknowledged by `{0}`")]
    AlreadyAcknowledged(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt alert log: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub zone_id: String,
    pub name: String,
    pub restricted: bool,
}

/// A UTC time-of-day interval, start inclusive and end exclusive. When
/// `end < start` the window wraps midnight; `start == end` is all day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: NaiveTime,
    pub end: NaiveTime,
}

impl TimeWindow {
    pub fn new(start: NaiveTime, end: NaiveTime) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: NaiveTime) -> bool {
        if self.start == self.end {
            true
        } else if self.start < self.end {
            self.start <= t && t < self.end
        } else {
            t >= self.start || t < self.end
        }
    }
}

fn parse_time(s: &str) -> Result<NaiveTime, String> {
    NaiveTime::parse_from_str(s, "%H:%M")
        .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M:%S"))
        .map_err(|e| format!("time `{s}`: {e}"))
}

impl FromStr for TimeWindow {
    type Err = String;

    /// `"18:00-06:00"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| format!("window `{s}` is not START-END"))?;
        Ok(Self::new(parse_time(a.trim())?, parse_time(b.trim())?))
    }
}

#[derive(Serialize, Deserialize)]
struct WindowRepr {
    start: String,
    end: String,
}

impl Serialize for TimeWindow {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WindowRepr {
            start: self.start.format("%H:%M").to_string(),
            end: self.end.format("%H:%M").to_string(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TimeWindow {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = WindowRepr::deserialize(d)?;
        Ok(Self::new(
            parse_time(&r.start).map_err(serde::de::Error::custom)?,
            parse_time(&r.end).map_err(serde::de::Error::custom)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub rule_id: String,
    pub trigger_labels: BTreeSet<String>,
    /// Empty matches every zone, and cameras without one.
    #[serde(default)]
    pub zone_ids: BTreeSet<String>,
    #[serde(default)]
    pub active_window: Option<TimeWindow>,
    #[serde(default)]
    pub min_confidence: f64,
    #[serde(default)]
    pub suppression_window_minutes: f64,
}

impl AlertRule {
    pub fn validate(&self) -> Result<(), AlertError> {
        if self.rule_id.is_empty() {
            return Err(AlertError::Config("empty rule_id".into()));
        }
        if self.trigger_labels.is_empty() {
            return Err(AlertError::Config(format!(
                "rule `{}` has no trigger labels",
                self.rule_id
            )));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(AlertError::Config(format!(
                "rule `{}`: min_confidence {} outside [0, 1]",
                self.rule_id, self.min_confidence
            )));
        }
        if !(self.suppression_window_minutes >= 0.0) || !self.suppression_window_minutes.is_finite()
        {
            return Err(AlertError::Config(format!(
                "rule `{}`: negative suppression window",
                self.rule_id
            )));
        }
        Ok(())
    }

    /// Every predicate except suppression.
    pub fn matches(&self, event: &DetectionEvent, zone: Option<&str>) -> bool {
        self.trigger_labels.contains(&event.label)
            && (self.zone_ids.is_empty() || zone.is_some_and(|z| self.zone_ids.contains(z)))
            && self
                .active_window
                .is_none_or(|w| w.contains(event.detected_at.time()))
            && event.confidence >= self.min_confidence
    }

    fn suppression(&self) -> chrono::Duration {
        chrono::Duration::milliseconds((self.suppression_window_minutes * 60_000.0).round() as i64)
    }

    /// The canonical night-time human/vehicle rule.
    pub fn poaching_default() -> Self {
        Self {
            rule_id: "night-intrusion".into(),
            trigger_labels: ["human", "vehicle"].map(String::from).into(),
            zone_ids: ["restricted"].map(String::from).into(),
            active_window: Some("18:00-06:00".parse().expect("static window")),
            min_confidence: 0.5,
            suppression_window_minutes: 10.0,
        }
    }
}

pub fn load_rules(path: &Path) -> Result<Vec<AlertRule>, AlertError> {
    let text = std::fs::read_to_string(path).map_err(|e| AlertError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rules: Vec<AlertRule> = serde_json::from_str(&text)
        .map_err(|e| AlertError::Config(format!("{}: {e}", path.display())))?;
    let mut ids = BTreeSet::new();
    for r in &rules {
        r.validate()?;
        if !ids.insert(&r.rule_id) {
            return Err(AlertError::Config(format!("duplicate rule `{}`", r.rule_id)));
        }
    }
    Ok(rules)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertState {
    Pending,
    Dispatched,
    Delivered,
    Acknowledged,
    Expired,
}

impl AlertState {
    pub const ALL: [AlertState; 5] = [
        Self::Pending,
        Self::Dispatched,
        Self::Delivered,
        Self::Acknowledged,
        Self::Expired,
    ];

    /// The declared edges.
    pub fn can_move_to(self, to: AlertState) -> bool {
        use AlertState::*;
        matches!(
            (self, to),
            (Pending, Dispatched)
                | (Dispatched, Delivered)
                | (Delivered, Acknowledged)
                | (Dispatched, Acknowledged)
                | (Pending, Expired)
                | (Dispatched, Expired)
        )
    }
}

impl fmt::Display for AlertState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pending => "pending",
            Self::Dispatched => "dispatched",
            Self::Delivered => "delivered",
            Self::Acknowledged => "acknowledged",
            Self::Expired => "expired",
        })
    }
}

impl FromStr for AlertState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| format!("unknown alert state `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub rule_id: String,
    pub event_id: String,
    pub camera_id: String,
    pub label: String,
    pub confidence: f64,
    /// Capture time of the triggering frame.
    pub captured_at: DateTime<Utc>,
    pub state: AlertState,
    pub created_at: DateTime<Utc>,
    pub state_changed_at: DateTime<Utc>,
    pub attempts: u32,
    #[serde(default)]
    pub next_attempt_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub acknowledged_by: Option<String>,
    #[serde(default)]
    pub acknowledged_at: Option<DateTime<Utc>>,
}

impl Alert {
    pub fn new(rule: &AlertRule, event: &DetectionEvent, now: DateTime<Utc>) -> Self {
        Self {
            alert_id: sha256_hex(format!("{}\x1f{}", rule.rule_id, event.event_id).as_bytes())
                [..32]
                .to_string(),
            rule_id: rule.rule_id.clone(),
            event_id: event.event_id.clone(),
            camera_id: event.camera_id.clone(),
            label: event.label.clone(),
            confidence: event.confidence,
            captured_at: event.detected_at,
            state: AlertState::Pending,
            created_at: now,
            state_changed_at: now,
            attempts: 0,
            next_attempt_at: None,
            acknowledged_by: None,
            acknowledged_at: None,
        }
    }

    fn suppresses(&self, rule: &AlertRule, event: &DetectionEvent) -> bool {
        self.rule_id == rule.rule_id
            && self.camera_id == event.camera_id
            && self.label == event.label
            && (event.detected_at - self.captured_at).abs() < rule.suppression()
    }
}

/// One pending alert per matching rule not suppressed by `recent`.
pub fn evaluate_rules(
    event: &DetectionEvent,
    rules: &[AlertRule],
    registry: &CameraRegistry,
    recent: &[Alert],
    now: DateTime<Utc>,
) -> Result<Vec<Alert>, AlertError> {
    let camera = registry.get(&event.camera_id).ok_or_else(|| {
        AlertError::Config(format!("camera `{}` is not registered", event.camera_id))
    })?;
    Ok(rules
        .iter()
        .filter(|r| r.matches(event, camera.zone_id.as_deref()))
        .filter(|r| !recent.iter().any(|a| a.suppresses(r, event)))
        .map(|r| Alert::new(r, event, now))
        .collect())
}

/// Stateful evaluator that remembers issued alerts for suppression, with a
/// per-(rule, camera, label) time index.
pub struct AlertEngine {
    rules: Vec<AlertRule>,
    registry: CameraRegistry,
    issued: BTreeMap<(String, String, String), BTreeSet<DateTime<Utc>>>,
}

impl AlertEngine {
    pub fn new(rules: Vec<AlertRule>, registry: CameraRegistry) -> Result<Self, AlertError> {
        for r in &rules {
            r.validate()?;
        }
        Ok(Self {
            rules,
            registry,
            issued: BTreeMap::new(),
        })
    }

    pub fn rules(&self) -> &[AlertRule] {
        &self.rules
    }

    pub fn registry(&self) -> &CameraRegistry {
        &self.registry
    }

    /// Makes previously issued alerts count for suppression.
    pub fn remember(&mut self, alert: &Alert) {
        self.issued
            .entry((
                alert.rule_id.clone(),
                alert.camera_id.clone(),
                alert.label.clone(),
            ))
            .or_default()
            .insert(alert.captured_at);
    }

    pub fn evaluate(
        &mut self,
        event: &DetectionEvent,
        now: DateTime<Utc>,
    ) -> Result<Vec<Alert>, AlertError> {
        let camera = self.registry.get(&event.camera_id).ok_or_else(|| {
            AlertError::Config(format!("camera `{}` is not registered", event.camera_id))
        })?;
        let zone = camera.zone_id.clone();
        let mut out = Vec::new();
        for rule in &self.rules {
            if !rule.matches(event, zone.as_deref()) {
                continue;
            }
            let key = (
                rule.rule_id.clone(),
                event.camera_id.clone(),
                event.label.clone(),
            );
            let w = rule.suppression();
            let t = event.detected_at;
            let suppressed = self.issued.get(&key).is_some_and(|times| {
                times.range(..=t).next_back().is_some_and(|p| t - *p < w)
                    || times.range(t..).next().is_some_and(|n| *n - t < w)
            });
            if suppressed {
                continue;
            }
            let alert = Alert::new(rule, event, now);
            self.issued.entry(key).or_default().insert(t);
            out.push(alert);
        }
        Ok(out)
    }
}
