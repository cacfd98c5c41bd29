use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{Alert, AlertError, AlertState, Channel};
use crate::store::{JsonlFile, StoreError};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;

/// Delay before retry number `attempt + 1`: 2 s doubling, capped at 60 s.
pub fn backoff_delay(attempt: u32) -> Duration {
    let secs = 2u64.saturating_pow(attempt.max(1)).min(60);
    Duration::seconds(secs as i64)
}

/// One audit-log line. `from` is `None` when the alert is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub alert_id: String,
    pub from: Option<AlertState>,
    pub to: AlertState,
    pub at: DateTime<Utc>,
    pub attempts: u32,
    #[serde(default)]
    pub actor: Option<String>,
    /// Alert as it stood after the transition.
    pub alert: Alert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckOutcome {
    pub alert: Alert,
    /// False when the same actor had already acknowledged.
    pub changed: bool,
}

fn store_err(e: StoreError) -> AlertError {
    match e {
        StoreError::Io { path, source } => AlertError::Io { path, source },
        other => AlertError::Corrupt(other.to_string()),
    }
}

/// Alert lifecycle store. All transitions on one book are serialized, and
/// each is journalled before it becomes visible.
pub struct AlertBook {
    alerts: Mutex<BTreeMap<String, Alert>>,
    audit: JsonlFile<Transition>,
    max_attempts: u32,
}

impl AlertBook {
    pub fn in_memory() -> Self {
        Self {
            alerts: Mutex::default(),
            audit: JsonlFile::in_memory(),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    /// Rebuilds state by replaying the audit log at `path`.
    pub fn open(path: &Path) -> Result<Self, AlertError> {
        let audit: JsonlFile<Transition> = JsonlFile::open(path).map_err(store_err)?;
        let mut alerts = BTreeMap::new();
        for t in audit.snapshot() {
            alerts.insert(t.alert_id.clone(), t.alert);
        }
        Ok(Self {
            alerts: Mutex::new(alerts),
            audit,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        })
    }

    pub fn with_max_attempts(mut self, n: u32) -> Self {
        self.max_attempts = n.max(1);
        self
    }

    pub fn get(&self, alert_id: &str) -> Option<Alert> {
        self.alerts.lock().get(alert_id).cloned()
    }

    /// Alerts ordered by creation time, then id.
    pub fn list(&self, state: Option<AlertState>) -> Vec<Alert> {
        let mut v: Vec<Alert> = self
            .alerts
            .lock()
            .values()
            .filter(|a| state.is_none_or(|s| a.state == s))
            .cloned()
            .collect();
        v.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then_with(|| a.alert_id.cmp(&b.alert_id))
        });
        v
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.audit.snapshot()
    }

    pub fn flush(&self) -> Result<(), AlertError> {
        self.audit.flush().map_err(store_err)
    }

    fn journal(
        &self,
        alert: &Alert,
        from: Option<AlertState>,
        actor: Option<String>,
    ) -> Result<(), AlertError> {
        self.audit
            .append(Transition {
                alert_id: alert.alert_id.clone(),
                from,
                to: alert.state,
                at: alert.state_changed_at,
                attempts: alert.attempts,
                actor,
                alert: alert.clone(),
            })
            .map_err(store_err)
    }

    /// Registers a new pending alert. Re-inserting a known id is a no-op.
    pub fn insert(&self, alert: Alert) -> Result<Alert, AlertError> {
        let mut map = self.alerts.lock();
        if let Some(existing) = map.get(&alert.alert_id) {
            return Ok(existing.clone());
        }
        if alert.state != AlertState::Pending {
            return Err(AlertError::Violation {
                op: "insert",
                state: alert.state,
            });
        }
        self.journal(&alert, None, None)?;
        map.insert(alert.alert_id.clone(), alert.clone());
        Ok(alert)
    }

    fn moved(
        &self,
        a: &mut Alert,
        to: AlertState,
        now: DateTime<Utc>,
        actor: Option<String>,
    ) -> Result<(), AlertError> {
        debug_assert!(a.state.can_move_to(to));
        let mut next = a.clone();
        let from = next.state;
        next.state = to;
        next.state_changed_at = now;
        self.journal(&next, Some(from), actor)?;
        *a = next;
        Ok(())
    }

    /// One delivery attempt. Success ends in `delivered`; failure leaves the
    /// alert `dispatched` with a backoff deadline, or `expired` once the
    /// attempt budget is spent.
    pub fn dispatch(
        &self,
        alert_id: &str,
        channel: &dyn Channel,
        now: DateTime<Utc>,
    ) -> Result<Alert, AlertError> {
        let mut map = self.alerts.lock();
        let a = map
            .get_mut(alert_id)
            .ok_or_else(|| AlertError::UnknownAlert(alert_id.to_string()))?;
        if !matches!(a.state, AlertState::Pending | AlertState::Dispatched) {
            return Err(AlertError::Violation {
                op: "dispatch",
                state: a.state,
            });
        }
        a.attempts += 1;
        if a.state == AlertState::Pending {
            self.moved(a, AlertState::Dispatched, now, None)?;
        }
        match channel.send(a) {
            Ok(()) => {
                a.next_attempt_at = None;
                self.moved(a, AlertState::Delivered, now, None)?;
            }
            Err(e) => {
                log::warn!("alert {alert_id} attempt {} failed: {e}", a.attempts);
                if a.attempts >= self.max_attempts {
                    a.next_attempt_at = None;
                    self.moved(a, AlertState::Expired, now, None)?;
                } else {
                    a.next_attempt_at = Some(now + backoff_delay(a.attempts));
                    // Record the new deadline without a state change.
                    self.journal(a, Some(AlertState::Dispatched), None)?;
                }
            }
        }
        Ok(a.clone())
    }

    /// Alerts whose next attempt is due at `now`.
    pub fn due(&self, now: DateTime<Utc>) -> Vec<String> {
        self.alerts
            .lock()
            .values()
            .filter(|a| match a.state {
                AlertState::Pending => true,
                AlertState::Dispatched => a.next_attempt_at.is_none_or(|t| t <= now),
                _ => false,
            })
            .map(|a| a.alert_id.clone())
            .collect()
    }

    pub fn acknowledge(
        &self,
        alert_id: &str,
        actor: &str,
        now: DateTime<Utc>,
    ) -> Result<AckOutcome, AlertError> {
        if actor.trim().is_empty() {
            return Err(AlertError::Config("actor must be non-empty".into()));
        }
        let mut map = self.alerts.lock();
        let a = map
            .get_mut(alert_id)
            .ok_or_else(|| AlertError::UnknownAlert(alert_id.to_string()))?;
        match a.state {
            AlertState::Acknowledged => {
                let by = a.acknowledged_by.clone().unwrap_or_default();
                if by == actor {
                    Ok(AckOutcome {
                        alert: a.clone(),
                        changed: false,
                    })
                } else {
                    Err(AlertError::AlreadyAcknowledged(by))
                }
            }
            AlertState::Dispatched | AlertState::Delivered => {
                a.acknowledged_by = Some(actor.to_string());
                a.acknowledged_at = Some(now);
                a.next_attempt_at = None;
                self.moved(a, AlertState::Acknowledged, now, Some(actor.to_string()))?;
                Ok(AckOutcome {
                    alert: a.clone(),
                    changed: true,
                })
            }
            state => Err(AlertError::Violation {
                op: "acknowledge",
                state,
            }),
        }
    }

    /// Gives up on an undelivered alert.
    pub fn expire(&self, alert_id: &str, now: DateTime<Utc>) -> Result<Alert, AlertError> {
        let mut map = self.alerts.lock();
        let a = map
            .get_mut(alert_id)
            .ok_or_else(|| AlertError::UnknownAlert(alert_id.to_string()))?;
        if !matches!(a.state, AlertState::Pending | AlertState::Dispatched) {
            return Err(AlertError::Violation {
                op: "expire",
                state: a.state,
            });
        }
        a.next_attempt_at = None;
        self.moved(a, AlertState::Expired, now, None)?;
        Ok(a.clone())
    }
}
