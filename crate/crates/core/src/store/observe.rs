use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::DetectionEvent;

pub const DEFAULT_INDEPENDENCE_WINDOW_MINUTES: f64 = 30.0;

/// A burst of same-label events on one camera: one independent sighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub label: String,
    pub camera_id: String,
    pub window_start: DateTime<Utc>,
    pub window_end: DateTime<Utc>,
    pub event_count: usize,
    pub max_confidence: f64,
}

fn window_duration(minutes: f64) -> Duration {
    Duration::microseconds((minutes * 60.0 * 1e6).round() as i64)
}

/// Groups events into maximal runs per `(camera_id, label)` in which every
/// gap between consecutive capture times is strictly below the window.
///
/// Output is ordered by camera, label, then window start.
pub fn aggregate_observations(events: &[DetectionEvent], window_minutes: f64) -> Vec<Observation> {
    assert!(window_minutes > 0.0, "independence window must be positive");
    let window = window_duration(window_minutes);
    let mut groups: BTreeMap<(&str, &str), Vec<&DetectionEvent>> = BTreeMap::new();
    for e in events {
        groups
            .entry((e.camera_id.as_str(), e.label.as_str()))
            .or_default()
            .push(e);
    }
    let mut out = Vec::new();
    for ((camera_id, label), mut evs) in groups {
        evs.sort_by(|a, b| {
            a.detected_at
                .cmp(&b.detected_at)
                .then_with(|| a.event_id.cmp(&b.event_id))
        });
        let mut current: Option<Observation> = None;
        for e in evs {
            match current.as_mut() {
                Some(obs) if e.detected_at - obs.window_end < window => {
                    obs.window_end = e.detected_at;
                    obs.event_count += 1;
                    obs.max_confidence = obs.max_confidence.max(e.confidence);
                }
                _ => {
                    out.extend(current.take());
                    current = Some(Observation {
                        label: label.to_string(),
                        camera_id: camera_id.to_string(),
                        window_start: e.detected_at,
                        window_end: e.detected_at,
                        event_count: 1,
                        max_confidence: e.confidence,
                    });
                }
            }
        }
        out.extend(current);
    }
    out
}
