use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{Duration, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ingest::sha256_hex;

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap()
}

fn event(id: usize, camera: &str, label: &str, minutes: i64, confidence: f64) -> DetectionEvent {
    DetectionEvent {
        event_id: format!("ev-{id:05}"),
        image_sha256: sha256_hex(format!("img-{}", id / 2).as_bytes()),
        camera_id: camera.into(),
        model_id: "m".into(),
        label: label.into(),
        confidence,
        bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        detected_at: t0() + Duration::minutes(minutes),
        pipeline_mode: PipelineMode::Batch,
    }
}

fn random_events(rng: &mut ChaCha8Rng, n: usize) -> Vec<DetectionEvent> {
    let cams = ["c1", "c2", "c3"];
    let labels = ["elephant", "zebra", "human"];
    (0..n)
        .map(|i| {
            event(
                i,
                cams[rng.gen_range(0..cams.len())],
                labels[rng.gen_range(0..labels.len())],
                rng.gen_range(0..600),
                (rng.gen_range(0..=100) as f64) / 100.0,
            )
        })
        .collect()
}

#[test]
fn append_is_idempotent() {
    let store = Store::in_memory();
    let a = store.append_event(event(0, "c1", "elephant", 0, 0.9)).unwrap();
    assert_eq!(a, Appended { offset: 0, fresh: true });
    let b = store.append_event(event(1, "c1", "elephant", 1, 0.9)).unwrap();
    assert_eq!(b.offset, 1);
    let again = store.append_event(event(0, "c1", "elephant", 0, 0.9)).unwrap();
    assert_eq!(again, Appended { offset: 0, fresh: false });
    assert_eq!(store.events().len(), 2);
}

#[test]
fn append_rejects_malformed() {
    let store = Store::in_memory();
    let mut e = event(0, "c1", "elephant", 0, 0.9);
    e.confidence = 1.2;
    assert!(matches!(store.append_event(e), Err(StoreError::Validation(_))));
    let mut e = event(0, "c1", "elephant", 0, 0.9);
    e.image_sha256 = "nope".into();
    assert!(store.append_event(e).is_err());
}

#[test]
fn concurrent_writers_get_distinct_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let handles: Vec<_> = (0..4)
        .map(|w| {
            let store = store.clone();
            std::thread::spawn(move || {
                (0..250)
                    .map(|i| {
                        store
                            .append_event(event(w * 250 + i, "c1", "zebra", i as i64, 0.5))
                            .unwrap()
                            .offset
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let offsets: BTreeSet<u64> = handles
        .into_iter()
        .flat_map(|h| h.join().unwrap())
        .collect();
    assert_eq!(offsets.len(), 1000);
    assert_eq!(store.events().len(), 1000);
    drop(store);
    let reopened = Store::open(dir.path()).unwrap();
    assert_eq!(reopened.events().len(), 1000);
}

#[test]
fn query_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = Store::in_memory();
    let events = random_events(&mut rng, 500);
    for e in &events {
        store.append_event(e.clone()).unwrap();
    }
    assert_eq!(store.query_events(&EventFilter::default()).unwrap().len(), 500);
    for _ in 0..50 {
        let from = rng.gen_bool(0.5).then(|| t0() + Duration::minutes(rng.gen_range(0..300)));
        let filter = EventFilter {
            camera_id: rng.gen_bool(0.5).then(|| format!("c{}", rng.gen_range(1..=3))),
            label: rng.gen_bool(0.5).then(|| "zebra".to_string()),
            from,
            to: rng
                .gen_bool(0.5)
                .then(|| from.unwrap_or(t0()) + Duration::minutes(rng.gen_range(0..300))),
            min_confidence: rng.gen_bool(0.5).then(|| rng.gen_range(0.0..1.0)),
        };
        // Oracle: plain scan with the predicates written out, then sort.
        let mut expected: Vec<&DetectionEvent> = events
            .iter()
            .filter(|e| {
                if let Some(c) = &filter.camera_id {
                    if &e.camera_id != c {
                        return false;
                    }
                }
                if let Some(l) = &filter.label {
                    if &e.label != l {
                        return false;
                    }
                }
                if let Some(f) = filter.from {
                    if e.detected_at < f {
                        return false;
                    }
                }
                if let Some(t) = filter.to {
                    if e.detected_at > t {
                        return false;
                    }
                }
                if let Some(m) = filter.min_confidence {
                    if e.confidence < m {
                        return false;
                    }
                }
                true
            })
            .collect();
        expected.sort_by_key(|e| (e.detected_at, e.event_id.clone()));
        let got = store.query_events(&filter).unwrap();
        let expected: Vec<DetectionEvent> = expected.into_iter().cloned().collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn query_label_absent_is_empty() {
    let store = Store::in_memory();
    store.append_event(event(0, "c1", "zebra", 0, 0.9)).unwrap();
    let f = EventFilter {
        label: Some("elephant".into()),
        ..Default::default()
    };
    assert!(store.query_events(&f).unwrap().is_empty());
}

#[test]
fn inverted_range_is_rejected() {
    let store = Store::in_memory();
    let f = EventFilter {
        from: Some(t0() + Duration::hours(1)),
        to: Some(t0()),
        ..Default::default()
    };
    assert!(matches!(store.query_events(&f), Err(StoreError::Validation(_))));
}

#[test]
fn burst_examples() {
    let one = aggregate_observations(
        &[event(0, "c1", "elephant", 0, 0.5), event(1, "c1", "elephant", 5, 0.8)],
        30.0,
    );
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].event_count, 2);
    assert_eq!(one[0].max_confidence, 0.8);
    let two = aggregate_observations(
        &[event(0, "c1", "elephant", 0, 0.5), event(1, "c1", "elephant", 40, 0.8)],
        30.0,
    );
    assert_eq!(two.len(), 2);
    // Gap exactly equal to the window starts a new observation.
    let edge = aggregate_observations(
        &[event(0, "c1", "elephant", 0, 0.5), event(1, "c1", "elephant", 30, 0.8)],
        30.0,
    );
    assert_eq!(edge.len(), 2);
}

/// Oracle: two events of one (camera, label) share an observation iff no gap
/// between consecutive times in the span they cover reaches the window.
fn oracle_partition(events: &[DetectionEvent], window_minutes: f64) -> BTreeSet<(String, String, i64, i64, usize)> {
    let window = (window_minutes * 60.0) as i64;
    let n = events.len();
    let mut comp: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (&events[i], &events[j]);
            if a.camera_id != b.camera_id || a.label != b.label {
                continue;
            }
            let (lo, hi) = (a.detected_at.min(b.detected_at), a.detected_at.max(b.detected_at));
            let mut times: Vec<i64> = events
                .iter()
                .filter(|e| e.camera_id == a.camera_id && e.label == a.label)
                .filter(|e| e.detected_at >= lo && e.detected_at <= hi)
                .map(|e| e.detected_at.timestamp())
                .collect();
            times.sort_unstable();
            if times.windows(2).all(|w| w[1] - w[0] < window) {
                let (ci, cj) = (comp[i], comp[j]);
                let target = ci.min(cj);
                for c in comp.iter_mut() {
                    if *c == ci || *c == cj {
                        *c = target;
                    }
                }
            }
        }
    }
    let roots: BTreeSet<usize> = comp.iter().copied().collect();
    roots
        .into_iter()
        .map(|r| {
            let members: Vec<&DetectionEvent> =
                (0..n).filter(|&i| comp[i] == r).map(|i| &events[i]).collect();
            (
                members[0].camera_id.clone(),
                members[0].label.clone(),
                members.iter().map(|e| e.detected_at.timestamp()).min().unwrap(),
                members.iter().map(|e| e.detected_at.timestamp()).max().unwrap(),
                members.len(),
            )
        })
        .collect()
}

#[test]
fn aggregation_matches_grouping_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.gen_range(0..40);
        let events = random_events(&mut rng, n);
        let window = [5.0, 15.0, 30.0, 60.0][rng.gen_range(0..4)];
        let got: BTreeSet<_> = aggregate_observations(&events, window)
            .into_iter()
            .map(|o| {
                (
                    o.camera_id,
                    o.label,
                    o.window_start.timestamp(),
                    o.window_end.timestamp(),
                    o.event_count,
                )
            })
            .collect();
        assert_eq!(got, oracle_partition(&events, window));
    }
}

#[test]
fn observations_partition_events_and_shrink_with_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let events = random_events(&mut rng, 60);
        let mut prev = usize::MAX;
        for w in [1.0, 5.0, 10.0, 30.0, 90.0, 600.0] {
            let obs = aggregate_observations(&events, w);
            assert_eq!(obs.iter().map(|o| o.event_count).sum::<usize>(), events.len());
            assert!(obs.iter().all(|o| o.window_start <= o.window_end && o.event_count >= 1));
            assert!(obs.len() <= prev);
            prev = obs.len();
        }
    }
}

#[test]
fn stats_examples() {
    let store = Store::in_memory();
    assert_eq!(store.platform_stats(), PlatformStats::default());
    // ids 0,1 share an image; id 2 is a second image.
    store.append_event(event(0, "c1", "elephant", 0, 0.9)).unwrap();
    store.append_event(event(1, "c1", "zebra", 0, 0.9)).unwrap();
    store.append_event(event(2, "c1", "zebra", 1, 0.9)).unwrap();
    let s = store.platform_stats();
    assert_eq!(s.images_processed, 2);
    assert_eq!(s.detection_events, 3);
    assert!(s.observations >= 1);
    assert_eq!(s.distinct_labels, 2);
}

#[test]
fn dead_letters_and_empty_images_count_as_processed() {
    let store = Store::in_memory();
    store
        .record_dead_letter(DeadLetter {
            sha256: sha256_hex(b"a"),
            reason: "decode".into(),
            attempts: 1,
            ts: t0(),
        })
        .unwrap();
    store
        .record_outcome(ImageOutcome {
            sha256: sha256_hex(b"b"),
            model_id: "m".into(),
            detections: 0,
            pipeline_mode: PipelineMode::Batch,
            attempts: 1,
            ts: t0(),
        })
        .unwrap();
    assert_eq!(store.platform_stats().images_processed, 2);
    assert_eq!(store.platform_stats().dead_letters, 1);
}

#[test]
fn replay_reproduces_index_and_truncates_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let events = random_events(&mut rng, 120);
    let (stats, snapshot) = {
        let store = Store::open(dir.path()).unwrap();
        for e in &events {
            store.append_event(e.clone()).unwrap();
        }
        (store.platform_stats(), store.events().snapshot())
    };
    // Simulate a crash mid-append.
    let seg = dir.path().join("events").join("events-0.jsonl");
    let len_before = std::fs::metadata(&seg).unwrap().len();
    {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&seg).unwrap();
        f.write_all(b"{\"event_id\":\"torn").unwrap();
    }
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.platform_stats(), stats);
    assert_eq!(store.events().snapshot(), snapshot);
    assert_eq!(std::fs::metadata(&seg).unwrap().len(), len_before);
    // Appends continue cleanly after recovery.
    store.append_event(event(9999, "c9", "lion", 0, 0.7)).unwrap();
    drop(store);
    assert_eq!(Store::open(dir.path()).unwrap().events().len(), 121);
}

#[test]
fn segments_roll_over_and_replay_in_order() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Store::open_with(dir.path(), 2048).unwrap();
        for i in 0..40 {
            store.append_event(event(i, "c1", "zebra", i as i64, 0.5)).unwrap();
        }
    }
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("events"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.len() > 1, "{names:?}");
    assert!(names.iter().all(|n| n.starts_with("events-") && n.ends_with(".jsonl")));
    let store = Store::open_with(dir.path(), 2048).unwrap();
    assert_eq!(store.events().len(), 40);
    for i in 0..40u64 {
        assert_eq!(store.events().get(i).unwrap().event_id, format!("ev-{i:05}"));
    }
}

#[test]
fn log_bytes_only_grow() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let seg = dir.path().join("events").join("events-0.jsonl");
    let mut last = 0;
    for i in 0..20 {
        store.append_event(event(i % 7, "c1", "zebra", 0, 0.5)).unwrap();
        let len = std::fs::metadata(&seg).unwrap().len();
        assert!(len >= last);
        last = len;
    }
    let text = std::fs::read_to_string(&seg).unwrap();
    assert_eq!(text.lines().count(), 7);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        [
            "bbox",
            "camera_id",
            "confidence",
            "detected_at",
            "event_id",
            "image_sha256",
            "label",
            "model_id",
            "pipeline_mode"
        ]
    );
}
