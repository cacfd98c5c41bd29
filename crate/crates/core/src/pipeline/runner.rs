use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::Utc;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{
    event_id, infer, preprocess, DetectorBackend, Dequeued, ModelProfile, PipelineError, WorkItem,
    WorkQueue,
};
use crate::ingest::BlobStore;
use crate::store::{DeadLetter, DetectionEvent, ImageOutcome, PipelineMode, Store};

/// Where workers fetch image bytes from.
pub trait AssetSource: Send + Sync {
    fn load(&self, sha256: &str) -> Result<Vec<u8>, String>;
}

impl AssetSource for BlobStore {
    fn load(&self, sha256: &str) -> Result<Vec<u8>, String> {
        self.read(sha256).map_err(|e| e.to_string())
    }
}

#[derive(Default)]
pub struct MemorySource {
    blobs: HashMap<String, Vec<u8>>,
    fallback: Option<Vec<u8>>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    /// Serves `bytes` for any hash not inserted explicitly.
    pub fn with_fallback(bytes: Vec<u8>) -> Self {
        Self {
            blobs: HashMap::new(),
            fallback: Some(bytes),
        }
    }

    pub fn insert(&mut self, sha256: impl Into<String>, bytes: Vec<u8>) {
        self.blobs.insert(sha256.into(), bytes);
    }
}

impl AssetSource for MemorySource {
    fn load(&self, sha256: &str) -> Result<Vec<u8>, String> {
        self.blobs
            .get(sha256)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| format!("asset {sha256} not found"))
    }
}

pub type EventObserver = Arc<dyn Fn(&DetectionEvent) + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: ModelProfile,
    pub concurrency: usize,
    /// Retries after the first attempt for retryable backend errors.
    pub retry_limit: u32,
    /// Falls back to the profile's default when unset.
    pub min_confidence: Option<f64>,
}

impl PipelineConfig {
    pub fn new(profile: ModelProfile) -> Self {
        Self {
            profile,
            concurrency: 4,
            retry_limit: 3,
            min_confidence: None,
        }
    }
}

/// Per-item scheduling record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub sha256: String,
    pub priority: PipelineMode,
    pub enqueue_tick: u64,
    pub start_tick: u64,
    pub worker: usize,
    /// Dequeue to terminal outcome.
    pub service_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Distinct images that reached a terminal outcome in this run.
    pub images_processed: usize,
    pub images_with_events: usize,
    pub images_without_detections: usize,
    pub events_appended: usize,
    /// Events whose id was already in the log.
    pub events_already_stored: usize,
    pub dead_letters: Vec<DeadLetter>,
    pub retries: u64,
    /// Work items skipped because the same hash was already taken this run.
    pub duplicate_items: usize,
    pub trace: Vec<TraceEntry>,
    pub elapsed_ms: f64,
}

struct Shared {
    config: PipelineConfig,
    min_confidence: f64,
    backends: Vec<Arc<dyn DetectorBackend>>,
    source: Arc<dyn AssetSource>,
    store: Arc<Store>,
    observer: Option<EventObserver>,
    seen: Mutex<HashSet<String>>,
    trace: Mutex<Vec<TraceEntry>>,
    dead: Mutex<Vec<DeadLetter>>,
    processed: AtomicUsize,
    with_events: AtomicUsize,
    without: AtomicUsize,
    appended: AtomicUsize,
    already: AtomicUsize,
    retries: AtomicU64,
    duplicates: AtomicUsize,
}

pub struct PipelineBuilder {
    config: PipelineConfig,
    store: Arc<Store>,
    backends: Vec<Arc<dyn DetectorBackend>>,
    source: Option<Arc<dyn AssetSource>>,
    observer: Option<EventObserver>,
}

impl PipelineBuilder {
    pub fn backend(mut self, backend: Arc<dyn DetectorBackend>) -> Self {
        self.backends.push(backend);
        self
    }

    pub fn source(mut self, source: Arc<dyn AssetSource>) -> Self {
        self.source = Some(source);
        self
    }

    /// Called once for every freshly appended event.
    pub fn observer(mut self, f: EventObserver) -> Self {
        self.observer = Some(f);
        self
    }

    pub fn start(self) -> Result<Pipeline, PipelineError> {
        self.config.profile.validate()?;
        if self.backends.is_empty() {
            return Err(PipelineError::Config("no detector backend registered".into()));
        }
        if self.config.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be at least 1".into()));
        }
        let source = self
            .source
            .ok_or_else(|| PipelineError::Config("no asset source".into()))?;
        let min_confidence = self
            .config
            .min_confidence
            .unwrap_or(self.config.profile.default_min_confidence);
        if !(0.0..=1.0).contains(&min_confidence) {
            return Err(PipelineError::Config(format!(
                "min_confidence {min_confidence} outside [0, 1]"
            )));
        }
        let shared = Arc::new(Shared {
            min_confidence,
            backends: self.backends,
            source,
            store: self.store,
            observer: self.observer,
            seen: Mutex::default(),
            trace: Mutex::default(),
            dead: Mutex::default(),
            processed: AtomicUsize::new(0),
            with_events: AtomicUsize::new(0),
            without: AtomicUsize::new(0),
            appended: AtomicUsize::new(0),
            already: AtomicUsize::new(0),
            retries: AtomicU64::new(0),
            duplicates: AtomicUsize::new(0),
            config: self.config,
        });
        let queue = Arc::new(WorkQueue::new());
        let workers = (0..shared.config.concurrency)
            .map(|w| {
                let queue = queue.clone();
                let shared = shared.clone();
                std::thread::Builder::new()
                    .name(format!("pipeline-{w}"))
                    .spawn(move || {
                        while let Some(d) = queue.pop() {
                            shared.process(w, d);
                        }
                    })
                    .expect("spawn pipeline worker")
            })
            .collect();
        Ok(Pipeline {
            queue,
            workers,
            shared,
            started: Instant::now(),
        })
    }
}

/// A running worker pool fed by a realtime-first queue.
pub struct Pipeline {
    queue: Arc<WorkQueue>,
    workers: Vec<JoinHandle<()>>,
    shared: Arc<Shared>,
    started: Instant,
}

impl Pipeline {
    pub fn builder(config: PipelineConfig, store: Arc<Store>) -> PipelineBuilder {
        PipelineBuilder {
            config,
            store,
            backends: Vec::new(),
            source: None,
            observer: None,
        }
    }

    /// Returns the enqueue tick, or `None` if the pipeline is shutting down.
    pub fn submit(&self, item: WorkItem) -> Option<u64> {
        self.queue.push(item)
    }

    pub fn queue(&self) -> &Arc<WorkQueue> {
        &self.queue
    }

    /// Closes the queue, waits for in-flight and queued work, and reports.
    pub fn finish(self) -> PipelineReport {
        self.queue.close();
        for w in self.workers {
            if w.join().is_err() {
                log::error!("pipeline worker panicked");
            }
        }
        let s = &self.shared;
        let mut trace = std::mem::take(&mut *s.trace.lock());
        trace.sort_by_key(|t| t.start_tick);
        PipelineReport {
            images_processed: s.processed.load(Ordering::SeqCst),
            images_with_events: s.with_events.load(Ordering::SeqCst),
            images_without_detections: s.without.load(Ordering::SeqCst),
            events_appended: s.appended.load(Ordering::SeqCst),
            events_already_stored: s.already.load(Ordering::SeqCst),
            dead_letters: std::mem::take(&mut *s.dead.lock()),
            retries: s.retries.load(Ordering::SeqCst),
            duplicate_items: s.duplicates.load(Ordering::SeqCst),
            trace,
            elapsed_ms: self.started.elapsed().as_secs_f64() * 1e3,
        }
    }
}

impl Shared {
    fn dead_letter(&self, sha256: &str, reason: String, attempts: u32) {
        let rec = DeadLetter {
            sha256: sha256.to_string(),
            reason,
            attempts,
            ts: Utc::now(),
        };
        if let Err(e) = self.store.record_dead_letter(rec.clone()) {
            log::error!("failed to persist dead letter for {sha256}: {e}");
        }
        self.dead.lock().push(rec);
    }

    fn process(&self, worker: usize, d: Dequeued) {
        let started = Instant::now();
        let sha = d.item.sha256().to_string();
        if !self.seen.lock().insert(sha.clone()) {
            self.duplicates.fetch_add(1, Ordering::SeqCst);
            return;
        }
        self.run_item(worker, &d.item);
        self.processed.fetch_add(1, Ordering::SeqCst);
        self.trace.lock().push(TraceEntry {
            sha256: sha,
            priority: d.item.priority,
            enqueue_tick: d.enqueue_tick,
            start_tick: d.start_tick,
            worker,
            service_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    fn run_item(&self, worker: usize, item: &WorkItem) {
        let sha = item.sha256();
        let profile = &self.config.profile;
        let bytes = match self.source.load(sha) {
            Ok(b) => b,
            Err(e) => return self.dead_letter(sha, format!("load: {e}"), 0),
        };
        let pre = match preprocess(&bytes, sha, profile) {
            Ok(p) => p,
            Err(e) => return self.dead_letter(sha, e.to_string(), 0),
        };
        let n = self.backends.len();
        let mut attempts = 0u32;
        let detections = loop {
            let backend = &self.backends[(worker + attempts as usize) % n];
            attempts += 1;
            match infer(&pre, backend.as_ref(), profile, self.min_confidence) {
                Ok(d) => break d,
                Err(PipelineError::Backend(e))
                    if e.is_retryable() && attempts <= self.config.retry_limit =>
                {
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    log::debug!("retrying {sha} after: {e}");
                }
                Err(e) => return self.dead_letter(sha, e.to_string(), attempts),
            }
        };

        let manifest = &item.asset.manifest;
        let count = detections.len();
        for (i, det) in detections.into_iter().enumerate() {
            let event = DetectionEvent {
                event_id: event_id(sha, &profile.model_id, i),
                image_sha256: sha.to_string(),
                camera_id: manifest.camera_id.clone(),
                model_id: det.model_id,
                label: det.label,
                confidence: det.confidence,
                bbox: det.bbox,
                detected_at: manifest.captured_at,
                pipeline_mode: item.priority,
            };
            match self.store.append_event(event.clone()) {
                Ok(a) if a.fresh => {
                    self.appended.fetch_add(1, Ordering::SeqCst);
                    if let Some(obs) = &self.observer {
                        obs(&event);
                    }
                }
                Ok(_) => {
                    self.already.fetch_add(1, Ordering::SeqCst);
                }
                Err(e) => return self.dead_letter(sha, format!("store: {e}"), attempts),
            }
        }
        if count > 0 {
            self.with_events.fetch_add(1, Ordering::SeqCst);
        } else {
            self.without.fetch_add(1, Ordering::SeqCst);
        }
        let outcome = ImageOutcome {
            sha256: sha.to_string(),
            model_id: profile.model_id.clone(),
            detections: count,
            pipeline_mode: item.priority,
            attempts,
            ts: Utc::now(),
        };
        if let Err(e) = self.store.record_outcome(outcome) {
            log::error!("failed to record outcome for {sha}: {e}");
        }
    }
}

/// Submits `items` in order, waits for completion and reports.
pub fn run_pipeline(
    items: impl IntoIterator<Item = WorkItem>,
    config: PipelineConfig,
    backends: Vec<Arc<dyn DetectorBackend>>,
    source: Arc<dyn AssetSource>,
    store: Arc<Store>,
) -> Result<PipelineReport, PipelineError> {
    let mut b = Pipeline::builder(config, store).source(source);
    for be in backends {
        b = b.backend(be);
    }
    let p = b.start()?;
    for item in items {
        p.submit(item);
    }
    Ok(p.finish())
}

impl PipelineReport {
    pub fn service_times(&self) -> Vec<Duration> {
        self.trace
            .iter()
            .map(|t| Duration::from_secs_f64(t.service_ms / 1e3))
            .collect()
    }
}
