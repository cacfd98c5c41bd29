use std::collections::VecDeque;

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex};

use crate::ingest::{CameraRegistry, ImageAsset};
use crate::store::PipelineMode;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkItem {
    pub asset: ImageAsset,
    pub priority: PipelineMode,
    pub enqueued_at: DateTime<Utc>,
}

impl WorkItem {
    /// Realtime iff the source camera is registered as realtime.
    pub fn for_asset(asset: ImageAsset, registry: &CameraRegistry) -> Self {
        let priority = match registry.get(&asset.manifest.camera_id) {
            Some(c) if c.realtime => PipelineMode::Realtime,
            _ => PipelineMode::Batch,
        };
        Self {
            asset,
            priority,
            enqueued_at: Utc::now(),
        }
    }

    pub fn sha256(&self) -> &str {
        &self.asset.sha256
    }
}

/// An item handed to a worker, stamped with logical enqueue and start ticks.
/// Ticks come from one counter advanced under the queue lock, so they give a
/// total order over all enqueue and dequeue events.
#[derive(Debug, Clone)]
pub struct Dequeued {
    pub item: WorkItem,
    pub enqueue_tick: u64,
    pub start_tick: u64,
}

#[derive(Default)]
struct State {
    realtime: VecDeque<(u64, WorkItem)>,
    batch: VecDeque<(u64, WorkItem)>,
    clock: u64,
    closed: bool,
}

/// Two-class FIFO: realtime items always leave before batch items.
#[derive(Default)]
pub struct WorkQueue {
    state: Mutex<State>,
    ready: Condvar,
}

impl WorkQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enqueues an item and returns its enqueue tick. Items pushed after
    /// `close` are dropped and `None` is returned.
    pub fn push(&self, item: WorkItem) -> Option<u64> {
        let mut s = self.state.lock();
        if s.closed {
            return None;
        }
        s.clock += 1;
        let tick = s.clock;
        match item.priority {
            PipelineMode::Realtime => s.realtime.push_back((tick, item)),
            PipelineMode::Batch => s.batch.push_back((tick, item)),
        }
        drop(s);
        self.ready.notify_one();
        Some(tick)
    }

    /// Blocks until an item is available, or returns `None` once the queue is
    /// closed and drained.
    pub fn pop(&self) -> Option<Dequeued> {
        let mut s = self.state.lock();
        loop {
            let next = match s.realtime.pop_front() {
                Some(x) => Some(x),
                None => s.batch.pop_front(),
            };
            if let Some((enqueue_tick, item)) = next {
                s.clock += 1;
                return Some(Dequeued {
                    item,
                    enqueue_tick,
                    start_tick: s.clock,
                });
            }
            if s.closed {
                return None;
            }
            self.ready.wait(&mut s);
        }
    }

    /// No more pushes; workers drain what is left and exit.
    pub fn close(&self) {
        self.state.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn len(&self) -> usize {
        let s = self.state.lock();
        s.realtime.len() + s.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
