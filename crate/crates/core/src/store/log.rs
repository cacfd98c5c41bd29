use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};

use super::{DetectionEvent, StoreError};

pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;

fn segment_name(start_offset: u64) -> String {
    format!("events-{start_offset}.jsonl")
}

fn parse_segment_name(name: &str) -> Option<u64> {
    name.strip_prefix("events-")?
        .strip_suffix(".jsonl")?
        .parse()
        .ok()
}

struct Writer {
    dir: PathBuf,
    file: File,
    segment_bytes: u64,
    segment_max: u64,
    sync: bool,
}

#[derive(Default)]
struct Index {
    events: Vec<DetectionEvent>,
    by_id: HashMap<String, u64>,
}

/// Result of an append: the event's log offset and whether it was new.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appended {
    pub offset: u64,
    pub fresh: bool,
}

/// Append-only detection event log.
///
/// On disk: JSON Lines segments `events-<start_offset>.jsonl`, rolled over at
/// a size limit. In memory: the full event list plus an `event_id` index,
/// rebuilt by replaying segments on open. Appends are serialized through one
/// writer; readers take a shared lock on the index and never see a partial
/// append.
pub struct EventLog {
    writer: Mutex<Option<Writer>>,
    index: RwLock<Index>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            writer: Mutex::new(None),
            index: RwLock::new(Index::default()),
        }
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        Self::open_with(dir, DEFAULT_SEGMENT_BYTES, false)
    }

    /// `sync` forces an fsync after every append.
    pub fn open_with(dir: &Path, segment_max: u64, sync: bool) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
        let mut segments: Vec<(u64, PathBuf)> = std::fs::read_dir(dir)
            .map_err(|e| StoreError::io(dir, e))?
            .filter_map(Result::ok)
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                Some((parse_segment_name(&name)?, e.path()))
            })
            .collect();
        segments.sort();

        let mut index = Index::default();
        let n_segments = segments.len();
        for (i, (start, path)) in segments.iter().enumerate() {
            if *start != index.events.len() as u64 {
                return Err(StoreError::Corrupt(format!(
                    "{} starts at offset {start} but {} events precede it",
                    path.display(),
                    index.events.len()
                )));
            }
            replay_segment(path, i + 1 == n_segments, &mut index)?;
        }

        let (path, segment_bytes) = match segments.last() {
            Some((_, p)) => (
                p.clone(),
                std::fs::metadata(p).map_err(|e| StoreError::io(p, e))?.len(),
            ),
            None => (dir.join(segment_name(0)), 0),
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        Ok(Self {
            writer: Mutex::new(Some(Writer {
                dir: dir.to_path_buf(),
                file,
                segment_bytes,
                segment_max: segment_max.max(1),
                sync,
            })),
            index: RwLock::new(index),
        })
    }

    /// Appends an event. A duplicate `event_id` is a no-op that returns the
    /// original offset.
    pub fn append(&self, event: DetectionEvent) -> Result<Appended, StoreError> {
        event.validate()?;
        let mut writer = self.writer.lock();
        if let Some(&offset) = self.index.read().by_id.get(&event.event_id) {
            return Ok(Appended {
                offset,
                fresh: false,
            });
        }
        let offset = self.index.read().events.len() as u64;
        if let Some(w) = writer.as_mut() {
            let mut line = serde_json::to_vec(&event).expect("event serializes");
            line.push(b'\n');
            if w.segment_bytes > 0 && w.segment_bytes + line.len() as u64 > w.segment_max {
                let path = w.dir.join(segment_name(offset));
                w.file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| StoreError::io(&path, e))?;
                w.segment_bytes = 0;
            }
            w.file
                .write_all(&line)
                .map_err(|e| StoreError::io(&w.dir, e))?;
            if w.sync {
                w.file.sync_data().map_err(|e| StoreError::io(&w.dir, e))?;
            }
            w.segment_bytes += line.len() as u64;
        }
        let mut index = self.index.write();
        index.by_id.insert(event.event_id.clone(), offset);
        index.events.push(event);
        Ok(Appended {
            offset,
            fresh: true,
        })
    }

    pub fn len(&self) -> usize {
        self.index.read().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset_of(&self, event_id: &str) -> Option<u64> {
        self.index.read().by_id.get(event_id).copied()
    }

    pub fn get(&self, offset: u64) -> Option<DetectionEvent> {
        self.index.read().events.get(offset as usize).cloned()
    }

    /// Runs `f` against a consistent snapshot of all events in log order.
    pub fn with_events<R>(&self, f: impl FnOnce(&[DetectionEvent]) -> R) -> R {
        f(&self.index.read().events)
    }

    pub fn snapshot(&self) -> Vec<DetectionEvent> {
        self.with_events(|e| e.to_vec())
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        if let Some(w) = self.writer.lock().as_mut() {
            w.file.sync_all().map_err(|e| StoreError::io(&w.dir, e))?;
        }
        Ok(())
    }
}

/// Replays one segment into `index`. In the last segment a torn trailing
/// line (crash mid-append) is truncated away; anywhere else it is corruption.
fn replay_segment(path: &Path, is_last: bool, index: &mut Index) -> Result<(), StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut good_bytes = 0u64;
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader
            .read_until(b'\n', &mut line)
            .map_err(|e| StoreError::io(path, e))?;
        if n == 0 {
            break;
        }
        let complete = line.last() == Some(&b'\n');
        let parsed = if complete {
            serde_json::from_slice::<DetectionEvent>(&line).ok()
        } else {
            None
        };
        match parsed {
            Some(ev) => {
                good_bytes += n as u64;
                if index.by_id.contains_key(&ev.event_id) {
                    continue;
                }
                let offset = index.events.len() as u64;
                index.by_id.insert(ev.event_id.clone(), offset);
                index.events.push(ev);
            }
            None => {
                // Only a tail can be torn.
                let mut rest = Vec::new();
                std::io::Read::read_to_end(&mut reader, &mut rest)
                    .map_err(|e| StoreError::io(path, e))?;
                if !is_last || rest.iter().any(|b| !b.is_ascii_whitespace()) {
                    return Err(StoreError::Corrupt(format!(
                        "{}: unparseable record at byte {good_bytes}",
                        path.display()
                    )));
                }
                log::warn!(
                    "{}: truncating torn tail at byte {good_bytes}",
                    path.display()
                );
                let f = OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|e| StoreError::io(path, e))?;
                f.set_len(good_bytes).map_err(|e| StoreError::io(path, e))?;
                let mut f = f;
                f.seek(SeekFrom::End(0)).map_err(|e| StoreError::io(path, e))?;
                break;
            }
        }
    }
    Ok(())
}
