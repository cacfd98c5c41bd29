use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use parking_lot::Mutex;

use super::Alert;

/// A notification sink. `Ok` is the channel's acknowledgement.
pub trait Channel: Send + Sync {
    fn send(&self, alert: &Alert) -> Result<(), String>;
}

/// Appends one JSON line per alert.
pub struct FileChannel {
    path: PathBuf,
    lock: Mutex<()>,
}

impl FileChannel {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }
}

impl Channel for FileChannel {
    fn send(&self, alert: &Alert) -> Result<(), String> {
        let _g = self.lock.lock();
        let mut line = serde_json::to_vec(alert).map_err(|e| e.to_string())?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| format!("{}: {e}", self.path.display()))?;
        f.write_all(&line)
            .and_then(|_| f.sync_data())
            .map_err(|e| format!("{}: {e}", self.path.display()))
    }
}

/// Records sent alerts; fails the first `failures` sends.
#[derive(Default)]
pub struct MemoryChannel {
    failures: Mutex<u32>,
    sent: Mutex<Vec<Alert>>,
}

impl MemoryChannel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn failing(failures: u32) -> Self {
        Self {
            failures: Mutex::new(failures),
            sent: Mutex::default(),
        }
    }

    pub fn sent(&self) -> Vec<Alert> {
        self.sent.lock().clone()
    }
}

impl Channel for MemoryChannel {
    fn send(&self, alert: &Alert) -> Result<(), String> {
        let mut f = self.failures.lock();
        if *f > 0 {
            *f -= 1;
            return Err("channel unavailable".into());
        }
        self.sent.lock().push(alert.clone());
        Ok(())
    }
}
