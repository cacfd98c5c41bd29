use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{de::DeserializeOwned, Serialize};

use super::StoreError;

struct Inner<T> {
    file: Option<(PathBuf, File)>,
    records: Vec<T>,
}

/// A JSON Lines journal mirrored in memory. A torn final line is dropped on
/// open.
pub struct JsonlFile<T> {
    inner: Mutex<Inner<T>>,
}

impl<T: Serialize + DeserializeOwned + Clone> JsonlFile<T> {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                file: None,
                records: Vec::new(),
            }),
        }
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
        }
        let mut records = Vec::new();
        let mut good = 0u64;
        if path.exists() {
            let f = File::open(path).map_err(|e| StoreError::io(path, e))?;
            let mut reader = BufReader::new(f);
            let mut line = Vec::new();
            loop {
                line.clear();
                let n = reader
                    .read_until(b'\n', &mut line)
                    .map_err(|e| StoreError::io(path, e))?;
                if n == 0 {
                    break;
                }
                if line.last() != Some(&b'\n') {
                    break;
                }
                match serde_json::from_slice::<T>(&line) {
                    Ok(r) => {
                        records.push(r);
                        good += n as u64;
                    }
                    Err(_) if line.iter().all(|b| b.is_ascii_whitespace()) => good += n as u64,
                    Err(e) => {
                        return Err(StoreError::Corrupt(format!(
                            "{}: byte {good}: {e}",
                            path.display()
                        )))
                    }
                }
            }
            let len = std::fs::metadata(path).map_err(|e| StoreError::io(path, e))?.len();
            if len != good {
                OpenOptions::new()
                    .write(true)
                    .open(path)
                    .and_then(|f| f.set_len(good))
                    .map_err(|e| StoreError::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| StoreError::io(path, e))?;
        Ok(Self {
            inner: Mutex::new(Inner {
                file: Some((path.to_path_buf(), file)),
                records,
            }),
        })
    }

    pub fn append(&self, record: T) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        if let Some((path, file)) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            file.write_all(&line).map_err(|e| StoreError::io(path, e))?;
        }
        inner.records.push(record);
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<T> {
        self.inner.lock().records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        if let Some((path, file)) = self.inner.lock().file.as_mut() {
            file.sync_all().map_err(|e| StoreError::io(path, e))?;
        }
        Ok(())
    }
}
