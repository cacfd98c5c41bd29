use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::blob::write_atomic;
use super::{sha256_hex, BlobStore, IngestError, ImageAsset, UploadManifest};

/// Resumable upload state for one content hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadSession {
    pub session_id: String,
    pub resume_offset: u64,
    pub manifest: UploadManifest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BeginOutcome {
    Session(UploadSession),
    AlreadyStored(ImageAsset),
}

/// Body of the `POST /v1/uploads` response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BeginResponse {
    Session {
        session_id: String,
        resume_offset: u64,
    },
    Deduplicated {
        deduplicated: bool,
        sha256: String,
    },
}

impl From<&BeginOutcome> for BeginResponse {
    fn from(o: &BeginOutcome) -> Self {
        match o {
            BeginOutcome::Session(s) => Self::Session {
                session_id: s.session_id.clone(),
                resume_offset: s.resume_offset,
            },
            BeginOutcome::AlreadyStored(a) => Self::Deduplicated {
                deduplicated: true,
                sha256: a.sha256.clone(),
            },
        }
    }
}

/// Body of the `PUT /v1/uploads/{id}` response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkResponse {
    pub resume_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SessionRecord {
    session_id: String,
    manifest: UploadManifest,
}

#[derive(Debug)]
struct Session {
    id: String,
    manifest: UploadManifest,
    received: u64,
    part_path: PathBuf,
    record_path: PathBuf,
    closed: bool,
}

#[derive(Default)]
struct Registry {
    by_id: HashMap<String, Arc<Mutex<Session>>>,
    by_sha: HashMap<String, String>,
}

/// Server side of the chunked upload protocol.
///
/// Partial uploads live under `<root>/uploads/` as `<sha>.part` plus a
/// `<sha>.session.json` record, so a restarted service resumes them.
pub struct UploadService {
    blobs: BlobStore,
    partial_dir: PathBuf,
    // Serializes dedupe lookups against commits.
    registry: Mutex<Registry>,
}

impl UploadService {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let root = root.into();
        let blobs = BlobStore::open(&root)?;
        let partial_dir = root.join("uploads");
        std::fs::create_dir_all(&partial_dir).map_err(|e| IngestError::io(&partial_dir, e))?;
        let svc = Self {
            blobs,
            partial_dir,
            registry: Mutex::new(Registry::default()),
        };
        svc.recover()?;
        Ok(svc)
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    fn recover(&self) -> Result<(), IngestError> {
        let mut reg = self.registry.lock();
        let entries = std::fs::read_dir(&self.partial_dir)
            .map_err(|e| IngestError::io(&self.partial_dir, e))?;
        for entry in entries.filter_map(Result::ok) {
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if !name.ends_with(".session.json") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| IngestError::io(&path, e))?;
            let Ok(rec) = serde_json::from_str::<SessionRecord>(&text) else {
                log::warn!("discarding unreadable session record {}", path.display());
                let _ = std::fs::remove_file(&path);
                continue;
            };
            let sha = rec.manifest.content_sha256.clone();
            let part_path = self.part_path(&sha);
            if self.blobs.contains(&sha) {
                let _ = std::fs::remove_file(&part_path);
                let _ = std::fs::remove_file(&path);
                continue;
            }
            let mut received = std::fs::metadata(&part_path).map(|m| m.len()).unwrap_or(0);
            if received > rec.manifest.byte_length || !part_path.exists() {
                std::fs::File::create(&part_path).map_err(|e| IngestError::io(&part_path, e))?;
                received = 0;
            }
            let session = Session {
                id: rec.session_id.clone(),
                manifest: rec.manifest,
                received,
                part_path,
                record_path: path.clone(),
                closed: false,
            };
            reg.by_sha.insert(sha, rec.session_id.clone());
            reg.by_id.insert(rec.session_id, Arc::new(Mutex::new(session)));
        }
        Ok(())
    }

    fn part_path(&self, sha: &str) -> PathBuf {
        self.partial_dir.join(format!("{sha}.part"))
    }

    fn record_path(&self, sha: &str) -> PathBuf {
        self.partial_dir.join(format!("{sha}.session.json"))
    }

    /// Starts or resumes an upload. A hash that is already stored returns
    /// `AlreadyStored`; a hash with a partial upload returns its session and
    /// the number of bytes already received.
    pub fn begin_upload(&self, manifest: UploadManifest) -> Result<BeginOutcome, IngestError> {
        manifest.validate()?;
        let sha = manifest.content_sha256.clone();
        let mut reg = loop {
            let reg = self.registry.lock();
            if self.blobs.contains(&sha) {
                return Ok(BeginOutcome::AlreadyStored(self.blobs.get(&sha)?));
            }
            let Some(handle) = reg.by_sha.get(&sha).map(|id| reg.by_id[id].clone()) else {
                break reg;
            };
            // Never hold the registry while waiting on a session lock;
            // finalize takes them in the opposite order.
            drop(reg);
            let s = handle.lock();
            if !s.closed {
                return Ok(BeginOutcome::Session(UploadSession {
                    session_id: s.id.clone(),
                    resume_offset: s.received,
                    manifest: s.manifest.clone(),
                }));
            }
            // Closed under us by a concurrent finalize; re-check the store.
        };
        let id = uuid::Uuid::new_v4().simple().to_string();
        let record_path = self.record_path(&sha);
        let part_path = self.part_path(&sha);
        std::fs::File::create(&part_path).map_err(|e| IngestError::io(&part_path, e))?;
        let rec = SessionRecord {
            session_id: id.clone(),
            manifest: manifest.clone(),
        };
        write_atomic(
            &record_path,
            &serde_json::to_vec(&rec).expect("session record serializes"),
        )?;
        let session = Session {
            id: id.clone(),
            manifest: manifest.clone(),
            received: 0,
            part_path,
            record_path,
            closed: false,
        };
        reg.by_sha.insert(sha, id.clone());
        reg.by_id.insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(BeginOutcome::Session(UploadSession {
            session_id: id,
            resume_offset: 0,
            manifest,
        }))
    }

    fn session(&self, session_id: &str) -> Result<Arc<Mutex<Session>>, IngestError> {
        self.registry
            .lock()
            .by_id
            .get(session_id)
            .cloned()
            .ok_or_else(|| IngestError::UnknownSession(session_id.to_string()))
    }

    /// Current server-side offset of a session.
    pub fn resume_offset(&self, session_id: &str) -> Result<u64, IngestError> {
        Ok(self.session(session_id)?.lock().received)
    }

    /// Appends `bytes` at `offset`, which must equal the session's current
    /// offset. Returns the new offset.
    pub fn append_chunk(
        &self,
        session_id: &str,
        offset: u64,
        bytes: &[u8],
    ) -> Result<u64, IngestError> {
        let handle = self.session(session_id)?;
        let mut s = handle.lock();
        if s.closed {
            return Err(IngestError::UnknownSession(session_id.to_string()));
        }
        if offset != s.received {
            return Err(IngestError::OutOfOrder {
                expected: s.received,
                got: offset,
            });
        }
        let attempted = offset + bytes.len() as u64;
        if attempted > s.manifest.byte_length {
            return Err(IngestError::Overflow {
                declared: s.manifest.byte_length,
                attempted,
            });
        }
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&s.part_path)
            .map_err(|e| IngestError::io(&s.part_path, e))?;
        f.write_all(bytes).map_err(|e| IngestError::io(&s.part_path, e))?;
        f.flush().map_err(|e| IngestError::io(&s.part_path, e))?;
        s.received = attempted;
        Ok(attempted)
    }

    /// Verifies the received bytes against the manifest hash and commits the
    /// asset. On a hash mismatch the partial data is discarded.
    pub fn finalize_upload(&self, session_id: &str) -> Result<ImageAsset, IngestError> {
        let handle = self.session(session_id)?;
        let mut s = handle.lock();
        if s.closed {
            return Err(IngestError::UnknownSession(session_id.to_string()));
        }
        if s.received != s.manifest.byte_length {
            return Err(IngestError::Incomplete {
                received: s.received,
                declared: s.manifest.byte_length,
            });
        }
        let bytes = std::fs::read(&s.part_path).map_err(|e| IngestError::io(&s.part_path, e))?;
        let actual = sha256_hex(&bytes);
        let sha = s.manifest.content_sha256.clone();

        let mut reg = self.registry.lock();
        s.closed = true;
        reg.by_id.remove(&s.id);
        reg.by_sha.remove(&sha);
        let cleanup = |s: &Session| {
            let _ = std::fs::remove_file(&s.part_path);
            let _ = std::fs::remove_file(&s.record_path);
        };
        if actual != sha {
            cleanup(&s);
            return Err(IngestError::Integrity {
                expected: sha,
                actual,
            });
        }
        let asset = if self.blobs.contains(&sha) {
            self.blobs.get(&sha)?
        } else {
            self.blobs.put_verified(&bytes, s.manifest.clone())?
        };
        cleanup(&s);
        Ok(asset)
    }

    /// Convenience for callers that hold the whole payload.
    pub fn upload_all(
        &self,
        manifest: UploadManifest,
        bytes: &[u8],
        chunk_size: usize,
    ) -> Result<ImageAsset, IngestError> {
        match self.begin_upload(manifest)? {
            BeginOutcome::AlreadyStored(a) => Ok(a),
            BeginOutcome::Session(s) => {
                let mut offset = s.resume_offset;
                while (offset as usize) < bytes.len() {
                    let end = (offset as usize + chunk_size.max(1)).min(bytes.len());
                    offset = self.append_chunk(&s.session_id, offset, &bytes[offset as usize..end])?;
                }
                self.finalize_upload(&s.session_id)
            }
        }
    }

    /// Active (unfinalized) session count.
    pub fn open_sessions(&self) -> usize {
        self.registry.lock().by_id.len()
    }

    pub fn partial_dir(&self) -> &Path {
        &self.partial_dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Modality;

    fn manifest(bytes: &[u8]) -> UploadManifest {
        UploadManifest {
            station_id: "st-1".into(),
            camera_id: "cam-1".into(),
            captured_at: "2024-03-01T02:00:00Z".parse().unwrap(),
            content_sha256: sha256_hex(bytes),
            byte_length: bytes.len() as u64,
            modality: Modality::Visual,
            sequence_no: 0,
        }
    }

    fn payload(n: usize, salt: u8) -> Vec<u8> {
        (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect()
    }

    fn session(o: BeginOutcome) -> UploadSession {
        match o {
            BeginOutcome::Session(s) => s,
            other => panic!("expected session, got {other:?}"),
        }
    }

    #[test]
    fn fresh_upload_starts_at_zero_and_commits() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let data = payload(10_000, 1);
        let s = session(svc.begin_upload(manifest(&data)).unwrap());
        assert_eq!(s.resume_offset, 0);
        assert_eq!(svc.append_chunk(&s.session_id, 0, &data[..1000]).unwrap(), 1000);
        svc.append_chunk(&s.session_id, 1000, &data[1000..]).unwrap();
        let asset = svc.finalize_upload(&s.session_id).unwrap();
        assert_eq!(asset.sha256, sha256_hex(&data));
        assert_eq!(svc.blobs().read(&asset.sha256).unwrap(), data);
        let sha = &asset.sha256;
        assert!(svc.blobs().blob_path(sha).ends_with(format!("{}/{}", &sha[..2], sha)));
        assert!(svc.blobs().manifest_path(sha).is_file());
        assert!(matches!(
            svc.begin_upload(manifest(&data)).unwrap(),
            BeginOutcome::AlreadyStored(_)
        ));
    }

    #[test]
    fn out_of_order_and_overflow() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let data = payload(100, 2);
        let s = session(svc.begin_upload(manifest(&data)).unwrap());
        assert!(matches!(
            svc.append_chunk(&s.session_id, 50, &data[..10]),
            Err(IngestError::OutOfOrder { expected: 0, got: 50 })
        ));
        assert!(matches!(
            svc.append_chunk(&s.session_id, 0, &payload(101, 2)),
            Err(IngestError::Overflow { declared: 100, attempted: 101 })
        ));
        assert_eq!(svc.resume_offset(&s.session_id).unwrap(), 0);
    }

    #[test]
    fn partial_upload_resumes_from_server_offset() {
        let dir = tempfile::tempdir().unwrap();
        let data = payload(10_000, 3);
        {
            let svc = UploadService::open(dir.path()).unwrap();
            let s = session(svc.begin_upload(manifest(&data)).unwrap());
            svc.append_chunk(&s.session_id, 0, &data[..4096]).unwrap();
            let again = session(svc.begin_upload(manifest(&data)).unwrap());
            assert_eq!(again.session_id, s.session_id);
            assert_eq!(again.resume_offset, 4096);
        }
        // Restarted service picks the partial up from disk.
        let svc = UploadService::open(dir.path()).unwrap();
        let s = session(svc.begin_upload(manifest(&data)).unwrap());
        assert_eq!(s.resume_offset, 4096);
        svc.append_chunk(&s.session_id, 4096, &data[4096..]).unwrap();
        assert_eq!(svc.finalize_upload(&s.session_id).unwrap().byte_length, 10_000);
    }

    #[test]
    fn premature_finalize_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let data = payload(10_000, 4);
        let s = session(svc.begin_upload(manifest(&data)).unwrap());
        svc.append_chunk(&s.session_id, 0, &data[..9999]).unwrap();
        assert!(matches!(
            svc.finalize_upload(&s.session_id),
            Err(IngestError::Incomplete { received: 9999, declared: 10_000 })
        ));
        // Still resumable.
        svc.append_chunk(&s.session_id, 9999, &data[9999..]).unwrap();
        svc.finalize_upload(&s.session_id).unwrap();
    }

    #[test]
    fn hash_mismatch_persists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let data = payload(1000, 5);
        let mut corrupt = data.clone();
        corrupt[10] ^= 0xff;
        let s = session(svc.begin_upload(manifest(&data)).unwrap());
        svc.append_chunk(&s.session_id, 0, &corrupt).unwrap();
        assert!(matches!(
            svc.finalize_upload(&s.session_id),
            Err(IngestError::Integrity { .. })
        ));
        assert!(!svc.blobs().contains(&sha256_hex(&data)));
        assert!(svc.blobs().list().unwrap().is_empty());
        // Partial data discarded: a new attempt starts from zero.
        let s = session(svc.begin_upload(manifest(&data)).unwrap());
        assert_eq!(s.resume_offset, 0);
    }

    #[test]
    fn interleaved_sessions_are_independent() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let a = payload(3000, 6);
        let b = payload(2000, 7);
        let sa = session(svc.begin_upload(manifest(&a)).unwrap());
        let sb = session(svc.begin_upload(manifest(&b)).unwrap());
        assert_ne!(sa.session_id, sb.session_id);
        let mut oa = 0;
        let mut ob = 0;
        for i in 0..3 {
            oa = svc.append_chunk(&sa.session_id, oa, &a[i * 1000..(i + 1) * 1000]).unwrap();
            if i < 2 {
                ob = svc.append_chunk(&sb.session_id, ob, &b[i * 1000..(i + 1) * 1000]).unwrap();
            }
            assert_eq!(svc.resume_offset(&sa.session_id).unwrap(), oa);
            assert_eq!(svc.resume_offset(&sb.session_id).unwrap(), ob);
        }
        assert_eq!((oa, ob), (3000, 2000));
        assert_eq!(svc.blobs().read(&svc.finalize_upload(&sa.session_id).unwrap().sha256).unwrap(), a);
        assert_eq!(svc.blobs().read(&svc.finalize_upload(&sb.session_id).unwrap().sha256).unwrap(), b);
    }

    #[test]
    fn finalized_session_is_gone() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let data = payload(10, 8);
        let asset = svc.upload_all(manifest(&data), &data, 3).unwrap();
        assert_eq!(asset.byte_length, 10);
        assert_eq!(svc.open_sessions(), 0);
        assert!(std::fs::read_dir(svc.partial_dir()).unwrap().next().is_none());
    }

    #[test]
    fn wire_shapes() {
        let r = BeginResponse::Session {
            session_id: "abc".into(),
            resume_offset: 0,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"session_id":"abc","resume_offset":0}"#
        );
        let d = BeginResponse::Deduplicated {
            deduplicated: true,
            sha256: "ff".into(),
        };
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"deduplicated":true,"sha256":"ff"}"#
        );
        let back: BeginResponse = serde_json::from_str(r#"{"deduplicated":true,"sha256":"ff"}"#).unwrap();
        assert_eq!(back, d);
    }
}
