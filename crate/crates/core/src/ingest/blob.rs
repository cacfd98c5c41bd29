use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Utc;

use super::{is_sha256_hex, IngestError, ImageAsset, UploadManifest};

/// Content-addressed blobs laid out as `<root>/<first 2 hex>/<sha256>` with a
/// `<sha256>.manifest.json` sidecar. The sidecar is written last and is the
/// commit marker: a blob without one is not considered stored.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| IngestError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| IngestError::io(&tmp, e))?;
    f.sync_all().map_err(|e| IngestError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| IngestError::io(path, e))
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| IngestError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn shard(&self, sha: &str) -> PathBuf {
        self.root.join(&sha[..2])
    }

    pub fn blob_path(&self, sha: &str) -> PathBuf {
        self.shard(sha).join(sha)
    }

    pub fn manifest_path(&self, sha: &str) -> PathBuf {
        self.shard(sha).join(format!("{sha}.manifest.json"))
    }

    /// Location of the synthetic-backend truth sidecar for an asset.
    pub fn truth_path(&self, sha: &str) -> PathBuf {
        self.shard(sha).join(format!("{sha}.truth.json"))
    }

    pub fn contains(&self, sha: &str) -> bool {
        is_sha256_hex(sha) && self.manifest_path(sha).is_file()
    }

    pub fn get(&self, sha: &str) -> Result<ImageAsset, IngestError> {
        if !is_sha256_hex(sha) {
            return Err(IngestError::NotFound(sha.to_string()));
        }
        let path = self.manifest_path(sha);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(IngestError::NotFound(sha.to_string()))
            }
            Err(e) => return Err(IngestError::io(&path, e)),
        };
        serde_json::from_str(&text).map_err(|e| IngestError::json(&path, e))
    }

    pub fn read(&self, sha: &str) -> Result<Vec<u8>, IngestError> {
        if !self.contains(sha) {
            return Err(IngestError::NotFound(sha.to_string()));
        }
        let path = self.blob_path(sha);
        std::fs::read(&path).map_err(|e| IngestError::io(&path, e))
    }

    /// Stores `bytes` under its hash. The caller has already verified the hash.
    pub(crate) fn put_verified(
        &self,
        bytes: &[u8],
        manifest: UploadManifest,
    ) -> Result<ImageAsset, IngestError> {
        let sha = manifest.content_sha256.clone();
        let dir = self.shard(&sha);
        std::fs::create_dir_all(&dir).map_err(|e| IngestError::io(&dir, e))?;
        write_atomic(&self.blob_path(&sha), bytes)?;
        let asset = ImageAsset {
            sha256: sha.clone(),
            byte_length: bytes.len() as u64,
            stored_at: Utc::now(),
            manifest,
        };
        let json = serde_json::to_vec_pretty(&asset).expect("asset serializes");
        write_atomic(&self.manifest_path(&sha), &json)?;
        Ok(asset)
    }

    /// All committed assets, sorted by hash.
    pub fn list(&self) -> Result<Vec<ImageAsset>, IngestError> {
        let mut out = Vec::new();
        let entries = std::fs::read_dir(&self.root).map_err(|e| IngestError::io(&self.root, e))?;
        let mut shards: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.len() == 2 && n.bytes().all(|b| b.is_ascii_hexdigit()))
            })
            .collect();
        shards.sort();
        for shard in shards {
            let mut names: Vec<String> = std::fs::read_dir(&shard)
                .map_err(|e| IngestError::io(&shard, e))?
                .filter_map(Result::ok)
                .filter_map(|e| e.file_name().into_string().ok())
                .filter_map(|n| n.strip_suffix(".manifest.json").map(str::to_string))
                .filter(|n| is_sha256_hex(n))
                .collect();
            names.sort();
            for sha in names {
                out.push(self.get(&sha)?);
            }
        }
        Ok(out)
    }

    /// Pixel dimensions of a stored image after EXIF orientation, read from
    /// its header.
    pub fn image_dimensions(&self, sha: &str) -> Result<(u32, u32), IngestError> {
        use image::metadata::Orientation;
        use image::ImageDecoder;
        let path = self.blob_path(sha);
        let bad = |e: image::ImageError| IngestError::io(&path, std::io::Error::other(e));
        let mut decoder = image::ImageReader::open(&path)
            .and_then(|r| r.with_guessed_format())
            .map_err(|e| IngestError::io(&path, e))?
            .into_decoder()
            .map_err(bad)?;
        let (w, h) = decoder.dimensions();
        Ok(match decoder.orientation().map_err(bad)? {
            Orientation::Rotate90
            | Orientation::Rotate270
            | Orientation::Rotate90FlipH
            | Orientation::Rotate270FlipH => (h, w),
            _ => (w, h),
        })
    }
}
