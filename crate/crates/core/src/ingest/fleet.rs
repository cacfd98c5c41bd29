use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    sha256_hex, BeginOutcome, CameraRegistry, CameraSource, IngestError, Modality, UploadManifest,
    UploadService,
};
use crate::eval::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use crate::pipeline::{ModelProfile, TruthBox, TruthSidecar};
use crate::synth;

fn half() -> f64 {
    0.5
}

/// A lossy base-station uplink. Latency is virtual: the simulator adds it
/// to the reported end-to-end time rather than sleeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// Probability that a transmission attempt fails.
    pub drop_rate: f64,
    pub latency_ms: f64,
    pub bandwidth_bytes_per_s: f64,
    pub max_retries: u32,
    pub seed: u64,
    /// Fraction of failed attempts where the server stored the image but the
    /// acknowledgement was lost. The rest are lost mid-transfer.
    #[serde(default = "half")]
    pub ack_loss_share: f64,
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::Validation(m));
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return bad(format!("drop_rate {} outside [0, 1]", self.drop_rate));
        }
        if !(0.0..=1.0).contains(&self.ack_loss_share) {
            return bad(format!("ack_loss_share {} outside [0, 1]", self.ack_loss_share));
        }
        if !(self.bandwidth_bytes_per_s > 0.0) || !self.bandwidth_bytes_per_s.is_finite() {
            return bad("bandwidth_bytes_per_s must be positive".into());
        }
        if !(self.latency_ms >= 0.0) || !self.latency_ms.is_finite() {
            return bad("latency_ms must be non-negative".into());
        }
        Ok(())
    }
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            drop_rate: 0.0,
            latency_ms: 50.0,
            bandwidth_bytes_per_s: 1_000_000.0,
            max_retries: 5,
            seed: 0,
            ack_loss_share: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub cameras: usize,
    pub images_per_camera: usize,
    pub link: LinkModel,
    pub image_width: u32,
    pub image_height: u32,
    pub box_side: f64,
    pub max_boxes_per_image: usize,
    pub chunk_size: usize,
    /// Every n-th camera (starting with the first) is realtime; 0 for none.
    pub realtime_every: usize,
    /// Every n-th camera is thermal; 0 for none.
    pub thermal_every: usize,
    pub labels: Vec<String>,
}

impl FleetConfig {
    pub fn new(cameras: usize, images_per_camera: usize, link: LinkModel) -> Self {
        Self {
            cameras,
            images_per_camera,
            link,
            image_width: 640,
            image_height: 480,
            box_side: 100.0,
            max_boxes_per_image: 3,
            chunk_size: 16 * 1024,
            realtime_every: 2,
            thermal_every: 3,
            labels: ModelProfile::savanna_demo().labels,
        }
    }

    fn validate(&self) -> Result<(), IngestError> {
        self.link.validate()?;
        if self.cameras == 0 || self.images_per_camera == 0 {
            return Err(IngestError::Validation(
                "cameras and images_per_camera must be positive".into(),
            ));
        }
        if self.labels.is_empty() || self.chunk_size == 0 || self.max_boxes_per_image == 0 {
            return Err(IngestError::Validation(
                "labels, chunk_size and max_boxes_per_image must be non-empty".into(),
            ));
        }
        let cell = (self.box_side * 1.5).ceil() as u32;
        if !(self.box_side >= 1.0) || self.image_width < cell || self.image_height < cell {
            return Err(IngestError::Validation(format!(
                "a {}x{} frame cannot hold a {} px box",
                self.image_width, self.image_height, self.box_side
            )));
        }
        Ok(())
    }
}

/// Outcome of one image's trip across the link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDelivery {
    pub camera_id: String,
    pub sequence_no: u64,
    pub sha256: String,
    pub byte_length: u64,
    pub transmissions: u32,
    pub retransmissions: u32,
    /// The station received a positive acknowledgement.
    pub delivered: bool,
    /// Attempts the server answered from its dedupe index.
    pub deduplicated: u32,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub link: LinkModel,
    pub images: usize,
    pub delivered: usize,
    pub undelivered: usize,
    /// Distinct assets present in the blob store after the run.
    pub stored_assets: usize,
    pub total_transmissions: u64,
    pub total_retransmissions: u64,
    pub mean_transmissions: f64,
    pub duplicate_deliveries: u64,
    pub mean_latency_ms: f64,
    pub deliveries: Vec<ImageDelivery>,
}

/// A generated image and what is in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedImage {
    pub sha256: String,
    pub camera_id: String,
    pub width: u32,
    pub height: u32,
    pub truth: Vec<TruthBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetRun {
    pub report: DeliveryReport,
    pub registry: CameraRegistry,
    pub images: Vec<SimulatedImage>,
}

impl FleetRun {
    /// COCO ground truth over every generated image, with `file_name` set to
    /// the content hash. Category ids follow `labels` order.
    pub fn ground_truth(&self, labels: &[String]) -> CocoDataset {
        let mut ds = CocoDataset {
            images: Vec::new(),
            annotations: Vec::new(),
            categories: labels
                .iter()
                .enumerate()
                .map(|(i, l)| CocoCategory {
                    id: i as u64 + 1,
                    name: l.clone(),
                })
                .collect(),
        };
        for (i, img) in self.images.iter().enumerate() {
            let image_id = i as u64 + 1;
            ds.images.push(CocoImage {
                id: image_id,
                width: img.width,
                height: img.height,
                file_name: img.sha256.clone(),
            });
            for t in &img.truth {
                let Some(cat) = labels.iter().position(|l| *l == t.label) else {
                    continue;
                };
                let [x, y, w, h] = t.bbox.to_xywh();
                ds.annotations.push(CocoAnnotation {
                    id: ds.annotations.len() as u64 + 1,
                    image_id,
                    category_id: cat as u64 + 1,
                    bbox: [x, y, w, h],
                    area: Some(w * h),
                    iscrowd: Some(0),
                });
            }
        }
        ds
    }
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

/// Generates `cameras × images_per_camera` frames with truth sidecars and
/// pushes each through `service` over the simulated link, retrying failed
/// attempts up to `max_retries` times.
///
/// A failed attempt is either lost mid-transfer (chunks received so far stay
/// on the server, so the retry resumes) or loses only its acknowledgement
/// (the server stored the image, so the retry is answered by dedupe).
pub fn simulate_fleet(service: &UploadService, cfg: &FleetConfig) -> Result<FleetRun, IngestError> {
    cfg.validate()?;
    let link = &cfg.link;
    let mut content_rng = ChaCha8Rng::seed_from_u64(link.seed ^ 0x5eed_f1ee7);
    let mut link_rng = ChaCha8Rng::seed_from_u64(link.seed);

    let mut registry = CameraRegistry::new();
    for c in 0..cfg.cameras {
        let every = |n: usize| n > 0 && c % n == 0;
        registry.insert(CameraSource {
            camera_id: format!("cam-{c:03}"),
            site_name: format!("site-{}", c / 4),
            region: "sub-saharan-africa".into(),
            realtime: every(cfg.realtime_every),
            zone_id: Some(if c % 2 == 0 { "restricted" } else { "buffer" }.into()),
            modality: if every(cfg.thermal_every) {
                Modality::Thermal
            } else {
                Modality::Visual
            },
        })?;
    }

    let cameras: Vec<CameraSource> = registry.iter().cloned().collect();
    let mut images = Vec::new();
    let mut deliveries = Vec::new();
    for seq in 0..cfg.images_per_camera as u64 {
        for cam in &cameras {
            let salt = images.len() as u64;
            let n = content_rng.gen_range(1..=cfg.max_boxes_per_image);
            let truth = synth::scatter_boxes(
                &mut content_rng,
                cfg.image_width,
                cfg.image_height,
                cfg.box_side,
                n,
                &cfg.labels,
            );
            let img = synth::render_scene(cfg.image_width, cfg.image_height, &truth, cam.modality, salt);
            let bytes = synth::encode_png(&img);
            let sha = sha256_hex(&bytes);
            let manifest = UploadManifest {
                station_id: format!("station-{}", cam.site_name),
                camera_id: cam.camera_id.clone(),
                captured_at: epoch() + Duration::minutes(seq as i64 * 7 + salt as i64 % 5),
                content_sha256: sha.clone(),
                byte_length: bytes.len() as u64,
                modality: cam.modality,
                sequence_no: seq,
            };
            // The sidecar describes content, so it may precede the blob.
            let truth_path = service.blobs().truth_path(&sha);
            if let Some(dir) = truth_path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| IngestError::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            TruthSidecar {
                boxes: truth.clone(),
            }
            .write(&truth_path)
            .map_err(|e| IngestError::Io {
                path: truth_path.clone(),
                source: e,
            })?;
            deliveries.push(deliver(service, cfg, &mut link_rng, manifest, &bytes)?);
            images.push(SimulatedImage {
                sha256: sha,
                camera_id: cam.camera_id.clone(),
                width: cfg.image_width,
                height: cfg.image_height,
                truth,
            });
        }
    }

    let mut stored: Vec<&str> = images
        .iter()
        .map(|i| i.sha256.as_str())
        .filter(|s| service.blobs().contains(s))
        .collect();
    stored.sort_unstable();
    stored.dedup();
    let delivered = deliveries.iter().filter(|d| d.delivered).count();
    let total_tx: u64 = deliveries.iter().map(|d| d.transmissions as u64).sum();
    let n = deliveries.len().max(1) as f64;
    let report = DeliveryReport {
        link: link.clone(),
        images: deliveries.len(),
        delivered,
        undelivered: deliveries.len() - delivered,
        stored_assets: stored.len(),
        total_transmissions: total_tx,
        total_retransmissions: deliveries.iter().map(|d| d.retransmissions as u64).sum(),
        mean_transmissions: total_tx as f64 / n,
        duplicate_deliveries: deliveries.iter().map(|d| d.deduplicated as u64).sum(),
        mean_latency_ms: deliveries.iter().map(|d| d.latency_ms).sum::<f64>() / n,
        deliveries,
    };
    Ok(FleetRun {
        report,
        registry,
        images,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Loss {
    None,
    MidTransfer,
    Ack,
}

fn deliver(
    service: &UploadService,
    cfg: &FleetConfig,
    rng: &mut ChaCha8Rng,
    manifest: UploadManifest,
    bytes: &[u8],
) -> Result<ImageDelivery, IngestError> {
    let link = &cfg.link;
    let round_trip = 2.0 * link.latency_ms;
    let mut d = ImageDelivery {
        camera_id: manifest.camera_id.clone(),
        sequence_no: manifest.sequence_no,
        sha256: manifest.content_sha256.clone(),
        byte_length: bytes.len() as u64,
        transmissions: 0,
        retransmissions: 0,
        delivered: false,
        deduplicated: 0,
        latency_ms: 0.0,
    };
    while d.transmissions <= link.max_retries {
        d.transmissions += 1;
        let loss = if rng.gen_bool(link.drop_rate) {
            if rng.gen_bool(link.ack_loss_share) {
                Loss::Ack
            } else {
                Loss::MidTransfer
            }
        } else {
            Loss::None
        };
        d.latency_ms += round_trip;
        match service.begin_upload(manifest.clone())? {
            BeginOutcome::AlreadyStored(_) => {
                d.deduplicated += 1;
            }
            BeginOutcome::Session(s) => {
                let start = s.resume_offset as usize;
                let chunks = (bytes.len() - start).div_ceil(cfg.chunk_size);
                let sent_chunks = match loss {
                    Loss::MidTransfer => rng.gen_range(0..=chunks),
                    _ => chunks,
                };
                let mut offset = start;
                for _ in 0..sent_chunks {
                    let end = (offset + cfg.chunk_size).min(bytes.len());
                    offset = service.append_chunk(&s.session_id, offset as u64, &bytes[offset..end])?
                        as usize;
                    d.latency_ms += round_trip;
                }
                d.latency_ms += (offset - start) as f64 / link.bandwidth_bytes_per_s * 1e3;
                if loss != Loss::MidTransfer {
                    service.finalize_upload(&s.session_id)?;
                    d.latency_ms += round_trip;
                }
            }
        }
        if loss == Loss::None {
            d.delivered = true;
            break;
        }
        // Station waits out one more round trip before deciding to retry.
        d.latency_ms += round_trip;
    }
    d.retransmissions = d.transmissions - 1;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(drop_rate: f64, max_retries: u32, seed: u64) -> LinkModel {
        LinkModel {
            drop_rate,
            max_retries,
            seed,
            ..LinkModel::default()
        }
    }

    fn small(cameras: usize, per: usize, l: LinkModel) -> FleetConfig {
        FleetConfig {
            image_width: 160,
            image_height: 160,
            box_side: 50.0,
            chunk_size: 1024,
            ..FleetConfig::new(cameras, per, l)
        }
    }

    #[test]
    fn lossless_link_delivers_once() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let run = simulate_fleet(&svc, &small(3, 4, link(0.0, 3, 1))).unwrap();
        let r = &run.report;
        assert_eq!((r.images, r.delivered, r.stored_assets), (12, 12, 12));
        assert_eq!(r.total_retransmissions, 0);
        assert_eq!(r.duplicate_deliveries, 0);
        assert!(r.deliveries.iter().all(|d| d.transmissions == 1));
    }

    #[test]
    fn dead_link_delivers_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let run = simulate_fleet(&svc, &small(2, 2, link(1.0, 3, 1))).unwrap();
        assert_eq!(run.report.delivered, 0);
        assert!(run.report.deliveries.iter().all(|d| d.retransmissions == 3));
    }

    #[test]
    fn lossy_link_stores_each_image_once() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let run = simulate_fleet(&svc, &small(10, 10, link(0.5, 20, 42))).unwrap();
        let r = &run.report;
        assert_eq!(r.delivered, 100);
        assert_eq!(r.stored_assets, 100);
        assert_eq!(svc.blobs().list().unwrap().len(), 100);
        assert!(r.duplicate_deliveries > 0);
        // Geometric expectation 1 / (1 - p) = 2.
        assert!((r.mean_transmissions - 2.0).abs() <= 0.4, "{}", r.mean_transmissions);
    }

    #[test]
    fn identical_seed_identical_report() {
        let run = |seed| {
            let dir = tempfile::tempdir().unwrap();
            let svc = UploadService::open(dir.path()).unwrap();
            simulate_fleet(&svc, &small(3, 3, link(0.4, 10, seed))).unwrap().report
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn ground_truth_round_trips_through_reader() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        let cfg = small(2, 2, link(0.0, 0, 3));
        let run = simulate_fleet(&svc, &cfg).unwrap();
        let ds = run.ground_truth(&cfg.labels);
        let gt = crate::eval::GroundTruth::from_dataset(&ds).unwrap();
        let n: usize = run.images.iter().map(|i| i.truth.len()).sum();
        assert_eq!(gt.boxes.len(), n);
        for img in &run.images {
            let side = TruthSidecar::read(&svc.blobs().truth_path(&img.sha256)).unwrap();
            assert_eq!(side.boxes, img.truth);
        }
    }

    #[test]
    fn rejects_bad_link() {
        let dir = tempfile::tempdir().unwrap();
        let svc = UploadService::open(dir.path()).unwrap();
        assert!(simulate_fleet(&svc, &small(1, 1, link(1.5, 0, 0))).is_err());
        assert!(simulate_fleet(&svc, &small(0, 1, link(0.0, 0, 0))).is_err());
    }
}
