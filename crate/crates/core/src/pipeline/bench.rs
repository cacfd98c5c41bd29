use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use super::{
    run_pipeline, DetectorBackend, MemorySource, ModelProfile, PipelineConfig, PipelineError,
    SyntheticBackend, WireDetection, WorkItem,
};
use crate::bbox::BoundingBox;
use crate::ingest::{sha256_hex, ImageAsset, Modality, UploadManifest};
use crate::store::{PipelineMode, Store};

/// 100 million images over seven days.
pub fn weekly_target_rate() -> f64 {
    100_000_000.0 / (7.0 * 86_400.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub backend_latency_ms: f64,
    pub concurrency: usize,
    pub image_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub backend_latency_ms: f64,
    pub concurrency: usize,
    pub image_count: usize,
    pub images_per_s: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub theoretical_images_per_s: f64,
    pub overhead_fraction: f64,
    pub target_images_per_s: f64,
    pub elapsed_ms: f64,
}

fn tiny_png() -> Vec<u8> {
    let img = image::RgbImage::from_fn(64, 48, |x, y| image::Rgb([x as u8, y as u8, 0]));
    let mut out = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encoding to memory");
    out
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs the full pipeline (decode, resize, detect, store) over `image_count`
/// distinct assets against a synthetic backend that sleeps for
/// `backend_latency_ms` per call.
pub fn bench_throughput(cfg: &BenchConfig) -> Result<ThroughputReport, PipelineError> {
    if !(cfg.backend_latency_ms > 0.0) || !cfg.backend_latency_ms.is_finite() {
        return Err(PipelineError::Config("backend latency must be positive".into()));
    }
    let profile = ModelProfile::savanna_demo();
    let backend: Arc<dyn DetectorBackend> = Arc::new(
        SyntheticBackend::fixed(vec![WireDetection {
            label: profile.labels[0].clone(),
            confidence: 0.9,
            bbox: BoundingBox::new(4.0, 4.0, 20.0, 20.0).expect("static box"),
        }])
        .with_latency(Duration::from_secs_f64(cfg.backend_latency_ms / 1e3)),
    );
    let bytes = tiny_png();
    let now = Utc::now();
    let items: Vec<WorkItem> = (0..cfg.image_count as u64)
        .map(|i| {
            let sha = sha256_hex(&i.to_le_bytes());
            WorkItem {
                asset: ImageAsset {
                    sha256: sha.clone(),
                    byte_length: bytes.len() as u64,
                    stored_at: now,
                    manifest: UploadManifest {
                        station_id: "bench".into(),
                        camera_id: "bench-cam".into(),
                        captured_at: now,
                        content_sha256: sha,
                        byte_length: bytes.len() as u64,
                        modality: Modality::Visual,
                        sequence_no: i,
                    },
                },
                priority: PipelineMode::Batch,
                enqueued_at: now,
            }
        })
        .collect();
    let config = PipelineConfig {
        concurrency: cfg.concurrency,
        ..PipelineConfig::new(profile)
    };
    let report = run_pipeline(
        items,
        config,
        vec![backend],
        Arc::new(MemorySource::with_fallback(bytes)),
        Arc::new(Store::in_memory()),
    )?;

    let mut lat: Vec<f64> = report.trace.iter().map(|t| t.service_ms).collect();
    lat.sort_by(f64::total_cmp);
    let secs = report.elapsed_ms / 1e3;
    let images_per_s = if secs > 0.0 {
        report.images_processed as f64 / secs
    } else {
        0.0
    };
    let theoretical = cfg.concurrency as f64 * 1000.0 / cfg.backend_latency_ms;
    Ok(ThroughputReport {
        backend_latency_ms: cfg.backend_latency_ms,
        concurrency: cfg.concurrency,
        image_count: cfg.image_count,
        images_per_s,
        p50_ms: percentile(&lat, 0.50),
        p99_ms: percentile(&lat, 0.99),
        theoretical_images_per_s: theoretical,
        overhead_fraction: 1.0 - images_per_s / theoretical,
        target_images_per_s: weekly_target_rate(),
        elapsed_ms: report.elapsed_ms,
    })
}
