use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use chrono::Utc;
use serde::Serialize;
use serde_json::json;

use wildtrap::alerts::{AlertBook, AlertEngine, AlertState, FileChannel};
use wildtrap::curation::{
    augment, export_training_manifest, read_corrections_file, AugmentSpec, Correction,
};
use wildtrap::eval::{
    evaluate_files, export_pr_plot_data, write_detections, EvalConfig, EvalDetection, GroundTruth,
};
use wildtrap::ingest::{simulate_fleet, BlobStore, FleetConfig, LinkModel, UploadService};
use wildtrap::pipeline::{
    bench_throughput, run_pipeline, BenchConfig, DetectRequest, DetectResponse, PipelineConfig,
    TruthSidecar, WireDetection, WorkItem,
};
use wildtrap::store::{EventFilter, Store};

use crate::server::{load_profile, load_registry, load_rule_set};
use crate::{
    backends, AlertsCmd, BenchCmd, Cli, Command, CurationCmd, DetectorCmd, EvalCmd, FleetCmd,
    PipelineCmd,
};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Serve(args) => crate::server::serve(args),
        Command::Pipeline(c) => pipeline(c, json),
        Command::Eval(c) => eval(c, json),
        Command::Bench(c) => bench(c, json),
        Command::Fleet(c) => fleet(c, json),
        Command::Alerts(c) => alerts(c, json),
        Command::Curation(c) => curation(c, json),
        Command::Detector(c) => detector(c),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    images_processed: usize,
    images_with_events: usize,
    images_without_detections: usize,
    events_appended: usize,
    events_already_stored: usize,
    dead_letters: usize,
    retries: u64,
    elapsed_ms: f64,
    stats: wildtrap::store::PlatformStats,
}

fn pipeline(cmd: PipelineCmd, json: bool) -> anyhow::Result<()> {
    match cmd {
        PipelineCmd::Run {
            store,
            cameras,
            profile,
            backend,
            concurrency,
            retry_limit,
            min_confidence,
        } => {
            let blobs = BlobStore::open(&store)?;
            let events = Arc::new(Store::open(&store)?);
            let registry = load_registry(cameras.as_deref(), &store)?;
            let done = events.processed_images();
            let items: Vec<WorkItem> = blobs
                .list()?
                .into_iter()
                .filter(|a| !done.contains(&a.sha256))
                .map(|a| WorkItem::for_asset(a, &registry))
                .collect();
            let config = PipelineConfig {
                concurrency,
                retry_limit,
                min_confidence,
                ..PipelineConfig::new(load_profile(profile.as_deref())?)
            };
            let report = run_pipeline(
                items,
                config,
                vec![backends::build(&backend, &blobs)],
                Arc::new(blobs.clone()),
                events.clone(),
            )?;
            events.flush()?;
            let summary = RunSummary {
                images_processed: report.images_processed,
                images_with_events: report.images_with_events,
                images_without_detections: report.images_without_detections,
                events_appended: report.events_appended,
                events_already_stored: report.events_already_stored,
                dead_letters: report.dead_letters.len(),
                retries: report.retries,
                elapsed_ms: report.elapsed_ms,
                stats: events.platform_stats(),
            };
            if json {
                print_json(&summary)?;
            } else {
                println!(
                    "processed {} images ({} with events, {} empty, {} dead-lettered), {} new events, {} retries",
                    summary.images_processed,
                    summary.images_with_events,
                    summary.images_without_detections,
                    summary.dead_letters,
                    summary.events_appended,
                    summary.retries
                );
                for d in &report.dead_letters {
                    println!("dead letter {} after {} attempts: {}", d.sha256, d.attempts, d.reason);
                }
            }
            Ok(())
        }
        PipelineCmd::ExportDetections {
            store,
            ground_truth,
            out,
        } => {
            let events = Store::open(&store)?;
            let gt = GroundTruth::read(&ground_truth)?;
            let ids = gt.image_ids_by_file_name();
            let all = events.query_events(&EventFilter::default())?;
            let dets: Vec<EvalDetection> = all
                .iter()
                .filter_map(|e| {
                    ids.get(&e.image_sha256).map(|&image_id| EvalDetection {
                        image_id,
                        label: e.label.clone(),
                        confidence: e.confidence,
                        bbox: e.bbox,
                    })
                })
                .collect();
            let skipped = all.len() - dets.len();
            let f = std::fs::File::create(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let mut w = std::io::BufWriter::new(f);
            write_detections(&mut w, &dets)?;
            std::io::Write::flush(&mut w)?;
            if json {
                print_json(&json!({ "written": dets.len(), "skipped": skipped }))?;
            } else {
                println!(
                    "wrote {} detections to {} ({} events without a ground-truth image)",
                    dets.len(),
                    out.display(),
                    skipped
                );
            }
            Ok(())
        }
    }
}

fn eval(cmd: EvalCmd, json: bool) -> anyhow::Result<()> {
    let EvalCmd::Run {
        ground_truth,
        detections,
        iou,
        interpolation,
        report,
        plot_dir,
    } = cmd;
    let config = EvalConfig::new(iou, interpolation)?;
    let rep = evaluate_files(&detections, &ground_truth, &config)?;
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    if let Some(path) = &report {
        std::fs::write(path, serde_json::to_string_pretty(&rep)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(dir) = &plot_dir {
        export_pr_plot_data(&rep, dir)?;
    }
    if json {
        print_json(&rep)
    } else {
        print!("{}", rep.to_table());
        Ok(())
    }
}

fn bench(cmd: BenchCmd, json: bool) -> anyhow::Result<()> {
    let BenchCmd::Throughput {
        latency_ms,
        concurrency,
        images,
    } = cmd;
    let r = bench_throughput(&BenchConfig {
        backend_latency_ms: latency_ms,
        concurrency,
        image_count: images,
    })?;
    if json {
        return print_json(&r);
    }
    println!(
        "{} images, {} workers, {} ms backend: {:.1} images/s (ceiling {:.1}, overhead {:.1}%)",
        r.image_count,
        r.concurrency,
        r.backend_latency_ms,
        r.images_per_s,
        r.theoretical_images_per_s,
        r.overhead_fraction * 100.0
    );
    println!("p50 {:.2} ms, p99 {:.2} ms", r.p50_ms, r.p99_ms);
    println!(
        "reference rate (1e8 images in 7 days): {:.1} images/s",
        r.target_images_per_s
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fleet(cmd: FleetCmd, json: bool) -> anyhow::Result<()> {
    let FleetCmd::Simulate {
        store,
        cameras,
        images_per_camera,
        drop_rate,
        latency_ms,
        bandwidth_bytes_per_s,
        max_retries,
        seed,
        ack_loss_share,
        ground_truth,
    } = cmd;
    let link = LinkModel {
        drop_rate,
        latency_ms,
        bandwidth_bytes_per_s,
        max_retries,
        seed,
        ack_loss_share,
    };
    let cfg = FleetConfig::new(cameras, images_per_camera, link);
    let service = UploadService::open(&store)?;
    let run = simulate_fleet(&service, &cfg)?;
    run.registry.save(&store.join("cameras.json"))?;
    if let Some(path) = &ground_truth {
        run.ground_truth(&cfg.labels).write(path)?;
    }
    let r = &run.report;
    if json {
        return print_json(&json!({
            "images": r.images,
            "delivered": r.delivered,
            "undelivered": r.undelivered,
            "stored_assets": r.stored_assets,
            "total_transmissions": r.total_transmissions,
            "total_retransmissions": r.total_retransmissions,
            "mean_transmissions": r.mean_transmissions,
            "duplicate_deliveries": r.duplicate_deliveries,
            "mean_latency_ms": r.mean_latency_ms,
        }));
    }
    println!(
        "{} images: {} delivered, {} undelivered, {} stored",
        r.images, r.delivered, r.undelivered, r.stored_assets
    );
    println!(
        "{} transmissions ({} retransmissions, mean {:.3} per image), mean latency {:.1} ms",
        r.total_transmissions, r.total_retransmissions, r.mean_transmissions, r.mean_latency_ms
    );
    Ok(())
}

fn alerts(cmd: AlertsCmd, json: bool) -> anyhow::Result<()> {
    let AlertsCmd::Simulate {
        store,
        rules,
        cameras,
        channel,
        audit,
    } = cmd;
    let events = Store::open(&store)?;
    let registry = load_registry(cameras.as_deref(), &store)?;
    let rules = load_rule_set(rules.as_deref())?;
    let channel_path = channel.unwrap_or_else(|| store.join("alert_channel.jsonl"));
    let audit_path = audit.unwrap_or_else(|| store.join("alerts.jsonl"));
    let book = AlertBook::open(&audit_path)?;
    let mut engine = AlertEngine::new(rules, registry)?;
    for a in book.list(None) {
        engine.remember(&a);
    }
    let sink = FileChannel::new(&channel_path);

    let mut stream = events.query_events(&EventFilter::default())?;
    stream.sort_by(|a, b| (a.detected_at, &a.event_id).cmp(&(b.detected_at, &b.event_id)));
    let mut raised = 0;
    let mut skipped = 0;
    for e in &stream {
        let now = Utc::now();
        let alerts = match engine.evaluate(e, now) {
            Ok(a) => a,
            Err(err) => {
                log::warn!("{}: {err}", e.event_id);
                skipped += 1;
                continue;
            }
        };
        for a in alerts {
            let id = a.alert_id.clone();
            book.insert(a)?;
            book.dispatch(&id, &sink, now)?;
            raised += 1;
        }
    }
    book.flush()?;
    let delivered = book.list(Some(AlertState::Delivered)).len();
    if json {
        print_json(&json!({
            "events": stream.len(),
            "alerts_raised": raised,
            "delivered": delivered,
            "events_from_unknown_cameras": skipped,
            "channel": channel_path,
            "audit": audit_path,
        }))
    } else {
        println!(
            "{} events replayed, {} alerts raised, {} delivered to {}",
            stream.len(),
            raised,
            delivered,
            channel_path.display()
        );
        Ok(())
    }
}

fn curation(cmd: CurationCmd, json: bool) -> anyhow::Result<()> {
    match cmd {
        CurationCmd::Export {
            store,
            corrections,
            policy,
            out,
        } => {
            let blobs = BlobStore::open(&store)?;
            let events = Store::open(&store)?;
            let default = store.join("corrections.jsonl");
            let corrections: Vec<Correction> = match corrections {
                Some(p) => read_corrections_file(&p)?,
                None if default.is_file() => read_corrections_file(&default)?,
                None => Vec::new(),
            };
            let all = events.query_events(&EventFilter::default())?;
            let dims = |sha: &str| blobs.image_dimensions(sha).ok();
            let ds = export_training_manifest(&all, &corrections, policy, &dims)?;
            ds.write(&out)?;
            if json {
                print_json(&json!({
                    "images": ds.images.len(),
                    "annotations": ds.annotations.len(),
                    "categories": ds.categories.len(),
                }))
            } else {
                println!(
                    "wrote {} images, {} annotations, {} categories to {}",
                    ds.images.len(),
                    ds.annotations.len(),
                    ds.categories.len(),
                    out.display()
                );
                Ok(())
            }
        }
        CurationCmd::Augment {
            image,
            truth,
            spec,
            rotations,
            translations,
            flip,
            seed,
            max_variants,
            out_dir,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => AugmentSpec {
                    rotations: if rotations.is_empty() { vec![0] } else { rotations },
                    translations: if translations.is_empty() {
                        vec![(0, 0)]
                    } else {
                        translations
                    },
                    horizontal_flip: flip,
                    seed,
                    max_variants,
                },
            };
            augment_files(&image, &truth, &spec, &out_dir, json)
        }
    }
}

fn augment_files(
    image: &Path,
    truth: &Path,
    spec: &AugmentSpec,
    out_dir: &Path,
    json: bool,
) -> anyhow::Result<()> {
    let bytes = std::fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let img = image::load_from_memory(&bytes)
        .with_context(|| format!("decoding {}", image.display()))?;
    let sidecar = TruthSidecar::read(truth)?;
    let variants = augment(&img, &sidecar.boxes, spec)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let mut written = Vec::new();
    for v in &variants {
        let name = format!("{stem}_{}", v.transform.tag());
        let png = out_dir.join(format!("{name}.png"));
        if v.transform.is_identity() && image::guess_format(&bytes).ok() == Some(image::ImageFormat::Png) {
            // Keep the original bytes so identity output is bit-identical.
            std::fs::write(&png, &bytes)?;
        } else {
            v.image
                .save_with_format(&png, image::ImageFormat::Png)
                .with_context(|| format!("writing {}", png.display()))?;
        }
        let t = TruthSidecar {
            boxes: v.boxes.clone(),
        };
        t.write(&out_dir.join(format!("{name}.truth.json")))?;
        written.push(json!({ "image": png, "boxes": v.boxes.len() }));
    }
    if json {
        print_json(&written)
    } else {
        println!("wrote {} variants to {}", variants.len(), out_dir.display());
        Ok(())
    }
}

fn detector(cmd: DetectorCmd) -> anyhow::Result<()> {
    let DetectorCmd::Serve {
        listen,
        model_id,
        detections,
    } = cmd;
    let fixed: Vec<WireDetection> = match detections {
        Some(p) => {
            let text =
                std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Vec::new(),
    };
    let labels: BTreeSet<&str> = fixed.iter().map(|d| d.label.as_str()).collect();
    if labels.iter().any(|l| l.is_empty()) {
        bail!("detections must have non-empty labels");
    }
    let state = Arc::new((model_id, fixed));
    let app = axum::Router::new()
        .route(
            "/v1/detect",
            axum::routing::post(
                |axum::extract::State(s): axum::extract::State<Arc<(String, Vec<WireDetection>)>>,
                 axum::Json(req): axum::Json<DetectRequest>| async move {
                    if req.image_bytes().is_err() {
                        return Err((axum::http::StatusCode::BAD_REQUEST, "bad image_b64"));
                    }
                    Ok(axum::Json(DetectResponse {
                        model_id: s.0.clone(),
                        detections: s
                            .1
                            .iter()
                            .filter(|d| d.confidence >= req.min_confidence)
                            .cloned()
                            .collect(),
                        latency_ms: 0.0,
                    }))
                },
            ),
        )
        .layer(axum::extract::DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(state);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })
}
