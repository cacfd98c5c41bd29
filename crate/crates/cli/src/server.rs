use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::Utc;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use wildtrap::alerts::{
    load_rules, AlertBook, AlertEngine, AlertError, AlertRule, AlertState, Channel, FileChannel,
};
use wildtrap::curation::{parse_corrections, Correction};
use wildtrap::ingest::{
    BeginResponse, BlobStore, CameraRegistry, ChunkResponse, IngestError, UploadManifest,
    UploadService,
};
use wildtrap::pipeline::{ModelProfile, Pipeline, PipelineConfig, WorkItem};
use wildtrap::store::{EventFilter, JsonlFile, Store};

use crate::{backends, ServeArgs};

/// Settings for `serve`, loadable from a JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default)]
    pub listen_address: Option<String>,
    #[serde(default)]
    pub store_root: Option<PathBuf>,
    #[serde(default)]
    pub rules_file: Option<PathBuf>,
    #[serde(default)]
    pub camera_registry_file: Option<PathBuf>,
    #[serde(default)]
    pub default_model_profile: Option<PathBuf>,
    #[serde(default)]
    pub auth_token: Option<String>,
}

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

pub fn load_registry(path: Option<&Path>, store_root: &Path) -> anyhow::Result<CameraRegistry> {
    let default = store_root.join("cameras.json");
    let path = match path {
        Some(p) => p.to_path_buf(),
        None if default.is_file() => default,
        None => return Ok(CameraRegistry::new()),
    };
    CameraRegistry::load(&path).with_context(|| format!("loading cameras from {}", path.display()))
}

pub fn load_profile(path: Option<&Path>) -> anyhow::Result<ModelProfile> {
    match path {
        Some(p) => Ok(ModelProfile::load(p)?),
        None => Ok(ModelProfile::savanna_demo()),
    }
}

pub fn load_rule_set(path: Option<&Path>) -> anyhow::Result<Vec<AlertRule>> {
    match path {
        Some(p) => Ok(load_rules(p)?),
        None => Ok(vec![AlertRule::poaching_default()]),
    }
}

struct Service {
    uploads: UploadService,
    blobs: BlobStore,
    store: Arc<Store>,
    registry: CameraRegistry,
    pipeline: Mutex<Option<Pipeline>>,
    alerts: Arc<AlertBook>,
    channel: Arc<dyn Channel>,
    corrections: JsonlFile<Correction>,
    token: Option<String>,
}

impl Service {
    fn submit(&self, asset: wildtrap::ingest::ImageAsset) {
        let item = WorkItem::for_asset(asset, &self.registry);
        if let Some(p) = self.pipeline.lock().as_ref() {
            p.submit(item);
        }
    }
}

struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl ToString) -> Self {
        Self {
            status,
            body: json!({ "error": msg.to_string() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let status = match &e {
            IngestError::Validation(_) | IngestError::DuplicateCamera(_) => StatusCode::BAD_REQUEST,
            IngestError::UnknownSession(_) | IngestError::NotFound(_) => StatusCode::NOT_FOUND,
            IngestError::OutOfOrder { expected, .. } => {
                return Self {
                    status: StatusCode::CONFLICT,
                    body: json!({ "error": e.to_string(), "resume_offset": expected }),
                }
            }
            IngestError::Incomplete { .. } => StatusCode::CONFLICT,
            IngestError::Overflow { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            IngestError::Integrity { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e)
    }
}

impl From<AlertError> for ApiError {
    fn from(e: AlertError) -> Self {
        let status = match &e {
            AlertError::UnknownAlert(_) => StatusCode::NOT_FOUND,
            AlertError::Violation { .. } | AlertError::AlreadyAcknowledged(_) => {
                StatusCode::CONFLICT
            }
            AlertError::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e)
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
}

async fn auth(State(svc): State<Arc<Service>>, req: Request, next: Next) -> Response {
    if let Some(token) = &svc.token {
        let h = req.headers();
        let bearer = h
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        let plain = h.get("x-wildtrap-token").and_then(|v| v.to_str().ok());
        if bearer != Some(token.as_str()) && plain != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong token").into_response();
        }
    }
    next.run(req).await
}

async fn begin_upload(
    State(svc): State<Arc<Service>>,
    body: Bytes,
) -> ApiResult<Json<BeginResponse>> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let manifest = UploadManifest::from_json(text)?;
    blocking(move || {
        let outcome = svc.uploads.begin_upload(manifest)?;
        Ok(Json(BeginResponse::from(&outcome)))
    })
    .await
}

#[derive(Deserialize)]
struct OffsetQuery {
    offset: u64,
}

async fn append_chunk(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<OffsetQuery>,
    body: Bytes,
) -> ApiResult<Json<ChunkResponse>> {
    blocking(move || {
        let resume_offset = svc.uploads.append_chunk(&id, q.offset, &body)?;
        Ok(Json(ChunkResponse { resume_offset }))
    })
    .await
}

async fn session_offset(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<ChunkResponse>> {
    let resume_offset = svc.uploads.resume_offset(&id)?;
    Ok(Json(ChunkResponse { resume_offset }))
}

async fn finalize_upload(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    blocking(move || {
        let asset = svc.uploads.finalize_upload(&id)?;
        svc.submit(asset.clone());
        Ok((StatusCode::CREATED, Json(asset)).into_response())
    })
    .await
}

async fn query_events(
    State(svc): State<Arc<Service>>,
    Query(filter): Query<EventFilter>,
) -> ApiResult<Response> {
    let events = svc
        .store
        .query_events(&filter)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    Ok(Json(events).into_response())
}

async fn stats(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.store.platform_stats()).into_response()
}

#[derive(Deserialize)]
struct WindowQuery {
    window_minutes: Option<f64>,
}

async fn observations(
    State(svc): State<Arc<Service>>,
    Query(q): Query<WindowQuery>,
) -> ApiResult<Response> {
    let w = q
        .window_minutes
        .unwrap_or(wildtrap::store::DEFAULT_INDEPENDENCE_WINDOW_MINUTES);
    if !(w > 0.0) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "window_minutes must be positive"));
    }
    Ok(Json(svc.store.observations(w)).into_response())
}

#[derive(Deserialize)]
struct StateQuery {
    state: Option<String>,
}

async fn list_alerts(
    State(svc): State<Arc<Service>>,
    Query(q): Query<StateQuery>,
) -> ApiResult<Response> {
    let state = match q.state.as_deref() {
        None | Some("") => None,
        Some(s) => Some(
            s.parse::<AlertState>()
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?,
        ),
    };
    Ok(Json(svc.alerts.list(state)).into_response())
}

#[derive(Deserialize)]
struct AckBody {
    actor: String,
}

async fn ack_alert(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<AckBody>,
) -> ApiResult<Response> {
    blocking(move || {
        let out = svc.alerts.acknowledge(&id, &body.actor, Utc::now())?;
        Ok(Json(out).into_response())
    })
    .await
}

async fn post_corrections(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let parsed = parse_corrections(text).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    if let Some(c) = parsed
        .iter()
        .find(|c| svc.store.events().offset_of(&c.event_id).is_none())
    {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("correction references unknown event {}", c.event_id),
        ));
    }
    blocking(move || {
        let n = parsed.len();
        for c in parsed {
            svc.corrections
                .append(c)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
        }
        svc.corrections
            .flush()
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
        Ok((StatusCode::CREATED, Json(json!({ "accepted": n }))).into_response())
    })
    .await
}

async fn fetch_image(
    State(svc): State<Arc<Service>>,
    UrlPath(sha): UrlPath<String>,
) -> ApiResult<Response> {
    if !wildtrap::ingest::is_sha256_hex(&sha) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "not a sha256 hex digest"));
    }
    blocking(move || {
        let bytes = svc.blobs.read(&sha)?;
        let mime = image::guess_format(&bytes)
            .map(|f| f.to_mime_type())
            .unwrap_or("application/octet-stream");
        let mut headers = HeaderMap::new();
        headers.insert(header::CONTENT_TYPE, mime.parse().expect("static mime"));
        Ok((headers, bytes).into_response())
    })
    .await
}

async fn healthz() -> &'static str {
    "ok"
}

fn router(svc: Arc<Service>) -> Router {
    let api = Router::new()
        .route("/v1/uploads", post(begin_upload))
        .route("/v1/uploads/{id}", put(append_chunk).get(session_offset))
        .route("/v1/uploads/{id}/finalize", post(finalize_upload))
        .route("/v1/events", get(query_events))
        .route("/v1/stats", get(stats))
        .route("/v1/observations", get(observations))
        .route("/v1/alerts", get(list_alerts))
        .route("/v1/alerts/{id}/ack", post(ack_alert))
        .route("/v1/corrections", post(post_corrections))
        .route("/v1/images/{sha}", get(fetch_image))
        .layer(middleware::from_fn_with_state(svc.clone(), auth));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(svc)
}

fn merge(args: &ServeArgs) -> anyhow::Result<ServiceConfig> {
    let file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ServiceConfig::default(),
    };
    Ok(ServiceConfig {
        listen_address: args.listen.clone().or(file.listen_address),
        store_root: args.store.clone().or(file.store_root),
        rules_file: args.rules.clone().or(file.rules_file),
        camera_registry_file: args.cameras.clone().or(file.camera_registry_file),
        default_model_profile: args.profile.clone().or(file.default_model_profile),
        auth_token: args.token.clone().or(file.auth_token),
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

pub fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let cfg = merge(&args)?;
    let root = cfg
        .store_root
        .clone()
        .context("no store root: pass --store, set WILDTRAP_STORE or use a config file")?;
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let listen = cfg
        .listen_address
        .clone()
        .unwrap_or_else(|| DEFAULT_LISTEN.to_string());

    let uploads = UploadService::open(&root)?;
    let blobs = uploads.blobs().clone();
    let store = Arc::new(Store::open(&root)?);
    let registry = load_registry(cfg.camera_registry_file.as_deref(), &root)?;
    let profile = load_profile(cfg.default_model_profile.as_deref())?;
    let rules = load_rule_set(cfg.rules_file.as_deref())?;
    let alerts = Arc::new(AlertBook::open(&root.join("alerts.jsonl"))?);
    let mut engine = AlertEngine::new(rules, registry.clone())?;
    for a in alerts.list(None) {
        engine.remember(&a);
    }
    let engine = Arc::new(Mutex::new(engine));
    let channel: Arc<dyn Channel> = Arc::new(FileChannel::new(root.join("alert_channel.jsonl")));
    let corrections = JsonlFile::open(&root.join("corrections.jsonl"))?;

    let observer = {
        let (engine, alerts, channel) = (engine.clone(), alerts.clone(), channel.clone());
        Arc::new(move |e: &wildtrap::store::DetectionEvent| {
            let now = Utc::now();
            let raised = match engine.lock().evaluate(e, now) {
                Ok(r) => r,
                Err(err) => {
                    log::warn!("alert evaluation skipped for {}: {err}", e.event_id);
                    return;
                }
            };
            for a in raised {
                let id = a.alert_id.clone();
                if let Err(err) = alerts
                    .insert(a)
                    .and_then(|_| alerts.dispatch(&id, channel.as_ref(), now))
                {
                    log::error!("alert {id}: {err}");
                }
            }
        })
    };
    let config = PipelineConfig {
        concurrency: args.concurrency,
        ..PipelineConfig::new(profile)
    };
    let pipeline = Pipeline::builder(config, store.clone())
        .backend(backends::build(&args.backend, &blobs))
        .source(Arc::new(blobs.clone()))
        .observer(observer)
        .start()?;

    let svc = Arc::new(Service {
        uploads,
        blobs,
        store: store.clone(),
        registry,
        pipeline: Mutex::new(Some(pipeline)),
        alerts: alerts.clone(),
        channel,
        corrections,
        token: cfg.auth_token.clone(),
    });

    // Stored images the pipeline never finished, e.g. after a crash.
    let done = store.processed_images();
    let mut requeued = 0;
    for asset in svc.blobs.list()? {
        if !done.contains(&asset.sha256) {
            svc.submit(asset);
            requeued += 1;
        }
    }
    if requeued > 0 {
        log::info!("requeued {requeued} unprocessed images");
    }

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        let addr = listener.local_addr()?;
        // Tests and scripts wait for this line.
        println!("listening on http://{addr}");

        let retry = {
            let svc = svc.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(Duration::from_secs(1));
                loop {
                    tick.tick().await;
                    let svc = svc.clone();
                    let _ = tokio::task::spawn_blocking(move || {
                        let now = Utc::now();
                        for id in svc.alerts.due(now) {
                            if let Err(e) = svc.alerts.dispatch(&id, svc.channel.as_ref(), now) {
                                log::warn!("alert retry {id}: {e}");
                            }
                        }
                    })
                    .await;
                }
            })
        };

        axum::serve(listener, router(svc.clone()))
            .with_graceful_shutdown(shutdown_signal())
            .await
            .context("serving")?;
        retry.abort();
        anyhow::Ok(())
    })?;

    if let Some(p) = svc.pipeline.lock().take() {
        let report = p.finish();
        log::info!("pipeline drained: {} images", report.images_processed);
    }
    store.flush()?;
    alerts.flush()?;
    svc.corrections.flush()?;
    Ok(())
}
