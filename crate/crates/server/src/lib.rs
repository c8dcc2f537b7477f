//! Read-only HTTP API over an exported viewer bundle.
//!
//! The bundle is loaded once at startup into an immutable snapshot; every
//! response is derived from it, so identical requests get identical bodies.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use catres_core::dataset::NeuronRef;
use catres_core::pipeline::{bundle_hash, IndexDoc, NeuronDoc};

/// Maximum number of search hits returned.
pub const SEARCH_LIMIT: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("bundle I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid bundle document {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("dangling link: {0}")]
    Dangling(String),
    #[error(transparent)]
    Core(#[from] catres_core::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub bundle_dir: PathBuf,
    /// Value of `Access-Control-Allow-Origin`; `*` allows any origin.
    pub cors_origin: Option<String>,
    /// Directory of UI assets served for non-API paths.
    pub static_dir: Option<PathBuf>,
}

impl ServerConfig {
    pub fn new(bind: SocketAddr, bundle_dir: impl Into<PathBuf>) -> Self {
        Self { bind, bundle_dir: bundle_dir.into(), cors_origin: None, static_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub layer: u32,
    pub index: u32,
    pub id: u32,
    pub t: String,
    pub a: f64,
}

/// In-memory snapshot of a bundle.
#[derive(Debug)]
pub struct Bundle {
    pub index: IndexDoc,
    pub hash: String,
    index_raw: Vec<u8>,
    summary_raw: Vec<u8>,
    docs: HashMap<NeuronRef, (NeuronDoc, Vec<u8>)>,
    /// Every profile token, by descending activation then neuron and id.
    tokens: Vec<SearchHit>,
}

fn read(path: &Path) -> Result<Vec<u8>, ServerError> {
    std::fs::read(path).map_err(|source| ServerError::Io { path: path.to_owned(), source })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T, ServerError> {
    serde_json::from_slice(bytes).map_err(|e| ServerError::Invalid { path: path.to_owned(), message: e.to_string() })
}

impl Bundle {
    /// Loads a bundle and verifies that every link resolves.
    pub fn load(dir: &Path) -> Result<Self, ServerError> {
        let index_path = dir.join("index.json");
        let index_raw = read(&index_path)?;
        let index: IndexDoc = parse(&index_path, &index_raw)?;
        let summary_path = dir.join("summary.json");
        let summary_raw = read(&summary_path)?;
        let _: serde_json::Value = parse(&summary_path, &summary_raw)?;

        let mut docs = HashMap::with_capacity(index.neurons.len());
        for entry in &index.neurons {
            let path = dir.join(&entry.path);
            if !path.is_file() {
                return Err(ServerError::Dangling(format!("index entry {} points to missing {}", entry.neuron, entry.path)));
            }
            let raw = read(&path)?;
            let doc: NeuronDoc = parse(&path, &raw)?;
            if doc.neuron != entry.neuron {
                return Err(ServerError::Invalid { path, message: format!("document is for {}, index says {}", doc.neuron, entry.neuron) });
            }
            docs.insert(entry.neuron, (doc, raw));
        }
        for (doc, _) in docs.values() {
            let links = doc.precursors.iter().map(|p| p.neuron).chain(doc.targets.iter().map(|t| t.neuron));
            for n in links {
                if !docs.contains_key(&n) {
                    return Err(ServerError::Dangling(format!("{} links to {n}, which has no document", doc.neuron)));
                }
            }
        }

        let mut tokens: Vec<SearchHit> = docs
            .values()
            .flat_map(|(d, _)| {
                d.profile.iter().map(|p| SearchHit {
                    layer: d.neuron.layer,
                    index: d.neuron.index,
                    id: p.id,
                    t: p.t.clone(),
                    a: p.a,
                })
            })
            .collect();
        tokens.sort_by(|x, y| {
            y.a.total_cmp(&x.a).then((x.layer, x.index, x.id).cmp(&(y.layer, y.index, y.id)))
        });

        Ok(Self { hash: bundle_hash(dir)?, index, index_raw, summary_raw, docs, tokens })
    }

    pub fn neuron(&self, n: NeuronRef) -> Option<&NeuronDoc> {
        self.docs.get(&n).map(|(d, _)| d)
    }

    /// Case-sensitive substring search over token surfaces.
    pub fn search(&self, query: &str) -> Vec<&SearchHit> {
        self.tokens.iter().filter(|h| h.t.contains(query)).take(SEARCH_LIMIT).collect()
    }
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], bytes).into_response()
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    #[derive(Serialize)]
    struct Body {
        error: String,
        status: u16,
    }
    (status, Json(Body { error: message.into(), status: status.as_u16() })).into_response()
}

type Shared = Arc<Bundle>;

async fn get_index(State(b): State<Shared>) -> Response {
    json_bytes(b.index_raw.clone())
}

async fn get_summary(State(b): State<Shared>) -> Response {
    json_bytes(b.summary_raw.clone())
}

fn lookup(b: &Bundle, layer: &str, index: &str) -> Result<NeuronRef, (StatusCode, String)> {
    let (Ok(l), Ok(i)) = (layer.parse::<u32>(), index.parse::<u32>()) else {
        return Err((StatusCode::BAD_REQUEST, format!("invalid neuron reference {layer}/{index}")));
    };
    let n = NeuronRef::new(l, i);
    if b.docs.contains_key(&n) {
        Ok(n)
    } else {
        Err((StatusCode::NOT_FOUND, format!("no neuron {l}/{i} in bundle")))
    }
}

async fn get_neuron(State(b): State<Shared>, UrlPath((layer, index)): UrlPath<(String, String)>) -> Response {
    match lookup(&b, &layer, &index) {
        Ok(n) => json_bytes(b.docs[&n].1.clone()),
        Err((status, msg)) => error(status, msg),
    }
}

async fn get_precursors(State(b): State<Shared>, UrlPath((layer, index)): UrlPath<(String, String)>) -> Response {
    match lookup(&b, &layer, &index) {
        Ok(n) => Json(&b.docs[&n].0.precursors).into_response(),
        Err((status, msg)) => error(status, msg),
    }
}

async fn search(State(b): State<Shared>, Query(params): Query<BTreeMap<String, String>>) -> Response {
    let q = params.get("q").map(String::as_str).unwrap_or("");
    if q.is_empty() {
        return error(StatusCode::BAD_REQUEST, "query parameter q must be non-empty");
    }
    Json(b.search(q)).into_response()
}

async fn api_not_found() -> Response {
    error(StatusCode::NOT_FOUND, "unknown endpoint")
}

/// Builds the router for a loaded bundle.
pub fn router(bundle: Arc<Bundle>, cfg: &ServerConfig) -> Router {
    let api = Router::new()
        .route("/index", get(get_index))
        .route("/summary", get(get_summary))
        .route("/search", get(search))
        .route("/neurons/{layer}/{index}", get(get_neuron))
        .route("/neurons/{layer}/{index}/precursors", get(get_precursors))
        .fallback(api_not_found)
        .with_state(bundle);
    let mut app = Router::new().nest("/api", api);
    if let Some(dir) = &cfg.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    if let Some(origin) = &cfg.cors_origin {
        let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
        let layer = if origin == "*" {
            layer.allow_origin(Any)
        } else {
            match HeaderValue::from_str(origin) {
                Ok(v) => layer.allow_origin(v),
                Err(_) => {
                    log::warn!("ignoring invalid CORS origin {origin:?}");
                    return app;
                }
            }
        };
        app = app.layer(layer);
    }
    app
}

async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            log::warn!("cannot listen for ctrl-c: {e}");
            std::future::pending::<()>().await;
        }
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
    log::info!("shutting down");
}

/// Loads the bundle and serves until ctrl-c or SIGTERM.
pub async fn serve(cfg: ServerConfig) -> Result<(), ServerError> {
    let bundle = Arc::new(Bundle::load(&cfg.bundle_dir)?);
    log::info!("bundle {} ({} neurons, sha256 {})", cfg.bundle_dir.display(), bundle.docs.len(), bundle.hash);
    let app = router(bundle, &cfg);
    let listener = tokio::net::TcpListener::bind(cfg.bind)
        .await
        .map_err(|source| ServerError::Io { path: PathBuf::from(cfg.bind.to_string()), source })?;
    log::info!("listening on http://{}", cfg.bind);
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|source| ServerError::Io { path: PathBuf::from(cfg.bind.to_string()), source })
}

/// Blocking wrapper around [`serve`] with its own runtime.
pub fn serve_blocking(cfg: ServerConfig) -> Result<(), ServerError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| ServerError::Io { path: PathBuf::from("<runtime>"), source })?;
    rt.block_on(serve(cfg))
}
