//! Read-only HTTP facade over a screened store and its pre-built bundles.
//!
//! Every data endpoint answers with the canonical serialization of the
//! library call it wraps, so bodies can be compared byte for byte against
//! direct results.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use almanac::metrics::ValueSource;
use almanac::model::{metric_catalog, EntityId, GradeSpan, FundingType, MetricId, Store, Subgroup};
use almanac::peers::PeerIndex;
use almanac::storedir::{load_store, Stage};
use almanac::workbook::{bundle_file_name, leaderboard_for, scatter, to_canonical_json};
use almanac::AlmanacError;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::Serialize;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub const API_PREFIX: &str = "/api/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiError {
    pub status: u16,
    /// One of `not_found`, `bad_param`, `ineligible`, `internal`.
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError { status: 404, code: "not_found", message: message.into() }
    }

    pub fn bad_param(message: impl Into<String>) -> Self {
        ApiError { status: 400, code: "bad_param", message: message.into() }
    }
}

impl From<AlmanacError> for ApiError {
    fn from(e: AlmanacError) -> Self {
        let message = e.to_string();
        match e {
            AlmanacError::NotFound(_) => ApiError::not_found(message),
            AlmanacError::Ineligible { .. } => ApiError { status: 404, code: "ineligible", message },
            AlmanacError::Precondition(_) | AlmanacError::Config { .. } => ApiError::bad_param(message),
            _ => ApiError { status: 500, code: "internal", message },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = to_canonical_json(&self).unwrap_or_else(|_| "{\"code\":\"internal\"}\n".into());
        (status, json_headers(), body).into_response()
    }
}

fn json_headers() -> [(header::HeaderName, HeaderValue); 1] {
    [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))]
}

fn json<T: Serialize>(value: &T) -> Result<Response, ApiError> {
    let body = to_canonical_json(value).map_err(ApiError::from)?;
    Ok((StatusCode::OK, json_headers(), body).into_response())
}

/// Row of the district listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DistrictSummary {
    pub id: EntityId,
    pub name: String,
    pub grade_span: GradeSpan,
    /// County name.
    pub county: String,
    pub funding_type: FundingType,
}

/// Everything the endpoints read, loaded once at startup.
pub struct Snapshot {
    store: Store,
    index: PeerIndex,
    bundles_dir: PathBuf,
}

impl Snapshot {
    pub fn new(store: Store, bundles_dir: PathBuf) -> almanac::Result<Self> {
        let index = PeerIndex::build(&store, store.config())?;
        Ok(Snapshot { store, index, bundles_dir })
    }

    /// Loads a screened store directory.
    pub fn load(store_dir: &Path, bundles_dir: PathBuf) -> almanac::Result<Self> {
        let (store, manifest) = load_store(store_dir)?;
        manifest.stage.require(Stage::Screened)?;
        Snapshot::new(store, bundles_dir)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn peer_index(&self) -> &PeerIndex {
        &self.index
    }

    pub fn districts(&self) -> Vec<DistrictSummary> {
        self.store
            .districts()
            .map(|d| DistrictSummary {
                id: d.id.clone(),
                name: d.name.clone(),
                grade_span: d.grade_span,
                county: self.store.name_of(&d.county_id).unwrap_or_default().to_string(),
                funding_type: d.funding_type,
            })
            .collect()
    }

    fn known(&self, id: &EntityId) -> Result<(), ApiError> {
        match self.store.district(id) {
            Some(_) => Ok(()),
            None => Err(ApiError::not_found(format!("unknown district {id}"))),
        }
    }
}

type Shared = Arc<Snapshot>;

/// Query parameters with every key checked against `allowed`.
struct Params(Vec<(String, String)>);

impl Params {
    fn check(raw: Vec<(String, String)>, allowed: &[&str]) -> Result<Self, ApiError> {
        let mut seen = BTreeSet::new();
        for (k, _) in &raw {
            if !allowed.contains(&k.as_str()) {
                return Err(ApiError::bad_param(format!("unknown query parameter `{k}`")));
            }
            if !seen.insert(k.as_str()) {
                return Err(ApiError::bad_param(format!("query parameter `{k}` given twice")));
            }
        }
        Ok(Params(raw))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, ApiError> {
        self.get(key).ok_or_else(|| ApiError::bad_param(format!("missing query parameter `{key}`")))
    }

    fn metric(&self, key: &str) -> Result<MetricId, ApiError> {
        let id = self.required(key)?;
        MetricId::lookup(id).ok_or_else(|| ApiError::not_found(format!("unknown metric {id}")))
    }

    fn year(&self, store: &Store) -> Result<i32, ApiError> {
        match self.get("year") {
            None => Ok(store.last_year()),
            Some(y) => y.parse().map_err(|_| ApiError::bad_param(format!("year `{y}` is not an integer"))),
        }
    }

    fn subgroup(&self) -> Result<Subgroup, ApiError> {
        match self.get("subgroup") {
            None => Ok(Subgroup::All),
            Some(s) => s.parse().map_err(|_| ApiError::bad_param(format!("unknown subgroup `{s}`"))),
        }
    }
}

fn no_params(raw: Vec<(String, String)>) -> Result<(), ApiError> {
    Params::check(raw, &[]).map(|_| ())
}

async fn districts(State(s): State<Shared>, Query(q): Query<Vec<(String, String)>>) -> Result<Response, ApiError> {
    no_params(q)?;
    json(&s.districts())
}

async fn metrics(Query(q): Query<Vec<(String, String)>>) -> Result<Response, ApiError> {
    no_params(q)?;
    json(&metric_catalog())
}

async fn bundle(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<Vec<(String, String)>>,
) -> Result<Response, ApiError> {
    no_params(q)?;
    let id = EntityId::new(id);
    s.known(&id)?;
    let path = s.bundles_dir.join(bundle_file_name(&id));
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok((StatusCode::OK, json_headers(), bytes).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => match s.index.ineligible().get(&id) {
            Some(reason) => Err(ApiError::from(AlmanacError::Ineligible {
                district: id.to_string(),
                reason: reason.clone(),
            })),
            None => Err(ApiError::not_found(format!("no bundle built for {id}"))),
        },
        Err(e) => Err(ApiError::from(AlmanacError::Io { path, source: e })),
    }
}

async fn peers(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<Vec<(String, String)>>,
) -> Result<Response, ApiError> {
    no_params(q)?;
    json(&s.index.peer_set(&EntityId::new(id))?)
}

async fn leaderboard(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<Vec<(String, String)>>,
) -> Result<Response, ApiError> {
    let p = Params::check(q, &["metric", "year", "subgroup"])?;
    let id = EntityId::new(id);
    s.known(&id)?;
    let metric = p.metric("metric")?;
    let year = p.year(&s.store)?;
    let subgroup = p.subgroup()?;
    let peers = s.index.peer_set(&id)?;
    json(&leaderboard_for(&s.store, &peers, metric, year, subgroup)?)
}

async fn scatter_series(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<Vec<(String, String)>>,
) -> Result<Response, ApiError> {
    let p = Params::check(q, &["x", "y", "year", "subgroup", "scope"])?;
    let id = EntityId::new(id);
    s.known(&id)?;
    let x = p.metric("x")?;
    let y = p.metric("y")?;
    let year = p.year(&s.store)?;
    if !ValueSource::years(&s.store).contains(&year) {
        return Err(ApiError::not_found(format!("year {year}")));
    }
    let subgroup = p.subgroup()?;
    let ids: Vec<EntityId> = match p.get("scope").unwrap_or("peers") {
        "peers" => s.index.peer_set(&id)?.district_ids(),
        "all" => s.store.districts().map(|d| d.id.clone()).collect(),
        other => return Err(ApiError::bad_param(format!("scope must be peers or all, not `{other}`"))),
    };
    json(&scatter(&s.store, &ids, x, y, year, subgroup))
}

async fn api_fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

/// Routes under `/api/v1`, plus static files from `ui_dir` at `/` if given.
pub fn router(snapshot: Arc<Snapshot>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/districts", get(districts))
        .route("/districts/{id}/bundle", get(bundle))
        .route("/districts/{id}/peers", get(peers))
        .route("/districts/{id}/leaderboard", get(leaderboard))
        .route("/districts/{id}/scatter", get(scatter_series))
        .route("/metrics", get(metrics))
        .fallback(api_fallback)
        .with_state(snapshot);
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::HEAD])
        .allow_headers(Any);
    let app = Router::new().nest(API_PREFIX, api);
    let app = match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    app.layer(cors)
}

/// Binds first so that a busy port is reported before serving starts.
pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

/// Serves until interrupted, then drains in-flight requests.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
