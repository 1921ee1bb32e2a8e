//! HTTP API over a twin workspace: status, reports, metric series, the
//! recommendation approval workflow and (optionally) run control.
//!
//! Handlers only read committed workspace files, except the decision and
//! control endpoints.

use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use dctwin_core::orchestrator::{self, ControlHandle, TwinSnapshot};
use dctwin_core::workspace::{RecommendationLog, Workspace, WorkspaceError};
use dctwin_core::{AccelerationMode, Decision, ModelError, RecommendationStatus, WindowReport};

pub const ADDR_ENV: &str = "DCTWIN_API_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Clone)]
pub struct ApiState {
    workspace: Workspace,
    recommendations: RecommendationLog,
    control: Option<Arc<ControlHandle>>,
}

impl ApiState {
    pub fn new(workspace: Workspace) -> Self {
        let recommendations = RecommendationLog::for_workspace(&workspace);
        Self {
            workspace,
            recommendations,
            control: None,
        }
    }

    /// Enables `POST /api/v1/control` against a running twin.
    pub fn with_control(mut self, control: Arc<ControlHandle>) -> Self {
        self.control = Some(control);
        self
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        let status = match &e {
            WorkspaceError::UnknownRecommendation(_) => StatusCode::NOT_FOUND,
            WorkspaceError::Decision(ModelError::AlreadyDecided(_)) => StatusCode::CONFLICT,
            WorkspaceError::Io { .. } => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn readable(state: &ApiState) -> Result<(), ApiError> {
    if state.workspace.is_readable() {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "workspace is not readable",
        ))
    }
}

fn committed_reports(state: &ApiState, from: u64, to: Option<u64>) -> Result<Vec<WindowReport>, ApiError> {
    readable(state)?;
    let committed = state.workspace.committed_windows()?;
    if committed == 0 {
        return Ok(Vec::new());
    }
    let to = to.unwrap_or(committed - 1);
    if from > to {
        return Ok(Vec::new());
    }
    Ok(state.workspace.read_reports(from, to)?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusResponse {
    #[serde(flatten)]
    pub snapshot: TwinSnapshot,
    /// `None` when the API is not attached to a running twin.
    pub paused: Option<bool>,
}

async fn status(State(state): State<ApiState>) -> ApiResult<StatusResponse> {
    readable(&state)?;
    let snapshot = orchestrator::snapshot(&state.workspace)?;
    Ok(Json(StatusResponse {
        snapshot,
        paused: state.control.as_ref().map(|c| c.is_paused()),
    }))
}

async fn report(State(state): State<ApiState>, Path(k): Path<u64>) -> ApiResult<WindowReport> {
    readable(&state)?;
    if k >= state.workspace.committed_windows()? {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("window {k} not committed")));
    }
    state
        .workspace
        .read_report(k)?
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("window {k} not committed")))
}

#[derive(Debug, Deserialize)]
struct RangeQuery {
    from: Option<u64>,
    to: Option<u64>,
}

async fn reports(State(state): State<ApiState>, Query(q): Query<RangeQuery>) -> ApiResult<Vec<WindowReport>> {
    committed_reports(&state, q.from.unwrap_or(0), q.to).map(Json)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub ts: i64,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated: Option<bool>,
}

impl SeriesPoint {
    fn at(ts: i64, value: f64) -> Self {
        Self {
            ts,
            value,
            window: None,
            calibrated: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    PowerPredicted,
    PowerActual,
    Mape,
    Tflops,
    Efficiency,
    Utilization,
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "power_predicted" => Metric::PowerPredicted,
            "power_actual" => Metric::PowerActual,
            "mape" => Metric::Mape,
            "tflops" => Metric::Tflops,
            "efficiency" => Metric::Efficiency,
            "utilization" => Metric::Utilization,
            other => return Err(format!("unknown metric {other:?}")),
        })
    }
}

/// Flattens committed reports into one metric's time series.
pub fn series(metric: Metric, reports: &[WindowReport]) -> Vec<SeriesPoint> {
    let mut out = Vec::new();
    for r in reports {
        match metric {
            Metric::PowerPredicted => out.extend(
                r.predictions
                    .iter()
                    .map(|s| SeriesPoint::at(s.timestamp, s.power_draw)),
            ),
            Metric::PowerActual => out.extend(
                r.ground_truth
                    .iter()
                    .map(|s| SeriesPoint::at(s.timestamp, s.power_draw)),
            ),
            Metric::Utilization => out.extend(
                r.predictions
                    .iter()
                    .map(|s| SeriesPoint::at(s.timestamp, s.cpu_utilization)),
            ),
            Metric::Tflops => out.extend(
                r.performance_tflops
                    .iter()
                    .map(|&(ts, v)| SeriesPoint::at(ts, v)),
            ),
            Metric::Efficiency => out.extend(
                r.efficiency_tflops_per_kwh
                    .iter()
                    .map(|&(hour, v)| SeriesPoint::at(hour * 3600, v)),
            ),
            Metric::Mape => {
                if let Some(m) = r.mape_percent {
                    out.push(SeriesPoint {
                        ts: r.window.start,
                        value: m,
                        window: Some(r.window.index),
                        calibrated: Some(r.calibrated),
                    });
                }
            }
        }
    }
    out
}

async fn metric_series(
    State(state): State<ApiState>,
    Path(metric): Path<String>,
) -> ApiResult<Vec<SeriesPoint>> {
    let metric: Metric = metric
        .parse()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let reports = committed_reports(&state, 0, None)?;
    Ok(Json(series(metric, &reports)))
}

#[derive(Debug, Deserialize)]
struct StatusQuery {
    status: Option<String>,
}

async fn recommendations(
    State(state): State<ApiState>,
    Query(q): Query<StatusQuery>,
) -> ApiResult<Vec<dctwin_core::Recommendation>> {
    readable(&state)?;
    let filter = q
        .status
        .as_deref()
        .map(RecommendationStatus::from_str)
        .transpose()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let all = state.recommendations.load()?;
    Ok(Json(
        all.into_iter()
            .filter(|r| filter.is_none_or(|s| r.status == s))
            .collect(),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: String,
    pub operator: String,
}

async fn decide(
    State(state): State<ApiState>,
    Path(id): Path<String>,
    Json(body): Json<DecisionRequest>,
) -> ApiResult<dctwin_core::Recommendation> {
    readable(&state)?;
    let decision: Decision = body
        .decision
        .parse()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    if body.operator.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "operator is required"));
    }
    let rec = state
        .recommendations
        .decide(&id, decision, &body.operator, Utc::now())?;
    log::info!("recommendation {id} {:?} by {}", rec.status, body.operator);
    Ok(Json(rec))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ControlRequest {
    pub action: String,
    /// `realtime`, `fixed:<factor>` or `max`; required for `set_acceleration`.
    #[serde(default)]
    pub acceleration: Option<String>,
}

async fn control(
    State(state): State<ApiState>,
    Json(body): Json<ControlRequest>,
) -> ApiResult<serde_json::Value> {
    let Some(handle) = &state.control else {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "run control is disabled"));
    };
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    match body.action.as_str() {
        "pause" => handle.pause(),
        "resume" => handle.resume(),
        "set_acceleration" => {
            let raw = body
                .acceleration
                .ok_or_else(|| bad("set_acceleration requires `acceleration`".into()))?;
            let mode: AccelerationMode = raw.parse().map_err(|e: ModelError| bad(e.to_string()))?;
            handle.set_acceleration(mode);
        }
        other => return Err(bad(format!("unknown action {other:?}"))),
    }
    Ok(Json(serde_json::json!({ "action": body.action, "paused": handle.is_paused() })))
}

/// CORS layer for the given origins; an empty list allows any origin.
pub fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.is_empty() {
        return layer.allow_origin(Any);
    }
    let values: Vec<HeaderValue> = origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    layer.allow_origin(AllowOrigin::list(values))
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/api/v1/status", get(status))
        .route("/api/v1/reports", get(reports))
        .route("/api/v1/reports/{k}", get(report))
        .route("/api/v1/series/{metric}", get(metric_series))
        .route("/api/v1/recommendations", get(recommendations))
        .route("/api/v1/recommendations/{id}/decision", post(decide))
        .route("/api/v1/control", post(control))
        .with_state(state)
}

/// Listen address: `DCTWIN_API_ADDR` if set, else `configured`, else the
/// default.
pub fn listen_addr(configured: Option<&str>) -> Result<SocketAddr, std::net::AddrParseError> {
    std::env::var(ADDR_ENV)
        .ok()
        .as_deref()
        .or(configured)
        .unwrap_or(DEFAULT_ADDR)
        .parse()
}

pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("api listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
