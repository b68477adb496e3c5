// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use attrigraph_core::analysis::case_report;
use attrigraph_core::attribution::{ContrastCase, HeatmapDocument};
use attrigraph_core::engine::RuleVariant;
use attrigraph_core::graph::{node_pass, AttributionGraph, DenseGraph, NodeRelevances};
use attrigraph_core::model::ModelBundle;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::commands::{build_dense, compare, heatmap, parse_runs, BASE_RUN};
use crate::config::{load_model_spec, parse_layer_pairs, prune_config, rules_for, JobConfig, ModeFlag};
use crate::error::{CliError, CliResult, ErrorKind};
use crate::store::{default_cache_dir, CaseStore};

pub const API_SCHEMA_VERSION: u32 = 1;
pub const CACHE_HEADER: &str = "x-attrigraph-cache";

/// Error body plus status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: CliError,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, error: CliError::input(message) }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, error: CliError::input(message) }
    }
}

impl From<CliError> for ApiError {
    fn from(error: CliError) -> Self {
        let status = match error.kind {
            ErrorKind::Input => StatusCode::BAD_REQUEST,
            ErrorKind::Compute | ErrorKind::Io => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, error }
    }
}

impl From<attrigraph_core::Error> for ApiError {
    fn from(error: attrigraph_core::Error) -> Self {
        CliError::from(error).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "schema_version": API_SCHEMA_VERSION, "error": self.error });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared service state: cases, models, and the in-memory dense cache.
pub struct AppState {
    store: CaseStore,
    model_spec: String,
    /// First entry is the served model; the rest are comparison runs.
    models: Vec<(String, ModelBundle)>,
    layer_pairs: Vec<(i32, i32)>,
    batch_size: Option<usize>,
    dense: Mutex<HashMap<(String, RuleVariant), Arc<DenseGraph>>>,
    builds: Semaphore,
}

impl AppState {
    pub fn new(
        store: CaseStore,
        model_spec: &str,
        runs: Vec<(String, ModelBundle)>,
        layer_pairs: &str,
        batch_size: Option<usize>,
        max_builds: usize,
    ) -> CliResult<Self> {
        if max_builds == 0 {
            return Err(CliError::input("max builds must be at least 1"));
        }
        let model = load_model_spec(model_spec)?;
        for case in store.cases() {
            case.check_against(&model)?;
        }
        if runs.iter().any(|(id, _)| id == BASE_RUN) {
            return Err(CliError::input(format!("run id {BASE_RUN:?} is reserved for the served model")));
        }
        let layer_pairs = parse_layer_pairs(layer_pairs, model.config().num_layers)?;
        if let Some(b) = batch_size {
            attrigraph_core::graph::BatchPlan::new(b)?;
        }
        let mut models = vec![(BASE_RUN.to_owned(), model)];
        models.extend(runs);
        Ok(Self {
            store,
            model_spec: model_spec.to_owned(),
            models,
            layer_pairs,
            batch_size,
            dense: Mutex::new(HashMap::new()),
            builds: Semaphore::new(max_builds),
        })
    }

    fn model(&self) -> &ModelBundle {
        &self.models[0].1
    }

    fn case(&self, id: &str) -> ApiResult<ContrastCase> {
        self.store.get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown case {id:?}")))
    }

    fn cached_dense(&self, case_id: &str, rules: RuleVariant) -> Option<Arc<DenseGraph>> {
        self.dense.lock().expect("dense cache lock").get(&(case_id.to_owned(), rules)).cloned()
    }
}

fn parse_rules(rules: Option<&str>) -> ApiResult<RuleVariant> {
    rules.unwrap_or("attnlrp").parse().map_err(|e: attrigraph_core::Error| ApiError::bad_request(e.to_string()))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Runs CPU work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::from(CliError::compute(format!("worker failed: {e}"))))?
}

/// Memory hit, else a build under the build semaphore. The flag is true on a
/// fresh build.
async fn dense_for(
    state: &Arc<AppState>,
    case: &ContrastCase,
    rules: RuleVariant,
) -> ApiResult<(Arc<DenseGraph>, bool)> {
    if let Some(d) = state.cached_dense(&case.case_id, rules) {
        return Ok((d, false));
    }
    let _permit = state.builds.acquire().await.map_err(|e| CliError::compute(e.to_string()))?;
    if let Some(d) = state.cached_dense(&case.case_id, rules) {
        return Ok((d, false));
    }
    let (st, c) = (state.clone(), case.clone());
    let dense =
        blocking(move || Ok(build_dense(st.model(), &c, &rules_for(rules), &st.layer_pairs, st.batch_size)?)).await?;
    let dense = Arc::new(dense);
    state.dense.lock().expect("dense cache lock").insert((case.case_id.clone(), rules), dense.clone());
    Ok((dense, true))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/cases", get(cases))
        .route("/case/:id", get(case))
        .route("/heatmap", get(heatmap_route))
        .route("/graph", get(graph_route))
        .route("/refine", post(refine_route))
        .route("/analysis", get(analysis_route))
        .route("/compare", get(compare_route))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

#[derive(Serialize)]
struct CaseSummary {
    case_id: String,
    len: usize,
    position: usize,
    target: u32,
    contrast: u32,
    segments: Vec<String>,
}

#[derive(Serialize)]
struct CasesResponse {
    schema_version: u32,
    model: String,
    runs: Vec<String>,
    layer_pairs: Vec<(i32, i32)>,
    cases: Vec<CaseSummary>,
}

async fn cases(State(state): State<Arc<AppState>>) -> Json<CasesResponse> {
    Json(CasesResponse {
        schema_version: API_SCHEMA_VERSION,
        model: state.model_spec.clone(),
        runs: state.models.iter().map(|(id, _)| id.clone()).collect(),
        layer_pairs: state.layer_pairs.clone(),
        cases: state
            .store
            .cases()
            .map(|c| CaseSummary {
                case_id: c.case_id.clone(),
                len: c.len(),
                position: c.position,
                target: c.target,
                contrast: c.contrast,
                segments: c.segments.iter().map(|s| s.name.clone()).collect(),
            })
            .collect(),
    })
}

#[derive(Serialize)]
struct CaseResponse {
    schema_version: u32,
    case: ContrastCase,
}

async fn case(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CaseResponse>> {
    Ok(Json(CaseResponse { schema_version: API_SCHEMA_VERSION, case: state.case(&id)? }))
}

#[derive(Deserialize)]
struct CaseQuery {
    case: String,
    rules: Option<String>,
}

async fn heatmap_route(
    State(state): State<Arc<AppState>>,
    q: Result<Query<CaseQuery>, QueryRejection>,
) -> ApiResult<Json<HeatmapDocument>> {
    let q = query(q)?;
    let rules = parse_rules(q.rules.as_deref())?;
    let case = state.case(&q.case)?;
    let st = state.clone();
    let doc = blocking(move || {
        let hm = heatmap(st.model(), &case, &rules_for(rules))?;
        Ok(HeatmapDocument::new(&hm, &case.case_id, rules))
    })
    .await?;
    Ok(Json(doc))
}

#[derive(Deserialize)]
struct GraphQuery {
    case: String,
    rules: Option<String>,
    mode: Option<ModeFlag>,
    p: Option<f64>,
    tau: Option<f64>,
    node_threshold: Option<f64>,
}

/// Body is the graph JSON, byte-identical across repeats; the cache header
/// reports `disk`, `memory` or `built`.
async fn graph_route(
    State(state): State<Arc<AppState>>,
    q: Result<Query<GraphQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let rules = parse_rules(q.rules.as_deref())?;
    let prune = prune_config(q.mode.unwrap_or(ModeFlag::Cumulative), q.tau, q.p, q.node_threshold)?;
    let case = state.case(&q.case)?;
    let job = JobConfig {
        model: state.model_spec.clone(),
        model_fingerprint: state.model().fingerprint(),
        rule_variant: rules,
        prune,
        batch_size: state.batch_size,
        layer_pairs: state.layer_pairs.clone(),
        out: None,
    };
    let key = job.cache_key("graph", &case);
    let cached = state
        .store
        .cache_read(&key)
        .filter(|b| std::str::from_utf8(b).ok().and_then(|t| AttributionGraph::from_json(t).ok()).is_some());
    let (body, source) = match cached {
        Some(bytes) => (bytes, "disk"),
        None => {
            let (dense, built) = dense_for(&state, &case, rules).await?;
            let bytes = dense.prune(&job.prune)?.to_json().into_bytes();
            if let Err(e) = state.store.cache_write(&key, &bytes) {
                tracing::warn!(error = %e, "could not write graph cache");
            }
            (bytes, if built { "built" } else { "memory" })
        }
    };
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
            (header::HeaderName::from_static(CACHE_HEADER), HeaderValue::from_static(source)),
        ],
        body,
    )
        .into_response())
}

#[derive(Deserialize)]
struct NodeRef {
    layer: i32,
    pos: usize,
}

#[derive(Deserialize)]
struct RefineRequest {
    case: String,
    rules: Option<String>,
    nodes: Vec<NodeRef>,
}

#[derive(Serialize)]
struct RefineResponse {
    schema_version: u32,
    case_id: String,
    rule_variant: RuleVariant,
    nodes: Vec<attrigraph_core::graph::RefinedNode>,
}

async fn refine_route(
    State(state): State<Arc<AppState>>,
    body: Result<Json<RefineRequest>, JsonRejection>,
) -> ApiResult<Json<RefineResponse>> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let rules = parse_rules(req.rules.as_deref())?;
    let case = state.case(&req.case)?;
    if req.nodes.is_empty() {
        return Err(ApiError::bad_request("no nodes requested"));
    }
    let nodes: Vec<(i32, usize)> = req.nodes.iter().map(|n| (n.layer, n.pos)).collect();
    let cached = state.cached_dense(&case.case_id, rules);
    let st = state.clone();
    let case_id = case.case_id.clone();
    let refined = blocking(move || {
        let mut relev: NodeRelevances = match cached {
            Some(d) => d.relevances.clone(),
            None => node_pass(st.model(), &case, &rules_for(rules))?,
        };
        Ok(relev.refine(&nodes)?)
    })
    .await?;
    Ok(Json(RefineResponse { schema_version: API_SCHEMA_VERSION, case_id, rule_variant: rules, nodes: refined }))
}

async fn analysis_route(
    State(state): State<Arc<AppState>>,
    q: Result<Query<CaseQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let rules = parse_rules(q.rules.as_deref())?;
    let case = state.case(&q.case)?;
    let (dense, _) = dense_for(&state, &case, rules).await?;
    let layers = state.model().config().num_layers;
    let report = blocking(move || Ok(case_report(&dense, &case, layers)?)).await?;
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
struct CompareQuery {
    cases: Option<String>,
    runs: Option<String>,
    rules: Option<String>,
}

#[derive(Serialize)]
struct CompareResponse {
    schema_version: u32,
    rule_variant: RuleVariant,
    comparison: attrigraph_core::analysis::Comparison,
}

fn split_list(list: Option<&str>) -> Option<Vec<String>> {
    list.map(|s| s.split(',').map(|x| x.trim().to_owned()).filter(|x| !x.is_empty()).collect())
}

async fn compare_route(
    State(state): State<Arc<AppState>>,
    q: Result<Query<CompareQuery>, QueryRejection>,
) -> ApiResult<Json<CompareResponse>> {
    let q = query(q)?;
    let rules = parse_rules(q.rules.as_deref())?;
    let case_ids =
        split_list(q.cases.as_deref()).unwrap_or_else(|| state.store.cases().map(|c| c.case_id.clone()).collect());
    let cases = case_ids.iter().map(|id| state.case(id)).collect::<ApiResult<Vec<_>>>()?;
    if cases.is_empty() {
        return Err(ApiError::bad_request("no cases selected"));
    }
    let run_ids =
        split_list(q.runs.as_deref()).unwrap_or_else(|| state.models.iter().map(|(id, _)| id.clone()).collect());
    for id in &run_ids {
        if !state.models.iter().any(|(m, _)| m == id) {
            return Err(ApiError::not_found(format!("unknown run {id:?}")));
        }
    }
    if run_ids.is_empty() {
        return Err(ApiError::bad_request("no runs selected"));
    }
    let _permit = state.builds.acquire().await.map_err(|e| CliError::compute(e.to_string()))?;
    let st = state.clone();
    let comparison = blocking(move || {
        let models: Vec<(String, &ModelBundle)> = run_ids
            .iter()
            .map(|id| (id.clone(), &st.models.iter().find(|(m, _)| m == id).expect("checked").1))
            .collect();
        let refs: Vec<&ContrastCase> = cases.iter().collect();
        Ok(compare(&models, &refs, &rules_for(rules))?)
    })
    .await?;
    Ok(Json(CompareResponse { schema_version: API_SCHEMA_VERSION, rule_variant: rules, comparison }))
}

pub fn serve_blocking(
    model: &crate::cli::ModelArgs,
    cases_dir: &Path,
    addr: &str,
    batch: Option<usize>,
    layer_pairs: &str,
    runs: &[String],
    max_builds: usize,
) -> CliResult<()> {
    let store = CaseStore::open(cases_dir, default_cache_dir())?;
    let state = Arc::new(AppState::new(store, &model.model, parse_runs(runs)?, layer_pairs, batch, max_builds)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::io(format!("bind {addr}: {e}")))?;
        tracing::info!(addr = %listener.local_addr()?, cases = state.store.cases().count(), "serving");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
