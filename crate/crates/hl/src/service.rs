//! HTTP service: tokenisation, sessions, streamed guided generation and
//! attention snapshots.
//!
//! Generation streams server-sent events: one `token` event per generated
//! token, then a `done` event carrying the full generation result, or an
//! `error` event if decoding fails part way.

use std::collections::HashMap;
use std::convert::Infallible;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::Stream;
use highlighter_core::context::VisionMapping;
use highlighter_core::guidance::{
    decode_observed, Conversation, DecodeObserver, GenerationResult, GuidanceConfig, Rescale,
};
use highlighter_core::model::Model;
use highlighter_core::numerics::Tensor2D;
use highlighter_core::probe::{AttentionCapture, AttentionSnapshot, LayerSelection};
use highlighter_core::tokenizer::{ByteTokenizer, Offset, TokenId};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

use crate::formats::{Bits, PatchesFile, TextSpan};
use crate::snapshot::heatmap;

/// Request bodies larger than this are rejected with 413.
pub const MAX_BODY_BYTES: usize = 64 * 1024;
/// Upper bound on `max_new_tokens` per request.
pub const MAX_NEW_TOKENS_LIMIT: usize = 256;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_sessions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { max_sessions: 32 }
    }
}

#[derive(Default)]
struct SessionData {
    conversation: Conversation,
    last: Option<LastRun>,
}

struct LastRun {
    snapshot: AttentionSnapshot,
}

#[derive(Default)]
struct Session {
    busy: AtomicBool,
    data: Mutex<SessionData>,
}

struct AppState {
    model: Arc<Model>,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    config: ServiceConfig,
}

pub fn router(model: Arc<Model>, config: ServiceConfig) -> Router {
    let state = Arc::new(AppState { model, sessions: Mutex::new(HashMap::new()), config });
    Router::new()
        .route("/v1/config", get(get_config))
        .route("/v1/tokenize", post(tokenize))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/generate", post(generate))
        .route("/v1/sessions/{id}/attention", get(attention))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(model: Arc<Model>, config: ServiceConfig, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(model, config)).await
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

async fn get_config(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let cfg = state.model.config();
    Json(json!({ "model": cfg, "patch_grid": cfg.patch_grid(), "defaults": GuidanceConfig::default() }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub tokens: Vec<TokenId>,
    pub offsets: Vec<Offset>,
    /// Context position of the first text token; `<s>` occupies position 0.
    pub context_offset: usize,
}

async fn tokenize(body: Bytes) -> Result<Json<TokenizeResponse>, ApiError> {
    let req: TokenizeRequest = parse_json(&body)?;
    let enc = ByteTokenizer.encode(&req.text);
    Ok(Json(TokenizeResponse { tokens: enc.ids, offsets: enc.offsets, context_offset: 1 }))
}

async fn create_session(State(state): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let mut sessions = state.sessions.lock().expect("session map poisoned");
    if sessions.len() >= state.config.max_sessions {
        return Err(ApiError(StatusCode::TOO_MANY_REQUESTS, "session limit reached".into()));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    sessions.insert(id.clone(), Arc::new(Session::default()));
    tracing::debug!(%id, "session created");
    Ok(Json(json!({ "id": id })))
}

/// Guidance parameters; omitted fields take the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateParams {
    pub alpha: Option<f32>,
    pub beta: Option<f32>,
    pub beta_qformer: Option<f32>,
    pub gamma: Option<f32>,
    pub max_new_tokens: Option<usize>,
    pub rescale: Option<Rescale>,
}

impl GenerateParams {
    /// Applies defaults and checks the documented ranges:
    /// alpha in [0, 1], beta and beta_qformer in (0, 64], gamma in [0.5, 4].
    pub fn resolve(&self) -> Result<GuidanceConfig, String> {
        let d = GuidanceConfig::default();
        let cfg = GuidanceConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            beta_qformer: self.beta_qformer.unwrap_or(d.beta_qformer),
            gamma: self.gamma.unwrap_or(d.gamma),
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
            rescale: self.rescale.unwrap_or(d.rescale),
        };
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(format!("alpha {} outside [0, 1]", cfg.alpha));
        }
        if !(cfg.beta > 0.0 && cfg.beta <= 64.0) {
            return Err(format!("beta {} outside (0, 64]", cfg.beta));
        }
        if !(cfg.beta_qformer > 0.0 && cfg.beta_qformer <= 64.0) {
            return Err(format!("beta_qformer {} outside (0, 64]", cfg.beta_qformer));
        }
        if !(0.5..=4.0).contains(&cfg.gamma) {
            return Err(format!("gamma {} outside [0.5, 4]", cfg.gamma));
        }
        if !(1..=MAX_NEW_TOKENS_LIMIT).contains(&cfg.max_new_tokens) {
            return Err(format!("max_new_tokens {} outside [1, {MAX_NEW_TOKENS_LIMIT}]", cfg.max_new_tokens));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub text: String,
    #[serde(default)]
    pub spans: Vec<TextSpan>,
    #[serde(default)]
    pub patch_mask: Option<Bits>,
    /// Patch features; only accepted in a session's first round.
    #[serde(default)]
    pub image: Option<PatchesFile>,
    #[serde(default)]
    pub vision: Option<VisionMapping>,
    #[serde(default)]
    pub params: GenerateParams,
    /// Keep earlier rounds' highlighted spans.
    #[serde(default)]
    pub keep_previous: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenEvent {
    pub id: TokenId,
    pub text: String,
}

enum StreamMsg {
    Token(TokenId),
    Done(Box<GenerationResult>),
    Failed(String),
}

/// Forwards tokens to the SSE channel and records attention.
struct StreamObserver {
    tx: mpsc::Sender<StreamMsg>,
    capture: AttentionCapture,
}

impl DecodeObserver for StreamObserver {
    fn on_attention(&mut self, layer: usize, head: usize, first_query: usize, probs: &Tensor2D) {
        self.capture.on_attention(layer, head, first_query, probs);
    }

    fn on_token(&mut self, id: TokenId) -> ControlFlow<()> {
        let _ = self.capture.on_token(id);
        match self.tx.blocking_send(StreamMsg::Token(id)) {
            Ok(()) => ControlFlow::Continue(()),
            Err(_) => ControlFlow::Break(()),
        }
    }
}

/// Clears the busy flag when the generation task ends, however it ends.
struct BusyGuard(Arc<Session>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

async fn generate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let session = state
        .sessions
        .lock()
        .expect("session map poisoned")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    let req: GenerateRequest = parse_json(&body)?;
    let cfg = req.params.resolve().map_err(unprocessable)?;
    if session.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError(StatusCode::CONFLICT, "session is generating".into()));
    }
    let guard = BusyGuard(session.clone());
    let model = state.model.clone();
    let spans: Vec<(usize, usize)> = req.spans.iter().map(|s| (s.char_start, s.char_end)).collect();

    // Validate everything that can fail before the stream starts.
    {
        let mut data = session.data.lock().expect("session poisoned");
        let mut conv = data.conversation.clone();
        if let Some(image) = req.image.clone() {
            if !conv.rounds().is_empty() {
                return Err(unprocessable("an image can only be attached in the first round"));
            }
            let image = image
                .into_image(req.vision.unwrap_or(VisionMapping::Direct))
                .map_err(|e| unprocessable(e.to_string()))?;
            conv = Conversation::with_image(image);
        }
        if let Some(bits) = &req.patch_mask {
            conv.set_patch_mask(Some(bits.0.clone()));
        }
        let (ctx, _) =
            conv.prepare(&model, &req.text, &spans, req.keep_previous).map_err(|e| unprocessable(e.to_string()))?;
        let needed = ctx.len() + cfg.max_new_tokens;
        if needed > model.config().max_seq {
            return Err(unprocessable(format!(
                "context of {needed} positions exceeds max_seq {}",
                model.config().max_seq
            )));
        }
        data.conversation = conv;
    }

    let (tx, rx) = mpsc::channel::<StreamMsg>(1);
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let mut data = session.data.lock().expect("session poisoned");
        let mut obs =
            StreamObserver { tx: tx.clone(), capture: AttentionCapture::new(model.config(), LayerSelection::All) };
        let out =
            data.conversation.prepare(&model, &req.text, &spans, req.keep_previous).and_then(|(ctx, highlights)| {
                decode_observed(&model, &ctx, &highlights, cfg, &mut obs).map(|r| (r, ctx.len(), highlights))
            });
        match out {
            Ok((result, context_len, highlights)) => {
                data.conversation.record_round(&req.text, &spans, &result);
                let snapshot = obs.capture.into_snapshot(context_len, &highlights.mask, true);
                data.last = Some(LastRun { snapshot });
                drop(data);
                let _ = tx.blocking_send(StreamMsg::Done(Box::new(result)));
            }
            Err(e) => {
                drop(data);
                tracing::warn!(error = %e, "generation failed");
                let _ = tx.blocking_send(StreamMsg::Failed(e.to_string()));
            }
        }
    });

    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let msg = rx.recv().await?;
        let event = match msg {
            StreamMsg::Token(id) => {
                Event::default().event("token").json_data(TokenEvent { id, text: ByteTokenizer.token_text(id) })
            }
            StreamMsg::Done(result) => Event::default().event("done").json_data(&*result),
            StreamMsg::Failed(message) => Event::default().event("error").json_data(json!({ "message": message })),
        };
        let event = event.unwrap_or_else(|e| Event::default().event("error").data(e.to_string()));
        Some((Ok::<_, Infallible>(event), rx))
    });
    Ok(Sse::new(stream))
}

async fn attention(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<crate::snapshot::Heatmap>, ApiError> {
    let session = state
        .sessions
        .lock()
        .expect("session map poisoned")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    if session.busy.load(Ordering::Acquire) {
        return Err(ApiError(StatusCode::CONFLICT, "session is generating".into()));
    }
    let data = session.data.lock().expect("session poisoned");
    let last =
        data.last.as_ref().ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "no completed generation yet".into()))?;
    heatmap(&last.snapshot).map(Json).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}
