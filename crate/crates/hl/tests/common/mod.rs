//! Helpers shared by the service, CLI and acceptance tests.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use highlighter::service::{router, ServiceConfig};
use highlighter_core::guidance::GenerationResult;
use highlighter_core::model::{Model, ModelConfig};
use serde_json::Value;

/// Seed of the model behind the frozen CLI and service fixtures.
pub const FIXTURE_SEED: u64 = 7;
/// Prompt whose highlighted decode differs from the vanilla one under
/// [`FIXTURE_SEED`].
pub const FIXTURE_PROMPT: &str = "The cat sat on the mat";

pub fn fixture_model() -> Model {
    Model::seeded(ModelConfig::default(), FIXTURE_SEED).unwrap()
}

/// Serves `model` on an ephemeral local port.
pub async fn spawn(model: Model, config: ServiceConfig) -> String {
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(Arc::new(model), config);
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseEvent {
    pub name: String,
    pub data: Value,
}

/// Splits a complete `text/event-stream` body into events.
pub fn parse_sse(body: &str) -> Vec<SseEvent> {
    body.split("\n\n")
        .filter(|chunk| !chunk.trim().is_empty())
        .map(|chunk| {
            let mut name = String::from("message");
            let mut data = String::new();
            for line in chunk.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("data:") {
                    if !data.is_empty() {
                        data.push('\n');
                    }
                    data.push_str(v.strip_prefix(' ').unwrap_or(v));
                }
            }
            SseEvent { name, data: serde_json::from_str(&data).unwrap_or(Value::String(data)) }
        })
        .collect()
}

pub struct Streamed {
    pub tokens: Vec<u32>,
    pub text: String,
    pub done: Option<GenerationResult>,
    pub events: Vec<SseEvent>,
}

pub fn collect(events: Vec<SseEvent>) -> Streamed {
    let mut tokens = Vec::new();
    let mut text = String::new();
    let mut done = None;
    for e in &events {
        match e.name.as_str() {
            "token" => {
                tokens.push(e.data["id"].as_u64().unwrap() as u32);
                text.push_str(e.data["text"].as_str().unwrap());
            }
            "done" => done = Some(serde_json::from_value(e.data.clone()).unwrap()),
            _ => {}
        }
    }
    Streamed { tokens, text, done, events }
}

pub async fn new_session(client: &reqwest::Client, base: &str) -> String {
    let v: Value = client.post(format!("{base}/v1/sessions")).send().await.unwrap().json().await.unwrap();
    v["id"].as_str().unwrap().to_string()
}

/// Posts a generate request and reads the whole event stream.
pub async fn generate(client: &reqwest::Client, base: &str, session: &str, body: &Value) -> (u16, Streamed) {
    let resp = client.post(format!("{base}/v1/sessions/{session}/generate")).json(body).send().await.unwrap();
    let status = resp.status().as_u16();
    let text = resp.text().await.unwrap();
    let streamed = if status == 200 { collect(parse_sse(&text)) } else { collect(Vec::new()) };
    (status, streamed)
}

/// Deterministic patch features for a `grid × grid` image.
pub fn patch_features(grid: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = highlighter_core::rng::Xoshiro256StarStar::seed_from_u64(seed);
    (0..grid * grid).map(|_| (0..dim).map(|_| rng.next_f32_symmetric()).collect()).collect()
}
