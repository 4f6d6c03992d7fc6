//! HTTP inference service.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sgdiff::graphcore::{coarse_subgraph, prompt_node, SceneGraph};
use sgdiff::model::{Model, PairCandidate};
use sgdiff::nn::ParamSet;
use sgdiff::psga::GraphInput;
use sgdiff::synthdata::vocab;
use sgdiff::synthdata::{category_parts, parse_image, Object, Predicate, Relation, Rle, Scene};
use sgdiff::trainer::{config_hash, Trainer};

pub const MAX_K: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    /// Base-64 PNG of the canvas-sized image.
    pub image: String,
    /// Prompt box `[x0, y0, x1, y1]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    MAX_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOut {
    pub rle: Rle,
    /// Position of the linked shape word in `tokens`.
    pub word: usize,
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOut {
    pub tokens: Vec<u32>,
    pub words: Vec<String>,
    pub caption: String,
    pub masks: Vec<MaskOut>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub model_version: String,
    pub candidates: Vec<CandidateOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
}

/// Request failure with its HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub enum ServiceError {
    BadRequest(String),
    Unprocessable(String),
    Internal(String),
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (code, msg) = match self {
            ServiceError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ServiceError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ServiceError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (code, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

/// Immutable model snapshot shared by all requests.
pub struct Service {
    pub model: Model,
    pub params: ParamSet<f32>,
    pub version: String,
}

fn category_name(cat: usize) -> String {
    let (shape, color) = category_parts(cat);
    format!("{} {}", color.name(), shape.name())
}

/// Objects recovered from a rendered image; no relations.
pub fn parsed_scene(rgb: &[u8], canvas: usize) -> Scene {
    let objects = parse_image(rgb, canvas)
        .into_iter()
        .map(|p| Object { shape: p.shape, color: p.color, bbox: p.bbox, mask: p.mask })
        .collect();
    Scene { canvas, objects, relations: Vec::new() }
}

/// Graph input for a prompt box given in pixels: a star graph in which the
/// prompted object is related to every other parsed object by the first
/// predicate (in declaration order) that holds geometrically.
pub fn graph_for_prompt(rgb: &[u8], canvas: usize, bbox: [f64; 4], near: f64) -> Result<GraphInput, ServiceError> {
    let mut scene = parsed_scene(rgb, canvas);
    let c = canvas as f64;
    let prompt = [bbox[0] / c, bbox[1] / c, bbox[2] / c, bbox[3] / c];
    let g = SceneGraph::from_scene(&scene);
    let center = prompt_node(&g, &prompt)
        .ok_or_else(|| ServiceError::Unprocessable("prompt box does not overlap any object".into()))?;
    for j in 0..scene.objects.len() {
        if j == center {
            continue;
        }
        let (s, o) = (&scene.objects[center].bbox, &scene.objects[j].bbox);
        if let Some(p) = Predicate::ALL.into_iter().find(|p| p.holds(s, o, near)) {
            scene.relations.push(Relation { subject: center, predicate: p, object: j });
        }
    }
    let g = SceneGraph::from_scene(&scene);
    let sub = coarse_subgraph(&g, center).map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(GraphInput::from_subgraph(&sub))
}

impl Service {
    pub fn from_trainer(t: Trainer<f32>) -> Self {
        let version = config_hash(&t.model.config, &t.config)[..12].to_string();
        Self { model: t.model, params: t.params, version }
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        Ok(Self::from_trainer(Trainer::<f32>::load(path)?))
    }

    pub fn health(&self) -> Health {
        Health { status: "ok".into(), model_version: self.version.clone() }
    }

    /// Decodes and validates a request body, then runs inference.
    pub fn infer_bytes(&self, body: &[u8]) -> Result<InferResponse, ServiceError> {
        let req: InferRequest =
            serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("malformed request: {e}")))?;
        self.infer(&req)
    }

    pub fn infer(&self, req: &InferRequest) -> Result<InferResponse, ServiceError> {
        let canvas = self.model.config.canvas;
        if req.k == 0 || req.k > MAX_K {
            return Err(ServiceError::BadRequest(format!("k: must be between 1 and {MAX_K}, got {}", req.k)));
        }
        let png = base64::engine::general_purpose::STANDARD
            .decode(req.image.as_bytes())
            .map_err(|e| ServiceError::BadRequest(format!("image: invalid base-64: {e}")))?;
        let img = image::load_from_memory_with_format(&png, image::ImageFormat::Png)
            .map_err(|e| ServiceError::BadRequest(format!("image: not a PNG: {e}")))?
            .to_rgb8();
        if img.width() as usize != canvas || img.height() as usize != canvas {
            return Err(ServiceError::BadRequest(format!(
                "image: expected {canvas}x{canvas}, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let b = req.bbox;
        if b.iter().any(|v| !v.is_finite()) {
            return Err(ServiceError::BadRequest("box: coordinates must be finite".into()));
        }
        let c = canvas as f64;
        if b[0] < 0.0 || b[1] < 0.0 || b[2] > c || b[3] > c || b[0] >= b[2] || b[1] >= b[3] {
            return Err(ServiceError::Unprocessable(format!(
                "box: {b:?} is not a non-empty box inside the {canvas}x{canvas} image"
            )));
        }
        let rgb = img.into_raw();
        let near = sgdiff::synthdata::SceneParams::default().near;
        let graph = graph_for_prompt(&rgb, canvas, b, near)?;
        let seed = request_seed(req);
        let cands = self
            .model
            .infer(&self.params, &graph, &rgb, req.k, seed)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(InferResponse { model_version: self.version.clone(), candidates: cands.iter().map(candidate_out).collect() })
    }
}

/// Sampler seed: the first 8 bytes of the sha256 of the request fields.
pub fn request_seed(req: &InferRequest) -> u64 {
    let mut h = Sha256::new();
    h.update(req.image.as_bytes());
    for v in req.bbox {
        h.update(v.to_le_bytes());
    }
    h.update((req.k as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Wire form of a candidate; masks without a linked word are dropped.
pub fn candidate_out(c: &PairCandidate) -> CandidateOut {
    let masks = c
        .masks
        .iter()
        .zip(&c.links)
        .zip(&c.categories)
        .zip(&c.mask_scores)
        .filter_map(|(((m, link), cat), &score)| {
            Some(MaskOut { rle: m.to_rle(), word: (*link)?, category: category_name((*cat)?), score })
        })
        .collect();
    CandidateOut {
        tokens: c.tokens.clone(),
        words: c.tokens.iter().map(|&t| vocab::token_text(t).to_string()).collect(),
        caption: c.caption.clone(),
        masks,
        score: c.score,
    }
}

async fn health(State(s): State<Arc<Service>>) -> Json<Health> {
    Json(s.health())
}

async fn infer(State(s): State<Arc<Service>>, body: Bytes) -> Result<Json<InferResponse>, ServiceError> {
    tokio::task::spawn_blocking(move || s.infer_bytes(&body))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new().route("/health", get(health)).route("/infer", post(infer)).with_state(service)
}

pub async fn serve(service: Service, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(service))).await?;
    Ok(())
}
