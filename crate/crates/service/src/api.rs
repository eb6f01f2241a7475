//! HTTP API over an immutable model and concept library.
//!
//! Endpoints: `GET /info`, `GET /concepts`, `GET /concepts/{k}/slots`,
//! `GET /slots/{id}/thumbnail`, `POST /encode`, `POST /compose`,
//! `POST /swap`. Bodies are JSON; images travel as base64 PNG, except the
//! thumbnail endpoint which answers with raw PNG bytes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slotgen_core::checkpoint::hex;
use slotgen_core::concept::{thumbnail, ClusterLabel, ConceptLibrary, Padding, PromptSource, SlotPrompt};
use slotgen_core::decoder::Sampling;
use slotgen_core::image::Image;
use slotgen_core::rng::RandomSource;
use slotgen_core::training::AnyModel;
use slotgen_core::Error;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub max_sessions: usize,
    /// Base directory for relative library source paths.
    pub image_root: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            session_ttl: Duration::from_secs(600),
            max_sessions: 64,
            image_root: PathBuf::from("."),
        }
    }
}

/// Slot reference held by an encode session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionSlot {
    /// Slot `j` of the encoded image.
    Encoded(usize),
    /// Library record id.
    Id(usize),
}

struct Session {
    encoded: Vec<Vec<f64>>,
    current: Vec<SessionSlot>,
    touched: Instant,
}

pub struct AppState {
    model: AnyModel,
    library: ConceptLibrary,
    model_hash: String,
    library_hash: String,
    image_size: usize,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Session>>,
}

impl AppState {
    /// Fails with `Mismatch` when the library was not built from `model`.
    pub fn new(
        model: AnyModel,
        model_hash: String,
        image_size: usize,
        library: ConceptLibrary,
        cfg: ServiceConfig,
    ) -> slotgen_core::Result<AppState> {
        library.check_compatible(&model_hash, model.slot_dim(), model.num_slots())?;
        let library_hash = hex(&Sha256::digest(serde_json::to_vec(&library)?));
        Ok(AppState {
            model,
            library,
            model_hash,
            library_hash,
            image_size,
            cfg,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn library_hash(&self) -> &str {
        &self.library_hash
    }

    fn source_image(&self, source_image_id: usize) -> Result<Image, ApiError> {
        let p = self
            .library
            .source_path(source_image_id)
            .ok_or_else(|| ApiError::not_found(format!("source image {source_image_id}")))?;
        let path = if Path::new(p).is_absolute() { PathBuf::from(p) } else { self.cfg.image_root.join(p) };
        Image::load(&path, Some(self.image_size)).map_err(|e| ApiError::not_found(format!("source image unavailable: {e}")))
    }

    fn purge(&self, sessions: &mut HashMap<String, Session>) {
        let ttl = self.cfg.session_ttl;
        sessions.retain(|_, s| s.touched.elapsed() < ttl);
        while sessions.len() >= self.cfg.max_sessions.max(1) {
            let oldest = sessions.iter().min_by_key(|(_, s)| s.touched).map(|(k, _)| k.clone());
            match oldest {
                Some(k) => sessions.remove(&k),
                None => break,
            };
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/info", get(info))
        .route("/concepts", get(concepts))
        .route("/concepts/{k}/slots", get(cluster_slots))
        .route("/slots/{id}/thumbnail", get(slot_thumbnail))
        .route("/encode", post(encode))
        .route("/compose", post(compose))
        .route("/swap", post(swap))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Mismatch(_) => StatusCode::CONFLICT,
            Error::Invalid(_) | Error::Shape(_) | Error::Infeasible(_) | Error::Image { .. } | Error::Json(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn png_b64(img: &Image) -> String {
    B64.encode(img.to_png_bytes())
}

#[derive(Serialize, Deserialize)]
pub struct Info {
    pub model_hash: String,
    pub library_hash: String,
    pub decoder: String,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub image_size: usize,
    pub concepts: usize,
    pub positional: bool,
}

async fn info(State(s): State<Arc<AppState>>) -> Json<Info> {
    Json(Info {
        model_hash: s.model_hash.clone(),
        library_hash: s.library_hash.clone(),
        decoder: serde_json::to_value(s.model.kind()).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        num_slots: s.model.num_slots(),
        slot_dim: s.model.slot_dim(),
        image_size: s.image_size,
        concepts: s.library.clusters.len(),
        positional: s.library.header.regions.is_some(),
    })
}

#[derive(Serialize, Deserialize)]
pub struct ConceptSummary {
    pub index: usize,
    pub label: ClusterLabel,
    pub size: usize,
}

async fn concepts(State(s): State<Arc<AppState>>) -> Json<Vec<ConceptSummary>> {
    Json(
        s.library
            .clusters
            .iter()
            .enumerate()
            .map(|(index, c)| ConceptSummary {
                index,
                label: c.label.clone(),
                size: c.members.len(),
            })
            .collect(),
    )
}

#[derive(Deserialize)]
pub struct Page {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    50
}

#[derive(Serialize, Deserialize)]
pub struct SlotRef {
    pub id: usize,
    pub source_image_id: usize,
    pub slot_index: usize,
}

#[derive(Serialize, Deserialize)]
pub struct SlotPage {
    pub cluster: usize,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub slots: Vec<SlotRef>,
}

async fn cluster_slots(
    State(s): State<Arc<AppState>>,
    UrlPath(k): UrlPath<usize>,
    Query(page): Query<Page>,
) -> ApiResult<Json<SlotPage>> {
    let c = s.library.clusters.get(k).ok_or_else(|| ApiError::not_found(format!("concept {k}")))?;
    let limit = page.limit.clamp(1, 500);
    let slots = c
        .members
        .iter()
        .skip(page.offset)
        .take(limit)
        .map(|m| SlotRef {
            id: m.id,
            source_image_id: m.source_image_id,
            slot_index: m.slot_index,
        })
        .collect();
    Ok(Json(SlotPage {
        cluster: k,
        total: c.members.len(),
        offset: page.offset,
        limit,
        slots,
    }))
}

async fn slot_thumbnail(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<usize>) -> ApiResult<Response> {
    blocking(move || {
        let r = s.library.record(id).ok_or_else(|| ApiError::not_found(format!("slot {id}")))?;
        let img = thumbnail(&s.source_image(r.source_image_id)?, &r.attention)?;
        Ok(([(header::CONTENT_TYPE, "image/png")], img.to_png_bytes()).into_response())
    })
    .await
}

#[derive(Serialize, Deserialize)]
pub struct EncodeRequest {
    /// Base64 PNG; resized (nearest) to the model size when it differs.
    pub image: String,
}

#[derive(Serialize, Deserialize)]
pub struct EncodedSlot {
    pub index: usize,
    /// Concept whose centroid is nearest in cosine similarity.
    pub nearest_concept: Option<usize>,
    pub thumbnail: String,
}

#[derive(Serialize, Deserialize)]
pub struct EncodeResponse {
    pub session: String,
    pub slots: Vec<EncodedSlot>,
    /// Greedy render of the unedited slots.
    pub image: String,
}

fn decode_image(b64: &str, size: usize) -> ApiResult<Image> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?;
    let img = Image::from_png_bytes(&bytes)?;
    Ok(if img.height() != size || img.width() != size { img.resize_nearest(size, size) } else { img })
}

fn nearest_concept(lib: &ConceptLibrary, v: &[f64]) -> Option<usize> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return None;
    }
    let score = |c: &[f64]| c.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / n;
    (0..lib.clusters.len()).max_by(|&a, &b| score(&lib.clusters[a].centroid).total_cmp(&score(&lib.clusters[b].centroid)))
}

fn render(s: &AppState, slots: Vec<Vec<f64>>, sampling: Option<&SamplingRequest>) -> ApiResult<Image> {
    let mut rng = RandomSource::seed(sampling.map_or(0, |x| x.seed));
    let out = match (&s.model, sampling) {
        (AnyModel::Slot2Seq(m), Some(x)) => {
            if !(x.temperature > 0.0) {
                return Err(ApiError::bad_request("sampling temperature must be positive"));
            }
            slotgen_core::tensor::no_grad(|| m.render(&[slots], Sampling::Sample { temperature: x.temperature }, &mut rng))?
        }
        _ => s.model.render(&[slots], &mut rng)?,
    };
    out.into_iter().next().ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "empty render"))
}

async fn encode(State(s): State<Arc<AppState>>, Json(req): Json<EncodeRequest>) -> ApiResult<Json<EncodeResponse>> {
    blocking(move || {
        let img = decode_image(&req.image, s.image_size)?;
        // fixed slot-initialization stream: the same upload encodes identically
        let set = s.model.encode(std::slice::from_ref(&img), &mut RandomSource::seed(0))?;
        let vectors = set.vectors(0);
        let maps = set.maps(0);
        let slots = vectors
            .iter()
            .zip(&maps)
            .enumerate()
            .map(|(index, (v, a))| {
                Ok(EncodedSlot {
                    index,
                    nearest_concept: nearest_concept(&s.library, v),
                    thumbnail: png_b64(&thumbnail(&img, a)?),
                })
            })
            .collect::<ApiResult<Vec<_>>>()?;
        let image = png_b64(&render(&s, vectors.clone(), None)?);
        let id = uuid::Uuid::new_v4().to_string();
        let mut sessions = s.sessions.lock().expect("session lock");
        s.purge(&mut sessions);
        sessions.insert(
            id.clone(),
            Session {
                current: (0..vectors.len()).map(SessionSlot::Encoded).collect(),
                encoded: vectors,
                touched: Instant::now(),
            },
        );
        Ok(Json(EncodeResponse {
            session: id,
            slots,
            image,
        }))
    })
    .await
}

/// One prompt position: a record id, a region (random member of the
/// region's cluster), or both (the record must lie in that region).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComposeSlot {
    Id(usize),
    Bound {
        #[serde(default)]
        id: Option<usize>,
        #[serde(default)]
        region: Option<usize>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplingRequest {
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComposeRequest {
    pub slots: Vec<ComposeSlot>,
    /// Fill missing positions with background slots of one source image.
    #[serde(default)]
    pub pad: bool,
    /// Seed for padding and region-member draws.
    #[serde(default)]
    pub seed: u64,
    /// Greedy decoding unless given.
    #[serde(default)]
    pub sampling: Option<SamplingRequest>,
    /// Hashes the client expects; a difference answers 409.
    #[serde(default)]
    pub model_hash: Option<String>,
    #[serde(default)]
    pub library_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct ComposeResponse {
    pub image: String,
    pub width: usize,
    pub height: usize,
    /// Record ids in prompt order, padding included.
    pub slots: Vec<usize>,
    pub padded: usize,
}

fn resolve_slot(lib: &ConceptLibrary, slot: &ComposeSlot, rng: &mut RandomSource) -> ApiResult<usize> {
    let (id, region) = match *slot {
        ComposeSlot::Id(id) => (Some(id), None),
        ComposeSlot::Bound { id, region } => (id, region),
    };
    let Some(region) = region else {
        return id.ok_or_else(|| ApiError::bad_request("slot needs an id or a region"));
    };
    let regions = lib
        .header
        .regions
        .as_ref()
        .ok_or_else(|| ApiError::bad_request("region bindings need a positional library"))?;
    if region >= regions.masks.len() {
        return Err(ApiError::not_found(format!("region {region}")));
    }
    let cluster = lib.region_cluster(region).ok_or_else(|| ApiError::not_found(format!("no slots in region {region}")))?;
    match id {
        Some(id) => {
            if lib.record(id).is_none() {
                return Err(ApiError::not_found(format!("slot {id}")));
            }
            if lib.cluster_of(id) != Some(cluster) {
                return Err(ApiError::bad_request(format!("slot {id} is not in region {region}")));
            }
            Ok(id)
        }
        None => {
            let members = &lib.clusters[cluster].members;
            Ok(members[rng.below(members.len())].id)
        }
    }
}

async fn compose(State(s): State<Arc<AppState>>, Json(req): Json<ComposeRequest>) -> ApiResult<Json<ComposeResponse>> {
    if req.model_hash.as_deref().is_some_and(|h| h != s.model_hash)
        || req.library_hash.as_deref().is_some_and(|h| h != s.library_hash)
    {
        return Err(ApiError::new(StatusCode::CONFLICT, "library or checkpoint differs from the loaded one"));
    }
    blocking(move || {
        let mut rng = RandomSource::seed(req.seed);
        let ids = req
            .slots
            .iter()
            .map(|x| resolve_slot(&s.library, x, &mut rng))
            .collect::<ApiResult<Vec<_>>>()?;
        let padding = if req.pad { Padding::Background } else { Padding::Disabled };
        let prompt: SlotPrompt = s.library.prompt_from_ids(&ids, padding, &mut rng)?;
        let padded = prompt.sources.iter().filter(|x| matches!(x, PromptSource::Padding { .. })).count();
        let slots = prompt.record_ids();
        let img = render(&s, prompt.slots, req.sampling.as_ref())?;
        Ok(Json(ComposeResponse {
            image: png_b64(&img),
            width: img.width(),
            height: img.height(),
            slots,
            padded,
        }))
    })
    .await
}

#[derive(Serialize, Deserialize)]
pub struct SwapRequest {
    pub session: String,
    pub index: usize,
    pub replacement: SessionSlot,
}

#[derive(Serialize, Deserialize)]
pub struct SwapResponse {
    pub image: String,
    pub slots: Vec<SessionSlot>,
}

async fn swap(State(s): State<Arc<AppState>>, Json(req): Json<SwapRequest>) -> ApiResult<Json<SwapResponse>> {
    blocking(move || {
        let (vectors, current) = {
            let mut sessions = s.sessions.lock().expect("session lock");
            let ttl = s.cfg.session_ttl;
            sessions.retain(|_, x| x.touched.elapsed() < ttl);
            let sess = sessions
                .get_mut(&req.session)
                .ok_or_else(|| ApiError::not_found(format!("session {}", req.session)))?;
            if req.index >= sess.current.len() {
                return Err(ApiError::bad_request(format!(
                    "slot index {} out of range (N = {})",
                    req.index,
                    sess.current.len()
                )));
            }
            match req.replacement {
                SessionSlot::Encoded(j) if j >= sess.encoded.len() => {
                    return Err(ApiError::not_found(format!("encoded slot {j}")))
                }
                SessionSlot::Id(id) if s.library.record(id).is_none() => {
                    return Err(ApiError::not_found(format!("slot {id}")))
                }
                _ => {}
            }
            sess.current[req.index] = req.replacement;
            sess.touched = Instant::now();
            let vectors: Vec<Vec<f64>> = sess
                .current
                .iter()
                .map(|x| match *x {
                    SessionSlot::Encoded(j) => sess.encoded[j].clone(),
                    SessionSlot::Id(id) => s.library.record(id).expect("checked").vector.clone(),
                })
                .collect();
            (vectors, sess.current.clone())
        };
        let img = render(&s, vectors, None)?;
        Ok(Json(SwapResponse {
            image: png_b64(&img),
            slots: current,
        }))
    })
    .await
}
