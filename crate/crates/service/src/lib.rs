//! HTTP JSON API over a single trained checkpoint.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use svae_core::attribution::{explain_with_seed, AttributionTarget, Method, TargetSpec};
use svae_core::data::Dataset;
use svae_core::distributions::argmax;
use svae_core::invariance::{
    counterfactual, explore_grid, generate_invariant, generate_with_z2, InvariantOptions, COUNTERFACTUAL_MAX_ITERS,
    COUNTERFACTUAL_STEP,
};
use svae_core::models::{Model, SvaeModel};
use svae_core::training::{Checkpoint, TrainConfig};
use tower_http::cors::CorsLayer;

mod error;

pub use error::ApiError;
use error::bad_request;

/// Largest grid radius served; a radius of 10 is already 441 images.
pub const MAX_GRID_RADIUS: usize = 10;

/// The loaded model plus the optional datasets it serves from.
pub struct Snapshot {
    model: SvaeModel,
    config: TrainConfig,
    image_shape: (usize, usize),
    epoch: usize,
    /// Pool of GradientShap baselines.
    train: Option<Dataset>,
    /// Images offered by `/api/dataset/sample`.
    test: Option<Dataset>,
}

impl Snapshot {
    pub fn new(checkpoint: Checkpoint, train: Option<Dataset>, test: Option<Dataset>) -> Result<Self, ApiError> {
        let (config, image_shape, epoch) = (checkpoint.config.clone(), checkpoint.image_shape, checkpoint.epoch);
        let model = match checkpoint.into_model()? {
            Model::Svae(m) => m,
            Model::Semivae(_) => {
                return Err(svae_core::Error::Config("the service needs an svae checkpoint".into()).into());
            }
        };
        for d in train.iter().chain(&test) {
            if d.input_dim() != model.input_dim() || d.num_classes() != model.num_classes() {
                return Err(svae_core::Error::Config(format!(
                    "dataset has {} pixels and {} classes, model expects {} and {}",
                    d.input_dim(),
                    d.num_classes(),
                    model.input_dim(),
                    model.num_classes()
                ))
                .into());
            }
        }
        Ok(Snapshot {
            model,
            config,
            image_shape,
            epoch,
            train,
            test,
        })
    }

    pub fn model(&self) -> &SvaeModel {
        &self.model
    }
}

struct AppState {
    snapshot: Snapshot,
    next_seed: AtomicU64,
}

impl AppState {
    fn seed(&self, requested: Option<u64>) -> u64 {
        requested.unwrap_or_else(|| self.next_seed.fetch_add(1, Ordering::Relaxed))
    }
}

type Shared = Arc<AppState>;

pub fn router(snapshot: Snapshot) -> Router {
    let state = Arc::new(AppState {
        snapshot,
        next_seed: AtomicU64::new(0),
    });
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/dataset/sample", get(dataset_sample))
        .route("/api/encode", post(encode))
        .route("/api/generate", post(generate))
        .route("/api/grid", post(grid))
        .route("/api/attribute", post(attribute))
        .route("/api/counterfactual", post(counterfactual_handler))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(snapshot: Snapshot, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(snapshot)).await
}

/// JSON body parsing that reports every malformed request as 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid request body: {e}")))
}

/// Runs model work off the async executor.
async fn blocking<T, F>(state: Shared, f: F) -> Result<Json<T>, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::Join(e.to_string()))?
        .map(Json)
}

/// A real number that may also arrive as a string such as `"NaN"` or
/// `"Infinity"`, which plain JSON numbers cannot express.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum Real {
    Number(f64),
    Text(String),
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(transparent)]
struct Reals(Vec<Real>);

impl Reals {
    fn finite(&self, field: &str) -> Result<Vec<f64>, ApiError> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v = match r {
                    Real::Number(v) => *v,
                    Real::Text(s) => s
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| bad_request(format!("{field}[{i}]: {s:?} is not a number")))?,
                };
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(ApiError::NonFinite(format!("{field}[{i}] is not finite")))
                }
            })
            .collect()
    }
}

fn image_arg(snapshot: &Snapshot, field: &str, reals: &Reals) -> Result<Vec<f64>, ApiError> {
    let x = reals.finite(field)?;
    let p = snapshot.model.input_dim();
    if x.len() != p {
        return Err(bad_request(format!("{field} has {} values, expected {p}", x.len())));
    }
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(bad_request(format!("{field} value {v} outside [0, 1]")));
    }
    Ok(x)
}

#[derive(Serialize)]
struct Split {
    d1: usize,
    d2: usize,
}

#[derive(Serialize)]
struct DatasetInfo {
    train: usize,
    test: usize,
}

#[derive(Serialize)]
struct ModelInfo {
    kind: &'static str,
    input_dim: usize,
    num_classes: usize,
    image_shape: [usize; 2],
    split: Split,
    epoch: usize,
    config: TrainConfig,
    dataset: DatasetInfo,
}

async fn model_info(State(state): State<Shared>) -> Json<ModelInfo> {
    let s = &state.snapshot;
    Json(ModelInfo {
        kind: "svae",
        input_dim: s.model.input_dim(),
        num_classes: s.model.num_classes(),
        image_shape: [s.image_shape.0, s.image_shape.1],
        split: Split {
            d1: s.model.d1(),
            d2: s.model.d2(),
        },
        epoch: s.epoch,
        config: s.config.clone(),
        dataset: DatasetInfo {
            train: s.train.as_ref().map_or(0, Dataset::len),
            test: s.test.as_ref().map_or(0, Dataset::len),
        },
    })
}

#[derive(Deserialize)]
struct SampleQuery {
    index: usize,
}

#[derive(Serialize)]
struct Sample {
    index: usize,
    label: usize,
    image_shape: [usize; 2],
    image: Vec<f64>,
}

async fn dataset_sample(State(state): State<Shared>, Query(q): Query<SampleQuery>) -> Result<Json<Sample>, ApiError> {
    let test = state
        .snapshot
        .test
        .as_ref()
        .ok_or_else(|| ApiError::NotFound("no dataset loaded".into()))?;
    if q.index >= test.len() {
        return Err(bad_request(format!("index {} out of range for {} images", q.index, test.len())));
    }
    let (h, w) = test.image_shape();
    Ok(Json(Sample {
        index: q.index,
        label: test.label(q.index),
        image_shape: [h, w],
        image: test.image(q.index).to_vec(),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodeRequest {
    image: Reals,
    seed: Option<u64>,
    samples: Option<usize>,
}

#[derive(Serialize)]
struct EncodeResponse {
    z1_mean: Vec<f64>,
    z1_std: Vec<f64>,
    z2_mean: Vec<f64>,
    z2_std: Vec<f64>,
    probs: Vec<f64>,
    predicted_class: usize,
    seed: u64,
}

async fn encode(State(state): State<Shared>, body: Bytes) -> Result<Json<EncodeResponse>, ApiError> {
    let req: EncodeRequest = parse(&body)?;
    blocking(state, move |st| {
        let s = &st.snapshot;
        let x = image_arg(s, "image", &req.image)?;
        let seed = st.seed(req.seed);
        let samples = req.samples.unwrap_or(s.config.eval_samples);
        let q = s.model.encode_x(&x)?;
        let d1 = s.model.d1();
        let probs = s.model.classify(&x, samples, &mut ChaCha8Rng::seed_from_u64(seed))?.probs();
        Ok(EncodeResponse {
            z1_mean: q.mean()[..d1].to_vec(),
            z1_std: q.std()[..d1].to_vec(),
            z2_mean: q.mean()[d1..].to_vec(),
            z2_std: q.std()[d1..].to_vec(),
            predicted_class: argmax(&probs),
            probs,
            seed,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    image: Reals,
    sigma: Option<Real>,
    z2_override: Option<Reals>,
    seed: Option<u64>,
    #[serde(default)]
    keep_class: bool,
}

#[derive(Serialize)]
struct GenerateResponse {
    image: Vec<f64>,
    probs: Vec<f64>,
    predicted_class: usize,
    z2_used: Vec<f64>,
    seed: u64,
}

async fn generate(State(state): State<Shared>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req: GenerateRequest = parse(&body)?;
    blocking(state, move |st| {
        let s = &st.snapshot;
        let x = image_arg(s, "image", &req.image)?;
        let seed = st.seed(req.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = InvariantOptions {
            classify_samples: s.config.eval_samples,
            keep_class: req.keep_class,
            ..InvariantOptions::default()
        };
        let (image, probs, z2_used) = match (req.sigma, req.z2_override) {
            (Some(sigma), None) => {
                let sigma = Reals(vec![sigma]).finite("sigma")?[0];
                let sample = generate_invariant(&s.model, &x, sigma, &opts, &mut rng)?;
                (sample.transformed, sample.transformed_probs, sample.z2_used)
            }
            (None, Some(z2)) => {
                let z2 = z2.finite("z2_override")?;
                if z2.len() != s.model.d2() {
                    return Err(bad_request(format!(
                        "z2_override has {} values, expected {}",
                        z2.len(),
                        s.model.d2()
                    )));
                }
                let image = generate_with_z2(&s.model, &x, &z2)?;
                let probs = s.model.classify(&image, opts.classify_samples, &mut rng)?.probs();
                (image, probs, z2)
            }
            _ => return Err(bad_request("give exactly one of sigma and z2_override")),
        };
        Ok(GenerateResponse {
            image,
            predicted_class: argmax(&probs),
            probs,
            z2_used,
            seed,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRequest {
    image: Reals,
    dims: [usize; 2],
    step: f64,
    radius: usize,
}

#[derive(Serialize)]
struct GridResponse {
    side: usize,
    dims: [usize; 2],
    step: f64,
    radius: usize,
    /// Row `a + radius`, column `b + radius` holds the offset `(a, b)·step`.
    images: Vec<Vec<f64>>,
    codes: Vec<Vec<f64>>,
}

async fn grid(State(state): State<Shared>, body: Bytes) -> Result<Json<GridResponse>, ApiError> {
    let req: GridRequest = parse(&body)?;
    if req.radius > MAX_GRID_RADIUS {
        return Err(bad_request(format!("radius {} exceeds {MAX_GRID_RADIUS}", req.radius)));
    }
    blocking(state, move |st| {
        let s = &st.snapshot;
        let x = image_arg(s, "image", &req.image)?;
        let g = explore_grid(&s.model, &x, req.dims[0], req.dims[1], req.step, req.radius)?;
        Ok(GridResponse {
            side: g.side(),
            dims: req.dims,
            step: req.step,
            radius: req.radius,
            images: g.images,
            codes: g.codes,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeRequest {
    image: Reals,
    method: String,
    target: String,
    class: Option<usize>,
    k: Option<usize>,
    ref_image: Option<Reals>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct AttributeResponse {
    attributions: Vec<f64>,
    method: String,
    target: String,
    seed: u64,
}

async fn attribute(State(state): State<Shared>, body: Bytes) -> Result<Json<AttributeResponse>, ApiError> {
    let req: AttributeRequest = parse(&body)?;
    let method: Method = req.method.parse().map_err(|e: svae_core::Error| bad_request(e.to_string()))?;
    blocking(state, move |st| {
        let s = &st.snapshot;
        let x = image_arg(s, "image", &req.image)?;
        let target = match req.target.as_str() {
            "classifier" => AttributionTarget::Classifier {
                class: req.class.ok_or_else(|| bad_request("classifier target needs class"))?,
            },
            "divergence" => {
                let k = req.k.ok_or_else(|| bad_request("divergence target needs k"))?;
                let r = req
                    .ref_image
                    .as_ref()
                    .ok_or_else(|| bad_request("divergence target needs ref_image"))?;
                AttributionTarget::Divergence {
                    k,
                    reference: image_arg(s, "ref_image", r)?,
                }
            }
            other => {
                return Err(bad_request(format!(
                    "unknown target {other:?} (expected classifier or divergence)"
                )))
            }
        };
        let spec: TargetSpec = target.spec();
        let seed = st.seed(req.seed);
        let map = explain_with_seed(&s.model, &x, method, target, s.train.as_ref(), seed)?;
        Ok(AttributeResponse {
            attributions: map.values,
            method: method.to_string(),
            target: spec.to_string(),
            seed,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CounterfactualRequest {
    image: Reals,
    target_class: usize,
    max_iters: Option<usize>,
    step_size: Option<f64>,
}

#[derive(Serialize)]
struct CounterfactualResponse {
    image: Vec<f64>,
    probs: Vec<f64>,
    probability: f64,
    converged: bool,
    iterations: usize,
    z: Vec<f64>,
}

async fn counterfactual_handler(
    State(state): State<Shared>,
    body: Bytes,
) -> Result<Json<CounterfactualResponse>, ApiError> {
    let req: CounterfactualRequest = parse(&body)?;
    blocking(state, move |st| {
        let s = &st.snapshot;
        let x = image_arg(s, "image", &req.image)?;
        let cf = counterfactual(
            &s.model,
            &x,
            req.target_class,
            req.max_iters.unwrap_or(COUNTERFACTUAL_MAX_ITERS),
            req.step_size.unwrap_or(COUNTERFACTUAL_STEP),
        )?;
        Ok(CounterfactualResponse {
            image: cf.image,
            probs: cf.probs,
            probability: cf.probability,
            converged: cf.converged,
            iterations: cf.iterations,
            z: cf.z,
        })
    })
    .await
}
