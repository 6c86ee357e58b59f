use std::sync::OnceLock;

use axum::body::{Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use svae_core::attribution::{explain_with_seed, integrated_gradients, AttributionTarget, Method, ScalarField};
use svae_core::data::{synth_toy_dataset, Dataset};
use svae_core::invariance::render;
use svae_core::mlp::Activation;
use svae_core::models::{Architecture, LatentSplit, Model, ModelKind};
use svae_core::training::{evaluate, train, Checkpoint, TrainConfig};
use svae_service::{router, Snapshot};
use tower::ServiceExt;

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model_kind: ModelKind::Svae,
        beta: 0.9,
        alpha: 50.0,
        learning_rate: 1e-3,
        batch_size: 32,
        epochs,
        seed: 11,
        split: LatentSplit::new(4, 3).unwrap(),
        architecture: Architecture {
            encoder_hidden: vec![64, 32],
            decoder_hidden: vec![32, 64],
            classifier_hidden: vec![16],
            hidden_activation: Activation::Softplus,
        },
        eval_samples: 16,
    }
}

struct Fixture {
    checkpoint: Checkpoint,
    train: Dataset,
    test: Dataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let train_set = synth_toy_dataset(1, 400, 4, (8, 8)).unwrap();
        Fixture {
            checkpoint: train(&toy_config(30), &train_set, None).unwrap(),
            train: train_set,
            test: synth_toy_dataset(2, 50, 4, (8, 8)).unwrap(),
        }
    })
}

fn app() -> Router {
    let f = fixture();
    router(Snapshot::new(f.checkpoint.clone(), Some(f.train.clone()), Some(f.test.clone())).unwrap())
}

fn svae(ck: &Checkpoint) -> svae_core::models::SvaeModel {
    match ck.to_model().unwrap() {
        Model::Svae(m) => m,
        Model::Semivae(_) => unreachable!(),
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Bytes) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn post_raw(app: &Router, uri: &str, body: String) -> (StatusCode, Bytes) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    send(app, req).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (status, bytes) = post_raw(app, uri, body.to_string()).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, bytes) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn image(i: usize) -> Vec<f64> {
    fixture().test.image(i).to_vec()
}

#[tokio::test]
async fn model_metadata_matches_checkpoint() {
    let app = app();
    let (status, v) = get(&app, "/api/model").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["kind"], "svae");
    assert_eq!(v["input_dim"], 64);
    assert_eq!(v["num_classes"], 4);
    assert_eq!(v["image_shape"], json!([8, 8]));
    assert_eq!(v["split"], json!({"d1": 4, "d2": 3}));
    assert_eq!(v["epoch"], 30);
    assert_eq!(v["dataset"], json!({"train": 1600, "test": 200}));
    let echoed: TrainConfig = serde_json::from_value(v["config"].clone()).unwrap();
    assert_eq!(echoed, fixture().checkpoint.config);
}

#[tokio::test]
async fn dataset_samples() {
    let app = app();
    let (status, v) = get(&app, "/api/dataset/sample?index=7").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(floats(&v["image"]), image(7));
    assert_eq!(v["label"], fixture().test.label(7));
    assert_eq!(get(&app, "/api/dataset/sample?index=200").await.0, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, Request::get("/api/dataset/sample").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let bare = router(Snapshot::new(fixture().checkpoint.clone(), None, None).unwrap());
    assert_eq!(get(&bare, "/api/dataset/sample?index=0").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn encode_matches_the_model() {
    let app = app();
    let m = svae(&fixture().checkpoint);
    let x = image(3);
    let (status, v) = post(&app, "/api/encode", json!({"image": x, "seed": 5})).await;
    assert_eq!(status, StatusCode::OK);
    let q = m.encode_x(&x).unwrap();
    // responses carry every bit of the values
    assert_eq!(floats(&v["z1_mean"]), q.mean()[..4]);
    assert_eq!(floats(&v["z2_mean"]), q.mean()[4..]);
    assert_eq!(floats(&v["z1_std"]), q.std()[..4]);
    assert_eq!(floats(&v["z2_std"]), q.std()[4..]);
    let probs = floats(&v["probs"]);
    assert_eq!(probs.len(), 4);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let want = m.classify(&x, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().probs();
    assert_eq!(probs, want);
}

#[tokio::test]
async fn encode_agrees_with_evaluation() {
    let app = app();
    let f = fixture();
    let cfg = &f.checkpoint.config;
    let eval = evaluate(&f.checkpoint.to_model().unwrap(), cfg, &f.test, 16, 0).unwrap();
    for i in 0..f.test.len() {
        let (_, v) = post(&app, "/api/encode", json!({"image": image(i)})).await;
        assert_eq!(v["predicted_class"], eval.predictions[i], "image {i}");
    }
}

#[tokio::test]
async fn zero_init_model_gives_uniform_probabilities() {
    let mut ck = train(&toy_config(0), &fixture().train, None).unwrap();
    let mut model = ck.to_model().unwrap();
    model.zero_output_layers();
    ck.params = model.params().clone();
    let app = router(Snapshot::new(ck, None, None).unwrap());
    let (_, v) = post(&app, "/api/encode", json!({"image": vec![0.5; 64]})).await;
    assert!(floats(&v["probs"]).iter().all(|p| (p - 0.25).abs() < 1e-12));

    // a constant classifier has an all-zero attribution map
    for method in ["saliency", "ixg", "ig", "gradshap"] {
        let body = json!({"image": image(0), "method": method, "target": "classifier", "class": 1, "seed": 1});
        let (status, v) = post(&app, "/api/attribute", body).await;
        assert_eq!(status, StatusCode::OK);
        assert!(floats(&v["attributions"]).iter().all(|&a| a == 0.0), "{method}");
    }
}

#[tokio::test]
async fn input_validation_status_codes() {
    let app = app();
    let mut x: Vec<Value> = image(0).into_iter().map(Value::from).collect();
    let cases = [
        (json!({"image": vec![0.5; 63]}), StatusCode::BAD_REQUEST),
        (json!({"image": vec![1.5; 64]}), StatusCode::BAD_REQUEST),
        (json!({"image": vec![-0.1; 64]}), StatusCode::BAD_REQUEST),
        (json!({}), StatusCode::BAD_REQUEST),
        (json!({"image": image(0), "extra": 1}), StatusCode::BAD_REQUEST),
    ];
    for (body, want) in cases {
        assert_eq!(post(&app, "/api/encode", body.clone()).await.0, want, "{body}");
    }
    for bad in ["NaN", "Infinity", "-Infinity", "inf"] {
        x[10] = Value::from(bad);
        let (status, v) = post(&app, "/api/encode", json!({ "image": x })).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
        assert!(v["error"].as_str().unwrap().contains("image[10]"));
    }
    x[10] = Value::from("0.25");
    assert_eq!(post(&app, "/api/encode", json!({ "image": x })).await.0, StatusCode::OK);
    x[10] = Value::from("dark");
    assert_eq!(post(&app, "/api/encode", json!({ "image": x })).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post_raw(&app, "/api/encode", "{not json".into()).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generate_semantics() {
    let app = app();
    let m = svae(&fixture().checkpoint);
    let x = image(4);
    let mean = m.encode_x(&x).unwrap().mean().to_vec();
    let recon = render(&m, &mean).unwrap();

    let (status, v) = post(&app, "/api/generate", json!({"image": x, "z2_override": mean[4..]})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(floats(&v["image"]), recon);
    assert_eq!(floats(&v["z2_used"]), mean[4..]);

    // σ → 0 draws z₂ ≈ 0, the decoder's view of the prior mean
    let at_zero = render(&m, &[&mean[..4], &[0.0; 3][..]].concat()).unwrap();
    let (_, v) = post(&app, "/api/generate", json!({"image": x, "sigma": 1e-8, "seed": 3})).await;
    let img = floats(&v["image"]);
    assert!(img.iter().zip(&at_zero).all(|(a, b)| (a - b).abs() < 1e-3));

    let body = json!({"image": x, "sigma": 1.0, "seed": 9}).to_string();
    let a = post_raw(&app, "/api/generate", body.clone()).await;
    let b = post_raw(&app, "/api/generate", body).await;
    assert_eq!(a, b);
    let c = post_raw(&app, "/api/generate", json!({"image": x, "sigma": 1.0, "seed": 10}).to_string()).await;
    assert_ne!(a.1, c.1);

    for body in [
        json!({"image": x}),
        json!({"image": x, "sigma": 1.0, "z2_override": [0.0, 0.0, 0.0]}),
        json!({"image": x, "z2_override": [0.0, 0.0]}),
        json!({"image": x, "sigma": -1.0}),
    ] {
        assert_eq!(post(&app, "/api/generate", body.clone()).await.0, StatusCode::BAD_REQUEST, "{body}");
    }
    let (status, _) = post(&app, "/api/generate", json!({"image": x, "sigma": "NaN"})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn server_counter_seeds_vary() {
    let app = app();
    let body = json!({"image": image(1), "sigma": 1.0});
    let (_, a) = post(&app, "/api/generate", body.clone()).await;
    let (_, b) = post(&app, "/api/generate", body).await;
    assert_ne!(a["seed"], b["seed"]);
    assert_ne!(a["z2_used"], b["z2_used"]);
}

#[tokio::test]
async fn grid_center_is_the_reconstruction() {
    let app = app();
    let x = image(5);
    let (status, g) = post(&app, "/api/grid", json!({"image": x, "dims": [0, 2], "step": 0.5, "radius": 2})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(g["side"], 5);
    let images = g["images"].as_array().unwrap();
    assert_eq!(images.len(), 25);
    let m = svae(&fixture().checkpoint);
    let mean = m.encode_x(&x).unwrap().mean().to_vec();
    let (_, r) = post(&app, "/api/generate", json!({"image": x, "z2_override": mean[4..]})).await;
    assert_eq!(floats(&images[12]), floats(&r["image"]));

    for body in [
        json!({"image": x, "dims": [0, 3], "step": 0.5, "radius": 2}),
        json!({"image": x, "dims": [1, 1], "step": 0.5, "radius": 2}),
        json!({"image": x, "dims": [0, 1], "step": 0.5, "radius": 11}),
        json!({"image": x, "dims": [0, 1], "step": 0.5}),
    ] {
        assert_eq!(post(&app, "/api/grid", body.clone()).await.0, StatusCode::BAD_REQUEST, "{body}");
    }
}

#[tokio::test]
async fn attribution_matches_the_library() {
    let app = app();
    let f = fixture();
    let m = svae(&f.checkpoint);
    let x = image(6);
    let r = image(9);
    for method in Method::ALL {
        let body = json!({"image": x, "method": method.to_string(), "target": "divergence", "k": 2, "ref_image": r, "seed": 4});
        let (status, v) = post(&app, "/api/attribute", body).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["target"], "divergence:k=2");
        let target = AttributionTarget::Divergence {
            k: 2,
            reference: r.clone(),
        };
        let want = explain_with_seed(&m, &x, method, target, Some(&f.train), 4).unwrap();
        assert_eq!(floats(&v["attributions"]), want.values, "{method}");
    }

    // completeness of the served integrated gradients
    let (_, v) = post(&app, "/api/attribute", json!({"image": x, "method": "ig", "target": "classifier", "class": 2})).await;
    let total: f64 = floats(&v["attributions"]).iter().sum();
    let target = svae_core::attribution::classifier_target(&m, 2).unwrap();
    let delta = target.value(&x).unwrap() - target.value(&[0.0; 64]).unwrap();
    assert!((total - delta).abs() <= 1e-2 * delta.abs() + 1e-4);
    assert_eq!(
        floats(&v["attributions"]),
        integrated_gradients(&target, &x, &[0.0; 64], 256).unwrap().values
    );

    // the divergence from an image to itself is identically zero
    let body = json!({"image": x, "method": "saliency", "target": "divergence", "k": 1, "ref_image": x});
    let (_, v) = post(&app, "/api/attribute", body).await;
    assert!(floats(&v["attributions"]).iter().all(|a| a.abs() < 1e-6));
}

#[tokio::test]
async fn attribution_request_errors() {
    let app = app();
    let x = image(0);
    for body in [
        json!({"image": x, "method": "ig", "target": "classifier"}),
        json!({"image": x, "method": "ig", "target": "classifier", "class": 4}),
        json!({"image": x, "method": "ig", "target": "divergence", "k": 1}),
        json!({"image": x, "method": "ig", "target": "divergence", "ref_image": x}),
        json!({"image": x, "method": "ig", "target": "divergence", "k": 3, "ref_image": x}),
        json!({"image": x, "method": "occlusion", "target": "classifier", "class": 0}),
        json!({"image": x, "method": "ig", "target": "logit", "class": 0}),
    ] {
        assert_eq!(post(&app, "/api/attribute", body.clone()).await.0, StatusCode::BAD_REQUEST, "{body}");
    }
}

#[tokio::test]
async fn counterfactuals() {
    let app = app();
    let f = fixture();
    let m = svae(&f.checkpoint);
    let x = image(0);
    let current = m.classify_code(m.encode_x(&x).unwrap().mean()).unwrap().argmax();
    let (_, v) = post(&app, "/api/counterfactual", json!({"image": x, "target_class": current})).await;
    assert!(v["iterations"].as_u64().unwrap() <= 1);
    assert_eq!(v["converged"], true);

    for target in 0..4 {
        let (status, v) = post(&app, "/api/counterfactual", json!({"image": x, "target_class": target})).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["converged"], true);
        let probs = floats(&v["probs"]);
        assert_eq!(svae_core::distributions::argmax(&probs), target);
        assert_eq!(floats(&v["image"]).len(), 64);
    }
    let (status, _) = post(&app, "/api/counterfactual", json!({"image": x, "target_class": 4})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let mut bad: Vec<Value> = x.iter().map(|&v| Value::from(v)).collect();
    bad[0] = Value::from("NaN");
    let (status, _) = post(&app, "/api/counterfactual", json!({"image": bad, "target_class": 1})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn replay_gives_identical_bodies() {
    let app = app();
    let x = image(2);
    let requests = [
        ("/api/encode", json!({"image": x, "seed": 1})),
        ("/api/grid", json!({"image": x, "dims": [0, 1], "step": 0.3, "radius": 1})),
        ("/api/attribute", json!({"image": x, "method": "gradshap", "target": "classifier", "class": 0, "seed": 8})),
        ("/api/counterfactual", json!({"image": x, "target_class": 3})),
    ];
    for (uri, body) in requests {
        let a = post_raw(&app, uri, body.to_string()).await;
        let b = post_raw(&app, uri, body.to_string()).await;
        assert_eq!(a.0, StatusCode::OK);
        assert_eq!(a, b, "{uri}");
    }
}

#[tokio::test]
async fn cors_headers_are_present() {
    let app = app();
    let req = Request::get("/api/model")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));

    let preflight = Request::options("/api/encode")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .header("access-control-request-headers", "content-type")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(preflight).await.unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers().contains_key("access-control-allow-methods"));
}

#[test]
fn semivae_checkpoints_are_rejected() {
    let mut cfg = toy_config(0);
    cfg.model_kind = ModelKind::Semivae;
    let ck = train(&cfg, &fixture().train, None).unwrap();
    assert!(Snapshot::new(ck, None, None).is_err());
}
