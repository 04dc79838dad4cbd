//! HTTP contract of the inference service, driven through `tower::oneshot`.

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use retinalizer::nn::{Model, ModelConfig};
use retinalizer::palette::{encode_labels, Palette};
use retinalizer::phantom::{build_phantom_corpus, PhantomConfig};
use retinalizer::service::{encode_payload, router, LoadedModel, ServiceConfig, ServiceState};
use retinalizer::tasks::{enumerate_tasks, Corpus, TaskConfig, TaskDescriptor};
use retinalizer::{Image, LabelMap};

const SIDE: usize = 32;

fn model() -> LoadedModel {
    LoadedModel {
        id: "test".into(),
        model: Model::new(ModelConfig {
            levels: 1,
            base_channels: 4,
            image_size: SIDE,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap(),
    }
}

struct Mounted {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    tasks: Vec<TaskDescriptor>,
}

fn mounted() -> &'static Mounted {
    static M: OnceLock<Mounted> = OnceLock::new();
    M.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut data = PhantomConfig {
            image_size: SIDE,
            ..PhantomConfig::default()
        };
        for d in &mut data.datasets {
            d.count = 12;
        }
        build_phantom_corpus(&data, dir.path(), 0).unwrap();
        let corpus = Corpus::load_dir(dir.path()).unwrap();
        let tasks = enumerate_tasks(&corpus.manifests(), &TaskConfig::default()).unwrap();
        Mounted {
            _dir: dir,
            corpus,
            tasks,
        }
    })
}

fn app(loaded: bool) -> Router {
    let m = mounted();
    let state = ServiceState::new(
        ServiceConfig::default(),
        Some(m.corpus.clone()),
        m.tasks.clone(),
    );
    if loaded {
        state.install_model(model()).unwrap();
    }
    router(Arc::new(state))
}

async fn call(app: Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

async fn get(app: Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn infer(app: Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/infer")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

fn image(rng: &mut ChaCha8Rng) -> Image {
    Image::from_vec(
        SIDE,
        SIDE,
        (0..SIDE * SIDE * 3).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

fn body(pairs: &[(Image, Image)], query: &Image) -> Value {
    json!({
        "context": pairs.iter().map(|(i, o)| json!({
            "input": encode_payload(i).unwrap(),
            "output": encode_payload(o).unwrap(),
        })).collect::<Vec<_>>(),
        "query": encode_payload(query).unwrap(),
    })
}

fn pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<(Image, Image)> {
    (0..n).map(|_| (image(rng), image(rng))).collect()
}

#[tokio::test]
async fn health_reports_loading_then_ready() {
    let (s, v) = get(app(false), "/api/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "loading");
    let (_, v) = get(app(true), "/api/health").await;
    assert_eq!(v["status"], "ready");
    assert_eq!(v["model_id"], "test");
}

#[tokio::test]
async fn infer_before_load_is_503() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (s, _) = infer(app(false), body(&pairs(2, &mut rng), &image(&mut rng))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn task_listing_has_seen_and_unseen_tasks() {
    let (s, v) = get(app(true), "/api/tasks").await;
    assert_eq!(s, StatusCode::OK);
    let list = v.as_array().unwrap();
    let seen = list.iter().filter(|t| t["seen"] == true).count();
    assert_eq!(seen, 23);
    assert_eq!(list.len() - seen, TaskConfig::default().unseen.len());
}

#[tokio::test]
async fn samples_respect_limit_and_unknown_dataset() {
    let (s, v) = get(app(true), "/api/samples?dataset=PD-DME&split=train&limit=5").await;
    assert_eq!(s, StatusCode::OK);
    let samples = v["samples"].as_array().unwrap();
    assert!(samples.len() <= 5 && !samples.is_empty());
    assert!(samples[0]["name"].as_str().unwrap().starts_with("PD-DME/"));
    let (s, _) = get(app(true), "/api/samples?dataset=NOPE").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = get(
        app(true),
        "/api/samples?dataset=PD-DME&limit=2&task=PD-DME:segmentation",
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    for item in v["samples"].as_array().unwrap() {
        let out = B64.decode(item["output"].as_str().unwrap()).unwrap();
        assert_eq!(Image::decode_png(&out).unwrap().dims(), (SIDE, SIDE));
    }
}

#[tokio::test]
async fn prediction_matches_query_size_and_ignores_context_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ps = pairs(6, &mut rng);
    let q = image(&mut rng);
    let (s, a) = infer(app(true), body(&ps, &q)).await;
    assert_eq!(s, StatusCode::OK);
    let pred = Image::decode_png(&B64.decode(a["prediction"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(pred.dims(), q.dims());
    let mut shuffled = ps.clone();
    shuffled.reverse();
    shuffled.swap(0, 3);
    let (_, b) = infer(app(true), body(&shuffled, &q)).await;
    assert_eq!(a["prediction"], b["prediction"]);
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let req = body(&pairs(3, &mut rng), &image(&mut rng));
    let shared = app(true);
    let handles: Vec<_> = (0..4)
        .map(|_| tokio::spawn(infer(shared.clone(), req.clone())))
        .collect();
    let mut outs = Vec::new();
    for h in handles {
        outs.push(h.await.unwrap().1["prediction"].clone());
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn error_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = image(&mut rng);
    let (s, _) = infer(app(true), body(&[], &q)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = infer(app(true), body(&pairs(9, &mut rng), &q)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = infer(
        app(true),
        json!({"context": [{"input": "!!", "output": "!!"}], "query": "!!"}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["status"], 400);
    let (s, _) = infer(app(true), json!({"query": 3})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let big = Image::zeros(600, 600);
    let (s, _) = infer(app(true), body(&[(big.clone(), big.clone())], &big)).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    // Consistent sizes that the model cannot take.
    let other = Image::zeros(16, 16);
    let (s, _) = infer(app(true), body(&[(other.clone(), other.clone())], &other)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn decode_returns_labels_and_palette() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let palette = Palette::try_from(vec![[0, 0, 0, 0], [1, 255, 0, 0], [2, 0, 0, 255]]).unwrap();
    let ctx: Vec<(Image, Image)> = (0..3)
        .map(|i| {
            let mut labels = LabelMap::zeros(SIDE, SIDE);
            for x in 0..SIDE {
                labels.set(x, 4 + i, 1);
                labels.set(x, 20 + i, 2);
            }
            (image(&mut rng), encode_labels(&labels, &palette).unwrap())
        })
        .collect();
    let mut req = body(&ctx, &image(&mut rng));
    req["decode"] = json!(true);
    let (s, v) = infer(app(true), req.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let got: Palette = serde_json::from_value(v["palette"].clone()).unwrap();
    assert_eq!(got.len(), 3);
    let labels =
        LabelMap::decode_png(&B64.decode(v["labelmap"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(labels.dims(), (SIDE, SIDE));
    assert!(labels
        .unique_ids()
        .iter()
        .all(|id| got.color_of(*id).is_some()));

    req["palette"] = serde_json::to_value(&palette).unwrap();
    let (_, v) = infer(app(true), req).await;
    let got: Palette = serde_json::from_value(v["palette"].clone()).unwrap();
    assert_eq!(got, palette);
}
