use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use iterseg::evolve::{evolve, AutoStop, EvolveOptions};
use iterseg::grid::{seed_to_map, Dims, Image, LabelMap, Seed};
use iterseg::segnet::{Model, NetConfig, NetMode};
use iterseg_serve::rle::{decode, encode};
use iterseg_serve::{router, AppState, ServerConfig, SessionSteps};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_model(seed: u64, stop_bias: Option<f64>) -> Model {
    let cfg = NetConfig {
        levels: 2,
        base_channels: 4,
        pool: 2,
        ..Default::default()
    };
    let mut m = Model::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
    if let Some(b) = stop_bias {
        m.params.value_mut("stop.b.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.params.value_mut("stop.b.b").unwrap().data_mut()[0] = b;
    }
    m
}

fn image(side: usize, seed: u64) -> Image {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side).map(|_| r.random_range(-1.0..1.0)).collect();
    Image::new(Dims::square(side), data).unwrap()
}

fn options() -> EvolveOptions {
    EvolveOptions {
        max_steps: 8,
        ..Default::default()
    }
}

fn state_with(models: Vec<(&str, Model)>, persist: Option<std::path::PathBuf>) -> AppState {
    let models: BTreeMap<String, Model> = models.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let default_model = models.keys().next().unwrap().clone();
    let app = AppState::new(ServerConfig {
        models,
        default_model,
        options: options(),
        persist_dir: persist,
        static_dir: None,
    })
    .unwrap();
    app.add_image("a", image(8, 1)).unwrap();
    app.add_image("b", image(8, 2)).unwrap();
    app
}

fn app() -> Router {
    router(state_with(vec![("default", tiny_model(5, None)), ("stopper", tiny_model(5, Some(50.0)))], None))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

fn steps(v: &Value) -> SessionSteps {
    serde_json::from_value(v.clone()).unwrap()
}

async fn create(app: &Router, image: &str, model: &str) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(json!({ "image": image, "seed": [4, 4], "model": model }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session"]["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn create_returns_the_seed_ball() {
    let app = app();
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "image": "a", "seed": [4, 4], "radius": 1 }))).await;
    assert_eq!(s, StatusCode::CREATED);
    let out = steps(&v);
    assert_eq!(out.session.step, 0);
    assert_eq!(out.steps.len(), 1);
    let ball = seed_to_map(&Seed::new(vec![4, 4], 1), &Dims::square(8)).unwrap();
    assert_eq!(decode(&out.steps[0].map).unwrap(), ball);
}

#[tokio::test]
async fn stepping_to_autostop_matches_evolve() {
    let app = app();
    let id = create(&app, "a", "default").await;
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "n": 100 }))).await;
    assert_eq!(s, StatusCode::OK);
    let stepped = steps(&v);
    let (_, h) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    let hist = steps(&h);
    let reference = evolve(&tiny_model(5, None), &image(8, 1), &Seed::new(vec![4, 4], 2), &options()).unwrap();
    assert_eq!(hist.steps.len(), reference.history().len());
    assert_eq!(stepped.steps.len(), reference.history().len() - 1);
    for (view, rec) in hist.steps.iter().zip(reference.history()) {
        assert_eq!(&decode(&view.map).unwrap(), &rec.map);
        assert_eq!(view.stop_prob, rec.stop_prob);
    }
    assert_eq!(hist.session.stop_probs, reference.stop_probs());
}

#[tokio::test]
async fn overrides_follow_evolve_semantics() {
    let app = app();
    let id = create(&app, "a", "stopper").await;
    let (_, v) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "n": 5 }))).await;
    let out = steps(&v);
    assert_eq!(out.session.stopped_at, Some(1));
    assert_eq!(out.steps.len(), 1);
    // more steps on a stopped session do nothing
    let (_, v) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "n": 5 }))).await;
    assert!(steps(&v).steps.is_empty());
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/override"), Some(json!({ "continue_n": { "k": 3, "force": true } }))).await;
    assert_eq!(s, StatusCode::OK);
    let out = steps(&v);
    assert_eq!(out.session.step, 4);
    assert!(out.steps.len() <= 3);
    let (_, v) = call(&app, "POST", &format!("/sessions/{id}/override"), Some(json!({ "select_step": { "t": 0 } }))).await;
    let out = steps(&v);
    assert_eq!(out.session.step, 0);
    assert_eq!(out.session.stopped_at, Some(0));
    let (_, h) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    let hist = steps(&h);
    let ball = seed_to_map(&Seed::new(vec![4, 4], 2), &Dims::square(8)).unwrap();
    assert_eq!(decode(&hist.steps.last().unwrap().map).unwrap(), ball);
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/override"), Some(json!({ "select_step": { "t": 7 } }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("step 7"), "{v}");
}

#[tokio::test]
async fn concurrent_sessions_are_independent() {
    let app = app();
    let a = create(&app, "a", "default").await;
    let b = create(&app, "a", "default").await;
    let c = create(&app, "b", "default").await;
    // interleave single steps across the sessions, some concurrently
    for _ in 0..4 {
        let body = Some(json!({ "n": 1 }));
        let (ua, ub, uc) = (format!("/sessions/{a}/step"), format!("/sessions/{b}/step"), format!("/sessions/{c}/step"));
        let (ra, rb, rc) = tokio::join!(
            call(&app, "POST", &ua, body.clone()),
            call(&app, "POST", &ub, body.clone()),
            call(&app, "POST", &uc, body.clone()),
        );
        assert!(ra.0.is_success() && rb.0.is_success() && rc.0.is_success());
    }
    let (_, ha) = call(&app, "GET", &format!("/sessions/{a}/history"), None).await;
    let (_, hb) = call(&app, "GET", &format!("/sessions/{b}/history"), None).await;
    let (_, hc) = call(&app, "GET", &format!("/sessions/{c}/history"), None).await;
    let (ha, hb, hc) = (steps(&ha), steps(&hb), steps(&hc));
    assert_eq!(ha.steps, hb.steps);
    let ref_b = evolve(&tiny_model(5, None), &image(8, 2), &Seed::new(vec![4, 4], 2), &EvolveOptions { max_steps: 4, ..options() }).unwrap();
    for (view, rec) in hc.steps.iter().zip(ref_b.history()) {
        assert_eq!(&decode(&view.map).unwrap(), &rec.map);
    }
    // deleting one session leaves the other intact
    let (s, _) = call(&app, "DELETE", &format!("/sessions/{a}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, "GET", &format!("/sessions/{a}/history"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", &format!("/sessions/{b}/history"), None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn history_is_a_function_of_state() {
    let app = app();
    let id = create(&app, "a", "default").await;
    call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "n": 2 }))).await;
    let (_, h1) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    let (_, h2) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(h1, h2);
    let fresh = app_clone_history().await;
    assert_eq!(h1, fresh);
}

async fn app_clone_history() -> Value {
    let app = app();
    let id = create(&app, "a", "default").await;
    call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "n": 2 }))).await;
    call(&app, "GET", &format!("/sessions/{id}/history"), None).await.1
}

#[tokio::test]
async fn errors_have_the_documented_statuses() {
    let app = app();
    let (s, v) = call(&app, "POST", "/sessions/nope/step", Some(json!({ "n": 1 }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "image": "zzz", "seed": [1, 1] }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "image": "a", "seed": [9, 1] }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("seed"), "{v}");
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "image": "a", "seed": [1, 1], "model": "other" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let id = create(&app, "a", "default").await;
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/override"), Some(json!({ "jump": 3 }))).await;
    assert!(s.is_client_error());
    let (s, _) = call(&app, "DELETE", "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn images_can_be_listed_fetched_and_uploaded() {
    let app = app();
    let (_, v) = call(&app, "GET", "/images", None).await;
    assert_eq!(v.as_array().unwrap().len(), 2);
    let (s, v) = call(&app, "GET", "/images/a", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["data"].as_array().unwrap().len(), 64);
    let bytes = iterseg::gridio::encode_image(&image(8, 3));
    let req = Request::builder().method("POST").uri("/images?name=up/one").body(Body::from(bytes.clone())).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let req = Request::builder().method("POST").uri("/images?name=up/one").body(Body::from(bytes)).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::CONFLICT);
    let mut pgm = b"P5\n8 8\n255\n".to_vec();
    pgm.extend((0..64).map(|i| i as u8));
    let req = Request::builder().method("POST").uri("/images").body(Body::from(pgm)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let req = Request::builder().method("POST").uri("/images").body(Body::from("hello")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "image": "up/one", "seed": [2, 2] }))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, v) = call(&app, "GET", "/models", None).await;
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn sessions_are_persisted_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(vec![("default", tiny_model(1, Some(-50.0)))], Some(dir.path().to_path_buf())));
    let id = create(&app, "a", "default").await;
    call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "n": 3 }))).await;
    for t in 0..=3 {
        assert!(dir.path().join(&id).join(format!("step_{t:03}.isg")).exists());
    }
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert!(v["created"].as_u64().unwrap() <= v["updated"].as_u64().unwrap());
}

#[test]
fn setup_rejects_direct_models() {
    let mut m = tiny_model(1, None);
    m.config.mode = NetMode::Direct;
    let cfg = ServerConfig {
        models: BTreeMap::from([("d".to_string(), m)]),
        default_model: "d".into(),
        options: options(),
        persist_dir: None,
        static_dir: None,
    };
    assert!(AppState::new(cfg).is_err());
}

#[tokio::test]
async fn freeze_sessions_reach_max_steps() {
    let app = app();
    let (_, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "image": "a", "seed": [4, 4], "model": "stopper", "options": { "autostop": "freeze", "max_steps": 6 } })),
    )
    .await;
    let id = v["session"]["id"].as_str().unwrap().to_string();
    let (_, v) = call(&app, "POST", &format!("/sessions/{id}/step"), Some(json!({ "n": 50 }))).await;
    let out = steps(&v);
    assert_eq!(out.session.step, 6);
    assert!(out.session.max_steps_reached);
    let first = decode(&out.steps[0].map).unwrap();
    assert!(out.steps.iter().all(|s| decode(&s.map).unwrap() == first));
    assert_eq!(out.session.options.autostop, AutoStop::Freeze);
}

proptest! {
    #[test]
    fn rle_round_trips(rows in 1usize..12, cols in 1usize..12, l in 2u8..5, seed in any::<u64>()) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims::new(vec![rows, cols]).unwrap();
        let labels = (0..rows * cols).map(|_| if r.random_bool(0.7) { 0 } else { r.random_range(0..l) }).collect();
        let map = LabelMap::new(dims, labels, l).unwrap();
        let enc = encode(&map);
        prop_assert!(enc.runs.windows(2).all(|w| w[0].0 != w[1].0));
        prop_assert_eq!(decode(&enc).unwrap(), map);
    }
}

#[test]
fn rle_rejects_wrong_totals() {
    let mut enc = encode(&LabelMap::empty(Dims::square(3), 2));
    enc.runs[0].1 = 8;
    assert!(decode(&enc).is_err());
}
