use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use dynrad::checkpoint::CheckpointMeta;
use dynrad::dataset::orbit_pose;
use dynrad::model::ModelConfig;
use dynrad::{Aabb, ImageF, Model};
use dynrad_cli::service::{router, Info, RenderRequest, ServiceConfig, ServiceState};
use dynrad_cli::LoadedModel;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

fn state(seed: u64) -> Arc<ServiceState> {
    let mut config = ModelConfig::desk(Aabb::cube(1.0), vec![(0.0, 2.0)], vec![3]);
    config.field.resolution = [10; 3];
    config.hidden = 16;
    let model: Model<f32> = Model::new(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let meta = CheckpointMeta {
        param_names: vec!["time".into()],
        background: [1.0; 3],
        render_samples: 24,
        image_size: Some([32, 32]),
        ..CheckpointMeta::default()
    };
    ServiceState::new(
        LoadedModel::from_parts(model, meta).unwrap(),
        ServiceConfig {
            max_size: 64,
            ..ServiceConfig::default()
        },
    )
}

async fn send(state: &Arc<ServiceState>, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, body)
}

fn post(json: &str) -> Request<Body> {
    Request::post("/render")
        .header("content-type", "application/json")
        .body(Body::from(json.to_string()))
        .unwrap()
}

fn orbit(params: Vec<f64>, w: usize, h: usize) -> String {
    serde_json::to_string(&RenderRequest::orbit(30.0, 10.0, 3.0, params, w, h)).unwrap()
}

fn error_of(body: &[u8]) -> String {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn info_reports_parameter_and_ranges() {
    let s = state(1);
    let (status, ctype, body) = send(&s, Request::get("/info").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.unwrap().starts_with("application/json"));
    let raw: serde_json::Value = serde_json::from_slice(&body).unwrap();
    for key in ["K", "params", "training_resolution", "aabb"] {
        assert!(raw.get(key).is_some(), "missing {key}");
    }
    let info: Info = serde_json::from_value(raw).unwrap();
    assert_eq!(info.k, 1);
    assert_eq!(info.params.len(), 1);
    assert_eq!(info.params[0].name, "time");
    assert_eq!(info.params[0].range, (0.0, 2.0));
    assert_eq!(info.training_resolution, [10; 3]);
    assert_eq!(info.aabb, Aabb::cube(1.0));
}

#[tokio::test]
async fn render_returns_png_of_requested_size() {
    let s = state(2);
    let (status, ctype, body) = send(&s, post(&orbit(vec![0.5], 24, 16))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let img = ImageF::decode_png(&body).unwrap();
    assert_eq!(img.dims(), (24, 16));
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let s = state(3);
    let a = send(&s, post(&orbit(vec![1.25], 20, 20))).await.2;
    let b = send(&s, post(&orbit(vec![1.25], 20, 20))).await.2;
    assert_eq!(a, b);
}

#[tokio::test]
async fn pose_request_matches_orbit_request() {
    let s = state(4);
    let pose = orbit_pose(30.0, 10.0, 3.0, [0.0; 3]).unwrap();
    let req = RenderRequest {
        pose: Some(pose),
        azimuth: None,
        elevation: None,
        radius: None,
        params: vec![0.5],
        width: 12,
        height: 12,
        samples: None,
    };
    let a = send(&s, post(&serde_json::to_string(&req).unwrap())).await;
    let b = send(&s, post(&orbit(vec![0.5], 12, 12))).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.2, b.2);
}

#[tokio::test]
async fn out_of_range_parameter_is_rejected_with_range() {
    let s = state(5);
    let (status, ctype, body) = send(&s, post(&orbit(vec![2.5], 8, 8))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(ctype.unwrap().starts_with("application/json"));
    let msg = error_of(&body);
    assert!(msg.contains("[0, 2]") && msg.contains("2.5"), "{msg}");
}

#[tokio::test]
async fn invalid_requests_are_rejected() {
    let s = state(6);
    let cases = [
        (orbit(vec![], 8, 8), "params"),
        (orbit(vec![0.1, 0.2], 8, 8), "params"),
        (orbit(vec![0.5], 65, 8), "width"),
        (orbit(vec![0.5], 8, 0), "height"),
        ("{not json".to_string(), "malformed"),
        (r#"{"params":[0.5],"width":8,"height":8}"#.to_string(), "pose"),
        (r#"{"azimuth":0,"elevation":95,"radius":3,"params":[0.5],"width":8,"height":8}"#.to_string(), "elevation"),
        (r#"{"azimuth":0,"elevation":0,"radius":3,"params":[0.5],"width":8,"height":8,"samples":1}"#.to_string(), "samples"),
        (r#"{"azimuth":0,"elevation":0,"radius":3,"params":[0.5],"width":8}"#.to_string(), "malformed"),
    ];
    for (body, needle) in cases {
        let (status, _, resp) = send(&s, post(&body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let msg = error_of(&resp);
        assert!(msg.contains(needle), "{body}: {msg}");
    }
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let s = state(7);
    let body = orbit(vec![0.7], 16, 16);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let s = s.clone();
            let body = body.clone();
            tokio::spawn(async move { send(&s, post(&body)).await })
        })
        .collect();
    let mut outs = Vec::new();
    for h in handles {
        outs.push(h.await.unwrap());
    }
    assert!(outs.iter().all(|o| o.0 == StatusCode::OK && o.2 == outs[0].2));
}

#[tokio::test]
async fn swap_replaces_model() {
    let s = state(8);
    let before = send(&s, post(&orbit(vec![0.5], 12, 12))).await.2;
    let other = state(9).current();
    s.swap(LoadedModel::from_parts(other.model.clone(), other.meta.clone()).unwrap());
    let after = send(&s, post(&orbit(vec![0.5], 12, 12))).await.2;
    assert_ne!(before, after);
}
