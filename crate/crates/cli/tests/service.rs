mod common;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dcam_cli::service::{router, AppState, CLICK_COUNT_HEADER, LATENCY_HEADER};
use dcam_core::config::GuidanceMode;
use dcam_core::dataio::{decode_alpha, decode_image, encode_alpha8, encode_image, Image};
use dcam_core::guidance::{ClickSet, Payload};
use dcam_core::infer::{InferOptions, Matter};
use serde_json::Value;
use tower::ServiceExt;

fn matter(mode: GuidanceMode, seed: u64) -> Matter {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::write_checkpoint(&dir.path().join("m.ckpt"), mode, seed);
    Matter::from_checkpoint(&ckpt).unwrap()
}

/// Values already on the 8-bit grid, so the uploaded PNG decodes to the same image.
fn image(h: usize, w: usize, phase: usize) -> Image {
    let img = Image::from_shape_fn((3, h, w), |(c, y, x)| ((c * 13 + y * 5 + x * 3 + phase) % 64) as f32 / 63.0);
    decode_image(&encode_image(&img).unwrap()).unwrap()
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> Reply {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, headers, body }
}

async fn open(app: &Router, img: &Image) -> String {
    let r = call(app, Method::POST, "/sessions", encode_image(img).unwrap()).await;
    assert_eq!(r.status, StatusCode::CREATED);
    r.json()["id"].as_str().unwrap().to_string()
}

async fn click(app: &Router, id: &str, x: usize, y: usize, positive: bool) -> Reply {
    let body = format!(r#"{{"x": {x}, "y": {y}, "positive": {positive}}}"#);
    call(app, Method::POST, &format!("/sessions/{id}/clicks"), body.into_bytes()).await
}

#[tokio::test]
async fn health_reports_version_and_mode() {
    let app = router(AppState::new(matter(GuidanceMode::Click, 0), 2048));
    let r = call(&app, Method::GET, "/healthz", vec![]).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r.json()["mode"], "click");
}

#[tokio::test]
async fn click_then_undo_restores_the_previous_matte() {
    let m = matter(GuidanceMode::Click, 0);
    let img = image(48, 64, 0);
    let expected_one = m
        .predict(&img, Payload::Clicks(&ClickSet { positives: vec![(20, 30)], negatives: vec![] }), &InferOptions::default())
        .unwrap();
    let app = router(AppState::new(m, 2048));
    let id = open(&app, &img).await;
    assert_eq!(call(&app, Method::GET, &format!("/sessions/{id}/matte"), vec![]).await.status, StatusCode::CONFLICT);

    let first = click(&app, &id, 20, 30, true).await;
    assert_eq!(first.status, StatusCode::OK);
    assert_eq!(first.headers["content-type"], "image/png");
    assert!(first.headers[LATENCY_HEADER].to_str().unwrap().parse::<f64>().unwrap() >= 0.0);
    assert_eq!(first.headers[CLICK_COUNT_HEADER], "1");
    assert_eq!(first.body, encode_alpha8(&expected_one).unwrap());
    let decoded = decode_alpha(&first.body).unwrap();
    assert_eq!(decoded.dim(), (48, 64));

    let second = click(&app, &id, 5, 5, false).await;
    assert_eq!(second.headers[CLICK_COUNT_HEADER], "2");
    let undone = call(&app, Method::DELETE, &format!("/sessions/{id}/clicks/last"), vec![]).await;
    assert_eq!(undone.status, StatusCode::OK);
    assert_eq!(undone.body, first.body);
    let latest = call(&app, Method::GET, &format!("/sessions/{id}/matte"), vec![]).await;
    assert_eq!(latest.body, first.body);

    let empty = call(&app, Method::DELETE, &format!("/sessions/{id}/clicks/last"), vec![]).await;
    assert_eq!(empty.status, StatusCode::NO_CONTENT);
    assert_eq!(call(&app, Method::GET, &format!("/sessions/{id}/matte"), vec![]).await.status, StatusCode::CONFLICT);
    assert_eq!(call(&app, Method::DELETE, &format!("/sessions/{id}/clicks/last"), vec![]).await.status, StatusCode::CONFLICT);
    let again = click(&app, &id, 20, 30, true).await;
    assert_eq!(again.body, first.body);
}

#[tokio::test]
async fn request_errors() {
    let app = router(AppState::new(matter(GuidanceMode::Click, 0), 64));
    assert_eq!(click(&app, "nope", 1, 1, true).await.status, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::GET, "/sessions/nope/matte", vec![]).await.status, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::DELETE, "/sessions/nope/clicks/last", vec![]).await.status, StatusCode::NOT_FOUND);

    let big = call(&app, Method::POST, "/sessions", encode_image(&image(32, 65, 0)).unwrap()).await;
    assert_eq!(big.status, StatusCode::PAYLOAD_TOO_LARGE);
    let junk = call(&app, Method::POST, "/sessions", b"not a png".to_vec()).await;
    assert_eq!((junk.status, junk.json()["field"].as_str()), (StatusCode::BAD_REQUEST, Some("image")));

    let id = open(&app, &image(32, 40, 0)).await;
    let uri = format!("/sessions/{id}/clicks");
    for (body, field) in [
        (r#"{"x": 1, "positive": true}"#, "y"),
        (r#"{"x": 40, "y": 1, "positive": true}"#, "x"),
        (r#"{"x": 1, "y": 1, "positive": "yes"}"#, "positive"),
        ("{{", "body"),
    ] {
        let r = call(&app, Method::POST, &uri, body.as_bytes().to_vec()).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST);
        assert_eq!(r.json()["field"], field);
    }
    assert_eq!(call(&app, Method::DELETE, &format!("/sessions/{id}"), vec![]).await.status, StatusCode::NO_CONTENT);
    assert_eq!(click(&app, &id, 1, 1, true).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn single_shot_modes() {
    let m = matter(GuidanceMode::None, 4);
    let img = image(40, 36, 2);
    let expected = encode_alpha8(&m.predict(&img, Payload::None, &InferOptions::default()).unwrap()).unwrap();
    let app = router(AppState::new(m, 2048));
    let id = open(&app, &img).await;
    let r = call(&app, Method::GET, &format!("/sessions/{id}/matte"), vec![]).await;
    assert_eq!(r.body, expected);
    assert_eq!(click(&app, &id, 1, 1, true).await.status, StatusCode::CONFLICT);

    let app = router(AppState::new(matter(GuidanceMode::Trimap, 4), 2048));
    let id = open(&app, &img).await;
    let mut tri = ndarray::Array2::<f32>::zeros((40, 36));
    tri.slice_mut(ndarray::s![10..30, ..]).fill(128.0 / 255.0);
    tri.slice_mut(ndarray::s![15..25, ..]).fill(1.0);
    let r = call(&app, Method::PUT, &format!("/sessions/{id}/trimap"), encode_alpha8(&tri).unwrap()).await;
    assert_eq!(r.status, StatusCode::OK);
    let a = decode_alpha(&r.body).unwrap();
    assert!(a.row(0).iter().all(|&v| v == 0.0) && a.row(20).iter().all(|&v| v == 1.0));
    let wrong = call(&app, Method::PUT, &format!("/sessions/{id}/trimap"), encode_alpha8(&tri.t().to_owned()).unwrap()).await;
    assert_eq!(wrong.json()["field"], "trimap");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_stay_isolated() {
    let m = matter(GuidanceMode::Click, 7);
    let images = [image(40, 48, 0), image(40, 48, 29)];
    let click_lists: [Vec<(usize, usize, bool)>; 2] = [
        vec![(10, 10, true), (30, 20, false), (5, 35, true)],
        vec![(40, 5, true), (12, 30, true), (25, 25, false)],
    ];
    // Expected matte after each prefix of each session's clicks.
    let expected: Vec<Vec<Vec<u8>>> = (0..2)
        .map(|s| {
            (1..=3)
                .map(|n| {
                    let mut set = ClickSet::default();
                    for &(x, y, pos) in &click_lists[s][..n] {
                        if pos { set.positives.push((x, y)) } else { set.negatives.push((x, y)) }
                    }
                    encode_alpha8(&m.predict(&images[s], Payload::Clicks(&set), &InferOptions::default()).unwrap()).unwrap()
                })
                .collect()
        })
        .collect();
    assert_ne!(expected[0][2], expected[1][2]);

    let state = AppState::new(m, 2048);
    let app = router(state.clone());
    for _round in 0..2 {
        let ids = [open(&app, &images[0]).await, open(&app, &images[1]).await];
        let tasks: Vec<_> = (0..2)
            .map(|s| {
                let (app, id, clicks, expected) = (app.clone(), ids[s].clone(), click_lists[s].clone(), expected[s].clone());
                tokio::spawn(async move {
                    for (n, &(x, y, pos)) in clicks.iter().enumerate() {
                        let r = click(&app, &id, x, y, pos).await;
                        assert_eq!(r.status, StatusCode::OK);
                        assert_eq!(r.body, expected[n], "session {s} click {n}");
                    }
                    let r = call(&app, Method::DELETE, &format!("/sessions/{id}/clicks/last"), vec![]).await;
                    assert_eq!(r.body, expected[1], "session {s} undo");
                })
            })
            .collect();
        for t in tasks {
            t.await.unwrap();
        }
    }
    assert_eq!(state.session_count(), 4);
}
