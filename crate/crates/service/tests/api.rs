use std::sync::Arc;

use aredit_core::cache::build_cache;
use aredit_core::codec::CodecParams;
use aredit_core::numerics::Image;
use aredit_core::predictor::{PredictorModel, SyntheticConfig};
use aredit_core::pyramid::{accumulate, ScaleSchedule};
use aredit_core::shapesworld::scene;
use aredit_service::{app_state, router, AppState, CacheMeta, CacheResponse, EditResponse, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;

const BOUNDARY: &str = "arboundary1234";
const SOURCE: &str = "a red circle on a blue background";

fn app_with(store: Option<std::path::PathBuf>, static_dir: Option<std::path::PathBuf>) -> (Arc<AppState>, Router) {
    let mut cfg = ServiceConfig::new(PredictorModel::synthetic(SyntheticConfig::default()));
    cfg.store_dir = store;
    cfg.static_dir = static_dir;
    let (state, dir) = app_state(cfg).unwrap();
    let r = router(state.clone(), dir.as_deref());
    (state, r)
}

fn app() -> Router {
    app_with(None, None).1
}

fn source_png() -> Vec<u8> {
    scene(2, 4, 64).recolored("red").unwrap().render().to_png_bytes().unwrap()
}

fn multipart(fields: &[(&str, &[u8])]) -> Body {
    let mut body = Vec::new();
    for (name, data) in fields {
        body.extend(format!("--{BOUNDARY}\r\n").as_bytes());
        if *name == "image" {
            body.extend(b"Content-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n");
        } else {
            body.extend(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend(*data);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").as_bytes());
    Body::from(body)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post_cache(app: &Router, png: &[u8], prompt: &str, keep: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/v1/cache")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(&[("image", png), ("source_prompt", prompt.as_bytes()), ("keep_attention", keep.as_bytes())]))
        .unwrap();
    send(app, req).await
}

async fn post_edit(app: &Router, body: serde_json::Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/v1/edit")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn error_code(body: &[u8]) -> String {
    serde_json::from_slice::<serde_json::Value>(body).unwrap()["code"].as_str().unwrap().to_string()
}

async fn cached(app: &Router, keep: &str) -> CacheResponse {
    let (status, body) = post_cache(app, &source_png(), SOURCE, keep).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test]
async fn healthz_ok() {
    let (status, body) = get(&app(), "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["backend"], "synthetic");
}

#[tokio::test]
async fn cache_is_content_addressed_and_matches_library() {
    let app = app();
    let a = cached(&app, "true").await;
    let b = cached(&app, "true").await;
    assert_eq!(a.cache_id, b.cache_id);
    assert_eq!(a.scales, ScaleSchedule::reference().levels().to_vec());
    let c = cached(&app, "false").await;
    assert_ne!(a.cache_id, c.cache_id);

    let (status, body) = get(&app, &format!("/v1/cache/{}", a.cache_id)).await;
    assert_eq!(status, StatusCode::OK);
    let meta: CacheMeta = serde_json::from_slice(&body).unwrap();
    assert_eq!(meta.source_prompt, SOURCE);
    assert!(meta.has_attention);
    let model = PredictorModel::synthetic(SyntheticConfig::default());
    let img = Image::from_png_bytes(&source_png()).unwrap();
    let lib = build_cache(&img, SOURCE, &model, &CodecParams::default(), &ScaleSchedule::reference(), true).unwrap();
    use sha2::Digest;
    assert_eq!(meta.content_sha256, hex::encode(sha2::Sha256::digest(lib.to_bytes())));
}

#[tokio::test]
async fn bad_uploads_rejected() {
    let app = app();
    let png = source_png();
    let (status, body) = post_cache(&app, &png[..png.len() / 2], SOURCE, "1").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "bad_image");
    let small = Image::filled(32, 32, [0, 0, 0]).to_png_bytes().unwrap();
    let (status, body) = post_cache(&app, &small, SOURCE, "1").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "incompatible_dimensions");
    let req = Request::post("/v1/cache")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(&[("source_prompt", b"x")]))
        .unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn identity_edit_equals_reconstruction_and_decode_endpoint() {
    let app = app();
    let c = cached(&app, "false").await;
    let (status, recon) = get(&app, &format!("/v1/cache/{}/decode?upto=7", c.cache_id)).await;
    assert_eq!(status, StatusCode::OK);
    let (_, default_recon) = get(&app, &format!("/v1/cache/{}/decode", c.cache_id)).await;
    assert_eq!(recon, default_recon);
    for body in [
        serde_json::json!({"cache_id": c.cache_id, "target_prompt": SOURCE}),
        serde_json::json!({"cache_id": c.cache_id, "target_prompt": "a white square", "gamma": 7}),
    ] {
        let (status, resp) = post_edit(&app, body).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&resp));
        let r: EditResponse = serde_json::from_slice(&resp).unwrap();
        assert_eq!(B64.decode(r.image_png_base64).unwrap(), recon);
        assert_eq!(r.flagged_bits, 0);
    }
    let (status, zero) = get(&app, &format!("/v1/cache/{}/decode?upto=0", c.cache_id)).await;
    assert_eq!(status, StatusCode::OK);
    let img = Image::from_png_bytes(&zero).unwrap();
    assert!(img.pixels().iter().all(|&v| v == 128));
    let (status, _) = get(&app, &format!("/v1/cache/{}/decode?upto=8", c.cache_id)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let schedule = ScaleSchedule::reference();
    let model = PredictorModel::synthetic(SyntheticConfig::default());
    let lib = build_cache(&Image::from_png_bytes(&source_png()).unwrap(), SOURCE, &model, &CodecParams::default(), &schedule, false).unwrap();
    let f = accumulate(&lib.r_queue, &schedule, 3).unwrap();
    let (_, partial) = get(&app, &format!("/v1/cache/{}/decode?upto=3", c.cache_id)).await;
    assert_eq!(Image::from_png_bytes(&partial).unwrap(), CodecParams::default().decode_feature(&f).unwrap());
}

#[tokio::test]
async fn edits_are_deterministic_and_never_mutate_the_cache() {
    let app = app();
    let c = cached(&app, "true").await;
    let (_, before) = get(&app, &format!("/v1/cache/{}", c.cache_id)).await;
    let req = serde_json::json!({
        "cache_id": c.cache_id, "target_prompt": "a green circle on a blue background",
        "gamma": 1, "tau": 0.05, "seed": 7, "emit_masks": true, "emit_intermediate": true
    });
    let (s1, a) = post_edit(&app, req.clone()).await;
    let (s2, b) = post_edit(&app, req).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let strip = |body: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(body).unwrap();
        v.as_object_mut().unwrap().remove("timing_ms");
        v
    };
    assert_eq!(strip(&a), strip(&b));
    let r: EditResponse = serde_json::from_slice(&a).unwrap();
    assert!(r.flagged_bits > 0);
    assert_eq!(r.masks.as_ref().unwrap().len(), 6);
    assert_eq!(r.masks.as_ref().unwrap()[0].scale, 2);
    assert_eq!(r.intermediate.as_ref().unwrap().len(), 7);
    let (_, after) = get(&app, &format!("/v1/cache/{}", c.cache_id)).await;
    assert_eq!(before, after);

    // Concurrent requests against one id agree with the serial reply.
    let tasks: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            let body = serde_json::json!({
                "cache_id": c.cache_id, "target_prompt": "a green circle on a blue background",
                "gamma": 1, "tau": 0.05, "seed": 7, "emit_masks": true, "emit_intermediate": true
            });
            tokio::spawn(async move { post_edit(&app, body).await.1 })
        })
        .collect();
    for t in tasks {
        assert_eq!(strip(&t.await.unwrap()), strip(&a));
    }
}

#[tokio::test]
async fn edit_errors_map_to_statuses() {
    let app = app();
    let c = cached(&app, "false").await;
    let cases = [
        (serde_json::json!({"cache_id": "0".repeat(64), "target_prompt": "x"}), StatusCode::NOT_FOUND, "not_found"),
        (serde_json::json!({"cache_id": c.cache_id, "target_prompt": "x", "attention_control": true}), StatusCode::CONFLICT, "attention_not_cached"),
        (serde_json::json!({"cache_id": c.cache_id, "target_prompt": "x", "gamma": 8}), StatusCode::UNPROCESSABLE_ENTITY, "invalid_config"),
        (serde_json::json!({"cache_id": c.cache_id, "target_prompt": "x", "tau": 1.5}), StatusCode::UNPROCESSABLE_ENTITY, "invalid_config"),
        (serde_json::json!({"cache_id": c.cache_id, "target_prompt": "x", "mask_mode": "fuzzy"}), StatusCode::UNPROCESSABLE_ENTITY, "bad_request"),
    ];
    for (body, status, code) in cases {
        let (s, resp) = post_edit(&app, body.clone()).await;
        assert_eq!(s, status, "{body}");
        assert_eq!(error_code(&resp), code);
    }
    let req = Request::post("/v1/edit").header("content-type", "application/json").body(Body::from("{not json")).unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::BAD_REQUEST);
    let (s, _) = get(&app, "/v1/cache/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn delete_and_disk_spill() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app_with(Some(dir.path().to_path_buf()), None);
    let c = cached(&app, "true").await;
    assert!(dir.path().join(format!("{}.arec", c.cache_id)).exists());
    // A fresh service over the same directory finds the cache.
    let (_, fresh) = app_with(Some(dir.path().to_path_buf()), None);
    let (s, _) = get(&fresh, &format!("/v1/cache/{}", c.cache_id)).await;
    assert_eq!(s, StatusCode::OK);
    let del = |id: String| Request::delete(format!("/v1/cache/{id}")).body(Body::empty()).unwrap();
    assert_eq!(send(&fresh, del(c.cache_id.clone())).await.0, StatusCode::NO_CONTENT);
    assert_eq!(send(&fresh, del(c.cache_id.clone())).await.0, StatusCode::NOT_FOUND);
    assert!(!dir.path().join(format!("{}.arec", c.cache_id)).exists());
}

#[tokio::test]
async fn static_bundle_served_when_present() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    let (_, app) = app_with(None, Some(dir.path().to_path_buf()));
    let (s, body) = get(&app, "/").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>console</html>");
    assert_eq!(get(&app, "/healthz").await.0, StatusCode::OK);
    assert_eq!(get(&crate::app(), "/").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn graceful_shutdown_finishes_serving() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(aredit_service::serve(listener, app(), async {
        let _ = rx.await;
    }));
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(b"GET /healthz HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    tx.send(()).unwrap();
    tokio::time::timeout(std::time::Duration::from_secs(5), server).await.unwrap().unwrap().unwrap();
}
