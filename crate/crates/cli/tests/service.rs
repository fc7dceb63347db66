use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use candle_core::DType;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use touchedit_cli::{router, AppState};
use touchedit_core::datagen::{generate_samples, DatasetConfig};
use touchedit_core::editor::{sample_edit, EditorConfig, EditorModel, ScheduleConfig, UNetConfig};
use touchedit_core::geometry::derive_size_stats;
use touchedit_core::placement::{build_vocabulary, predict_placement, PlacementConfig, PlacementModel};
use touchedit_core::rng::seeded;
use touchedit_core::{Image, NormalizedBBox, TouchPoint};
use tower::ServiceExt;

const BOUNDARY: &str = "touchedit-test-boundary";

fn models() -> (PlacementModel, EditorModel) {
    let samples = generate_samples(&DatasetConfig::default(), 8, 3, "t").unwrap();
    let corpus: Vec<&str> = samples.iter().flat_map(|s| [s.instruction.as_str(), s.reasoning.as_str()]).collect();
    let stats = derive_size_stats(samples.iter().map(|s| &s.gt_bbox)).unwrap();
    let pc = PlacementConfig { dim: 32, layers: 1, heads: 2, max_new_tokens: 12, ..Default::default() };
    let placement =
        PlacementModel::new(pc, build_vocabulary(corpus.clone()), stats, DType::F32, &mut seeded(1)).unwrap();
    let ec = EditorConfig {
        unet: UNetConfig { base_channels: 8, mid_channels: 16, cond_dim: 16, groups: 4 },
        schedule: ScheduleConfig { steps: 4, beta_start: 1e-2, beta_end: 0.5 },
        ..Default::default()
    };
    let editor = EditorModel::new(ec, EditorModel::vocabulary(corpus), DType::F32, &mut seeded(2)).unwrap();
    (placement, editor)
}

fn app() -> (Router, PlacementModel, EditorModel) {
    // Seeded construction: the second copy is identical to the served one.
    let (p, e) = models();
    let state = AppState::new(p, e, 512).unwrap();
    let (p, e) = models();
    (router(Arc::new(state), 1 << 20), p, e)
}

fn source() -> Image {
    generate_samples(&DatasetConfig::default(), 1, 9, "s").unwrap().remove(0).source_image
}

fn multipart(bytes: &[u8]) -> Request<Body> {
    let mut body = format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"a.png\"\r\nContent-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/sessions")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn post_json(uri: &str, v: Value) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(v.to_string())).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn upload(app: &Router, img: &Image) -> String {
    let (s, v) = send_json(app, multipart(&img.encode_png().unwrap())).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn healthz_reports_ok() {
    let (app, ..) = app();
    let (s, v) = send_json(&app, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn upload_issues_distinct_ids_and_rejects_garbage() {
    let (app, ..) = app();
    let img = source();
    let a = upload(&app, &img).await;
    let b = upload(&app, &img).await;
    assert_ne!(a, b);
    let (s, v) = send_json(&app, Request::get(format!("/sessions/{a}")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(64), Some(64)));
    let (s, _) = send(&app, multipart(b"not a png")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let big = Image::filled(600, 20, [0, 0, 0]).unwrap();
    let (s, _) = send(&app, multipart(&big.encode_png().unwrap())).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    let (s, _) = send(&app, Request::get("/sessions/nope").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn http_path_equals_library_path() {
    let (app, placement, editor) = app();
    let img = source();
    let id = upload(&app, &img).await;
    let instruction = "add a red circle to the left of the blue square";
    let touch = TouchPoint::normalized(0.4, 0.55).unwrap();
    let req = json!({ "instruction": instruction, "touch": { "x": 0.4, "y": 0.55, "frame": "normalized" } });
    let (s, v) = send_json(&app, post_json(&format!("/sessions/{id}/placement"), req.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let lib = predict_placement(&placement, &img, instruction, &touch).unwrap();
    let bbox: NormalizedBBox = serde_json::from_value(v["bbox"].clone()).unwrap();
    assert_eq!(bbox, lib.bbox);
    assert_eq!(v["reasoning"].as_str().unwrap(), lib.reasoning);
    assert_eq!(v["fallback_used"].as_bool().unwrap(), lib.fallback_used);

    // Greedy decoding: the same request gives the same box.
    let (_, again) = send_json(&app, post_json(&format!("/sessions/{id}/placement"), req)).await;
    assert_eq!(again["bbox"], v["bbox"]);
    assert_eq!(again["turn"], 1);

    let edit = json!({ "turn": 0, "bbox": v["bbox"], "seed": 7 });
    let (s, e) = send_json(&app, post_json(&format!("/sessions/{id}/edits"), edit)).await;
    assert_eq!(s, StatusCode::CREATED, "{e}");
    let (s, png) = send(&app, Request::get(e["url"].as_str().unwrap()).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let direct = sample_edit(&editor, &img, instruction, &lib.bbox, 7).unwrap();
    assert_eq!(png, direct.blended_image.encode_png().unwrap());
    let mask_uri = format!("{}?kind=mask", e["url"].as_str().unwrap());
    let (_, mask) = send(&app, Request::get(mask_uri).body(Body::empty()).unwrap()).await;
    assert_eq!(mask, direct.instance_mask.encode_png().unwrap());

    // Background outside the mask is the session image.
    let blended = Image::decode_png(&png).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            if direct.instance_mask.get(x, y) == 0.0 {
                assert_eq!(blended.pixel_u8(x, y), img.pixel_u8(x, y));
            }
        }
    }
}

#[tokio::test]
async fn placement_and_edit_errors() {
    let (app, ..) = app();
    let id = upload(&app, &source()).await;
    let uri = format!("/sessions/{id}/placement");
    let out = json!({ "instruction": "add a red circle", "touch": { "x": 70.0, "y": 3.0, "frame": "pixel" } });
    assert_eq!(send(&app, post_json(&uri, out)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let ok = json!({ "instruction": "add a red circle", "touch": { "x": 30.0, "y": 20.0, "frame": "pixel" } });
    assert_eq!(send(&app, post_json("/sessions/zzz/placement", ok.clone())).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, post_json(&uri, ok)).await.0, StatusCode::OK);

    let edits = format!("/sessions/{id}/edits");
    let unknown_turn = json!({ "turn": 5, "bbox": [0.5, 0.5, 0.2, 0.2], "seed": 1 });
    assert_eq!(send(&app, post_json(&edits, unknown_turn)).await.0, StatusCode::NOT_FOUND);
    let bad_box = json!({ "turn": 0, "bbox": [0.5, 0.5, 0.0, 0.2], "seed": 1 });
    assert_eq!(send(&app, post_json(&edits, bad_box)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    // Two seeds: two retrievable edits with distinct ids.
    let (_, a) =
        send_json(&app, post_json(&edits, json!({ "turn": 0, "bbox": [0.5, 0.5, 0.3, 0.3], "seed": 1 }))).await;
    let (_, b) =
        send_json(&app, post_json(&edits, json!({ "turn": 0, "bbox": [0.5, 0.5, 0.3, 0.3], "seed": 2 }))).await;
    assert_ne!(a["id"], b["id"]);
    for e in [&a, &b] {
        let (s, _) = send(&app, Request::get(e["url"].as_str().unwrap()).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (s, _) = send(&app, Request::get(format!("/sessions/{id}/edits/9")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sessions_are_isolated_under_interleaving() {
    let (app, ..) = app();
    let img = source();
    let a = upload(&app, &img).await;
    let b = upload(&app, &Image::filled(48, 40, [200, 180, 160]).unwrap()).await;
    let req =
        |instr: &str, x: f64| json!({ "instruction": instr, "touch": { "x": x, "y": 0.5, "frame": "normalized" } });
    let mut tasks = Vec::new();
    for i in 0..6 {
        let (app, a, b) = (app.clone(), a.clone(), b.clone());
        let (ra, rb) = (req("add a red circle", 0.1 + 0.1 * i as f64), req("add a blue square", 0.9 - 0.1 * i as f64));
        tasks.push(tokio::spawn(async move {
            let x = send(&app, post_json(&format!("/sessions/{a}/placement"), ra));
            let y = send(&app, post_json(&format!("/sessions/{b}/placement"), rb));
            let (x, y) = tokio::join!(x, y);
            assert_eq!((x.0, y.0), (StatusCode::OK, StatusCode::OK));
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    for (id, instr, w) in [(&a, "add a red circle", 64), (&b, "add a blue square", 48)] {
        let (_, v) = send_json(&app, Request::get(format!("/sessions/{id}")).body(Body::empty()).unwrap()).await;
        let turns = v["turns"].as_array().unwrap();
        assert_eq!(turns.len(), 6);
        assert!(turns.iter().all(|t| t["instruction"] == instr));
        let idx: Vec<u64> = turns.iter().map(|t| t["turn"].as_u64().unwrap()).collect();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
        assert_eq!(v["width"].as_u64(), Some(w));
    }
}

#[test]
fn touch_mask_editor_is_rejected() {
    let (p, e) = models();
    let mut cfg = e.config.clone();
    cfg.conditioning = touchedit_core::editor::Conditioning::TouchMask;
    let e = EditorModel::new(cfg, vec![], DType::F32, &mut seeded(0)).unwrap();
    assert!(AppState::new(p, e, 512).is_err());
}
