use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

use neurodesc::analyze::AblationSession;
use neurodesc::cnn::{CnnConfig, SmallCnn};
use neurodesc::describe::{write_description_table, DescriptionRow};
use neurodesc::dissect::{extract_exemplars, record_activations, save_exemplars, Retention};
use neurodesc::edit::{gen_spurious_dataset, incremental_edit, plan_edit, SpuriousDatasetSpec};
use neurodesc::synth::probe_scenes;
use neurodesc::world::SceneParams;
use neurodesc::{Classifier, NeuronRef, UnitId};
use neurodesc_server::{load_edit_output, router, AppState};

const MODEL: &str = "tiny-cnn";

fn fixture(dir: &Path) -> (SmallCnn, neurodesc::edit::SpuriousDataset) {
    let seed_dir = dir.join("seed_0");
    std::fs::create_dir_all(&seed_dir).unwrap();
    let cfg = CnnConfig {
        input_size: 32,
        conv1_channels: 3,
        conv2_channels: 4,
        classes: 4,
    };
    let model = SmallCnn::new(MODEL, cfg, 5).unwrap();
    model.save(&seed_dir.join("classifier.json")).unwrap();
    let spec = SpuriousDatasetSpec {
        n_classes: 4,
        train_per_class: 20,
        test_per_class: 15,
        ..SpuriousDatasetSpec::default()
    };
    let data = gen_spurious_dataset(&spec).unwrap();
    data.write_to(&seed_dir.join("dataset")).unwrap();
    let probe = probe_scenes(20, 0, &SceneParams::default());
    let store = record_activations(&model, "conv1", &probe, Retention::FullMaps).unwrap();
    let set = extract_exemplars(&model, &store, &probe, &NeuronRef::new(MODEL, "conv1", 1), 3, 0.99).unwrap();
    save_exemplars(&set, &seed_dir.join("exemplars")).unwrap();
    let rows: Vec<DescriptionRow> = model
        .all_units()
        .iter()
        .map(|u| DescriptionRow {
            model_id: MODEL.into(),
            layer_id: u.layer.clone(),
            unit: u.unit,
            description: if u.unit == 1 { "human faces".into() } else { "white text".into() },
            logp_cond: -1.0,
            logp_lm: -2.0,
            wpmi: -0.6,
            runner_ups: vec![],
        })
        .collect();
    write_description_table(&seed_dir.join("descriptions.jsonl"), &rows).unwrap();
    (model, data)
}

fn app(dir: &Path) -> axum::Router {
    let mut state = AppState::new();
    assert_eq!(load_edit_output(&mut state, dir).unwrap(), 1);
    router(Arc::new(state))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    if ctype.as_deref() == Some("image/png") {
        return (status, json!({ "png_bytes": bytes.len() }));
    }
    assert_eq!(ctype.as_deref(), Some("application/json"), "{uri}");
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn read_only_resources() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path());
    let (s, v) = call(&app, "GET", "/models", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["model_id"], MODEL);
    assert_eq!(v[0]["layers"][1]["channels"], 4);
    assert_eq!(v[0]["splits"], json!(["adversarial-test", "validation"]));

    let (s, v) = call(&app, "GET", &format!("/models/{MODEL}/layers/conv2/units"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 4);
    assert_eq!(v[0]["description"], "white text");

    let (s, v) = call(&app, "GET", &format!("/units/{MODEL}/conv1/1/description"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["description"], "human faces");
    assert_eq!(v["wpmi"], -0.6);

    let (s, v) = call(&app, "GET", &format!("/units/{MODEL}/conv1/1/exemplars"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["exemplars"].as_array().unwrap().len(), 3);
    assert_eq!(v["metadata"]["k"], 3);
    let img = v["exemplars"][0]["image"].as_str().unwrap().to_string();
    let (s, v) = call(&app, "GET", &img, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["png_bytes"].as_u64().unwrap() > 8);

    let (s, v) = call(&app, "GET", "/audit?keywords=face", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["total"], 2);
    assert_eq!(v[0]["matches"][0]["layer_id"], "conv1");
    let (_, v) = call(&app, "GET", "/audit?keywords=text,word", None).await;
    assert_eq!(v[0]["total"], 5);

    let (s, v) = call(&app, "GET", "/models/nope/layers/conv1/units", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_model");
    assert!(v["message"].as_str().unwrap().contains("nope"));
    let (s, v) = call(&app, "GET", &format!("/units/{MODEL}/conv1/9/description"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_unit");
    let (_, v) = call(&app, "GET", &format!("/models/{MODEL}/layers/fc/units"), None).await;
    assert_eq!(v["code"], "unknown_layer");
}

#[tokio::test]
async fn sessions_are_idempotent_atomic_and_isolated() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path());
    let (s, a) = call(&app, "POST", "/sessions", Some(json!({ "model_id": MODEL }))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, b) = call(&app, "POST", "/sessions", Some(json!({ "model_id": MODEL }))).await;
    assert_ne!(a["id"], b["id"]);
    let (a, b) = (a["id"].as_str().unwrap().to_string(), b["id"].as_str().unwrap().to_string());
    let (_, v) = call(&app, "GET", &format!("/sessions/{a}"), None).await;
    assert_eq!(v["units"], json!([]));
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "model_id": "ghost" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_model");

    let base_val = call(&app, "GET", &format!("/sessions/{a}/metrics?split=validation"), None).await.1["accuracy"].clone();
    let u = json!({ "layer": "conv1", "unit": 0 });
    let w = json!({ "layer": "conv2", "unit": 3 });
    let (_, s1) = call(&app, "POST", &format!("/sessions/{a}/ablations"), Some(json!({ "units": [u] }))).await;
    let (_, s2) = call(&app, "POST", &format!("/sessions/{a}/ablations"), Some(json!({ "units": [u] }))).await;
    assert_eq!(s1["units"], s2["units"]);
    let (_, s3) = call(&app, "POST", &format!("/sessions/{a}/ablations"), Some(json!({ "units": [] }))).await;
    assert_eq!(s3["units"], s2["units"]);
    call(&app, "POST", &format!("/sessions/{a}/ablations"), Some(json!({ "units": [w] }))).await;
    call(&app, "POST", &format!("/sessions/{b}/ablations"), Some(json!({ "units": [u, w] }))).await;
    let (_, ma) = call(&app, "GET", &format!("/sessions/{a}/metrics?split=adversarial-test"), None).await;
    let (_, mb) = call(&app, "GET", &format!("/sessions/{b}/metrics?split=adversarial-test"), None).await;
    assert_eq!(ma["accuracy"], mb["accuracy"]);
    assert_eq!(ma["n_ablated"], 2);
    let (_, again) = call(&app, "GET", &format!("/sessions/{a}/metrics?split=adversarial-test"), None).await;
    assert_eq!(again, ma);

    let bad = json!({ "units": [{ "layer": "conv1", "unit": 1 }, { "layer": "conv1", "unit": 99 }] });
    let (s, v) = call(&app, "POST", &format!("/sessions/{a}/ablations"), Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "invalid_unit");
    let (_, v) = call(&app, "GET", &format!("/sessions/{a}"), None).await;
    assert_eq!(v["units"].as_array().unwrap().len(), 2);

    let (_, v) = call(&app, "POST", &format!("/sessions/{a}/reset"), None).await;
    assert_eq!(v["units"], json!([]));
    let (_, m) = call(&app, "GET", &format!("/sessions/{a}/metrics?split=validation"), None).await;
    assert_eq!(m["accuracy"], base_val);
    let (_, v) = call(&app, "GET", &format!("/sessions/{b}"), None).await;
    assert_eq!(v["units"].as_array().unwrap().len(), 2);

    let (s, v) = call(&app, "GET", &format!("/sessions/{a}/metrics?split=train"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
    let (s, v) = call(&app, "GET", "/sessions/zzz/metrics", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_session");
}

#[tokio::test]
async fn metrics_replay_edit_curve_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = fixture(dir.path());
    let mut session = AblationSession::new(MODEL);
    let units: Vec<UnitId> = model.all_units();
    let mut plan = plan_edit(&model, &mut session, units, &data.val).unwrap();
    let curve = incremental_edit(&model, &mut session, &mut plan, &data.val, &data.test, 0.0).unwrap();
    let app = app(dir.path());
    for step in [0, curve.stop_index, curve.steps.len() - 1] {
        let (_, s) = call(&app, "POST", "/sessions", Some(json!({ "model_id": MODEL }))).await;
        let id = s["id"].as_str().unwrap();
        let set: Vec<UnitId> = plan.units_at(step).into_iter().collect();
        call(&app, "POST", &format!("/sessions/{id}/ablations"), Some(json!({ "units": set }))).await;
        let (_, v) = call(&app, "GET", &format!("/sessions/{id}/metrics?split=validation"), None).await;
        let (_, t) = call(&app, "GET", &format!("/sessions/{id}/metrics?split=adversarial-test"), None).await;
        assert_eq!(v["accuracy"].as_f64().unwrap().to_bits(), curve.steps[step].val_accuracy.to_bits());
        assert_eq!(t["accuracy"].as_f64().unwrap().to_bits(), curve.steps[step].test_accuracy.to_bits());
        let (_, st) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
        assert_eq!(st["last_evaluation"]["validation"], v["accuracy"]);
    }
}
