use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rec_cbm_cli::service::{router, AppState, InterventionResponse};
use rec_cbm_core::rubric::equicorrelation;
use rec_cbm_core::{
    assign_splits, generate_synthetic, intervene_instance, train_model, DecisionTrace,
    EmbeddingConfig, InterventionKind, InterventionPolicy, Model, RubricSpec, Split, TrainConfig,
};
use serde_json::{json, Value};
use tower::ServiceExt;

fn state() -> Arc<AppState> {
    static STATE: OnceLock<Arc<AppState>> = OnceLock::new();
    STATE
        .get_or_init(|| {
            let spec = RubricSpec::with_default_names(3, 3, 3).unwrap();
            let data = generate_synthetic(&spec, 200, &equicorrelation(3, 0.6), 0.3, 11).unwrap();
            let data = assign_splits(data, [0.7, 0.2, 0.1], 0).unwrap();
            let config = TrainConfig {
                stage1_epochs: 6,
                stage2_epochs: 6,
                stage1_lr: 1e-3,
                seed: 2,
                ..TrainConfig::synthetic()
            };
            let embedding = EmbeddingConfig {
                d: 16,
                vocab_size: 256,
                ..EmbeddingConfig::default()
            };
            let mut model = Model::init(spec, embedding, config).unwrap();
            train_model(
                &mut model,
                &data.subset(Split::Train),
                &data.subset(Split::Dev),
            )
            .unwrap();
            Arc::new(AppState {
                model,
                instances: Some(data.subset(Split::Test)),
                split: Some("test".into()),
            })
        })
        .clone()
}

async fn call(method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(state()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn post(uri: &str, body: Value) -> (StatusCode, Value) {
    call("POST", uri, Some(body.to_string())).await
}

fn first_id() -> String {
    state().instances.as_ref().unwrap().instances[0].id.clone()
}

fn intervention(v: Value) -> InterventionResponse {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn model_and_instances_describe_the_loaded_state() {
    let (status, model) = call("GET", "/api/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(model["spec"]["num_concepts"], 3);
    assert_eq!(model["split"], "test");
    let (status, list) = call("GET", "/api/instances", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids = list["ids"].as_array().unwrap();
    assert_eq!(ids.len(), state().instances.as_ref().unwrap().len());
    assert_eq!(ids[0], first_id());
}

#[tokio::test]
async fn trace_decomposes_the_logit() {
    let (status, body) = post("/api/trace", json!({ "id": first_id(), "top_n": 3 })).await;
    assert_eq!(status, StatusCode::OK);
    let trace: DecisionTrace = serde_json::from_value(body).unwrap();
    assert!(trace.decomposition_residual() <= 1e-6);
    assert!(trace.concepts.iter().all(|c| c.top_tokens.len() == 3));
    assert!(trace.label.is_some());
}

#[tokio::test]
async fn empty_overrides_reproduce_the_trace_grade() {
    let id = first_id();
    let (_, trace) = post("/api/trace", json!({ "id": id })).await;
    let trace: DecisionTrace = serde_json::from_value(trace).unwrap();
    let (status, resp) = post("/api/intervene", json!({ "id": id, "overrides": {} })).await;
    assert_eq!(status, StatusCode::OK);
    let resp = intervention(resp);
    assert_eq!(resp.predicted_grade, trace.predicted_grade);
    assert_eq!(resp.logits, trace.logits);
    assert_eq!(resp.probabilities, trace.probabilities);
    assert_eq!(resp.trace, trace);
    assert!(resp.contribution_deltas.iter().all(|&d| d == 0.0));
}

#[tokio::test]
async fn overrides_match_the_oracle_policy() {
    let st = state();
    let split = st.instances.as_ref().unwrap();
    let m = st.model.spec.max_concept_level as f64;
    let policy = InterventionPolicy::new(InterventionKind::Oracle, 0);
    for (index, inst) in split.instances.iter().enumerate() {
        let path = intervene_instance(&st.model, inst, index, &policy).unwrap();
        let label = |k: usize| inst.concept_labels[k] as f64 / m;

        let top = path.order[0];
        let one = json!({ "id": inst.id, "overrides": { top.to_string(): label(top) } });
        let resp = intervention(post("/api/intervene", one).await.1);
        assert_eq!(resp.predicted_grade, path.grades[1], "{}", inst.id);
        assert_eq!(resp.observed, path.observed[1]);

        let all: BTreeMap<String, f64> = (0..3).map(|k| (k.to_string(), label(k))).collect();
        let resp = intervention(
            post("/api/intervene", json!({ "id": inst.id, "overrides": all }))
                .await
                .1,
        );
        assert_eq!(resp.predicted_grade, path.grades[3], "{}", inst.id);
        let sum: f64 = resp.contributions.iter().sum();
        assert!((sum + resp.bias - resp.logits[resp.predicted_grade]).abs() <= 1e-9);
    }
}

#[tokio::test]
async fn ad_hoc_text_is_traced() {
    let body = json!({ "question": "q", "response": "c0lvl2 c0lvl2 c0lvl2 words", "overrides": {"1": 0.5} });
    let (status, resp) = post("/api/intervene", body).await;
    assert_eq!(status, StatusCode::OK);
    let resp = intervention(resp);
    assert_eq!(resp.trace.id, "ad-hoc");
    assert_eq!(resp.trace.label, None);
    assert_eq!(resp.observed[1], 0.5);
}

#[tokio::test]
async fn bad_requests_are_rejected_with_the_right_status() {
    let id = first_id();
    let cases = [
        (
            json!({ "id": id, "overrides": { "0": 1.5 } }),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({ "id": id, "overrides": { "0": -0.1 } }),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({ "id": id, "overrides": { "3": 0.5 } }),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({ "id": id, "overrides": { "x": 0.5 } }),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (json!({ "id": "no-such-id" }), StatusCode::NOT_FOUND),
        (
            json!({ "id": id, "overrides": { "0": "high" } }),
            StatusCode::BAD_REQUEST,
        ),
        (json!({}), StatusCode::BAD_REQUEST),
    ];
    for (body, expected) in cases {
        let (status, err) = post("/api/intervene", body.clone()).await;
        assert_eq!(status, expected, "{body}");
        assert_eq!(err["error"]["status"], expected.as_u16());
    }
    let (status, _) = call("POST", "/api/trace", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post("/api/trace", json!({ "id": "missing" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn identical_requests_give_identical_responses() {
    let body = json!({ "id": first_id(), "overrides": { "0": 0.25, "2": 1.0 } });
    let (_, a) = post("/api/intervene", body.clone()).await;
    let (_, b) = post("/api/intervene", body.clone()).await;
    assert_eq!(a, b);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let body = body.clone();
            tokio::spawn(async move { post("/api/intervene", body).await.1 })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), a);
    }
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let req = Request::builder()
        .method("GET")
        .uri("/api/model")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = router(state()).oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}
