use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use p31_core::pipeline::{analyze_cohort, AnalysisConfig, SubjectRecord};
use p31_core::synth::{synth_subject, AcquisitionProtocol, DataForm, GroundTruth};
use p31_review::{router, Store};
use serde_json::{json, Value};
use tokio::sync::RwLock;

const FLAGGED: &str = "patient-0";

fn cohort() -> Vec<SubjectRecord> {
    let protocol = AcquisitionProtocol::default();
    let mut records = Vec::new();
    for (group, base_tau) in [("patient", 41.0), ("control", 33.0)] {
        for i in 0..4 {
            let mut t = GroundTruth::default();
            t.noise_sd = t.noise_for_rest_cv(0.0025, protocol.tr_dynamic);
            t.recovery.tau_pcr = base_tau + 2.0 * i as f64;
            let id = format!("{group}-{i}");
            if id == FLAGGED {
                t.corruption.first_recovery_spike = Some(-120.0);
            }
            records.push(synth_subject(&id, group, &t, &protocol, 40 + i, DataForm::Amplitudes).unwrap());
        }
    }
    analyze_cohort(&mut records, &AnalysisConfig::default()).unwrap();
    records
}

fn app_with(snapshot: Option<std::path::PathBuf>) -> Router {
    let store = Store::new(cohort(), AnalysisConfig::default(), "patient", "control", snapshot).unwrap();
    router(Arc::new(RwLock::new(store)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = tower::ServiceExt::oneshot(app.clone(), req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn pcr_fit(subject: &Value) -> &Value {
    &subject["series"][0]["fit"]
}

#[tokio::test]
async fn flagged_list_has_the_spiked_subject() {
    let app = app_with(None);
    let (status, body) = call(&app, "GET", "/subjects?status=flagged", None).await;
    assert_eq!(status, StatusCode::OK);
    let subjects = body["subjects"].as_array().unwrap();
    assert_eq!(subjects.len(), 1);
    assert_eq!(subjects[0]["id"], FLAGGED);
    assert_eq!(subjects[0]["pending_review"], true);
    assert_eq!(subjects[0]["suggested_start_index"], 1);
    assert_eq!(body["revision"], 0);

    let (_, all) = call(&app, "GET", "/subjects", None).await;
    assert_eq!(all["subjects"].as_array().unwrap().len(), 8);
    let (status, _) = call(&app, "GET", "/subjects?status=bogus", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn recovery_view_shape() {
    let app = app_with(None);
    let (status, body) = call(&app, "GET", &format!("/subjects/{FLAGGED}/recovery"), None).await;
    assert_eq!(status, StatusCode::OK);
    let s = &body["subject"];
    assert_eq!(s["start_index"], 0);
    let series = s["series"].as_array().unwrap();
    assert_eq!(series.len(), 2);
    for one in series {
        assert_eq!(one["times"].as_array().unwrap().len(), 90);
        assert_eq!(one["overlay_times"].as_array().unwrap().len(), p31_review::OVERLAY_SAMPLES);
        assert!(one["standardized_residuals"][0].as_f64().unwrap() < -3.0);
    }
    assert_eq!(s["qc"]["first_point_flag"], true);

    let (status, _) = call(&app, "GET", "/subjects/nobody/recovery", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn preview_then_approve() {
    let app = app_with(None);
    let uri = format!("/subjects/{FLAGGED}/recovery/start-index");
    let (_, before) = call(&app, "GET", &format!("/subjects/{FLAGGED}/recovery"), None).await;
    let r2_before = pcr_fit(&before["subject"])["r2"].as_f64().unwrap();
    let (_, report_before) = call(&app, "GET", "/reports/cohort?mode=individual&qcs=true", None).await;

    let (status, preview) = call(&app, "POST", &uri, Some(json!({"index": 1, "dry_run": true}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(preview["revision"], 0);
    assert_eq!(preview["dry_run"], true);
    assert!(pcr_fit(&preview["subject"])["r2"].as_f64().unwrap() > r2_before);
    let (_, still) = call(&app, "GET", "/subjects?status=pending", None).await;
    assert_eq!(still["subjects"].as_array().unwrap().len(), 1);

    let (status, applied) = call(
        &app,
        "POST",
        &uri,
        Some(json!({"index": 1, "operator": "reviewer", "revision": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(applied["revision"], 1);
    let subject = &applied["subject"];
    assert_eq!(subject["start_index"], 1);
    assert_eq!(subject["qc"]["reselected_start_index"], 1);
    assert_eq!(subject["qc"]["reselection"]["provenance"], "operator_choice");
    let new_tau = pcr_fit(subject)["tau"].as_f64().unwrap();
    assert!((new_tau - 41.0).abs() / 41.0 < 0.02, "{new_tau}");
    // The preview predicted the applied result.
    assert_eq!(pcr_fit(&preview["subject"])["tau"], pcr_fit(subject)["tau"]);

    let (_, pending) = call(&app, "GET", "/subjects?status=pending", None).await;
    assert!(pending["subjects"].as_array().unwrap().is_empty());

    let (_, report) = call(&app, "GET", "/reports/cohort?mode=individual&qcs=true", None).await;
    assert_eq!(report["revision"], 1);
    let row = |r: &Value| {
        r["comparison"]["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|x| x["marker"] == "tau_pcr_rec")
            .unwrap()
            .clone()
    };
    let (old, new) = (row(&report_before), row(&report));
    assert_ne!(old["patient"]["mean"], new["patient"]["mean"]);
    let (_, listing) = call(&app, "GET", "/subjects?status=all", None).await;
    let mut taus = Vec::new();
    for s in listing["subjects"].as_array().unwrap() {
        if s["group"] == "patient" {
            let id = s["id"].as_str().unwrap();
            let (_, v) = call(&app, "GET", &format!("/subjects/{id}/recovery"), None).await;
            taus.push(pcr_fit(&v["subject"])["tau"].as_f64().unwrap());
        }
    }
    let mean = taus.iter().sum::<f64>() / taus.len() as f64;
    assert!((new["patient"]["mean"].as_f64().unwrap() - mean).abs() < 1e-9);

    // Without QC the report keeps the original start.
    let (_, raw) = call(&app, "GET", "/reports/cohort?mode=individual&qcs=false", None).await;
    assert_eq!(row(&raw)["patient"]["mean"], old["patient"]["mean"]);
}

#[tokio::test]
async fn stale_revision_conflicts() {
    let app = app_with(None);
    let uri = format!("/subjects/{FLAGGED}/recovery/start-index");
    let (first, second) = tokio::join!(
        call(&app, "POST", &uri, Some(json!({"index": 1, "revision": 0}))),
        call(&app, "POST", &uri, Some(json!({"index": 2, "revision": 0}))),
    );
    let mut statuses = [first.0, second.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let conflict = if first.0 == StatusCode::CONFLICT { &first.1 } else { &second.1 };
    assert_eq!(conflict["revision"], 1);
    assert!(conflict["subject"]["qc"]["reselected_start_index"].is_u64());

    // A request based on the current revision goes through.
    let (status, _) = call(&app, "POST", &uri, Some(json!({"index": 2, "revision": 1}))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn rejections() {
    let app = app_with(None);
    let clean = "/subjects/control-1/recovery/start-index";
    let (status, body) = call(&app, "POST", clean, Some(json!({"index": 1}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("not flagged"));
    let (status, body) = call(&app, "POST", clean, Some(json!({"index": 1, "override": true}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["subject"]["qc"]["reselection"]["override_flag"], true);

    let uri = format!("/subjects/{FLAGGED}/recovery/start-index");
    let (status, _) = call(&app, "POST", &uri, Some(json!({"index": 4}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "POST", &uri, Some(json!({"start": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/reports/cohort?mode=sideways", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/reports/cohort?mode=cohort_mean", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn full_report_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    let app = app_with(Some(path.clone()));
    let (_, full) = call(&app, "GET", "/reports/cohort", None).await;
    assert_eq!(full["report"]["comparisons"].as_array().unwrap().len(), 6);
    assert!(!path.exists());

    let uri = format!("/subjects/{FLAGGED}/recovery/start-index");
    call(&app, "POST", &uri, Some(json!({"index": 1}))).await;
    let saved: Vec<SubjectRecord> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(saved.len(), 8);
    let s = saved.iter().find(|r| r.id == FLAGGED).unwrap();
    assert_eq!(s.analysis.as_ref().unwrap().qc.reselected_start_index, Some(1));
}
