mod common;

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use esp_cli::server::router;
use esp_core::service::{Published, ServiceConfig, ServiceState};
use esp_core::store::Registry;

fn state() -> Arc<ServiceState> {
    static STATE: OnceLock<Arc<ServiceState>> = OnceLock::new();
    STATE
        .get_or_init(|| {
            let reg = Registry::open(common::published_registry()).unwrap();
            let cfg = ServiceConfig {
                mc_rollouts: 16,
                default_horizon: 60,
                ..Default::default()
            };
            Arc::new(ServiceState::new(Published::load(&reg).unwrap(), cfg).unwrap())
        })
        .clone()
}

fn app() -> Router {
    router(state(), "*").unwrap()
}

async fn send(req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let res = app().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

async fn get(uri: &str) -> (StatusCode, Vec<u8>) {
    let (s, _, b) = send(Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, b)
}

async fn post(uri: &str, body: &Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, _, b) = send(req).await;
    (s, b)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn first_country() -> String {
    state().countries()[0].id.clone()
}

#[tokio::test]
async fn health_and_countries() {
    let (s, b) = get("/health").await;
    assert_eq!(s, StatusCode::OK);
    let h = json_of(&b);
    assert_eq!(h["status"], "ok");
    assert_eq!(h["prescriptors"], 20);
    assert_eq!(h["calibrated"], true);

    let (s, b) = get("/countries").await;
    assert_eq!(s, StatusCode::OK);
    let c = json_of(&b);
    let list = c.as_array().unwrap();
    assert_eq!(list.len() as u64, h["countries"].as_u64().unwrap());
    assert!(list.len() >= 20);
    assert!(list.iter().all(|e| e["recent_new_cases"].as_array().unwrap().len() <= 14));
}

#[tokio::test]
async fn prescriptors_are_twenty_mutually_nondominated_entries() {
    let (s, b) = get("/prescriptors").await;
    assert_eq!(s, StatusCode::OK);
    let list = json_of(&b);
    let points: Vec<(f64, f64)> = list
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["mean_cases"].as_f64().unwrap(), e["mean_stringency"].as_f64().unwrap()))
        .collect();
    assert_eq!(points.len(), 20);
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            let dominates = a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1);
            assert!(i == j || !dominates, "entry {i} dominates entry {j}");
        }
    }
    assert!(points.windows(2).all(|w| w[0].1 >= w[1].1), "not ordered by stringency");
}

#[tokio::test]
async fn forecast_carries_bands_and_artifact_citations() {
    let country = first_country();
    let (s, b) = get(&format!("/forecast?country={country}&prescriptor=0&horizon=30&seed=4")).await;
    assert_eq!(s, StatusCode::OK);
    let r = json_of(&b);
    assert_eq!(r["horizon"], 30);
    assert_eq!(r["forecast"]["days"].as_array().unwrap().len(), 30);
    let bands = r["bands"].as_array().unwrap();
    assert_eq!(bands.len(), 30);
    for d in bands {
        let (q25, med, q75) = (d["q25"].as_f64().unwrap(), d["median"].as_f64().unwrap(), d["q75"].as_f64().unwrap());
        assert!(q25 <= med && med <= q75);
    }
    let manifest = state().published().manifest_fingerprint.clone();
    assert_eq!(r["artifacts"]["manifest"], manifest.as_str());

    let (_, again) = get(&format!("/forecast?country={country}&prescriptor=0&horizon=30&seed=4")).await;
    assert_eq!(b, again);
}

#[tokio::test]
async fn identity_scratchpad_equals_the_forecast_byte_for_byte() {
    let country = first_country();
    for p in [0usize, 7, 19] {
        let (s1, direct) = get(&format!("/forecast?country={country}&prescriptor={p}&horizon=45&seed=2")).await;
        let (s2, pad) = post(
            "/scratchpad",
            &json!({ "country_id": country, "base": { "prescriptor": p }, "edits": [], "horizon": 45, "seed": 2 }),
        )
        .await;
        assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
        assert!(direct == pad, "prescriptor {p}: scratchpad differs from forecast");

        let schedule: Vec<Value> = json_of(&direct)["forecast"]["days"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| d["npis"].clone())
            .collect();
        let (s3, explicit) = post(
            "/scratchpad",
            &json!({ "country_id": country, "base": { "schedule": schedule }, "horizon": 45, "seed": 2 }),
        )
        .await;
        assert_eq!(s3, StatusCode::OK);
        assert_eq!(json_of(&explicit)["forecast"], json_of(&direct)["forecast"]);
        assert_eq!(json_of(&explicit)["bands"], json_of(&direct)["bands"]);
    }
}

#[tokio::test]
async fn out_of_bounds_edits_are_rejected_with_their_days() {
    let country = first_country();
    let (s, b) = post(
        "/scratchpad",
        &json!({
            "country_id": country,
            "base": { "prescriptor": 1 },
            "edits": [
                { "day": 3, "npi": 0, "level": 4 },
                { "day": 9, "npi": 7, "level": -1 },
                { "day": 5, "npi": 8, "level": 0 },
                { "day": 50, "npi": 1, "level": 1 },
                { "day": 4, "npi": 2, "level": 1 }
            ],
            "horizon": 20
        }),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let e = json_of(&b);
    assert_eq!(e["code"], "invalid_edit");
    assert_eq!(e["offending_days"], json!([3, 5, 9, 50]));
    assert_eq!(e["violations"].as_array().unwrap().len(), 4);

    let (s, b) = post(
        "/scratchpad",
        &json!({ "country_id": country, "base": { "schedule": [[0, 0, 0, 0, 0, 0, 0, 0]] }, "horizon": 3 }),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&b)["code"], "invalid_schedule");

    let (s, b) = post(
        "/scratchpad",
        &json!({ "country_id": country, "base": { "schedule": [[0, 0, 0, 0, 0, 0, 0, 0], [0, 0, 9, 0, 0, 0, 0, 0]] }, "horizon": 2 }),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&b)["offending_days"], json!([1]));
}

#[tokio::test]
async fn valid_edits_change_the_schedule_and_forecast() {
    let country = first_country();
    let (_, base) = post("/scratchpad", &json!({ "country_id": country, "base": { "prescriptor": 19 }, "horizon": 20 })).await;
    let edits: Vec<Value> = (0..20).map(|d| json!({ "day": d, "npi": 2, "level": 2 })).collect();
    let (s, edited) = post(
        "/scratchpad",
        &json!({ "country_id": country, "base": { "prescriptor": 19 }, "edits": edits, "horizon": 20 }),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let days = json_of(&edited)["forecast"]["days"].as_array().unwrap().clone();
    assert!(days.iter().all(|d| d["npis"][2] == 2));
    assert_ne!(json_of(&base)["forecast"], json_of(&edited)["forecast"]);
}

#[tokio::test]
async fn stricter_schedules_never_forecast_more_cases() {
    let country = first_country();
    let zero: Vec<Value> = (0..60).map(|_| json!([0, 0, 0, 0, 0, 0, 0, 0])).collect();
    let max: Vec<Value> = (0..60).map(|_| json!([3, 3, 2, 4, 2, 3, 2, 4])).collect();
    let total = |v: &Value| -> f64 { v["forecast"]["days"].as_array().unwrap().iter().map(|d| d["new_cases"].as_f64().unwrap()).sum() };
    let (_, open) = post("/scratchpad", &json!({ "country_id": country, "base": { "schedule": zero }, "horizon": 60 })).await;
    let (s, strict) = post("/scratchpad", &json!({ "country_id": country, "base": { "schedule": max }, "horizon": 60 })).await;
    assert_eq!(s, StatusCode::OK);
    assert!(total(&json_of(&strict)) <= total(&json_of(&open)));
}

#[tokio::test]
async fn errors_carry_codes_and_statuses() {
    let country = first_country();
    let cases = [
        ("/forecast?country=NOPE&prescriptor=0", StatusCode::NOT_FOUND, "unknown_country"),
        (&*format!("/forecast?country={country}&prescriptor=20"), StatusCode::NOT_FOUND, "unknown_prescriptor"),
        (&*format!("/forecast?country={country}&prescriptor=0&horizon=181"), StatusCode::BAD_REQUEST, "bad_request"),
        (&*format!("/forecast?country={country}&prescriptor=0&horizon=0"), StatusCode::BAD_REQUEST, "bad_request"),
        (&*format!("/forecast?country={country}&prescriptor=0&start_date=1999-01-01"), StatusCode::BAD_REQUEST, "invalid_start_date"),
        ("/forecast?prescriptor=0", StatusCode::BAD_REQUEST, "invalid_request"),
        (&*format!("/forecast?country={country}&prescriptor=x"), StatusCode::BAD_REQUEST, "invalid_request"),
    ];
    for (uri, status, code) in cases {
        let (s, b) = get(uri).await;
        assert_eq!(s, status, "{uri}");
        assert_eq!(json_of(&b)["code"], code, "{uri}");
    }
    let (s, b) = post("/scratchpad", &json!({ "country_id": "NOPE", "base": { "prescriptor": 0 } })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&b)["code"], "unknown_country");

    let req = Request::post("/scratchpad")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let (s, _, b) = send(req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&b)["code"], "invalid_request");

    let (s, _) = get("/nowhere").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_preflight_allows_the_dashboard() {
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/scratchpad")
        .header(header::ORIGIN, "http://localhost:3000")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (s, h, _) = send(req).await;
    assert!(s.is_success());
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let strict = router(state(), "http://dash.example").unwrap();
    let res = strict
        .oneshot(Request::get("/health").header(header::ORIGIN, "http://dash.example").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://dash.example");
    assert!(router(state(), "bad\norigin").is_err());
}

#[tokio::test]
async fn repeated_band_requests_hit_the_cache() {
    let country = state().countries()[1].id.clone();
    let uri = format!("/forecast?country={country}&prescriptor=5&horizon=25&seed=99");
    let before = state().cache_stats();
    get(&uri).await;
    get(&uri).await;
    let after = state().cache_stats();
    assert!(after.misses > before.misses);
    assert!(after.hits > before.hits);
}
