use serde_json::json;

use super::*;
use crate::scenario::run_scenario;
use crate::world::WorldConfig;

fn world() -> World {
    World::new(WorldConfig {
        block_size: 256,
        ..WorldConfig::default()
    })
}

fn call(w: &mut World, method: &str, path: &str, body: Value) -> ApiResponse {
    handle(w, &ApiRequest::new(method, path, body))
}

fn ok(w: &mut World, method: &str, path: &str, body: Value) -> Value {
    let r = call(w, method, path, body);
    assert!(r.status < 300, "{method} {path}: {} {}", r.status, r.body);
    r.body
}

fn setup(w: &mut World, mode: Option<&str>) {
    ok(w, "POST", "/api/namespaces", json!({"name": "shop"}));
    if let Some(m) = mode {
        ok(
            w,
            "PUT",
            "/api/namespaces/shop/tags",
            json!({"key": "backup-mode", "value": m}),
        );
    }
    ok(
        w,
        "POST",
        "/api/namespaces/shop/apps",
        json!({"name": "db", "claims": [64, 64]}),
    );
}

#[test]
fn health_carries_sim_time() {
    let mut w = world();
    let r = call(&mut w, "GET", "/api/health", Value::Null);
    assert_eq!(r.status, 200);
    assert_eq!(r.body, json!({"status": "ok", "sim_time": 0.0}));
}

#[test]
fn unknown_path_and_method() {
    let mut w = world();
    let r = call(&mut w, "GET", "/api/nope", Value::Null);
    assert_eq!(r.status, 404);
    assert_eq!(r.body["code"], "NotFound");
    assert_eq!(r.body["detail"]["path"], "/api/nope");
    assert!(r.body["sim_time"].is_number());
    assert_eq!(call(&mut w, "GET", "/", Value::Null).status, 404);
    let r = call(&mut w, "DELETE", "/api/groups", Value::Null);
    assert_eq!(
        (r.status, r.body["code"].as_str()),
        (400, Some("InvalidArgument"))
    );
}

#[test]
fn fresh_verify_is_empty() {
    let mut w = world();
    let v = ok(&mut w, "GET", "/api/verify?target=backup", Value::Null);
    assert_eq!(v["committed_txids"], json!([]));
    assert_eq!(v["torn_txids"], json!([]));
    assert_eq!(v["prefix_ok"], true);
    assert_eq!(v, ok(&mut w, "GET", "/api/verify", Value::Null));
    let r = call(&mut w, "GET", "/api/verify?target=elsewhere", Value::Null);
    assert_eq!(r.status, 400);
}

#[test]
fn tag_then_backup_pvs_show_members() {
    let mut w = world();
    setup(&mut w, None);
    let empty = ok(&mut w, "GET", "/api/sites/backup/pvs", Value::Null);
    assert_eq!(empty["pvs"], json!([]));
    let ns = ok(
        &mut w,
        "PUT",
        "/api/namespaces/shop/tags",
        json!({"value": "ConsistentCopyToCloud"}),
    );
    assert_eq!(ns["tags"]["backup-policy"], "ConsistentCopyToCloud");
    ok(
        &mut w,
        "POST",
        "/api/advance",
        json!({"until": "quiescent"}),
    );
    let pvs = ok(&mut w, "GET", "/api/sites/backup/pvs", Value::Null);
    let pvs = pvs["pvs"].as_array().unwrap();
    assert_eq!(pvs.len(), 2);
    assert!(pvs.iter().all(|p| p["replica_of"].is_string()));
    let main = ok(&mut w, "GET", "/api/sites/main/pvs", Value::Null);
    assert_eq!(main["pvs"].as_array().unwrap().len(), 2);
    assert_eq!(
        call(&mut w, "GET", "/api/sites/moon/pvs", Value::Null).status,
        400
    );
}

#[test]
fn snapshot_group_on_per_volume_is_unsupported() {
    let mut w = world();
    setup(&mut w, Some("per_volume"));
    ok(
        &mut w,
        "PUT",
        "/api/namespaces/shop/tags",
        json!({"value": "ConsistentCopyToCloud"}),
    );
    ok(&mut w, "POST", "/api/advance", json!({"ms": 150}));
    let r = call(
        &mut w,
        "POST",
        "/api/groups/grp-0001/snapshot-groups",
        Value::Null,
    );
    assert_eq!(r.status, 422);
    assert_eq!(r.body["code"], "Unsupported");
    assert!(
        r.body["message"].as_str().unwrap().contains("per volume"),
        "{}",
        r.body
    );
    assert_eq!(r.body["detail"]["plugin"], "block-replication");
}

#[test]
fn full_flow_through_the_api() {
    let mut w = world();
    setup(&mut w, None);
    ok(
        &mut w,
        "PUT",
        "/api/namespaces/shop/tags",
        json!({"value": "ConsistentCopyToCloud"}),
    );
    ok(&mut w, "POST", "/api/advance", json!({"ms": 150}));
    let groups = ok(&mut w, "GET", "/api/groups", Value::Null);
    assert_eq!(groups["groups"][0]["status"]["phase"], "consistent");
    let started = call(
        &mut w,
        "POST",
        "/api/workload",
        json!({"app": "shop/db", "count": 20, "seed": 4, "think_ms": 1.0}),
    );
    assert_eq!(started.status, 202);
    assert_eq!(started.body["running"], true);
    let again = call(
        &mut w,
        "POST",
        "/api/workload",
        json!({"app": "app-0001", "count": 1}),
    );
    assert_eq!(
        (again.status, again.body["code"].as_str()),
        (409, Some("Conflict"))
    );

    ok(
        &mut w,
        "POST",
        "/api/advance",
        json!({"until": "quiescent"}),
    );
    let st = ok(&mut w, "GET", "/api/groups/grp-0001/status", Value::Null);
    assert_eq!(st["acked_seq"], 60);
    assert_eq!(st["applied_seq"], 60);
    assert_eq!(st["lag_entries"], 0);
    assert!(st.get("lost_on_failover").is_none());

    let feed = ok(
        &mut w,
        "GET",
        "/api/workload/feed?since=0&limit=5",
        Value::Null,
    );
    assert_eq!(feed["lines"].as_array().unwrap().len(), 5);
    assert_eq!(feed["next"], 5);
    assert!(feed["lines"][0]["text"]
        .as_str()
        .unwrap()
        .starts_with("1, "));
    let rest = ok(&mut w, "GET", "/api/workload/feed?since=5", Value::Null);
    let n = rest["lines"].as_array().unwrap().len();
    let tail = ok(
        &mut w,
        "GET",
        &format!("/api/workload/feed?since={}", 5 + n),
        Value::Null,
    );
    assert_eq!(tail["lines"], json!([]));

    let sg = call(
        &mut w,
        "POST",
        "/api/groups/grp-0001/snapshot-groups",
        Value::Null,
    );
    assert_eq!(sg.status, 201);
    assert_eq!(sg.body["at_seq"], 60);
    let a = ok(
        &mut w,
        "GET",
        "/api/snapshot-groups/sg-0001/analytics",
        Value::Null,
    );
    assert_eq!(a["committed_count"], 20);
    let list = ok(&mut w, "GET", "/api/snapshot-groups", Value::Null);
    assert_eq!(list["snapshot_groups"].as_array().unwrap().len(), 1);
    let v = ok(&mut w, "GET", "/api/verify?target=sg-0001", Value::Null);
    assert_eq!(v["committed_txids"].as_array().unwrap().len(), 20);

    let f = call(
        &mut w,
        "POST",
        "/api/faults",
        json!({"kind": "site_failure", "target": "main"}),
    );
    assert_eq!(f.status, 202);
    ok(&mut w, "POST", "/api/advance", json!({"ms": 1}));
    let r = ok(&mut w, "POST", "/api/groups/grp-0001/failover", Value::Null);
    assert_eq!(r["lost_entries"], 0);
    let r = call(&mut w, "POST", "/api/groups/grp-0001/failover", Value::Null);
    assert_eq!(r.status, 409);
}

#[test]
fn caller_errors_map_to_4xx() {
    let mut w = world();
    setup(&mut w, None);
    let dup = call(&mut w, "POST", "/api/namespaces", json!({"name": "shop"}));
    assert_eq!(dup.status, 409);
    let bad = call(&mut w, "POST", "/api/namespaces", json!({"nom": "x"}));
    assert_eq!(
        (bad.status, bad.body["code"].as_str()),
        (400, Some("InvalidArgument"))
    );
    let missing = call(&mut w, "GET", "/api/groups/grp-0009/status", Value::Null);
    assert_eq!(missing.status, 404);
    let malformed = call(&mut w, "GET", "/api/groups/banana/status", Value::Null);
    assert_eq!(malformed.status, 400);
    let fault = call(
        &mut w,
        "POST",
        "/api/faults",
        json!({"kind": "meteor", "target": "main"}),
    );
    assert_eq!(fault.status, 400);
    let link = call(
        &mut w,
        "POST",
        "/api/faults",
        json!({"kind": "partition", "target": "nowhere"}),
    );
    assert_eq!(link.status, 404, "{}", link.body);
    let feed = call(&mut w, "GET", "/api/workload/feed?since=x", Value::Null);
    assert_eq!(feed.status, 400);
}

#[test]
fn sim_time_is_monotone_across_responses() {
    let mut w = world();
    setup(&mut w, None);
    let mut last = -1.0;
    for (m, p, b) in [
        ("GET", "/api/health", Value::Null),
        ("POST", "/api/advance", json!({"ms": 10})),
        ("GET", "/api/nope", Value::Null),
        ("POST", "/api/advance", json!({"ms": 0.5})),
        ("GET", "/api/groups", Value::Null),
    ] {
        let t = call(&mut w, m, p, b).body["sim_time"].as_f64().unwrap();
        assert!(t >= last);
        last = t;
    }
    assert_eq!(last, 10.5);
}

/// The same state changes issued as scenario verbs and as API calls land in
/// identical states.
#[test]
fn api_and_scenario_reach_the_same_state() {
    let cfg = WorldConfig {
        block_size: 256,
        ..WorldConfig::default()
    };
    let text = "\
create-ns name=shop
create-app ns=shop name=db claims=64,64
tag ns=shop value=ConsistentCopyToCloud
advance ms=150
run-workload app=shop/db count=15 seed=9 think_ms=2
advance ms=20
inject kind=delay_change target=grp-0001/fwd latency_ms=80
advance until=quiescent
snapshot-group group=grp-0001
inject kind=site_failure target=main
advance ms=1
failover group=grp-0001
";
    let (outcome, scripted) = run_scenario(text, cfg.clone());
    assert_eq!(outcome.exit_code, 0, "{}", outcome.report_text());

    let mut w = World::new(cfg);
    for (m, p, b) in [
        ("POST", "/api/namespaces", json!({"name": "shop"})),
        (
            "POST",
            "/api/namespaces/shop/apps",
            json!({"name": "db", "claims": [64, 64]}),
        ),
        (
            "PUT",
            "/api/namespaces/shop/tags",
            json!({"value": "ConsistentCopyToCloud"}),
        ),
        ("POST", "/api/advance", json!({"ms": 150})),
        (
            "POST",
            "/api/workload",
            json!({"app": "shop/db", "count": 15, "seed": 9, "think_ms": 2}),
        ),
        ("POST", "/api/advance", json!({"ms": 20})),
        (
            "POST",
            "/api/faults",
            json!({"kind": "delay_change", "target": "grp-0001/fwd", "latency_ms": 80}),
        ),
        ("POST", "/api/advance", json!({"until": "quiescent"})),
        ("POST", "/api/groups/grp-0001/snapshot-groups", Value::Null),
        (
            "POST",
            "/api/faults",
            json!({"kind": "site_failure", "target": "main"}),
        ),
        ("POST", "/api/advance", json!({"ms": 1})),
        ("POST", "/api/groups/grp-0001/failover", Value::Null),
    ] {
        ok(&mut w, m, p, b);
    }
    assert_eq!(w.now(), scripted.now());
    assert_eq!(w.state_digest(), scripted.state_digest());
}

#[test]
fn request_order_fixes_the_outcome() {
    let run = |first: &str, second: &str| {
        let mut w = World::new(WorldConfig {
            trace: true,
            ..WorldConfig::default()
        });
        ok(&mut w, "POST", "/api/namespaces", json!({"name": "shop"}));
        ok(
            &mut w,
            "PUT",
            "/api/namespaces/shop/tags",
            json!({"key": "k", "value": first}),
        );
        ok(
            &mut w,
            "PUT",
            "/api/namespaces/shop/tags",
            json!({"key": "k", "value": second}),
        );
        let ns = ok(&mut w, "GET", "/api/namespaces/shop", Value::Null);
        (ns["tags"]["k"].clone(), w.trace().to_vec())
    };
    let (a, ta) = run("x", "y");
    let (b, tb) = run("x", "y");
    assert_eq!((a.clone(), ta), (b, tb));
    assert_eq!(a, "y");
    assert_eq!(run("y", "x").0, "x");
}

#[test]
fn raw_bodies() {
    let mut w = world();
    let r = handle_raw(&mut w, "post", "/api/namespaces", br#"{"name":"a"}"#);
    assert_eq!(r.status, 201);
    let r = handle_raw(&mut w, "POST", "/api/namespaces?x=1", b"{nope");
    assert_eq!(
        (r.status, r.body["code"].as_str()),
        (400, Some("InvalidArgument"))
    );
    assert_eq!(r.body["detail"]["path"], "/api/namespaces");
    assert_eq!(handle_raw(&mut w, "GET", "/api/health", b" \n").status, 200);
}
