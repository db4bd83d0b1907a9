use std::sync::Arc;
use std::time::Duration;

use cgrepl::serve::{serve_on, ServeConfig, SharedWorld};
use cgrepl::world::{World, WorldConfig};
use serde_json::Value;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::Mutex;

async fn start(pace_ratio: f64) -> (std::net::SocketAddr, SharedWorld) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let world: SharedWorld = Arc::new(Mutex::new(World::new(WorldConfig::default())));
    let cfg = ServeConfig {
        pace_ratio,
        pace_tick: Duration::from_millis(5),
    };
    tokio::spawn(serve_on(
        listener,
        world.clone(),
        cfg,
        std::future::pending(),
    ));
    (addr, world)
}

async fn request(addr: std::net::SocketAddr, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: test\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let status = text[9..12].parse().unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    assert!(
        head.to_ascii_lowercase()
            .contains("content-type: application/json"),
        "{head}"
    );
    (status, serde_json::from_str(body).unwrap())
}

#[tokio::test]
async fn health_and_unknown_path() {
    let (addr, _) = start(0.0).await;
    let (status, body) = request(addr, "GET", "/api/health", "").await;
    assert_eq!(status, 200);
    assert_eq!(body["sim_time"], 0.0);
    let (status, body) = request(addr, "GET", "/nowhere", "").await;
    assert_eq!(status, 404);
    assert_eq!(body["code"], "NotFound");
}

#[tokio::test]
async fn mutations_go_through_the_shared_world() {
    let (addr, world) = start(0.0).await;
    let (status, _) = request(addr, "POST", "/api/namespaces", r#"{"name":"shop"}"#).await;
    assert_eq!(status, 201);
    let (status, body) = request(
        addr,
        "PUT",
        "/api/namespaces/shop/tags",
        r#"{"value":"ConsistentCopyToCloud"}"#,
    )
    .await;
    assert_eq!(status, 200, "{body}");
    let (status, body) = request(addr, "POST", "/api/namespaces", "{broken").await;
    assert_eq!(
        (status, body["code"].as_str()),
        (400, Some("InvalidArgument"))
    );
    let w = world.lock().await;
    assert_eq!(
        w.controlplane().namespace("shop").unwrap().tags["backup-policy"],
        "ConsistentCopyToCloud"
    );
}

#[tokio::test]
async fn concurrent_requests_are_serialized() {
    let (addr, world) = start(0.0).await;
    request(addr, "POST", "/api/namespaces", r#"{"name":"shop"}"#).await;
    let mut tasks = Vec::new();
    for i in 0..16 {
        tasks.push(tokio::spawn(async move {
            let body = format!(r#"{{"key":"k{i}","value":"v"}}"#);
            request(addr, "PUT", "/api/namespaces/shop/tags", &body)
                .await
                .0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), 200);
    }
    assert_eq!(
        world
            .lock()
            .await
            .controlplane()
            .namespace("shop")
            .unwrap()
            .tags
            .len(),
        16
    );
}

#[tokio::test]
async fn pacing_advances_simulated_time() {
    let (addr, _) = start(1.0).await;
    tokio::time::sleep(Duration::from_millis(60)).await;
    let (_, a) = request(addr, "GET", "/api/health", "").await;
    tokio::time::sleep(Duration::from_millis(30)).await;
    let (_, b) = request(addr, "GET", "/api/health", "").await;
    let (a, b) = (
        a["sim_time"].as_f64().unwrap(),
        b["sim_time"].as_f64().unwrap(),
    );
    assert!(a > 0.0 && b > a, "{a} {b}");
}

#[tokio::test]
async fn shutdown_stops_the_server() {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let world: SharedWorld = Arc::new(Mutex::new(World::new(WorldConfig::default())));
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve_on(listener, world, ServeConfig::default(), async {
        rx.await.ok();
    }));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}

#[tokio::test]
async fn bind_failure_is_reported() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let world = Arc::new(Mutex::new(World::new(WorldConfig::default())));
    let r = cgrepl::serve::serve(port, world, ServeConfig::default(), std::future::pending()).await;
    assert!(r.is_err());
}
