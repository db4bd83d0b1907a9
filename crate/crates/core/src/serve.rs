//! HTTP gateway over a shared world. Requests are handled one at a time
//! under a fair lock, so they apply in arrival order; an optional pacing
//! task advances simulated time with the wall clock.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::Mutex;

use crate::api::handle_raw;
use crate::simnet::SimDuration;
use crate::world::World;

pub type SharedWorld = Arc<Mutex<World>>;

#[derive(Debug, Clone, Copy)]
pub struct ServeConfig {
    /// Simulated time per unit of wall time; 0 disables pacing.
    pub pace_ratio: f64,
    pub pace_tick: Duration,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            pace_ratio: 1.0,
            pace_tick: Duration::from_millis(50),
        }
    }
}

async fn dispatch(
    State(world): State<SharedWorld>,
    method: Method,
    uri: Uri,
    body: Bytes,
) -> Response {
    let path = uri.path_and_query().map_or(uri.path(), |p| p.as_str());
    let resp = {
        let mut w = world.lock().await;
        handle_raw(&mut w, method.as_str(), path, &body)
    };
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (
        status,
        [(header::CONTENT_TYPE, "application/json")],
        resp.body.to_string(),
    )
        .into_response()
}

pub fn router(world: SharedWorld) -> Router {
    Router::new().fallback(dispatch).with_state(world)
}

async fn pace(world: SharedWorld, cfg: ServeConfig) {
    let mut ticker = tokio::time::interval(cfg.pace_tick);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let step_us = cfg.pace_tick.as_micros() as f64 * cfg.pace_ratio;
    let mut owed = 0.0;
    loop {
        ticker.tick().await;
        owed += step_us;
        let whole = owed.floor();
        owed -= whole;
        if whole >= 1.0 {
            world
                .lock()
                .await
                .advance(SimDuration::from_micros(whole as u64));
        }
    }
}

/// Serves on an already bound listener until `shutdown` resolves or the
/// server fails.
pub async fn serve_on(
    listener: TcpListener,
    world: SharedWorld,
    cfg: ServeConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let pacer = (cfg.pace_ratio > 0.0).then(|| tokio::spawn(pace(world.clone(), cfg)));
    let result = axum::serve(listener, router(world))
        .with_graceful_shutdown(shutdown)
        .await;
    if let Some(p) = pacer {
        p.abort();
    }
    result
}

pub async fn serve(
    port: u16,
    world: SharedWorld,
    cfg: ServeConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port)).await?;
    serve_on(listener, world, cfg, shutdown).await
}
