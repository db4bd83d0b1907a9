//! Request routing for the HTTP gateway, independent of any server.
//!
//! Every response body is a JSON object carrying `sim_time` (milliseconds).
//! Errors are `{code, message, detail}` records.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::blockstore::Site;
use crate::controlplane::{AppId, ClaimSpec, TRIGGER_TAG_KEY};
use crate::error::{Error, Result};
use crate::replication::{GroupId, SnapshotGroupId};
use crate::simnet::{FaultInjection, FaultKind, SimDuration, SimTime};
use crate::world::{VerifyTarget, World};

const FEED_PAGE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRequest {
    pub method: String,
    /// Path with optional query string.
    pub path: String,
    #[serde(default)]
    pub body: Value,
}

impl ApiRequest {
    pub fn new(method: &str, path: &str, body: Value) -> Self {
        ApiRequest {
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            body,
        }
    }

    pub fn get(path: &str) -> Self {
        Self::new("GET", path, Value::Null)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

pub fn status_for(e: &Error) -> u16 {
    match e.root() {
        Error::NotFound(_) => 404,
        Error::InvalidArgument(_) => 400,
        Error::AlreadyExists(_) | Error::Conflict(_) | Error::Unavailable(_) => 409,
        Error::Backpressure(_) => 429,
        Error::Unsupported(_) => 422,
        Error::FailedPrecondition(_) => 412,
        Error::Plugin { .. } => unreachable!("root unwraps plugin errors"),
    }
}

fn error_body(e: &Error, path: &str) -> Value {
    let mut detail = Map::new();
    detail.insert("path".into(), path.into());
    if let Error::Plugin { plugin, .. } = e {
        detail.insert("plugin".into(), plugin.clone().into());
    }
    json!({
        "code": e.code(),
        "message": e.to_string(),
        "detail": detail,
    })
}

fn with_time(world: &World, body: Value) -> Value {
    let mut obj = match body {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    };
    obj.insert("sim_time".into(), json!(world.now()));
    Value::Object(obj)
}

/// Routes one request. Never panics on caller input.
pub fn handle(world: &mut World, req: &ApiRequest) -> ApiResponse {
    let (path, query) = req.path.split_once('?').unwrap_or((&req.path, ""));
    let (status, body) = match route(world, &req.method, path, query, &req.body) {
        Ok((status, body)) => (status, body),
        Err(e) => (status_for(&e), error_body(&e, path)),
    };
    ApiResponse {
        status,
        body: with_time(world, body),
    }
}

/// Like [`handle`], for a raw request body. An empty body counts as none.
pub fn handle_raw(world: &mut World, method: &str, path: &str, body: &[u8]) -> ApiResponse {
    let body = if body.iter().all(u8::is_ascii_whitespace) {
        Value::Null
    } else {
        match serde_json::from_slice(body) {
            Ok(v) => v,
            Err(e) => {
                let err = Error::InvalidArgument(format!("request body is not JSON: {e}"));
                let path = path.split('?').next().unwrap_or(path);
                return ApiResponse {
                    status: status_for(&err),
                    body: with_time(world, error_body(&err, path)),
                };
            }
        }
    };
    handle(world, &ApiRequest::new(method, path, body))
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("records serialize")
}

fn parse_body<T: DeserializeOwned>(body: &Value) -> Result<T> {
    let body = if body.is_null() { &json!({}) } else { body };
    T::deserialize(body).map_err(|e| Error::InvalidArgument(format!("request body: {e}")))
}

fn query_param(query: &str, key: &str) -> Option<String> {
    form_urlencoded::parse(query.as_bytes())
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.into_owned())
}

fn query_num(query: &str, key: &str) -> Result<Option<u64>> {
    query_param(query, key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}={v} is not a number")))
        })
        .transpose()
}

fn ms(v: f64, what: &str) -> Result<SimDuration> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{what} must be non-negative"
        )));
    }
    Ok(SimDuration::from_micros((v * 1000.0).round() as u64))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateNamespace {
    name: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PutTag {
    #[serde(default)]
    key: Option<String>,
    value: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ClaimBody {
    Blocks(usize),
    Spec {
        requested_blocks: usize,
        #[serde(default)]
        block_size: Option<usize>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateApp {
    name: String,
    claims: Vec<ClaimBody>,
    #[serde(default)]
    block_size: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StartWorkload {
    /// `namespace/name` or an app id.
    app: String,
    count: u64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    think_ms: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Fault {
    kind: String,
    target: String,
    #[serde(default)]
    at_ms: Option<f64>,
    #[serde(default)]
    in_ms: Option<f64>,
    #[serde(default)]
    latency_ms: Option<f64>,
    #[serde(default)]
    jitter_ms: Option<f64>,
    #[serde(default = "yes")]
    partitioned: bool,
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Advance {
    #[serde(default)]
    ms: Option<f64>,
    #[serde(default)]
    until: Option<String>,
}

fn resolve_app(world: &World, spec: &str) -> Result<AppId> {
    match spec.split_once('/') {
        Some((ns, name)) => world.find_app(ns, name),
        None => {
            let id: AppId = spec.parse()?;
            world.controlplane().app(id)?;
            Ok(id)
        }
    }
}

fn namespace_view(world: &World, name: &str) -> Result<Value> {
    let cp = world.controlplane();
    let ns = cp.namespace(name)?;
    let apps = ns
        .app_ids
        .iter()
        .map(|id| {
            let app = cp.app(*id)?;
            Ok(json!({
                "app_id": app.app_id,
                "name": app.name,
                "claim_ids": app.claim_ids,
                "volume_ids": cp.app_volumes(*id)?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "name": ns.name,
        "tags": ns.tags,
        "apps": apps,
        "group_id": cp.group_for(name),
    }))
}

fn group_view(world: &World, g: GroupId) -> Result<Value> {
    let mut v = to_value(world.engine().group_info(g)?);
    v["status"] = to_value(world.status(g)?);
    Ok(v)
}

fn route(
    world: &mut World,
    method: &str,
    path: &str,
    query: &str,
    body: &Value,
) -> Result<(u16, Value)> {
    let segs: Vec<&str> = path.trim_end_matches('/').split('/').skip(1).collect();
    let not_found = || Error::NotFound(format!("no route {method} {path}"));
    let Some((&"api", rest)) = segs.split_first() else {
        return Err(not_found());
    };
    let wrong_method = || Error::InvalidArgument(format!("{method} is not supported on {path}"));
    match (method, rest) {
        ("GET", ["health"]) => Ok((200, json!({ "status": "ok" }))),

        ("GET", ["namespaces"]) => {
            let names: Vec<String> = world
                .controlplane()
                .namespaces()
                .map(|n| n.name.clone())
                .collect();
            let list = names
                .iter()
                .map(|n| namespace_view(world, n))
                .collect::<Result<Vec<_>>>()?;
            Ok((200, json!({ "namespaces": list })))
        }
        ("POST", ["namespaces"]) => {
            let b: CreateNamespace = parse_body(body)?;
            world.create_namespace(&b.name)?;
            Ok((201, namespace_view(world, &b.name)?))
        }
        ("GET", ["namespaces", ns]) => Ok((200, namespace_view(world, ns)?)),
        ("PUT", ["namespaces", ns, "tags"]) => {
            let b: PutTag = parse_body(body)?;
            let key = b.key.as_deref().unwrap_or(TRIGGER_TAG_KEY);
            world.tag_namespace(ns, key, &b.value)?;
            Ok((200, namespace_view(world, ns)?))
        }
        ("DELETE", ["namespaces", ns, "tags", key]) => {
            let removed = world.untag_namespace(ns, key)?;
            let mut v = namespace_view(world, ns)?;
            v["removed"] = removed.into();
            Ok((200, v))
        }
        ("POST", ["namespaces", ns, "apps"]) => {
            let b: CreateApp = parse_body(body)?;
            let default_bs = b.block_size.unwrap_or(world.config().block_size);
            let claims: Vec<ClaimSpec> = b
                .claims
                .iter()
                .map(|c| match *c {
                    ClaimBody::Blocks(n) => ClaimSpec {
                        requested_blocks: n,
                        block_size: default_bs,
                    },
                    ClaimBody::Spec {
                        requested_blocks,
                        block_size,
                    } => ClaimSpec {
                        requested_blocks,
                        block_size: block_size.unwrap_or(default_bs),
                    },
                })
                .collect();
            let app = world.create_app(ns, &b.name, &claims)?;
            let volumes = world.controlplane().app_volumes(app.app_id)?;
            let mut v = to_value(&app);
            v["volume_ids"] = to_value(volumes);
            Ok((201, v))
        }

        ("GET", ["sites", site, "pvs"]) => {
            let site: Site = site.parse()?;
            Ok((200, json!({ "site": site, "pvs": world.list_pvs(site) })))
        }
        ("GET", ["crs"]) => {
            let crs: Vec<Value> = world.controlplane().crs().map(to_value).collect();
            Ok((200, json!({ "crs": crs })))
        }

        ("GET", ["groups"]) => {
            let list = world
                .groups()
                .into_iter()
                .map(|g| group_view(world, g))
                .collect::<Result<Vec<_>>>()?;
            Ok((200, json!({ "groups": list })))
        }
        ("GET", ["groups", id]) => Ok((200, group_view(world, id.parse()?)?)),
        ("GET", ["groups", id, "status"]) => Ok((200, to_value(world.status(id.parse()?)?))),
        ("POST", ["groups", id, "snapshot-groups"]) => {
            Ok((201, to_value(world.create_snapshot_group(id.parse()?)?)))
        }
        ("POST", ["groups", id, "failover"]) => {
            let g: GroupId = id.parse()?;
            let mut v = to_value(world.failover(g)?);
            v["group_id"] = to_value(g);
            Ok((200, v))
        }

        ("GET", ["snapshot-groups"]) => {
            let list: Vec<Value> = world.engine().snapshot_groups().map(to_value).collect();
            Ok((200, json!({ "snapshot_groups": list })))
        }
        ("GET", ["snapshot-groups", id]) => {
            let id: SnapshotGroupId = id.parse()?;
            Ok((200, to_value(world.engine().snapshot_group(id)?)))
        }
        ("GET", ["snapshot-groups", id, "analytics"]) => {
            Ok((200, to_value(world.analytics_report(id.parse()?)?)))
        }

        ("POST", ["workload"]) => {
            let b: StartWorkload = parse_body(body)?;
            let app = resolve_app(world, &b.app)?;
            let think = ms(b.think_ms, "think_ms")?;
            Ok((
                202,
                to_value(world.run_transactions(app, b.count, b.seed, think)?),
            ))
        }
        ("GET", ["workload"]) => Ok((200, json!({ "workloads": world.workload_summaries() }))),
        ("GET", ["workload", "feed"]) => {
            let since = query_num(query, "since")?.unwrap_or(0);
            let limit = query_num(query, "limit")?.map_or(FEED_PAGE, |l| l as usize);
            let page = world.feed_since(since);
            let page = &page[..page.len().min(limit)];
            let lines: Vec<Value> = page
                .iter()
                .map(|l| {
                    let mut v = to_value(l);
                    v["text"] = l.to_string().into();
                    v
                })
                .collect();
            let next = page.last().map_or(since, |l| l.index + 1);
            Ok((200, json!({ "lines": lines, "next": next })))
        }

        ("POST", ["faults"]) => {
            let b: Fault = parse_body(body)?;
            let kind = match b.kind.as_str() {
                "site_failure" => FaultKind::SiteFailure,
                "partition" => FaultKind::Partition {
                    partitioned: b.partitioned,
                },
                "delay_change" => FaultKind::DelayChange {
                    latency: ms(
                        b.latency_ms.ok_or_else(|| {
                            Error::InvalidArgument("delay_change needs latency_ms".into())
                        })?,
                        "latency_ms",
                    )?,
                    jitter: b.jitter_ms.map(|j| ms(j, "jitter_ms")).transpose()?,
                },
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "fault kind {other:?}: expected site_failure, partition or delay_change"
                    )))
                }
            };
            let at_time = match (b.at_ms, b.in_ms) {
                (Some(at), None) => SimTime(ms(at, "at_ms")?.as_micros()),
                (None, Some(d)) => world.now() + ms(d, "in_ms")?,
                (None, None) => world.now(),
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidArgument(
                        "give at_ms or in_ms, not both".into(),
                    ))
                }
            };
            let event_id = world.inject(FaultInjection {
                kind,
                target: b.target,
                at_time,
            })?;
            Ok((202, json!({ "event_id": event_id, "at_time": at_time })))
        }

        ("GET", ["verify"]) => {
            let target: VerifyTarget = query_param(query, "target").unwrap_or_default().parse()?;
            Ok((200, to_value(world.verify(target)?)))
        }

        ("POST", ["advance"]) => {
            let b: Advance = parse_body(body)?;
            let fired = match (b.ms, b.until.as_deref()) {
                (Some(d), None) => world.advance(ms(d, "ms")?),
                (None, Some("quiescent")) => world.run_until_quiescent(),
                _ => {
                    return Err(Error::InvalidArgument(
                        "give ms or until=\"quiescent\"".into(),
                    ))
                }
            };
            Ok((200, json!({ "events_fired": fired })))
        }

        (
            _,
            ["health"]
            | ["namespaces"]
            | ["namespaces", _]
            | ["namespaces", _, "tags"]
            | ["namespaces", _, "tags", _]
            | ["namespaces", _, "apps"]
            | ["sites", _, "pvs"]
            | ["crs"]
            | ["groups"]
            | ["groups", _]
            | ["groups", _, "status" | "snapshot-groups" | "failover"]
            | ["snapshot-groups"]
            | ["snapshot-groups", _]
            | ["snapshot-groups", _, "analytics"]
            | ["workload"]
            | ["workload", "feed"]
            | ["faults"]
            | ["verify"]
            | ["advance"],
        ) => Err(wrong_method()),
        _ => Err(not_found()),
    }
}

#[cfg(test)]
mod tests;
