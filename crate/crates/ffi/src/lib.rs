//! C ABI over the simulator.
//!
//! Worlds are opaque handles. Every call returns a [`CgreplStatus`]; on
//! failure [`cgrepl_last_error`] describes what went wrong. Strings handed
//! out by the library are NUL-terminated UTF-8 and must be released with
//! [`cgrepl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cgrepl::api::handle_raw;
use cgrepl::replication::ReplicationMode;
use cgrepl::scenario::run_scenario;
use cgrepl::simnet::SimDuration;
use cgrepl::world::{World, WorldConfig};
use cgrepl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgreplStatus {
    Ok = 0,
    NotFound = 1,
    AlreadyExists = 2,
    InvalidArgument = 3,
    Conflict = 4,
    Backpressure = 5,
    Unavailable = 6,
    Unsupported = 7,
    FailedPrecondition = 8,
    /// A required pointer argument was null.
    NullArgument = 20,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 21,
    Io = 22,
    /// The library panicked; the handle involved should be freed.
    Internal = 99,
}

impl From<&Error> for CgreplStatus {
    fn from(e: &Error) -> Self {
        match e.root() {
            Error::NotFound(_) => CgreplStatus::NotFound,
            Error::AlreadyExists(_) => CgreplStatus::AlreadyExists,
            Error::InvalidArgument(_) => CgreplStatus::InvalidArgument,
            Error::Conflict(_) => CgreplStatus::Conflict,
            Error::Backpressure(_) => CgreplStatus::Backpressure,
            Error::Unavailable(_) => CgreplStatus::Unavailable,
            Error::Unsupported(_) => CgreplStatus::Unsupported,
            Error::FailedPrecondition(_) => CgreplStatus::FailedPrecondition,
            Error::Plugin { .. } => CgreplStatus::Internal,
        }
    }
}

/// Opaque simulation handle.
pub struct CgreplWorld {
    world: World,
}

/// Simulation parameters for [`cgrepl_world_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CgreplConfig {
    pub seed: u64,
    pub rtt_ms: u64,
    /// Block size for claims that do not set one; 0 keeps the default.
    pub block_size: usize,
    /// Record an event trace (see [`cgrepl_world_trace`]).
    pub trace: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CgreplStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CgreplStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CgreplStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| p.downcast_ref::<&str>().copied())
                .unwrap_or("unknown panic");
            set_error(format!("internal error: {msg}"));
            CgreplStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CgreplStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CgreplStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn world_arg<'a>(w: *mut CgreplWorld) -> Result<&'a mut World, Fail> {
    w.as_mut()
        .map(|w| &mut w.world)
        .ok_or_else(|| null("world"))
}

fn out_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("NULs removed")
        .into_raw()
}

unsafe fn put<T>(out: *mut T, v: T) {
    if !out.is_null() {
        out.write(v);
    }
}

fn world_config(cfg: &CgreplConfig, mode: Option<&str>) -> Result<WorldConfig, Fail> {
    let mut wc = WorldConfig {
        seed: cfg.seed,
        rtt: SimDuration::from_ms(cfg.rtt_ms),
        trace: cfg.trace,
        ..WorldConfig::default()
    };
    if cfg.block_size != 0 {
        wc.block_size = cfg.block_size;
    }
    if let Some(m) = mode {
        wc.mode = m.parse::<ReplicationMode>()?;
    }
    Ok(wc)
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn cgrepl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next library call on the same thread.
#[no_mangle]
pub extern "C" fn cgrepl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a simulation. `mode` (`grouped`, `per_volume`, `synchronous`)
/// may be null for the default.
///
/// # Safety
/// `config` and `out` must be valid pointers; `mode` null or a C string.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_new(
    config: *const CgreplConfig,
    mode: *const c_char,
    out: *mut *mut CgreplWorld,
) -> CgreplStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = if mode.is_null() {
            None
        } else {
            Some(str_arg(mode, "mode")?)
        };
        let world = World::new(world_config(cfg, mode)?);
        out.write(Box::into_raw(Box::new(CgreplWorld { world })));
        Ok(())
    })
}

/// Releases a simulation. Null is ignored.
///
/// # Safety
/// `world` must come from [`cgrepl_world_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_free(world: *mut CgreplWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Sends one gateway request (`method`, `path` with optional query, JSON
/// `body` or null). Returns `Ok` whenever a response was produced, error
/// responses included; the HTTP-style status lands in `out_status` and the
/// JSON response in `out_body`.
///
/// # Safety
/// `world` must be a live handle; strings must be C strings; outputs may be
/// null to discard them.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_request(
    world: *mut CgreplWorld,
    method: *const c_char,
    path: *const c_char,
    body: *const c_char,
    out_status: *mut u16,
    out_body: *mut *mut c_char,
) -> CgreplStatus {
    guard(|| {
        let w = world_arg(world)?;
        let method = str_arg(method, "method")?;
        let path = str_arg(path, "path")?;
        let body = if body.is_null() {
            ""
        } else {
            str_arg(body, "body")?
        };
        let resp = handle_raw(w, method, path, body.as_bytes());
        put(out_status, resp.status);
        if !out_body.is_null() {
            out_body.write(out_string(resp.body.to_string()));
        }
        Ok(())
    })
}

/// Runs the simulation forward by `ms` simulated milliseconds.
///
/// # Safety
/// `world` must be a live handle; `out_events` may be null.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_advance_ms(
    world: *mut CgreplWorld,
    ms: u64,
    out_events: *mut u64,
) -> CgreplStatus {
    guard(|| {
        let n = world_arg(world)?.advance(SimDuration::from_ms(ms));
        put(out_events, n);
        Ok(())
    })
}

/// Runs until no foreground work is pending.
///
/// # Safety
/// `world` must be a live handle; `out_events` may be null.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_run_until_quiescent(
    world: *mut CgreplWorld,
    out_events: *mut u64,
) -> CgreplStatus {
    guard(|| {
        let n = world_arg(world)?.run_until_quiescent();
        put(out_events, n);
        Ok(())
    })
}

/// Current simulated time in microseconds.
///
/// # Safety
/// `world` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_sim_time_us(
    world: *mut CgreplWorld,
    out: *mut u64,
) -> CgreplStatus {
    guard(|| {
        let t = world_arg(world)?.now().as_micros();
        put(out, t);
        Ok(())
    })
}

/// Hex digest over both sites' volumes and the control-plane records.
///
/// # Safety
/// `world` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_state_digest(
    world: *mut CgreplWorld,
    out: *mut *mut c_char,
) -> CgreplStatus {
    guard(|| {
        let w = world_arg(world)?;
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(out_string(w.state_digest()));
        Ok(())
    })
}

/// The recorded trace, one event per line. Empty unless the world was
/// created with `trace` set.
///
/// # Safety
/// `world` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_trace(
    world: *mut CgreplWorld,
    out: *mut *mut c_char,
) -> CgreplStatus {
    guard(|| {
        let w = world_arg(world)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut text = w.trace().join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        out.write(out_string(text));
        Ok(())
    })
}

/// Runs scenario text against a fresh simulation. The scenario's exit code
/// (0 pass, 1 failed assertion or error, 2 parse error) goes to
/// `out_exit_code` and its report to `out_report`.
///
/// # Safety
/// `config` and `text` must be valid; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_run_scenario(
    config: *const CgreplConfig,
    mode: *const c_char,
    text: *const c_char,
    out_exit_code: *mut i32,
    out_report: *mut *mut c_char,
) -> CgreplStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        let mode = if mode.is_null() {
            None
        } else {
            Some(str_arg(mode, "mode")?)
        };
        let text = str_arg(text, "text")?;
        let (outcome, _) = run_scenario(text, world_config(cfg, mode)?);
        put(out_exit_code, outcome.exit_code);
        if !out_report.is_null() {
            out_report.write(out_string(outcome.report_text()));
        }
        Ok(())
    })
}

/// Writes every volume image of both sites into `dir`.
///
/// # Safety
/// `world` must be a live handle; `dir` a C string.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_world_persist(
    world: *mut CgreplWorld,
    dir: *const c_char,
) -> CgreplStatus {
    guard(|| {
        let w = world_arg(world)?;
        let dir = str_arg(dir, "dir")?;
        w.persist(std::path::Path::new(dir))
            .map_err(|e| Fail(CgreplStatus::Io, format!("{dir}: {e}")))?;
        Ok(())
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cgrepl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
