//! Independent oracles and fixtures shared by the integration suites.

#![allow(dead_code)]

use std::sync::Arc;

use bytes::Bytes;
use chrono::{Datelike, TimeDelta, Timelike};
use sha2::{Digest, Sha256};
use workbench_core::audit::{AppendSink, FanOut, JsonLinesFile, MemorySink};
use workbench_core::gateway::{AccessLogRecord, Listener};
use workbench_core::lifecycle::ServiceEvent;
use workbench_core::platform::Browser;
use workbench_core::{Clock, Platform, PlatformConfig, Timestamp, VirtualClock};

/// RFC 2104 HMAC over SHA-256, built directly on the hash.
pub fn hmac_sha256(key: &[u8], msg: &[u8]) -> [u8; 32] {
    const BLOCK: usize = 64;
    let mut k = [0u8; BLOCK];
    if key.len() > BLOCK {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(msg).finalize();
    Sha256::new().chain_update(&opad).chain_update(inner).finalize().into()
}

/// Standard base64 with padding.
pub fn base64_std(data: &[u8]) -> String {
    const ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::new();
    for chunk in data.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        for i in 0..4 {
            if i <= chunk.len() {
                out.push(ALPHABET[((n >> (18 - 6 * i)) & 63) as usize] as char);
            } else {
                out.push('=');
            }
        }
    }
    out
}

/// `urllib.parse.quote(s, safe='|')`.
pub fn py_quote_pipe(s: &str) -> String {
    let mut out = String::new();
    for &b in s.as_bytes() {
        if b.is_ascii_alphanumeric() || b"_.-~|".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// `Tue, 05 Mar 2024 07:08:09 GMT`-style expiry, `days` after `now`.
pub fn cookie_expiry(now: Timestamp, days: i64) -> String {
    const WEEKDAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];
    const MONTHS: [&str; 12] = [
        "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
    ];
    let t = now + TimeDelta::days(days);
    format!(
        "{}, {:02} {} {:04} {:02}:{:02}:{:02} GMT",
        WEEKDAYS[t.weekday().num_days_from_monday() as usize],
        t.day(),
        MONTHS[t.month0() as usize],
        t.year(),
        t.hour(),
        t.minute(),
        t.second()
    )
}

pub fn oracle_cookie(username: &str, days: i64, secret: &[u8], now: Timestamp) -> String {
    let expiry = cookie_expiry(now, days);
    let sig = base64_std(&hmac_sha256(secret, format!("{username}{expiry}").as_bytes()));
    py_quote_pipe(&format!("{username}|{expiry}|{sig}"))
}

/// First-match-by-priority with a recursive glob, written independently
/// of the gateway's matcher.
pub fn oracle_glob(p: &[u8], t: &[u8]) -> bool {
    match (p.first(), t.first()) {
        (None, None) => true,
        (Some(b'*'), _) => oracle_glob(&p[1..], t) || (!t.is_empty() && oracle_glob(p, &t[1..])),
        (Some(b'?'), Some(_)) => oracle_glob(&p[1..], &t[1..]),
        (Some(a), Some(b)) if a == b => oracle_glob(&p[1..], &t[1..]),
        _ => false,
    }
}

pub struct Sim {
    pub clock: Arc<VirtualClock>,
    pub platform: Platform,
    pub access_log: Arc<MemorySink<AccessLogRecord>>,
    pub events: Arc<MemorySink<ServiceEvent>>,
    pub storage: tempfile::TempDir,
}

pub fn password(user: &str) -> String {
    format!("pw-{user}")
}

/// A platform over a fresh temporary storage root, with accounts for
/// alice, bob and `user0`..`user49`.
pub fn sim_with(configure: impl FnOnce(&mut PlatformConfig)) -> Sim {
    sim_logging(configure, None)
}

/// Like [`sim_with`], additionally writing the access log to `file`.
pub fn sim_logging(configure: impl FnOnce(&mut PlatformConfig), file: Option<Arc<JsonLinesFile>>) -> Sim {
    let storage = tempfile::tempdir().expect("tempdir");
    let clock = Arc::new(VirtualClock::at_epoch());
    let mut config = PlatformConfig::default();
    config.hub.storage_root = storage.path().to_path_buf();
    for user in ["alice", "bob"]
        .into_iter()
        .map(String::from)
        .chain((0..50).map(|i| format!("user{i}")))
    {
        config.gateway.users.insert(user.clone(), password(&user));
    }
    configure(&mut config);
    let access_log = Arc::new(MemorySink::new());
    let events = Arc::new(MemorySink::new());
    let mut sinks: Vec<Arc<dyn AppendSink<AccessLogRecord>>> = vec![access_log.clone()];
    if let Some(file) = file {
        sinks.push(file);
    }
    let platform =
        Platform::new(config, clock.clone(), Arc::new(FanOut::new(sinks)), events.clone()).expect("platform");
    // Let the hub target pass its health checks.
    platform.run_for(&clock, std::time::Duration::from_secs(30));
    Sim {
        clock,
        platform,
        access_log,
        events,
        storage,
    }
}

pub fn sim() -> Sim {
    sim_with(|_| {})
}

/// Joins shell-style `\` continuations (dropping the next line's
/// indentation) and removes blank lines.
pub fn logical_lines(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        let piece = if current.is_empty() { line } else { line.trim_start() };
        match piece.strip_suffix('\\') {
            Some(head) => current.push_str(head),
            None => {
                current.push_str(piece);
                if !current.trim().is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                current.clear();
            }
        }
    }
    out
}

pub const GOLDEN_FIREWALL: &str = include_str!("../golden/firewall.txt");
pub const GOLDEN_ENV: &str = include_str!("../golden/env.txt");

/// Status classes seen by [`scripted_session`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Tally {
    pub success: usize,
    pub redirect: usize,
    pub failure: usize,
}

/// Issues exactly `n` single requests (no redirect following) mixing
/// sign-ins, API calls, plain-HTTP hits, unknown paths and bad passwords.
pub fn scripted_session(sim: &Sim, n: usize) -> Tally {
    let mut user = Browser::new(&sim.platform, "10.8.0.1");
    let mut anon = Browser::new(&sim.platform, "10.8.0.2");
    let form = |pw: &str| Bytes::from(format!("username=alice&password={pw}&redirect=%2F"));
    let mut tally = Tally::default();
    for i in 0..n {
        let resp = match i % 9 {
            0 => user.send(http::Method::POST, "/oauth2/login", form(&password("alice")), &[]),
            1 => user.send(http::Method::GET, "/api/workspaces", Bytes::new(), &[]),
            2 => anon.send(http::Method::GET, "/api/workspaces", Bytes::new(), &[]),
            3 => {
                let req = http::Request::get("/")
                    .header("host", "workbench.test")
                    .body(Bytes::new())
                    .unwrap();
                sim.platform.request(Listener::Insecure, "10.8.0.3", req)
            }
            4 => anon.send(http::Method::GET, "/no/such/place", Bytes::new(), &[]),
            5 => anon.send(http::Method::POST, "/oauth2/login", form("wrong"), &[]),
            6 => user.send(http::Method::GET, "/", Bytes::new(), &[]),
            7 => user.send(http::Method::POST, "/api/connect/nope", Bytes::new(), &[]),
            _ => user.send(http::Method::GET, "/api/poll/jupyter", Bytes::new(), &[]),
        };
        match resp.status().as_u16() {
            200..=299 => tally.success += 1,
            300..=399 => tally.redirect += 1,
            _ => tally.failure += 1,
        }
        sim.clock.advance(std::time::Duration::from_millis(250));
    }
    tally
}

pub fn body_json(resp: &workbench_core::net::HttpResponse) -> serde_json::Value {
    serde_json::from_slice(resp.body()).unwrap_or(serde_json::Value::Null)
}

/// Polls the hub until `app` reports `state` for the signed-in user, or
/// `limit` of simulated time passes.
pub fn wait_for_state(
    sim: &Sim,
    browser: &mut Browser<'_>,
    app: &str,
    state: &str,
    limit: std::time::Duration,
) -> bool {
    let deadline = sim.clock.now() + TimeDelta::from_std(limit).unwrap();
    loop {
        let nav = browser.get(&format!("/api/poll/{app}"));
        if body_json(&nav.response)["state"] == state {
            return true;
        }
        if sim.clock.now() >= deadline {
            return false;
        }
        sim.platform.run_for(&sim.clock, std::time::Duration::from_secs(2));
    }
}
