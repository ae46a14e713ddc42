//! Transport layers the harness puts between daemons and servers.
//!
//! Daemon -> [`FaultyTransport`] -> [`RecordingTransport`] -> wire. The
//! recorder sits closest to the wire so the transcript holds exactly what
//! servers were sent, tampering and replays included.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tushkey::b64;
use tushkey::wire::{Handler, Transport, TransportError, WireRequest, WireResponse};

use crate::scenario::{FaultSpec, Target};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub seq: u64,
    pub target: Target,
    pub method: String,
    pub path: String,
    pub request_headers: Vec<(String, String)>,
    #[serde(with = "b64")]
    pub request_body: Vec<u8>,
    /// `None` when the transport failed.
    pub status: Option<u16>,
    #[serde(with = "b64")]
    pub response_body: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport_error: Option<String>,
}

impl Exchange {
    pub fn route(&self) -> &str {
        self.path.split_once('?').map_or(&self.path, |(p, _)| p)
    }

    /// Every byte of the exchange, for leak scans.
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.method.as_bytes());
        out.extend_from_slice(self.path.as_bytes());
        for (k, v) in &self.request_headers {
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&self.request_body);
        out.extend_from_slice(&self.response_body);
        out
    }
}

/// Shared, append-only record of wire traffic.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    entries: Arc<Mutex<Vec<Exchange>>>,
    seq: Arc<AtomicU64>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<Exchange> {
        self.entries.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, mut e: Exchange) {
        e.seq = self.seq.fetch_add(1, Ordering::SeqCst);
        self.entries.lock().unwrap().push(e);
    }
}

pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    target: Target,
    transcript: Transcript,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>, target: Target, transcript: Transcript) -> Self {
        RecordingTransport { inner, target, transcript }
    }
}

impl Transport for RecordingTransport {
    fn send(&self, request: WireRequest) -> Result<WireResponse, TransportError> {
        let mut entry = Exchange {
            seq: 0,
            target: self.target,
            method: request.method.clone(),
            path: request.path.clone(),
            request_headers: request.headers.clone(),
            request_body: request.body.clone(),
            status: None,
            response_body: Vec::new(),
            transport_error: None,
        };
        let result = self.inner.send(request);
        match &result {
            Ok(r) => {
                entry.status = Some(r.status);
                entry.response_body = r.body.clone();
            }
            Err(e) => entry.transport_error = Some(e.to_string()),
        }
        self.transcript.push(entry);
        result
    }
}

struct Rule {
    spec: FaultSpec,
    remaining: Option<u32>,
}

/// Applies [`FaultSpec`] rules to outgoing requests. Rules are checked in
/// order and the first match wins.
pub struct FaultyTransport {
    inner: Arc<dyn Transport>,
    rules: Mutex<Vec<Rule>>,
}

impl FaultyTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        FaultyTransport { inner, rules: Mutex::new(Vec::new()) }
    }

    pub fn inject(&self, spec: FaultSpec) {
        let remaining = spec.times;
        self.rules.lock().unwrap().push(Rule { spec, remaining });
    }

    pub fn clear(&self) {
        self.rules.lock().unwrap().clear();
    }

    fn take_rule(&self, req: &WireRequest) -> Option<FaultSpec> {
        let mut rules = self.rules.lock().unwrap();
        let rule = rules.iter_mut().find(|r| {
            r.remaining != Some(0)
                && r.spec.route.as_deref().map_or(true, |p| p == req.route())
                && r.spec.method.as_deref().map_or(true, |m| m.eq_ignore_ascii_case(&req.method))
        })?;
        if let Some(n) = &mut rule.remaining {
            *n -= 1;
        }
        Some(rule.spec.clone())
    }
}

/// Flips the low bit of the middle byte of the first base64 field named
/// `field`, searching nested objects and arrays depth first.
pub fn tamper_field(body: &[u8], field: &str) -> Option<Vec<u8>> {
    fn flip(v: &mut serde_json::Value, field: &str) -> bool {
        match v {
            serde_json::Value::Object(map) => {
                if let Some(serde_json::Value::String(s)) = map.get(field) {
                    if let Ok(mut raw) = b64::decode(s) {
                        if !raw.is_empty() {
                            let mid = raw.len() / 2;
                            raw[mid] ^= 0x01;
                            map.insert(field.to_owned(), b64::encode(raw).into());
                            return true;
                        }
                    }
                }
                map.values_mut().any(|c| flip(c, field))
            }
            serde_json::Value::Array(items) => items.iter_mut().any(|c| flip(c, field)),
            _ => false,
        }
    }
    let mut v: serde_json::Value = serde_json::from_slice(body).ok()?;
    flip(&mut v, field).then(|| serde_json::to_vec(&v).ok())?
}

impl Transport for FaultyTransport {
    fn send(&self, mut request: WireRequest) -> Result<WireResponse, TransportError> {
        let Some(rule) = self.take_rule(&request) else {
            return self.inner.send(request);
        };
        if rule.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(rule.latency_ms));
        }
        if rule.drop {
            return Err(TransportError::Dropped);
        }
        if let Some(field) = &rule.tamper {
            match tamper_field(&request.body, field) {
                Some(b) => request.body = b,
                None => log::warn!("tamper rule found no field {field:?} in {}", request.route()),
            }
        }
        let mut response = if rule.replay {
            let first = self.inner.send(request.clone());
            let _second = self.inner.send(request);
            first?
        } else {
            self.inner.send(request)?
        };
        if let Some(field) = &rule.tamper_response {
            match tamper_field(&response.body, field) {
                Some(b) => response.body = b,
                None => log::debug!("tamper rule found no response field {field:?}"),
            }
        }
        Ok(response)
    }
}

/// Counts requests that reach a server.
pub struct CountingHandler {
    inner: Arc<dyn Handler>,
    count: Arc<AtomicU64>,
}

impl CountingHandler {
    pub fn new(inner: Arc<dyn Handler>) -> (Self, Arc<AtomicU64>) {
        let count = Arc::new(AtomicU64::new(0));
        (CountingHandler { inner, count: count.clone() }, count)
    }
}

impl Handler for CountingHandler {
    fn handle(&self, request: &WireRequest) -> WireResponse {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.handle(request)
    }
}
