//! Transport-neutral request/response types.
//!
//! Servers implement [`Handler`]; clients talk through a [`Transport`].
//! [`InMemoryTransport`] calls a handler directly, and the HTTP transport in
//! [`crate::http`] carries the same requests over a socket, so both routes
//! exercise identical handler code.

use std::fmt;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Clone, PartialEq, Eq)]
pub struct WireRequest {
    pub method: String,
    /// Path including any query string, exactly as signed.
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl WireRequest {
    pub fn get(path: impl Into<String>) -> Self {
        WireRequest { method: "GET".into(), path: path.into(), headers: Vec::new(), body: Vec::new() }
    }

    pub fn post_json<T: Serialize>(path: impl Into<String>, body: &T) -> Self {
        WireRequest {
            method: "POST".into(),
            path: path.into(),
            headers: vec![("content-type".into(), "application/json".into())],
            body: serde_json::to_vec(body).expect("request bodies serialize"),
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn set_header(&mut self, name: &str, value: impl Into<String>) {
        self.headers.retain(|(k, _)| !k.eq_ignore_ascii_case(name));
        self.headers.push((name.to_owned(), value.into()));
    }

    /// Path without the query string.
    pub fn route(&self) -> &str {
        self.path.split_once('?').map_or(&self.path, |(p, _)| p)
    }

    pub fn query_param(&self, name: &str) -> Option<String> {
        let (_, q) = self.path.split_once('?')?;
        url::form_urlencoded::parse(q.as_bytes())
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.into_owned())
    }

    pub fn json<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.body)
    }
}

impl fmt::Debug for WireRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WireRequest")
            .field("method", &self.method)
            .field("path", &self.path)
            .field("body_len", &self.body.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl WireResponse {
    pub fn json<T: Serialize>(status: u16, body: &T) -> Self {
        WireResponse { status, body: serde_json::to_vec(body).expect("responses serialize") }
    }

    pub fn error(status: u16, code: &str) -> Self {
        Self::json(status, &crate::api::ErrorBody { error: code.to_owned() })
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

pub trait Handler: Send + Sync {
    fn handle(&self, request: &WireRequest) -> WireResponse;
}

impl<H: Handler + ?Sized> Handler for Arc<H> {
    fn handle(&self, request: &WireRequest) -> WireResponse {
        (**self).handle(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("message dropped")]
    Dropped,
    #[error("transport: {0}")]
    Other(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: WireRequest) -> Result<WireResponse, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, request: WireRequest) -> Result<WireResponse, TransportError> {
        (**self).send(request)
    }
}

/// Function-call transport: hands the request straight to a handler.
#[derive(Clone)]
pub struct InMemoryTransport {
    handler: Arc<dyn Handler>,
}

impl InMemoryTransport {
    pub fn new(handler: Arc<dyn Handler>) -> Self {
        InMemoryTransport { handler }
    }
}

impl fmt::Debug for InMemoryTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("InMemoryTransport")
    }
}

impl Transport for InMemoryTransport {
    fn send(&self, request: WireRequest) -> Result<WireResponse, TransportError> {
        Ok(self.handler.handle(&request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_and_query() {
        let r = WireRequest::get("/envelopes?receiver_id=abc-1&x=%20y");
        assert_eq!(r.route(), "/envelopes");
        assert_eq!(r.query_param("receiver_id").as_deref(), Some("abc-1"));
        assert_eq!(r.query_param("x").as_deref(), Some(" y"));
        assert_eq!(r.query_param("missing"), None);
    }

    #[test]
    fn headers_are_case_insensitive() {
        let mut r = WireRequest::get("/");
        r.set_header("X-TUSH-Device", "a");
        r.set_header("x-tush-device", "b");
        assert_eq!(r.headers.len(), 1);
        assert_eq!(r.header("X-Tush-Device"), Some("b"));
    }
}
