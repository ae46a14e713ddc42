pub mod authenticator;
pub mod b64;
pub mod clock;
pub mod crypto;
pub mod sealed;
pub mod api;
pub mod journal;
pub mod rp;
pub mod wire;
pub mod relay;
pub mod http;
pub mod client;
pub mod daemon;
