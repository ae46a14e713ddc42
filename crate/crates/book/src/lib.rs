//! The guide's chapters, included as documentation so `cargo test` runs
//! every snippet in them.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/envelopes.md")]
pub mod envelopes {}

#[doc = include_str!("../../../book/src/authenticator.md")]
pub mod authenticator {}

#[doc = include_str!("../../../book/src/relying-party.md")]
pub mod relying_party {}

#[doc = include_str!("../../../book/src/relay.md")]
pub mod relay {}

#[doc = include_str!("../../../book/src/daemon.md")]
pub mod daemon {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
