//! Executable security properties, each run in a fresh in-memory world.

use std::sync::Arc;

use serde::Serialize;
use tushkey::client::RelayClient;
use tushkey::crypto::RequestSigningKey;
use tushkey::wire::{Transport, WireRequest};

use crate::scan::{contains_secret, leaking_exchanges};
use crate::scenario::{DeviceSpec, FaultSpec, Target};
use crate::world::{TransportKind, World};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// A world with enrolled sender `a` and registered peers for each name.
fn world(name: &str, peers: &[DeviceSpec]) -> Result<World, SimError> {
    let w = World::new(TransportKind::Memory, name, 1)?;
    w.add_device(DeviceSpec::new("a", true))?;
    w.register("a")?;
    w.enroll("a")?;
    for p in peers {
        w.add_device(p.clone())?;
        w.register(&p.name)?;
    }
    Ok(w)
}

fn peer(name: &str) -> DeviceSpec {
    DeviceSpec::new(name, true)
}

fn rp_devices(w: &World) -> usize {
    w.rp().account(crate::scenario::DEFAULT_USER).map_or(0, |a| a.devices.len())
}

type Check = Result<(bool, String), SimError>;

fn passive_relay() -> Check {
    let w = world("passive-relay", &[peer("b"), peer("c")])?;
    w.sync("a")?;
    let enrolled = w.poll("b")?.enrolled.len() + w.poll("c")?.enrolled.len();
    let tokens = w.issued_tokens();
    let relay_traffic: Vec<_> = w.transcript().entries().into_iter().filter(|e| e.target == Target::Relay).collect();
    let leaks = leaking_exchanges(&relay_traffic, &tokens);
    let state = w.relay().persistent_bytes();
    let in_state = tokens.iter().any(|t| contains_secret(&state, t));
    let ok = enrolled == 2 && !tokens.is_empty() && leaks.is_empty() && !in_state;
    Ok((
        ok,
        format!(
            "{} relay exchanges and relay state scanned for {} token(s); {} leaking exchange(s), state leak: {in_state}",
            relay_traffic.len(),
            tokens.len(),
            leaks.len()
        ),
    ))
}

fn token_replay() -> Check {
    let w = world("token-replay", &[peer("b")])?;
    w.sync("a")?;
    if w.poll("b")?.enrolled.len() != 1 {
        return Ok((false, "first redemption did not enrol".into()));
    }
    let token = w.issued_tokens().pop().ok_or_else(|| SimError::Step("no token seen".into()))?;
    let before = rp_devices(&w);
    let err = w.daemon("b")?.redeem_token(&token).err();
    let code = err.as_ref().and_then(|e| e.remote_code()).unwrap_or("accepted");
    Ok((code == "token already redeemed" && rp_devices(&w) == before, format!("replayed redemption: {code}")))
}

fn envelope_replay() -> Check {
    let w = world("envelope-replay", &[peer("b")])?;
    w.sync("a")?;
    if w.poll("b")?.enrolled.len() != 1 {
        return Ok((false, "first delivery did not enrol".into()));
    }
    let deposit = w
        .transcript()
        .entries()
        .into_iter()
        .find(|e| e.target == Target::Relay && e.route() == "/envelopes" && e.method == "POST")
        .ok_or_else(|| SimError::Step("no deposit seen".into()))?;
    // The captured request, byte for byte.
    let replay = WireRequest {
        method: deposit.method.clone(),
        path: deposit.path.clone(),
        headers: deposit.request_headers.clone(),
        body: deposit.request_body.clone(),
    };
    let resp = w.endpoints().relay.send(replay).map_err(|e| SimError::Step(e.to_string()))?;
    let wire_replay = String::from_utf8_lossy(&resp.body).into_owned();
    // The same envelope bytes queued again under a fresh signature, as a
    // misbehaving relay could.
    let body: tushkey::api::Deposit =
        serde_json::from_slice(&deposit.request_body).map_err(|e| SimError::Step(e.to_string()))?;
    w.daemon("a")?.relay_client().deposit(&body.receiver_id, &body.envelope, &body.rp_origin)
        .map_err(|e| SimError::Step(e.to_string()))?;
    let again = w.poll("b")?;
    let ok = resp.status == 401 && again.enrolled.is_empty() && again.discarded.len() == 1 && rp_devices(&w) == 2;
    Ok((
        ok,
        format!(
            "wire replay -> {} {wire_replay}; re-queued envelope -> {} enrolled, discarded {:?}",
            resp.status,
            again.enrolled.len(),
            again.discarded.iter().map(|d| d.reason.as_str()).collect::<Vec<_>>()
        ),
    ))
}

fn cross_user() -> Check {
    let mut bob = peer("x");
    bob.user = "bob@example.com".into();
    let w = world("cross-user", &[bob])?;
    let x = w.daemon("x")?;
    let err = w.daemon("a")?.relay_client().deposit(x.device_id(), b"not for you", "rp").err();
    let code = err.as_ref().and_then(|e| e.code()).unwrap_or("accepted").to_owned();
    let mailbox = w.poll("x")?;
    let fan = w.sync("a")?;
    let ok = code == "not peer devices" && mailbox.enrolled.is_empty() && mailbox.discarded.is_empty() && fan.outcomes.is_empty();
    Ok((ok, format!("deposit to another user's device: {code}; sender sees {} peer(s)", fan.outcomes.len())))
}

fn forgery() -> Check {
    let w = world("forgery", &[peer("b")])?;
    let (a, b) = (w.daemon("a")?, w.daemon("b")?);
    let forger = RelayClient::new(w.endpoints().relay, a.device_id(), RequestSigningKey::generate(), Arc::clone(w.clock()));
    let codes: Vec<String> = [
        forger.peers().err(),
        forger.poll().err(),
        forger.deposit(b.device_id(), b"forged", "rp").err(),
    ]
    .into_iter()
    .map(|e| e.and_then(|e| e.code().map(str::to_owned)).unwrap_or_else(|| "accepted".into()))
    .collect();
    // A genuine signature over a body that was changed in flight.
    w.inject_fault(
        Target::Relay,
        FaultSpec { route: Some("/envelopes".into()), method: Some("POST".into()), tamper: Some("envelope".into()), ..Default::default() },
    );
    let fan = w.sync("a")?;
    w.clear_faults();
    let altered = fan.outcomes.first().and_then(|o| o.result.clone().err()).unwrap_or_else(|| "accepted".into());
    let ok = codes.iter().all(|c| c == "unauthorized") && altered.starts_with("unauthorized")
        && w.relay().envelope_records().is_empty();
    Ok((ok, format!("wrong key: {codes:?}; altered body: {altered}")))
}

fn expiry() -> Check {
    let mut lenient = peer("c");
    // Accept old envelopes so the RP's own token expiry is what gets tested.
    lenient.token_ttl = Some(10 * 600);
    let w = world("expiry", &[peer("b"), lenient])?;
    w.sync("a")?;
    w.advance_clock(601)?;
    let b = w.poll("b")?;
    let c = w.poll("c")?;
    let reason = |r: &tushkey::daemon::PollReport| r.discarded.first().map(|d| d.reason.clone()).unwrap_or_default();
    let ok = b.enrolled.is_empty()
        && c.enrolled.is_empty()
        && reason(&b) == "envelope expired"
        && reason(&c) == "token expired"
        && rp_devices(&w) == 1;
    Ok((ok, format!("after 601 s: envelope -> {:?}, token -> {:?}", reason(&b), reason(&c))))
}

pub fn adversary_suite() -> Vec<PropertyResult> {
    let checks: [(&'static str, fn() -> Check); 6] = [
        ("passive relay learns no token", passive_relay),
        ("token replay by the same device", token_replay),
        ("envelope replay after ack", envelope_replay),
        ("cross-user deposit", cross_user),
        ("request forgery", forgery),
        ("expired token or envelope", expiry),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => PropertyResult { name, passed, detail },
            Err(e) => PropertyResult { name, passed: false, detail: format!("harness error: {e}") },
        })
        .collect()
}
