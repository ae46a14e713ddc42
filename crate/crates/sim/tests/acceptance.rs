//! One line per acceptance criterion. Exits nonzero if any criterion fails.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::URL_SAFE;
use base64::Engine;
use rand::{Rng, RngCore};
use rsa::pkcs8::DecodePrivateKey;
use rsa::traits::PrivateKeyParts;
use rsa::RsaPrivateKey;
use tushkey::crypto::{
    derive_token_key, generate_dh_keypair, open_token, seal_token, CryptoError, EncryptedEnvelope, TokenKey,
};
use tushkey_sim::report::SYNC_FLOW;
use tushkey_sim::scan::{contains_secret, leaking_exchanges};
use tushkey_sim::scenario::DEFAULT_USER;
use tushkey_sim::{adversary_suite, emit_report, DeviceSpec, Format, Target, TransportKind, World};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn sim<T>(r: Result<T, tushkey_sim::SimError>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Sender `a` enrolled, plus registered receivers.
fn world(kind: TransportKind, name: &str, poll_interval: u64, receivers: &[&str]) -> Result<World, String> {
    let w = sim(World::new(kind, name, poll_interval))?;
    for n in std::iter::once(&"a").chain(receivers) {
        sim(w.add_device(DeviceSpec::new(n, true)))?;
        sim(w.register(n))?;
    }
    sim(w.enroll("a"))?;
    Ok(w)
}

fn rp_keys(w: &World) -> Vec<Vec<u8>> {
    w.rp()
        .account(DEFAULT_USER)
        .map(|a| a.devices.iter().map(|d| d.public_key.to_der().to_vec()).collect())
        .unwrap_or_default()
}

fn end_to_end_sync() -> Outcome {
    let start = Instant::now();
    let w = world(TransportKind::Loopback, "c1", 1, &["b", "c"])?;
    let fan = sim(w.sync("a"))?;
    check(fan.delivered() == 2, format!("{} envelopes delivered", fan.delivered()))?;
    for r in ["b", "c"] {
        let p = sim(w.poll(r))?;
        check(p.enrolled.len() == 1, format!("{r} poll: {p:?}"))?;
    }
    for r in ["b", "c"] {
        sim(w.authenticate(r))?;
    }
    let keys = rp_keys(&w);
    let distinct = keys.iter().collect::<HashSet<_>>().len();
    check(keys.len() == 3 && distinct == 3, format!("RP holds {} devices, {distinct} distinct keys", keys.len()))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("both receivers authenticated; 3 devices, 3 distinct keys; {:.2} s", elapsed.as_secs_f64()))
}

fn sync_timing() -> Outcome {
    const RUNS: usize = 20;
    let w = world(TransportKind::Loopback, "c2", 1, &["b"])?;
    sim(w.start_daemon("b"))?;
    for i in 0..RUNS {
        sim(w.sync("a"))?;
        sim(w.await_enrollment("b", Duration::from_secs(10))).map_err(|e| format!("run {i}: {e}"))?;
    }
    sim(w.stop_daemon("b"))?;
    let report = w.report();
    let mut times: Vec<f64> = report.phase(SYNC_FLOW).map(|r| r.elapsed_ms).collect();
    check(times.len() == RUNS, format!("{} sync rows for {RUNS} runs", times.len()))?;
    times.sort_by(f64::total_cmp);
    let median = (times[RUNS / 2 - 1] + times[RUNS / 2]) / 2.0;
    let bound = 1000.0 + 500.0;
    println!("{}", String::from_utf8_lossy(&emit_report(&report, Format::Markdown)));
    check(median <= bound, format!("median sync_flow {median:.1} ms exceeds {bound} ms"))?;
    Ok(format!(
        "median sync_flow {median:.1} ms over {RUNS} runs (bound {bound} ms, min {:.1}, max {:.1})",
        times[0],
        times[RUNS - 1]
    ))
}

fn crypto_properties() -> Outcome {
    const T0: u64 = 1_700_000_000;
    let start = Instant::now();
    let mut rng = rand::thread_rng();
    for i in 0..128 {
        let (a, b) = (generate_dh_keypair(), generate_dh_keypair());
        let ka = derive_token_key(&a, &b.public()).map_err(|e| e.to_string())?;
        let kb = derive_token_key(&b, &a.public()).map_err(|e| e.to_string())?;
        let env = seal_token(&ka, b"agree", T0).map_err(|e| e.to_string())?;
        check(open_token(&kb, &env, T0, 600).as_deref() == Ok(b"agree"), format!("DH pair {i} disagrees"))?;
    }
    let key = TokenKey::generate();
    for i in 0..128 {
        let mut msg = vec![0u8; rng.gen_range(1..=4096)];
        rng.fill_bytes(&mut msg);
        let env = seal_token(&key, &msg, T0).map_err(|e| e.to_string())?;
        let back = EncryptedEnvelope::from_bytes(&env.to_bytes()).map_err(|e| e.to_string())?;
        check(open_token(&key, &back, T0, 600).as_ref() == Ok(&msg), format!("payload {i} ({} bytes) lost", msg.len()))?;
    }
    let mut msg = vec![0u8; 48];
    rng.fill_bytes(&mut msg);
    let bytes = seal_token(&key, &msg, T0).map_err(|e| e.to_string())?.to_bytes();
    let bits = bytes.len() * 8;
    // The first bit of each region, then random positions.
    let mut positions: Vec<usize> = [0, 1, 9, 25, bytes.len() - 32].iter().map(|b| b * 8).collect();
    while positions.len() < 300 {
        positions.push(rng.gen_range(0..bits));
    }
    for &bit in &positions {
        let mut t = bytes.clone();
        t[bit / 8] ^= 1 << (bit % 8);
        let opened = EncryptedEnvelope::from_bytes(&t).and_then(|e| open_token(&key, &e, T0, 600));
        check(opened.is_err(), format!("flip at bit {bit} accepted"))?;
    }
    let env = seal_token(&key, &msg, T0).map_err(|e| e.to_string())?;
    check(open_token(&key, &env, T0 + 600, 600).is_ok(), "rejected at exactly ttl")?;
    check(open_token(&key, &env, T0 + 601, 600) == Err(CryptoError::EnvelopeExpired), "accepted at ttl + 1")?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "128 DH pairs, 128 payloads up to 4 KiB, {} tamper positions, ttl 600/601; {:.2} s",
        positions.len(),
        elapsed.as_secs_f64()
    ))
}

fn oracle_equivalence() -> Outcome {
    const CASES: usize = 32;
    const NOW: u64 = 1_700_000_000;
    let mut rng = rand::thread_rng();
    for i in 0..CASES {
        let mut raw = [0u8; 32];
        rng.fill_bytes(&mut raw);
        let oracle = fernet::Fernet::new(&URL_SAFE.encode(raw)).ok_or("oracle refused key")?;
        let mut msg = vec![0u8; rng.gen_range(1..=4096)];
        rng.fill_bytes(&mut msg);
        let ours = seal_token(&TokenKey::from_bytes(raw), &msg, NOW).map_err(|e| e.to_string())?;
        let opened = oracle.decrypt_at_time(&URL_SAFE.encode(ours.to_bytes()), Some(600), NOW + 1);
        check(opened.as_ref().ok() == Some(&msg), format!("case {i}: oracle cannot open ours"))?;
        let theirs = URL_SAFE.decode(oracle.encrypt_at_time(&msg, NOW)).map_err(|e| e.to_string())?;
        let env = EncryptedEnvelope::from_bytes(&theirs).map_err(|e| e.to_string())?;
        let opened = open_token(&TokenKey::from_bytes(raw), &env, NOW + 1, 600);
        check(opened.as_ref().ok() == Some(&msg), format!("case {i}: cannot open the oracle's"))?;
    }
    Ok(format!("{CASES} cases each way with identical key bytes"))
}

/// The whole private key, its private exponent and primes, and raw 32-byte
/// windows of the exponent. The DER also holds the public modulus, so only
/// the whole DER is scanned, never pieces of it.
fn key_fragments(der: &[u8]) -> Result<Vec<Vec<u8>>, String> {
    let key = RsaPrivateKey::from_pkcs8_der(der).map_err(|e| e.to_string())?;
    let d = key.d().to_bytes_be();
    let mut out = vec![der.to_vec(), d.clone()];
    out.extend(key.primes().iter().map(|p| p.to_bytes_be()));
    out.extend(d.chunks_exact(32).map(<[u8]>::to_vec));
    Ok(out)
}

fn non_cloning() -> Outcome {
    let w = world(TransportKind::Loopback, "c5", 1, &["b", "c"])?;
    sim(w.sync("a"))?;
    for r in ["b", "c"] {
        check(sim(w.poll(r))?.enrolled.len() == 1, format!("{r} did not enrol"))?;
        sim(w.authenticate(r))?;
    }
    let private: Vec<Vec<u8>> = w
        .daemons()
        .iter()
        .flat_map(|(_, d)| d.store().audit_private_keys().into_iter().map(|k| k.to_vec()))
        .collect();
    check(private.len() == 3, format!("{} credential private keys", private.len()))?;
    let mut fragments = Vec::new();
    for k in &private {
        fragments.extend(key_fragments(k)?);
    }
    let wire = w.transcript().entries();
    let rp_state = w.rp().storage().persistent_bytes();
    let relay_state = w.relay().persistent_bytes();

    let key_leaks = leaking_exchanges(&wire, &fragments);
    check(key_leaks.is_empty(), format!("private key material in exchanges {key_leaks:?}"))?;
    for (name, state) in [("RP", &rp_state), ("relay", &relay_state)] {
        check(!fragments.iter().any(|f| contains_secret(state, f)), format!("private key material in {name} state"))?;
    }

    let tokens = w.issued_tokens();
    check(!tokens.is_empty(), "no access token was issued")?;
    let relay_wire: Vec<_> = wire.iter().filter(|e| e.target == Target::Relay).cloned().collect();
    let token_leaks = leaking_exchanges(&relay_wire, &tokens);
    check(token_leaks.is_empty(), format!("token visible to the relay in exchanges {token_leaks:?}"))?;
    for (name, state) in [("RP", &rp_state), ("relay", &relay_state)] {
        check(!tokens.iter().any(|t| contains_secret(state, t)), format!("token in {name} state"))?;
    }

    // Everything the authenticator hands out publicly, serialized.
    for (name, d) in w.daemons() {
        for desc in d.store().list_credentials() {
            let json = serde_json::to_vec(&desc).map_err(|e| e.to_string())?;
            let debug = format!("{desc:?}").into_bytes();
            for hay in [&json, &debug] {
                check(!fragments.iter().any(|f| contains_secret(hay, f)), format!("descriptor of {name} leaks key"))?;
            }
        }
    }
    // Public surface of the authenticator: only the audit hook names a
    // private key, and it is compiled out of normal builds.
    let source = include_str!("../../core/src/authenticator.rs");
    let lines: Vec<&str> = source.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let l = line.trim_start();
        if l.starts_with("pub fn") && l.contains("private") {
            let gated = i > 0 && lines[i - 1].contains("cfg(any(test, feature = \"audit\"))");
            check(gated, format!("ungated public accessor: {l}"))?;
        }
    }
    Ok(format!(
        "{} exchanges and RP/relay state clean of 3 private keys; {} token(s) absent from relay traffic and server state",
        wire.len(),
        tokens.len()
    ))
}

fn adversary() -> Outcome {
    let results = adversary_suite();
    let failed: Vec<String> =
        results.iter().filter(|r| !r.passed).map(|r| format!("{}: {}", r.name, r.detail)).collect();
    for r in &results {
        println!("    {} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
    }
    check(failed.is_empty(), failed.join("; "))?;
    Ok(format!("{}/{} properties hold", results.len(), results.len()))
}

fn redemption_race() -> Outcome {
    const DEVICES: usize = 10;
    const ROUNDS: usize = 5;
    const THREADS: usize = 8;
    let names: Vec<String> = (0..DEVICES).map(|i| format!("r{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let w = world(TransportKind::Memory, "c7", 1, &refs)?;
    let mut trials = 0;
    for round in 0..ROUNDS {
        sim(w.sync("a"))?;
        let results: Vec<(String, Result<Vec<tushkey_sim::world::RaceRound>, String>)> = std::thread::scope(|s| {
            let handles: Vec<_> = names
                .iter()
                .map(|n| {
                    let w = &w;
                    s.spawn(move || (n.clone(), sim(w.redeem_race(n, THREADS))))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("race thread")).collect()
        });
        for (name, r) in results {
            let rounds = r?;
            check(rounds.len() == 1, format!("round {round}: {name} saw {} envelopes", rounds.len()))?;
            let rr = &rounds[0];
            check(
                rr.successes == 1 && rr.failures.len() == THREADS - 1,
                format!("round {round}: {name} had {} successes, failures {:?}", rr.successes, rr.failures),
            )?;
            trials += 1;
        }
    }
    // The RP keeps one credential per device, replaced on each enrolment.
    let keys = rp_keys(&w);
    let distinct = keys.iter().collect::<HashSet<_>>().len();
    check(keys.len() == 1 + DEVICES && distinct == keys.len(), format!("RP holds {} credentials, {distinct} distinct", keys.len()))?;
    Ok(format!("{trials} trials of {THREADS} concurrent redemptions, exactly one success per device each"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("end-to-end sync over loopback", end_to_end_sync),
        ("sync timing bound", sync_timing),
        ("crypto property suite", crypto_properties),
        ("envelope format oracle equivalence", oracle_equivalence),
        ("no credential cloning or token exposure", non_cloning),
        ("adversary suite", adversary),
        ("single-use redemption race", redemption_race),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL criterion {}: {name}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
