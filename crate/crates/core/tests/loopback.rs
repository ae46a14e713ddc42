//! Both servers over real HTTP on 127.0.0.1, driven by daemons and by the
//! `tushkeyd` binary.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use tushkey::clock::SystemClock;
use tushkey::daemon::{Daemon, DaemonConfig, MockIdentityProvider};
use tushkey::http::HttpServer;
use tushkey::relay::{Relay, RelayService};
use tushkey::rp::{RelyingParty, RpService, RpStorage};

struct Servers {
    rp: Arc<RelyingParty>,
    relay: Arc<Relay>,
    rp_http: HttpServer,
    relay_http: HttpServer,
}

fn start(rp_storage: RpStorage) -> Servers {
    let rp = Arc::new(RelyingParty::new(rp_storage, Arc::new(SystemClock)));
    let relay = Arc::new(Relay::new(Arc::new(SystemClock)));
    Servers {
        rp_http: HttpServer::spawn(Arc::new(RpService::new(rp.clone())), "127.0.0.1:0").unwrap(),
        relay_http: HttpServer::spawn(Arc::new(RelayService::new(relay.clone())), "127.0.0.1:0").unwrap(),
        rp,
        relay,
    }
}

fn config(s: &Servers, dir: &Path, name: &str, user: &str) -> DaemonConfig {
    DaemonConfig::new(&s.relay_http.url(), &s.rp_http.url(), dir.join(format!("{name}.json")), user)
}

#[test]
fn three_devices_over_http() {
    let s = start(RpStorage::in_memory());
    let dir = tempfile::tempdir().unwrap();
    let user = "alice@example.com";
    let id = MockIdentityProvider::new(user);
    let devs: Vec<Daemon> = ["a", "b", "c"]
        .iter()
        .map(|n| Daemon::first_run_register(config(&s, dir.path(), n, user), &id).unwrap())
        .collect();
    devs[0].enroll_with_rp().unwrap();
    let fan = devs[0].sync().unwrap();
    assert_eq!(fan.delivered(), 2);
    for d in &devs[1..] {
        assert_eq!(d.receiver_poll_once().unwrap().enrolled.len(), 1);
        d.authenticate_to_rp().unwrap();
    }
    let account = s.rp.account(user).unwrap();
    let mut keys: Vec<_> = account.devices.iter().map(|d| d.public_key.to_der().to_vec()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 3);
    assert_eq!(s.relay.devices().len(), 3);
}

#[test]
fn rp_state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("rp.jsonl");
    let user = "bob@example.com";
    let cfg;
    {
        let s = start(RpStorage::open_file(&journal).unwrap());
        cfg = config(&s, dir.path(), "a", user);
        let d = Daemon::first_run_register(cfg.clone(), &MockIdentityProvider::new(user)).unwrap();
        d.enroll_with_rp().unwrap();
    }
    let rp = RelyingParty::new(RpStorage::open_file(&journal).unwrap(), Arc::new(SystemClock));
    assert_eq!(rp.account(user).unwrap().devices.len(), 1);
}

struct Cli<'a> {
    config: &'a Path,
}

impl Cli<'_> {
    fn run(&self, verb: &str) -> (i32, serde_json::Value) {
        let out = Command::new(env!("CARGO_BIN_EXE_tushkeyd"))
            .args([verb, "--config"])
            .arg(self.config)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        let code = out.status.code().unwrap_or(-1);
        let text = String::from_utf8_lossy(&out.stdout);
        let value = text.lines().last().and_then(|l| serde_json::from_str(l).ok()).unwrap_or_default();
        (code, value)
    }
}

fn write_config(cfg: &DaemonConfig, path: &Path) {
    std::fs::write(path, serde_json::to_vec(cfg).unwrap()).unwrap();
}

#[test]
fn cli_verbs_and_exit_codes() {
    let s = start(RpStorage::in_memory());
    let dir = tempfile::tempdir().unwrap();
    let user = "carol@example.com";
    let paths: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let p = dir.path().join(format!("{n}.config.json"));
            write_config(&config(&s, dir.path(), n, user), &p);
            p
        })
        .collect();
    let a = Cli { config: &paths[0] };
    let b = Cli { config: &paths[1] };

    let (code, reg) = a.run("register");
    assert_eq!(code, 0);
    assert_eq!(reg["user_id"], user);
    assert_eq!(a.run("register").1["device_id"], reg["device_id"]);
    assert_eq!(b.run("register").0, 0);

    assert_eq!(a.run("auth").0, 1, "no credential yet");
    assert_eq!(a.run("enroll").0, 0);
    assert_eq!(a.run("auth").1["ok"], true);
    let (code, sync) = a.run("sync");
    assert_eq!(code, 0);
    assert_eq!(sync["delivered"], 1);
    assert_eq!(s.relay.envelope_records().len(), 1);

    // Bad config and unreachable relay map to their exit codes.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, b"{}").unwrap();
    assert_eq!(Cli { config: &bad }.run("register").0, 2);
    let mut cfg = config(&s, dir.path(), "z", user);
    cfg.relay_url = "http://127.0.0.1:9".into();
    cfg.network_timeout = 1;
    let unreachable = dir.path().join("z.config.json");
    write_config(&cfg, &unreachable);
    assert_eq!(Cli { config: &unreachable }.run("register").0, 4);
    assert!(!cfg.state_path.exists());
}
