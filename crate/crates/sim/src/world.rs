//! Both servers plus a set of device daemons, wired through the harness
//! transports.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tushkey::authenticator::CredentialId;
use tushkey::clock::{Clock, ManualClock, SystemClock};
use tushkey::daemon::{
    AuthResult, Daemon, DaemonConfig, DaemonError, EnrolReport, EnrolTimings, Endpoints, FanOutReport,
    MockIdentityProvider, PollReport, Shutdown,
};
use tushkey::http::{HttpServer, HttpTransport};
use tushkey::relay::{Relay, RelayService};
use tushkey::rp::{RelyingParty, RpService, RpStorage};
use tushkey::wire::{Handler, InMemoryTransport, Transport};

use crate::report::{TimingReport, TimingRow, ENROL_CHALLENGE, ENROL_KEYPAIR_SIGN_VERIFY, ENROL_TOTAL, SYNC_FLOW};
use crate::scenario::{DeviceSpec, FaultSpec, Target};
use crate::transport::{CountingHandler, FaultyTransport, RecordingTransport, Transcript};
use crate::SimError;

/// Start of the manual clock used by the in-memory transport.
pub const MEMORY_EPOCH: u64 = 1_700_000_000;
pub const SIM_RP_ID: &str = "rp.sim";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    /// Real HTTP over 127.0.0.1 with the system clock.
    Loopback,
    /// Direct handler calls with a manual clock.
    Memory,
}

impl TransportKind {
    pub fn label(self) -> &'static str {
        match self {
            TransportKind::Loopback => "loopback",
            TransportKind::Memory => "memory",
        }
    }
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "loopback" | "loopback_http" => Ok(TransportKind::Loopback),
            "memory" | "in_memory" => Ok(TransportKind::Memory),
            _ => Err(format!("unknown transport {s:?}")),
        }
    }
}

/// Outcome of one redemption race over one token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RaceRound {
    pub index: u64,
    pub successes: usize,
    pub failures: Vec<String>,
}

struct Runner {
    stop: Shutdown,
    handle: JoinHandle<Result<(), DaemonError>>,
}

#[derive(Default)]
struct Progress {
    enrolled: HashMap<String, usize>,
    awaited: HashMap<String, usize>,
}

/// State the daemon threads report into.
struct Shared {
    scenario: String,
    report: Mutex<TimingReport>,
    /// receiver device id -> (sender name, token issued at)
    in_flight: Mutex<HashMap<String, (String, Instant)>>,
    /// device id -> device name
    names: Mutex<HashMap<String, String>>,
    progress: Mutex<Progress>,
    woke: Condvar,
}

impl Shared {
    fn name_of(&self, device_id: &str) -> String {
        self.names.lock().unwrap().get(device_id).cloned().unwrap_or_else(|| device_id.to_owned())
    }

    fn row(&self, sender: &str, receiver: &str, phase: &str, ms: f64) {
        self.report.lock().unwrap().push(TimingRow {
            scenario: self.scenario.clone(),
            sender: sender.to_owned(),
            receiver: receiver.to_owned(),
            phase: phase.to_owned(),
            elapsed_ms: ms.max(0.0),
        });
    }

    fn enrol_rows(&self, sender: &str, receiver: &str, t: &EnrolTimings) {
        self.row(sender, receiver, ENROL_CHALLENGE, t.challenge_ms);
        self.row(sender, receiver, ENROL_KEYPAIR_SIGN_VERIFY, t.keypair_sign_verify_ms);
        self.row(sender, receiver, ENROL_TOTAL, t.total_ms);
    }

    fn enrolled(&self, receiver: &str, receiver_id: &str, sender_id: &str, timings: &EnrolTimings, at: Instant) {
        let sender = self.name_of(sender_id);
        let flight = self.in_flight.lock().unwrap().remove(receiver_id);
        if let Some((from, issued)) = flight.filter(|(from, _)| *from == sender) {
            self.row(&from, receiver, SYNC_FLOW, at.saturating_duration_since(issued).as_secs_f64() * 1000.0);
        }
        self.enrol_rows(&sender, receiver, timings);
        *self.progress.lock().unwrap().enrolled.entry(receiver.to_owned()).or_default() += 1;
        self.woke.notify_all();
    }

    fn polled(&self, receiver: &str, receiver_id: &str, report: &PollReport) {
        for e in &report.enrolled {
            self.enrolled(receiver, receiver_id, &e.sender_device_id, &e.timings, e.completed_at);
        }
    }
}

struct SimDevice {
    spec: DeviceSpec,
    daemon: Option<Arc<Daemon>>,
    runner: Option<Runner>,
}

pub struct World {
    kind: TransportKind,
    clock: Arc<dyn Clock>,
    manual: Option<Arc<ManualClock>>,
    rp: Arc<RelyingParty>,
    relay: Arc<Relay>,
    servers: Vec<HttpServer>,
    rp_url: String,
    relay_url: String,
    transcript: Transcript,
    rp_faults: Arc<FaultyTransport>,
    relay_faults: Arc<FaultyTransport>,
    rp_served: Arc<AtomicU64>,
    relay_served: Arc<AtomicU64>,
    dir: tempfile::TempDir,
    poll_interval: u64,
    devices: Mutex<BTreeMap<String, SimDevice>>,
    shared: Arc<Shared>,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World").field("kind", &self.kind).field("rp", &self.rp_url).finish_non_exhaustive()
    }
}

impl World {
    pub fn new(kind: TransportKind, scenario: &str, poll_interval: u64) -> Result<World, SimError> {
        let (clock, manual): (Arc<dyn Clock>, _) = match kind {
            TransportKind::Loopback => (Arc::new(SystemClock), None),
            TransportKind::Memory => {
                let m = Arc::new(ManualClock::at_secs(MEMORY_EPOCH));
                (m.clone(), Some(m))
            }
        };
        let rp = Arc::new(RelyingParty::new(RpStorage::in_memory(), clock.clone()));
        let relay = Arc::new(Relay::new(clock.clone()));
        let (rp_handler, rp_served) = CountingHandler::new(Arc::new(RpService::new(rp.clone())));
        let (relay_handler, relay_served) = CountingHandler::new(Arc::new(RelayService::new(relay.clone())));
        let rp_handler: Arc<dyn Handler> = Arc::new(rp_handler);
        let relay_handler: Arc<dyn Handler> = Arc::new(relay_handler);

        let mut servers = Vec::new();
        let (rp_url, relay_url, rp_wire, relay_wire): (String, String, Arc<dyn Transport>, Arc<dyn Transport>) =
            match kind {
                TransportKind::Loopback => {
                    let rs = HttpServer::spawn(rp_handler, "127.0.0.1:0")?;
                    let ls = HttpServer::spawn(relay_handler, "127.0.0.1:0")?;
                    let (ru, lu) = (rs.url(), ls.url());
                    servers.push(rs);
                    servers.push(ls);
                    let timeout = Duration::from_secs(5);
                    let rt = HttpTransport::new(&ru, timeout).map_err(|e| SimError::Setup(e.to_string()))?;
                    let lt = HttpTransport::new(&lu, timeout).map_err(|e| SimError::Setup(e.to_string()))?;
                    (ru, lu, Arc::new(rt), Arc::new(lt))
                }
                TransportKind::Memory => (
                    "http://rp.sim".into(),
                    "http://relay.sim".into(),
                    Arc::new(InMemoryTransport::new(rp_handler)),
                    Arc::new(InMemoryTransport::new(relay_handler)),
                ),
            };
        let transcript = Transcript::new();
        let layer = |wire, target| {
            Arc::new(FaultyTransport::new(Arc::new(RecordingTransport::new(wire, target, transcript.clone()))))
        };
        let rp_faults = layer(rp_wire, Target::Rp);
        let relay_faults = layer(relay_wire, Target::Relay);
        let comparable = kind == TransportKind::Loopback;
        Ok(World {
            kind,
            clock,
            manual,
            rp,
            relay,
            servers,
            rp_url,
            relay_url,
            transcript,
            rp_faults,
            relay_faults,
            rp_served,
            relay_served,
            dir: tempfile::tempdir()?,
            poll_interval,
            devices: Mutex::new(BTreeMap::new()),
            shared: Arc::new(Shared {
                scenario: scenario.to_owned(),
                report: Mutex::new(TimingReport::new(kind.label(), comparable)),
                in_flight: Mutex::new(HashMap::new()),
                names: Mutex::new(HashMap::new()),
                progress: Mutex::new(Progress::default()),
                woke: Condvar::new(),
            }),
        })
    }

    pub fn kind(&self) -> TransportKind {
        self.kind
    }

    pub fn rp(&self) -> &Arc<RelyingParty> {
        &self.rp
    }

    pub fn relay(&self) -> &Arc<Relay> {
        &self.relay
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Requests that reached each server: (rp, relay).
    pub fn served(&self) -> (u64, u64) {
        (self.rp_served.load(Ordering::SeqCst), self.relay_served.load(Ordering::SeqCst))
    }

    pub fn report(&self) -> TimingReport {
        self.shared.report.lock().unwrap().clone()
    }

    pub fn endpoints(&self) -> Endpoints {
        Endpoints { rp: self.rp_faults.clone(), relay: self.relay_faults.clone(), clock: self.clock.clone() }
    }

    pub fn add_device(&self, spec: DeviceSpec) -> Result<(), SimError> {
        let mut devices = self.devices.lock().unwrap();
        if devices.contains_key(&spec.name) {
            return Err(SimError::Scenario(format!("device {:?} declared twice", spec.name)));
        }
        self.shared.report.lock().unwrap().platforms.insert(spec.name.clone(), spec.platform.clone());
        devices.insert(spec.name.clone(), SimDevice { spec, daemon: None, runner: None });
        Ok(())
    }

    fn spec(&self, name: &str) -> Result<DeviceSpec, SimError> {
        self.devices
            .lock()
            .unwrap()
            .get(name)
            .map(|d| d.spec.clone())
            .ok_or_else(|| SimError::Scenario(format!("unknown device {name:?}")))
    }

    pub fn config_for(&self, spec: &DeviceSpec) -> DaemonConfig {
        let mut cfg = DaemonConfig::new(
            &self.relay_url,
            &self.rp_url,
            self.dir.path().join(format!("{}.state.json", spec.name)),
            &spec.user,
        );
        cfg.poll_interval = self.poll_interval;
        cfg.rp_id = Some(SIM_RP_ID.to_owned());
        if let Some(ttl) = spec.token_ttl {
            cfg.token_ttl = ttl;
        }
        cfg
    }

    pub fn daemon(&self, name: &str) -> Result<Arc<Daemon>, SimError> {
        self.devices
            .lock()
            .unwrap()
            .get(name)
            .ok_or_else(|| SimError::Scenario(format!("unknown device {name:?}")))?
            .daemon
            .clone()
            .ok_or_else(|| SimError::Step(format!("device {name:?} is not registered")))
    }

    pub fn device_names(&self) -> Vec<String> {
        self.devices.lock().unwrap().keys().cloned().collect()
    }

    pub fn daemons(&self) -> Vec<(String, Arc<Daemon>)> {
        self.devices
            .lock()
            .unwrap()
            .iter()
            .filter_map(|(n, d)| Some((n.clone(), d.daemon.clone()?)))
            .collect()
    }

    pub fn register(&self, name: &str) -> Result<String, SimError> {
        let spec = self.spec(name)?;
        let provider = MockIdentityProvider::new(spec.user.clone());
        let daemon = Arc::new(Daemon::first_run_register_with(self.config_for(&spec), &provider, self.endpoints())?);
        let id = daemon.device_id().to_owned();
        self.shared.names.lock().unwrap().insert(id.clone(), name.to_owned());
        if let Some(d) = self.devices.lock().unwrap().get_mut(name) {
            d.daemon = Some(daemon);
        }
        Ok(id)
    }

    pub fn enroll(&self, name: &str) -> Result<EnrolReport, SimError> {
        let r = self.daemon(name)?.enroll_with_rp()?;
        self.shared.enrol_rows("", name, &r.timings);
        Ok(r)
    }

    pub fn authenticate(&self, name: &str) -> Result<AuthResult, SimError> {
        Ok(self.daemon(name)?.authenticate_to_rp()?)
    }

    pub fn sync(&self, name: &str) -> Result<FanOutReport, SimError> {
        let r = self.daemon(name)?.sync()?;
        let mut flight = self.shared.in_flight.lock().unwrap();
        for o in r.outcomes.iter().filter(|o| o.result.is_ok()) {
            flight.insert(o.receiver_id.clone(), (name.to_owned(), r.token_issued_at));
        }
        Ok(r)
    }

    pub fn poll(&self, name: &str) -> Result<PollReport, SimError> {
        let d = self.daemon(name)?;
        let r = d.receiver_poll_once()?;
        self.shared.polled(name, d.device_id(), &r);
        Ok(r)
    }

    pub fn inject_fault(&self, target: Target, spec: FaultSpec) {
        match target {
            Target::Rp => self.rp_faults.inject(spec),
            Target::Relay => self.relay_faults.inject(spec),
        }
    }

    pub fn clear_faults(&self) {
        self.rp_faults.clear();
        self.relay_faults.clear();
    }

    pub fn advance_clock(&self, secs: u64) -> Result<(), SimError> {
        match &self.manual {
            Some(m) => {
                m.advance_secs(secs);
                Ok(())
            }
            None => Err(SimError::Step("advance_clock needs the in-memory transport".into())),
        }
    }

    pub fn start_daemon(&self, name: &str) -> Result<(), SimError> {
        let daemon = self.daemon(name)?;
        let mut devices = self.devices.lock().unwrap();
        let dev = devices.get_mut(name).expect("daemon() checked the name");
        if dev.runner.is_some() {
            return Err(SimError::Step(format!("daemon {name:?} already running")));
        }
        let stop = Shutdown::new();
        let (shared, s, n) = (self.shared.clone(), stop.clone(), name.to_owned());
        let id = daemon.device_id().to_owned();
        let handle = std::thread::Builder::new().name(format!("daemon-{name}")).spawn(move || {
            daemon.run(&s, |r| {
                if let Ok(report) = r {
                    shared.polled(&n, &id, report);
                }
            })
        })?;
        {
            let mut p = self.shared.progress.lock().unwrap();
            let seen = p.enrolled.get(name).copied().unwrap_or(0);
            p.awaited.insert(name.to_owned(), seen);
        }
        dev.runner = Some(Runner { stop, handle });
        Ok(())
    }

    /// Blocks until `name` has enrolled once more than when last awaited.
    pub fn await_enrollment(&self, name: &str, timeout: Duration) -> Result<(), SimError> {
        let deadline = Instant::now() + timeout;
        let mut p = self.shared.progress.lock().unwrap();
        loop {
            let seen = p.enrolled.get(name).copied().unwrap_or(0);
            let awaited = p.awaited.get(name).copied().unwrap_or(0);
            if seen > awaited {
                p.awaited.insert(name.to_owned(), awaited + 1);
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(SimError::Step(format!("no enrolment on {name:?} within {timeout:?}")));
            }
            p = self.shared.woke.wait_timeout(p, deadline - now).unwrap().0;
        }
    }

    pub fn stop_daemon(&self, name: &str) -> Result<(), SimError> {
        let runner = self.devices.lock().unwrap().get_mut(name).and_then(|d| d.runner.take());
        let Some(r) = runner else {
            return Err(SimError::Step(format!("daemon {name:?} is not running")));
        };
        r.stop.trigger();
        match r.handle.join() {
            Ok(res) => Ok(res?),
            Err(_) => Err(SimError::Step(format!("daemon {name:?} panicked"))),
        }
    }

    fn stop_all(&self) {
        let runners: Vec<_> = self.devices.lock().unwrap().values_mut().filter_map(|d| d.runner.take()).collect();
        for r in &runners {
            r.stop.trigger();
        }
        for r in runners {
            let _ = r.handle.join();
        }
    }

    /// For each pending envelope of `name`, opens the token once and then
    /// redeems it from `threads` threads released together.
    pub fn redeem_race(&self, name: &str, threads: usize) -> Result<Vec<RaceRound>, SimError> {
        let daemon = self.daemon(name)?;
        let mut rounds = Vec::new();
        for item in daemon.pending_envelopes()? {
            let token = daemon.open_envelope(&item).map_err(|e| SimError::Step(e.to_string()))?;
            let gate = Barrier::new(threads);
            let results: Vec<Result<(CredentialId, EnrolTimings), DaemonError>> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..threads)
                    .map(|_| {
                        s.spawn(|| {
                            gate.wait();
                            daemon.redeem_token(&token)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("race thread")).collect()
            });
            let mut round = RaceRound { index: item.index, ..Default::default() };
            for r in results {
                match r {
                    Ok((_, timings)) => {
                        round.successes += 1;
                        self.shared.enrolled(name, daemon.device_id(), &item.sender_device_id, &timings, Instant::now());
                    }
                    Err(e) => round.failures.push(e.to_string()),
                }
            }
            daemon.acknowledge(item.index)?;
            rounds.push(round);
        }
        Ok(rounds)
    }

    /// Raw token returned by a `/token/issue` call, for leak scans.
    pub fn issued_tokens(&self) -> Vec<Vec<u8>> {
        self.transcript
            .entries()
            .iter()
            .filter(|e| e.target == Target::Rp && e.route() == "/token/issue" && e.status == Some(200))
            .filter_map(|e| serde_json::from_slice::<tushkey::api::TokenBody>(&e.response_body).ok())
            .map(|b| b.token)
            .collect()
    }
}

impl Drop for World {
    fn drop(&mut self) {
        self.stop_all();
        for s in self.servers.drain(..) {
            s.shutdown();
        }
    }
}
