//! The per-device agent: first-run registration with the relay, RP
//! ceremonies, sender fan-out of an access token, and the receiver poll
//! loop that redeems envelopes into fresh local credentials.

mod config;
mod identity;
mod state;

pub use config::{DaemonConfig, IdentityConfig};
pub use identity::{FileIdentityProvider, Identity, IdentityError, IdentityProvider, MockIdentityProvider};
pub use state::DeviceState;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::authenticator::{AuthenticatorError, CredentialId, CredentialStore, RpId};
use crate::client::{ClientError, RelayClient, RpClient};
use crate::clock::{Clock, SystemClock};
use crate::crypto::{derive_token_key, open_token, seal_token, CryptoError, DhPublicKey, EncryptedEnvelope};
use crate::http::HttpTransport;
use crate::relay::PendingEnvelope;
use crate::wire::Transport;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DaemonError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    /// The server refused; the text is its error phrase as sent.
    #[error("{code}")]
    Remote { status: u16, code: String },
    #[error("network: {0}")]
    Network(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Authenticator(#[from] AuthenticatorError),
    #[error("{0}")]
    State(String),
}

impl From<ClientError> for DaemonError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Remote { status, code } => DaemonError::Remote { status, code },
            ClientError::Transport(t) => DaemonError::Network(t.to_string()),
            ClientError::Protocol(p) => DaemonError::Protocol(p),
        }
    }
}

impl DaemonError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            DaemonError::Config(_) => 2,
            DaemonError::Identity(_) => 3,
            DaemonError::Network(_) => 4,
            DaemonError::State(_) | DaemonError::Authenticator(AuthenticatorError::StoreCorrupt) => 5,
            DaemonError::Remote { .. } | DaemonError::Protocol(_) | DaemonError::Authenticator(_) => 1,
        }
    }

    /// The remote error phrase, if a server refused the request.
    pub fn remote_code(&self) -> Option<&str> {
        match self {
            DaemonError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }

    /// Worth retrying on a later tick.
    pub fn is_transient(&self) -> bool {
        match self {
            DaemonError::Network(_) => true,
            DaemonError::Remote { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// How a daemon reaches its servers.
#[derive(Clone)]
pub struct Endpoints {
    pub rp: Arc<dyn Transport>,
    pub relay: Arc<dyn Transport>,
    pub clock: Arc<dyn Clock>,
}

impl fmt::Debug for Endpoints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoints").field("clock", &self.clock).finish_non_exhaustive()
    }
}

impl Endpoints {
    pub fn http(config: &DaemonConfig) -> Result<Self, DaemonError> {
        let timeout = Duration::from_secs(config.network_timeout);
        let mk = |url: &str| {
            HttpTransport::new(url, timeout)
                .map(|t| Arc::new(t) as Arc<dyn Transport>)
                .map_err(|e| DaemonError::Config(e.to_string()))
        };
        Ok(Endpoints { rp: mk(&config.rp_url)?, relay: mk(&config.relay_url)?, clock: Arc::new(SystemClock) })
    }
}

/// Builds the identity provider named in a config.
pub fn identity_provider(config: &DaemonConfig) -> Box<dyn IdentityProvider> {
    match &config.identity {
        IdentityConfig::Mock { user_id } => Box::new(MockIdentityProvider::new(user_id.clone())),
        IdentityConfig::File { path } => Box::new(FileIdentityProvider::new(path.clone())),
    }
}

/// Wall-clock split of one registration ceremony.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnrolTimings {
    /// Round trip for the RP to create and return a challenge.
    pub challenge_ms: f64,
    /// Keypair generation, signing, and the RP's verification round trip.
    pub keypair_sign_verify_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrolReport {
    pub credential_id: CredentialId,
    pub timings: EnrolTimings,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthResult {
    pub credential_id: CredentialId,
    pub session_proof: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerOutcome {
    pub receiver_id: String,
    /// `Err` carries the failure text, e.g. a relay error phrase.
    pub result: Result<(), String>,
}

#[derive(Debug, Clone)]
pub struct FanOutReport {
    /// When the RP handed out the token.
    pub token_issued_at: Instant,
    pub outcomes: Vec<PeerOutcome>,
}

impl FanOutReport {
    pub fn delivered(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_ok()).count()
    }

    pub fn failed(&self) -> usize {
        self.outcomes.len() - self.delivered()
    }
}

#[derive(Debug, Clone)]
pub struct Enrolment {
    pub credential_id: CredentialId,
    pub sender_device_id: String,
    pub index: u64,
    pub completed_at: Instant,
    pub timings: EnrolTimings,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discarded {
    pub index: u64,
    pub sender_device_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct PollReport {
    pub enrolled: Vec<Enrolment>,
    /// Envelopes acknowledged without enrolment.
    pub discarded: Vec<Discarded>,
    /// Envelopes left in the mailbox after a transient failure.
    pub deferred: Vec<Discarded>,
}

impl PollReport {
    pub fn credential_ids(&self) -> Vec<CredentialId> {
        self.enrolled.iter().map(|e| e.credential_id).collect()
    }
}

/// Cloneable stop signal for [`Daemon::run`].
#[derive(Debug, Clone, Default)]
pub struct Shutdown(Arc<(Mutex<bool>, Condvar)>);

impl Shutdown {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        let (flag, cv) = &*self.0;
        *flag.lock().unwrap() = true;
        cv.notify_all();
    }

    pub fn is_triggered(&self) -> bool {
        *self.0 .0.lock().unwrap()
    }

    /// Sleeps up to `dur`; returns true if woken by [`trigger`](Self::trigger).
    pub fn wait(&self, dur: Duration) -> bool {
        let (flag, cv) = &*self.0;
        let guard = flag.lock().unwrap();
        let (guard, _) = cv.wait_timeout_while(guard, dur, |stop| !*stop).unwrap();
        *guard
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

enum Step {
    Enrolled(Enrolment),
    Discard(String),
    Defer(String),
}

pub struct Daemon {
    config: DaemonConfig,
    state: DeviceState,
    rp_id: RpId,
    store: CredentialStore,
    rp: RpClient,
    relay: RelayClient,
    clock: Arc<dyn Clock>,
    // One receiver pass at a time per device.
    poll_lock: Mutex<()>,
}

impl fmt::Debug for Daemon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Daemon")
            .field("device_id", &self.state.device_id)
            .field("user_id", &self.state.user_id)
            .finish_non_exhaustive()
    }
}

impl Daemon {
    /// First-run registration over HTTP.
    pub fn first_run_register(config: DaemonConfig, identity: &dyn IdentityProvider) -> Result<Self, DaemonError> {
        let endpoints = Endpoints::http(&config)?;
        Self::first_run_register_with(config, identity, endpoints)
    }

    /// Registers this device with the relay and persists its state. If state
    /// already exists it is loaded and nothing else happens. Any failure
    /// leaves no state file behind.
    pub fn first_run_register_with(
        config: DaemonConfig,
        identity: &dyn IdentityProvider,
        endpoints: Endpoints,
    ) -> Result<Self, DaemonError> {
        config.validate()?;
        if let Some(state) = DeviceState::load(&config.state_path)? {
            if state.registered_with_relay {
                return Self::assemble(config, state, endpoints);
            }
        }
        let id = identity.authenticate()?;
        let mut attempt = 0;
        let state = loop {
            let state = DeviceState::generate(&id.user_id, config.credential_store_path());
            let relay = RelayClient::new(
                endpoints.relay.clone(),
                state.device_id.clone(),
                state.signer.clone(),
                endpoints.clock.clone(),
            );
            match relay.register(&id.user_id, &state.dh.public(), id.assertion.clone()) {
                Ok(()) => break state,
                Err(ClientError::Remote { code, .. }) if code == "device exists" && attempt == 0 => {
                    log::warn!("relay already knows device {}, regenerating", state.device_id);
                    attempt += 1;
                }
                Err(e) => return Err(e.into()),
            }
        };
        let state = DeviceState { registered_with_relay: true, ..state };
        if let Err(e) = state.save(&config.state_path) {
            let _ = DeviceState::remove(&config.state_path);
            return Err(e);
        }
        log::info!("registered device {} for {}", state.device_id, state.user_id);
        Self::assemble(config, state, endpoints)
    }

    pub fn open(config: DaemonConfig) -> Result<Self, DaemonError> {
        let endpoints = Endpoints::http(&config)?;
        Self::open_with(config, endpoints)
    }

    /// Loads existing state. Fails if the device was never registered.
    pub fn open_with(config: DaemonConfig, endpoints: Endpoints) -> Result<Self, DaemonError> {
        config.validate()?;
        match DeviceState::load(&config.state_path)? {
            Some(state) if state.registered_with_relay => Self::assemble(config, state, endpoints),
            _ => Err(DaemonError::State(format!(
                "no registered device state at {}",
                config.state_path.display()
            ))),
        }
    }

    fn assemble(config: DaemonConfig, state: DeviceState, endpoints: Endpoints) -> Result<Self, DaemonError> {
        let rp_id = config.rp_id()?;
        let store = CredentialStore::open(&state.credential_store_path)?.with_clock(endpoints.clock.clone());
        let relay = RelayClient::new(
            endpoints.relay.clone(),
            state.device_id.clone(),
            state.signer.clone(),
            endpoints.clock.clone(),
        );
        Ok(Daemon {
            rp: RpClient::new(endpoints.rp),
            relay,
            clock: endpoints.clock,
            rp_id,
            store,
            state,
            config,
            poll_lock: Mutex::new(()),
        })
    }

    pub fn device_id(&self) -> &str {
        &self.state.device_id
    }

    pub fn user_id(&self) -> &str {
        &self.state.user_id
    }

    pub fn dh_public(&self) -> DhPublicKey {
        self.state.dh.public()
    }

    pub fn rp_id(&self) -> &RpId {
        &self.rp_id
    }

    pub fn config(&self) -> &DaemonConfig {
        &self.config
    }

    pub fn store(&self) -> &CredentialStore {
        &self.store
    }

    /// This device's signed relay client.
    pub fn relay_client(&self) -> &RelayClient {
        &self.relay
    }

    /// Runs the registration ceremony with the RP. A refused registration
    /// leaves no new local credential.
    pub fn enroll_with_rp(&self) -> Result<EnrolReport, DaemonError> {
        let start = Instant::now();
        let (sid, challenge) = self.rp.begin_registration(&self.state.user_id, Some(&self.state.device_id))?;
        let challenge_ms = ms(start);
        let kp_start = Instant::now();
        let att = self.store.make_credential(&self.rp_id, &self.state.user_id, &challenge)?;
        let result = self.rp.finish_registration(&sid, &att);
        let keypair_sign_verify_ms = ms(kp_start);
        match result {
            Ok(credential_id) => Ok(EnrolReport {
                credential_id,
                timings: EnrolTimings { challenge_ms, keypair_sign_verify_ms, total_ms: ms(start) },
            }),
            Err(e) => {
                self.discard_credential(&att.credential_id);
                Err(e.into())
            }
        }
    }

    fn discard_credential(&self, id: &CredentialId) {
        if let Err(e) = self.store.delete_credential(id) {
            log::error!("could not roll back credential {id}: {e}");
        }
    }

    /// Runs the authentication ceremony and returns the session proof the
    /// RP handed back.
    pub fn authenticate_to_rp(&self) -> Result<AuthResult, DaemonError> {
        let cred = self
            .store
            .find(&self.rp_id, &self.state.user_id)
            .ok_or(AuthenticatorError::NoSuchCredential)?;
        let (sid, challenge, _allowed) = self.rp.begin_authentication(&self.state.user_id)?;
        let sig = self.store.get_assertion(&self.rp_id, &cred.credential_id, &challenge)?;
        let session_proof = self.rp.finish_authentication(&sid, &cred.credential_id, &sig)?;
        Ok(AuthResult { credential_id: cred.credential_id, session_proof })
    }

    /// Gets an access token from the RP and deposits one envelope per peer
    /// device. A failure for one peer is recorded and the rest still run.
    pub fn sender_sync(&self, session_proof: &[u8]) -> Result<FanOutReport, DaemonError> {
        let token = zeroize::Zeroizing::new(self.rp.issue_access_token(session_proof)?);
        let token_issued_at = Instant::now();
        let peers = self.relay.peers()?;
        let outcomes = peers
            .into_iter()
            .map(|(receiver_id, peer_dh)| {
                let result = self.seal_for(&peer_dh, &token).and_then(|env| {
                    self.relay.deposit(&receiver_id, &env, &self.config.rp_url).map_err(|e| e.to_string())
                });
                if let Err(e) = &result {
                    log::warn!("deposit for {receiver_id} failed: {e}");
                }
                PeerOutcome { receiver_id, result }
            })
            .collect();
        Ok(FanOutReport { token_issued_at, outcomes })
    }

    fn seal_for(&self, peer: &DhPublicKey, token: &[u8]) -> Result<Vec<u8>, String> {
        let key = derive_token_key(&self.state.dh, peer).map_err(|e| e.to_string())?;
        Ok(seal_token(&key, token, self.clock.now_secs()).map_err(|e| e.to_string())?.to_bytes())
    }

    /// Authenticates and fans out in one go, like the `sync` command.
    pub fn sync(&self) -> Result<FanOutReport, DaemonError> {
        let auth = self.authenticate_to_rp()?;
        self.sender_sync(&auth.session_proof)
    }

    /// One pass over the mailbox. Envelopes that can never succeed are
    /// acknowledged and dropped; transient failures leave them for the next
    /// pass.
    pub fn receiver_poll_once(&self) -> Result<PollReport, DaemonError> {
        let _pass = self.poll_lock.lock().unwrap();
        let mut report = PollReport::default();
        for item in self.relay.poll()? {
            match self.redeem(&item) {
                Step::Enrolled(e) => {
                    self.ack(&item);
                    log::info!("enrolled credential {} from {}", e.credential_id, item.sender_device_id);
                    report.enrolled.push(e);
                }
                Step::Discard(reason) => {
                    log::warn!("discarding envelope {} from {}: {reason}", item.index, item.sender_device_id);
                    self.ack(&item);
                    report.discarded.push(Discarded {
                        index: item.index,
                        sender_device_id: item.sender_device_id.clone(),
                        reason,
                    });
                }
                Step::Defer(reason) => {
                    log::warn!("deferring envelope {}: {reason}", item.index);
                    report.deferred.push(Discarded {
                        index: item.index,
                        sender_device_id: item.sender_device_id.clone(),
                        reason,
                    });
                }
            }
        }
        Ok(report)
    }

    pub fn acknowledge(&self, index: u64) -> Result<(), DaemonError> {
        Ok(self.relay.ack(index)?)
    }

    fn ack(&self, item: &PendingEnvelope) {
        // A lost ack means the envelope comes back; redeeming it again is
        // refused by the RP and then it is dropped.
        if let Err(e) = self.relay.ack(item.index) {
            log::warn!("ack of envelope {} failed: {e}", item.index);
        }
    }

    /// Decrypts an envelope addressed to this device.
    pub fn open_envelope(&self, item: &PendingEnvelope) -> Result<zeroize::Zeroizing<Vec<u8>>, CryptoError> {
        let key = derive_token_key(&self.state.dh, &item.sender_dh_public)?;
        let env = EncryptedEnvelope::from_bytes(&item.envelope)?;
        open_token(&key, &env, self.clock.now_secs(), self.config.token_ttl).map(zeroize::Zeroizing::new)
    }

    /// Mailbox contents without acting on them.
    pub fn pending_envelopes(&self) -> Result<Vec<PendingEnvelope>, DaemonError> {
        Ok(self.relay.poll()?)
    }

    /// Redeems an access token at the RP with a credential made here and
    /// now. On failure the new credential is deleted again.
    pub fn redeem_token(&self, token: &[u8]) -> Result<(CredentialId, EnrolTimings), DaemonError> {
        let start = Instant::now();
        let (sid, challenge) = self.rp.redeem_token_begin(token, &self.state.device_id)?;
        let challenge_ms = ms(start);
        let kp_start = Instant::now();
        let att = self.store.make_credential(&self.rp_id, &self.state.user_id, &challenge)?;
        match self.rp.redeem_token_finish(&sid, &att) {
            Ok(id) => Ok((id, EnrolTimings { challenge_ms, keypair_sign_verify_ms: ms(kp_start), total_ms: ms(start) })),
            Err(e) => {
                self.discard_credential(&att.credential_id);
                Err(e.into())
            }
        }
    }

    fn redeem(&self, item: &PendingEnvelope) -> Step {
        let token = match self.open_envelope(item) {
            Ok(t) => t,
            Err(e) => return Step::Discard(e.to_string()),
        };
        match self.redeem_token(&token) {
            Ok((credential_id, timings)) => Step::Enrolled(Enrolment {
                credential_id,
                sender_device_id: item.sender_device_id.clone(),
                index: item.index,
                completed_at: Instant::now(),
                timings,
            }),
            Err(e @ DaemonError::Authenticator(_)) => Step::Defer(e.to_string()),
            Err(e) if e.is_transient() => Step::Defer(e.to_string()),
            Err(e) => Step::Discard(e.to_string()),
        }
    }

    /// Polls every `poll_interval` seconds until `shutdown` fires. A pass
    /// that is under way when the signal arrives is finished first. Network
    /// failures are logged and retried next tick; a local state failure
    /// stops the loop.
    pub fn run(
        &self,
        shutdown: &Shutdown,
        mut observer: impl FnMut(&Result<PollReport, DaemonError>),
    ) -> Result<(), DaemonError> {
        let interval = Duration::from_secs(self.config.poll_interval);
        let mut next = Instant::now();
        while !shutdown.is_triggered() {
            let result = self.receiver_poll_once();
            observer(&result);
            match &result {
                Err(e @ (DaemonError::State(_) | DaemonError::Authenticator(AuthenticatorError::StoreCorrupt))) => {
                    return Err(e.clone());
                }
                Err(e) => log::warn!("poll failed: {e}"),
                Ok(_) => {}
            }
            next += interval;
            let now = Instant::now();
            if next < now {
                next = now;
            }
            if shutdown.wait(next - now) {
                break;
            }
        }
        Ok(())
    }
}
