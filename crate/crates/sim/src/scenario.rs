//! Scenario files: devices, then an ordered list of steps.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::SimError;

pub const DEFAULT_USER: &str = "alice@example.com";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub devices: Vec<DeviceSpec>,
    pub steps: Vec<Step>,
    /// Stop at the first failed step instead of carrying on.
    #[serde(default)]
    pub abort_on_failure: bool,
    /// Daemon poll interval in seconds.
    #[serde(default = "default_poll_interval")]
    pub poll_interval: u64,
}

fn default_poll_interval() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    /// Free-form label, e.g. "Dell laptop, Windows 11". Reported as given.
    #[serde(default)]
    pub platform: String,
    #[serde(default = "default_user")]
    pub user: String,
    /// Register with the relay before the first step.
    #[serde(default)]
    pub start_registered: bool,
    /// Overrides the daemon's envelope TTL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ttl: Option<u64>,
}

fn default_user() -> String {
    DEFAULT_USER.to_owned()
}

impl DeviceSpec {
    pub fn new(name: &str, start_registered: bool) -> Self {
        DeviceSpec {
            name: name.to_owned(),
            platform: String::new(),
            user: default_user(),
            start_registered,
            token_ttl: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    #[serde(flatten)]
    pub action: Action,
    /// The step passes only if it fails with exactly this error phrase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_error: Option<String>,
}

impl From<Action> for Step {
    fn from(action: Action) -> Self {
        Step { action, expect_error: None }
    }
}

impl Step {
    pub fn expecting(action: Action, error: &str) -> Self {
        Step { action, expect_error: Some(error.to_owned()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Rp,
    Relay,
}

/// One fault rule applied to requests on the way to a server.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Only requests to this route (path without query).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
    /// Lose the request; the caller sees a dropped message.
    #[serde(default)]
    pub drop: bool,
    /// Flip one bit in this base64 field of the JSON request body.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tamper: Option<String>,
    /// Flip one bit in this base64 field of the JSON response body, at any
    /// depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tamper_response: Option<String>,
    /// Deliver the request twice; the caller sees the first answer.
    #[serde(default)]
    pub replay: bool,
    /// Apply to this many matching requests, then stop. Unlimited if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Register { device: String },
    Enroll { device: String },
    /// Authenticate to the RP and fan a token out to every peer.
    Sync { device: String },
    Poll { device: String },
    Authenticate { device: String },
    InjectFault { target: Target, fault: FaultSpec },
    ClearFaults,
    /// Run the contained steps concurrently.
    Parallel { steps: Vec<Step> },
    /// Only meaningful for the in-memory transport, which uses a manual clock.
    AdvanceClock { secs: u64 },
    StartDaemon { device: String },
    /// Wait for the next enrolment by a running daemon.
    AwaitEnrollment {
        device: String,
        #[serde(default = "default_await_ms")]
        timeout_ms: u64,
    },
    StopDaemon { device: String },
    Sleep {
        ms: u64,
        #[serde(default)]
        jitter_ms: u64,
    },
    /// Redeem every pending token for `device` from `threads` threads at once.
    RedeemRace {
        device: String,
        #[serde(default = "default_race_threads")]
        threads: usize,
    },
}

fn default_await_ms() -> u64 {
    5_000
}

fn default_race_threads() -> usize {
    8
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Register { .. } => "register",
            Action::Enroll { .. } => "enroll",
            Action::Sync { .. } => "sync",
            Action::Poll { .. } => "poll",
            Action::Authenticate { .. } => "authenticate",
            Action::InjectFault { .. } => "inject_fault",
            Action::ClearFaults => "clear_faults",
            Action::Parallel { .. } => "parallel",
            Action::AdvanceClock { .. } => "advance_clock",
            Action::StartDaemon { .. } => "start_daemon",
            Action::AwaitEnrollment { .. } => "await_enrollment",
            Action::StopDaemon { .. } => "stop_daemon",
            Action::Sleep { .. } => "sleep",
            Action::RedeemRace { .. } => "redeem_race",
        }
    }

    pub fn device(&self) -> Option<&str> {
        match self {
            Action::Register { device }
            | Action::Enroll { device }
            | Action::Sync { device }
            | Action::Poll { device }
            | Action::Authenticate { device }
            | Action::StartDaemon { device }
            | Action::AwaitEnrollment { device, .. }
            | Action::StopDaemon { device }
            | Action::RedeemRace { device, .. } => Some(device),
            _ => None,
        }
    }
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        let s: Scenario =
            serde_json::from_slice(&bytes).map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    /// Device names are unique and every step names a declared device.
    pub fn validate(&self) -> Result<(), SimError> {
        let mut names = BTreeSet::new();
        for d in &self.devices {
            if !names.insert(d.name.as_str()) {
                return Err(SimError::Scenario(format!("device {:?} declared twice", d.name)));
            }
        }
        if self.poll_interval < 1 {
            return Err(SimError::Scenario("poll_interval must be at least 1".into()));
        }
        fn walk<'a>(steps: &'a [Step], names: &BTreeSet<&str>) -> Result<(), SimError> {
            for s in steps {
                if let Some(d) = s.action.device() {
                    if !names.contains(d) {
                        return Err(SimError::Scenario(format!("step {} names unknown device {d:?}", s.action.name())));
                    }
                }
                if let Action::Parallel { steps } = &s.action {
                    walk(steps, names)?;
                }
            }
            Ok(())
        }
        walk(&self.steps, &names)
    }
}
