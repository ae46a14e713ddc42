use std::time::Duration;

use rand::Rng;
use serde::Serialize;

use crate::report::TimingReport;
use crate::scenario::{Action, Scenario, Step};
use crate::transport::Exchange;
use crate::world::{TransportKind, World};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepResult {
    Registered { device_id: String },
    Enrolled { credential_id: String },
    Authenticated,
    Synced { delivered: usize, failed: usize },
    Polled { enrolled: usize, discarded: Vec<String>, deferred: Vec<String> },
    Raced { successes: Vec<usize>, failures: Vec<String> },
    Group { steps: Vec<StepRecord> },
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub index: usize,
    pub action: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    pub ok: bool,
    /// The error, when the step failed or failed as expected.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<StepResult>,
}

pub struct RunOutput {
    pub report: TimingReport,
    pub transcript: Vec<Exchange>,
    pub steps: Vec<StepRecord>,
    pub aborted: bool,
    /// Kept alive so callers can inspect servers and devices afterwards.
    pub world: World,
}

impl RunOutput {
    pub fn all_ok(&self) -> bool {
        !self.aborted && self.steps.iter().all(|s| s.ok)
    }
}

impl World {
    fn perform(&self, action: &Action, index: usize) -> Result<StepResult, SimError> {
        Ok(match action {
            Action::Register { device } => StepResult::Registered { device_id: self.register(device)? },
            Action::Enroll { device } => {
                StepResult::Enrolled { credential_id: self.enroll(device)?.credential_id.to_string() }
            }
            Action::Authenticate { device } => {
                self.authenticate(device)?;
                StepResult::Authenticated
            }
            Action::Sync { device } => {
                let r = self.sync(device)?;
                StepResult::Synced { delivered: r.delivered(), failed: r.failed() }
            }
            Action::Poll { device } => {
                let r = self.poll(device)?;
                StepResult::Polled {
                    enrolled: r.enrolled.len(),
                    discarded: r.discarded.into_iter().map(|d| d.reason).collect(),
                    deferred: r.deferred.into_iter().map(|d| d.reason).collect(),
                }
            }
            Action::InjectFault { target, fault } => {
                self.inject_fault(*target, fault.clone());
                StepResult::Done
            }
            Action::ClearFaults => {
                self.clear_faults();
                StepResult::Done
            }
            Action::Parallel { steps } => {
                let records: Vec<StepRecord> = std::thread::scope(|s| {
                    let handles: Vec<_> = steps.iter().enumerate().map(|(i, st)| s.spawn(move || self.execute(st, i))).collect();
                    handles.into_iter().map(|h| h.join().expect("parallel step")).collect()
                });
                let failed = records.iter().filter(|r| !r.ok).count();
                if failed > 0 {
                    return Err(SimError::Step(format!("{failed} of {} parallel steps failed (step {index})", records.len())));
                }
                StepResult::Group { steps: records }
            }
            Action::AdvanceClock { secs } => {
                self.advance_clock(*secs)?;
                StepResult::Done
            }
            Action::StartDaemon { device } => {
                self.start_daemon(device)?;
                StepResult::Done
            }
            Action::AwaitEnrollment { device, timeout_ms } => {
                self.await_enrollment(device, Duration::from_millis(*timeout_ms))?;
                StepResult::Done
            }
            Action::StopDaemon { device } => {
                self.stop_daemon(device)?;
                StepResult::Done
            }
            Action::Sleep { ms, jitter_ms } => {
                let extra = if *jitter_ms > 0 { rand::thread_rng().gen_range(0..=*jitter_ms) } else { 0 };
                std::thread::sleep(Duration::from_millis(ms + extra));
                StepResult::Done
            }
            Action::RedeemRace { device, threads } => {
                let rounds = self.redeem_race(device, *threads)?;
                StepResult::Raced {
                    successes: rounds.iter().map(|r| r.successes).collect(),
                    failures: rounds.into_iter().flat_map(|r| r.failures).collect(),
                }
            }
        })
    }

    /// Runs one step and records how it went.
    pub fn execute(&self, step: &Step, index: usize) -> StepRecord {
        let outcome = self.perform(&step.action, index);
        let (ok, error, result) = match (&step.expect_error, outcome) {
            (None, Ok(r)) => (true, None, Some(r)),
            (None, Err(e)) => (false, Some(e.to_string()), None),
            (Some(want), Ok(r)) => (false, Some(format!("expected {want:?}, step succeeded")), Some(r)),
            (Some(want), Err(e)) => (e.to_string() == *want, Some(e.to_string()), None),
        };
        if !ok {
            log::warn!("step {index} ({}) failed: {}", step.action.name(), error.as_deref().unwrap_or(""));
        }
        StepRecord {
            index,
            action: step.action.name().to_owned(),
            device: step.action.device().map(str::to_owned),
            ok,
            error,
            result,
        }
    }
}

pub fn run_scenario(scenario: &Scenario, transport: TransportKind) -> Result<RunOutput, SimError> {
    scenario.validate()?;
    let world = World::new(transport, &scenario.name, scenario.poll_interval)?;
    for d in &scenario.devices {
        world.add_device(d.clone())?;
    }
    for d in scenario.devices.iter().filter(|d| d.start_registered) {
        world.register(&d.name)?;
    }
    let mut steps = Vec::new();
    let mut aborted = false;
    for (i, step) in scenario.steps.iter().enumerate() {
        let rec = world.execute(step, i);
        let failed = !rec.ok;
        steps.push(rec);
        if failed && scenario.abort_on_failure {
            aborted = true;
            break;
        }
    }
    for name in world.device_names() {
        // Only daemons still running are stopped here.
        let _ = world.stop_daemon(&name);
    }
    Ok(RunOutput { report: world.report(), transcript: world.transcript().entries(), steps, aborted, world })
}
