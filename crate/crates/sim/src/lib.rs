//! Scenario runner for tushkey: puts both servers and any number of device
//! daemons in one process, over loopback HTTP or direct calls, and records
//! every wire exchange and the timing of each sync and enrolment.

pub mod adversary;
pub mod report;
pub mod runner;
pub mod scan;
pub mod scenario;
pub mod transport;
pub mod world;

use thiserror::Error;
use tushkey::daemon::DaemonError;

pub use adversary::{adversary_suite, PropertyResult};
pub use report::{emit_report, Format, TimingReport, TimingRow};
pub use runner::{run_scenario, RunOutput, StepRecord, StepResult};
pub use scenario::{Action, DeviceSpec, FaultSpec, Scenario, Step, Target};
pub use world::{TransportKind, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("setup: {0}")]
    Setup(String),
    #[error("{0}")]
    Step(String),
    #[error(transparent)]
    Daemon(#[from] DaemonError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
