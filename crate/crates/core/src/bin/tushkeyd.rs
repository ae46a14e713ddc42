use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use tushkey::daemon::{identity_provider, Daemon, DaemonConfig, DaemonError, Shutdown};

#[derive(Parser)]
#[command(name = "tushkeyd", version, about = "Device daemon: relay registration, RP ceremonies and token sync")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register this device with the relay (first run).
    Register {
        #[arg(long)]
        config: PathBuf,
    },
    /// Poll the relay and redeem incoming tokens until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Authenticate to the RP and send an access token to every peer device.
    Sync {
        #[arg(long)]
        config: PathBuf,
    },
    /// Register a credential with the RP.
    Enroll {
        #[arg(long)]
        config: PathBuf,
    },
    /// Authenticate to the RP with the local credential.
    Auth {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tushkeyd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<serde_json::Value, DaemonError> {
    match command {
        Command::Register { config } => {
            let cfg = DaemonConfig::load(config)?;
            let provider = identity_provider(&cfg);
            let d = Daemon::first_run_register(cfg, provider.as_ref())?;
            Ok(json!({"device_id": d.device_id(), "user_id": d.user_id()}))
        }
        Command::Enroll { config } => {
            let d = Daemon::open(DaemonConfig::load(config)?)?;
            let r = d.enroll_with_rp()?;
            Ok(json!({
                "credential_id": r.credential_id.to_string(),
                "challenge_ms": r.timings.challenge_ms,
                "keypair_sign_verify_ms": r.timings.keypair_sign_verify_ms,
                "total_ms": r.timings.total_ms,
            }))
        }
        Command::Auth { config } => {
            let d = Daemon::open(DaemonConfig::load(config)?)?;
            let r = d.authenticate_to_rp()?;
            Ok(json!({"ok": true, "credential_id": r.credential_id.to_string()}))
        }
        Command::Sync { config } => {
            let d = Daemon::open(DaemonConfig::load(config)?)?;
            let r = d.sync()?;
            let peers: Vec<_> = r
                .outcomes
                .iter()
                .map(|o| match &o.result {
                    Ok(()) => json!({"receiver_id": o.receiver_id, "ok": true}),
                    Err(e) => json!({"receiver_id": o.receiver_id, "ok": false, "error": e}),
                })
                .collect();
            Ok(json!({"delivered": r.delivered(), "failed": r.failed(), "peers": peers}))
        }
        Command::Run { config } => {
            let d = Daemon::open(DaemonConfig::load(config)?)?;
            let stop = Shutdown::new();
            let s = stop.clone();
            ctrlc::set_handler(move || s.trigger())
                .map_err(|e| DaemonError::Config(format!("signal handler: {e}")))?;
            log::info!("device {} polling every {} s", d.device_id(), d.config().poll_interval);
            let mut enrolled = 0usize;
            d.run(&stop, |r| {
                if let Ok(report) = r {
                    for e in &report.enrolled {
                        enrolled += 1;
                        println!("{}", json!({"event": "enrolled", "credential_id": e.credential_id.to_string(), "sender": e.sender_device_id}));
                    }
                    for x in &report.discarded {
                        println!("{}", json!({"event": "discarded", "index": x.index, "reason": x.reason}));
                    }
                }
            })?;
            Ok(json!({"stopped": true, "enrolled": enrolled}))
        }
    }
}
