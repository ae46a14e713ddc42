use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tushkey::clock::SystemClock;
use tushkey::http::HttpServer;
use tushkey::relay::{Relay, RelayService};
use tushkey::rp::{RelyingParty, RpService, RpStorage};
use tushkey_sim::{adversary_suite, emit_report, run_scenario, Format, Scenario, TransportKind};

#[derive(Parser)]
#[command(name = "tushkey-sim", version, about = "Run tushkey scenarios, adversary checks, or both servers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its timing report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "loopback")]
        transport: TransportKind,
        /// Where to write the report. Printed to stdout if absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: Format,
        /// Also write every wire exchange as JSON.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Run the adversary properties.
    Adversary,
    /// Serve the RP and the relay over HTTP until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        rp_addr: String,
        #[arg(long, default_value = "127.0.0.1:8081")]
        relay_addr: String,
        /// Append-only RP journal; state lives in memory if absent.
        #[arg(long)]
        rp_journal: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { scenario, transport, report, format, transcript } => {
            let result = Scenario::load(&scenario).and_then(|s| run_scenario(&s, transport));
            let out = match result {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("tushkey-sim: {e}");
                    return ExitCode::from(2);
                }
            };
            for s in &out.steps {
                let verdict = if s.ok { "ok  " } else { "FAIL" };
                let dev = s.device.as_deref().unwrap_or("-");
                eprintln!("{verdict} #{:<3} {:<16} {dev:<10} {}", s.index, s.action, s.error.as_deref().unwrap_or(""));
            }
            let bytes = emit_report(&out.report, format);
            let written = match &report {
                Some(p) => std::fs::write(p, &bytes),
                None => {
                    println!("{}", String::from_utf8_lossy(&bytes));
                    Ok(())
                }
            };
            let written = written.and_then(|_| match &transcript {
                Some(p) => std::fs::write(p, serde_json::to_vec_pretty(&out.transcript).expect("transcript serializes")),
                None => Ok(()),
            });
            if let Err(e) = written {
                eprintln!("tushkey-sim: {e}");
                return ExitCode::from(2);
            }
            if report.is_some() && format != Format::Markdown {
                println!("{}", String::from_utf8_lossy(&emit_report(&out.report, Format::Markdown)));
            }
            if out.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Command::Adversary => {
            let results = adversary_suite();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let passed = results.iter().filter(|r| r.passed).count();
            println!("{passed}/{} properties hold", results.len());
            if passed == results.len() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Command::Serve { rp_addr, relay_addr, rp_journal } => match serve(&rp_addr, &relay_addr, rp_journal) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("tushkey-sim: {e}");
                ExitCode::from(2)
            }
        },
    }
}

fn serve(rp_addr: &str, relay_addr: &str, journal: Option<PathBuf>) -> Result<(), Box<dyn std::error::Error>> {
    let storage = match journal {
        Some(p) => RpStorage::open_file(p)?,
        None => RpStorage::in_memory(),
    };
    let rp = Arc::new(RelyingParty::new(storage, Arc::new(SystemClock)));
    let relay = Arc::new(Relay::new(Arc::new(SystemClock)));
    let rp_srv = HttpServer::spawn(Arc::new(RpService::new(rp)), rp_addr)?;
    let relay_srv = HttpServer::spawn(Arc::new(RelayService::new(relay)), relay_addr)?;
    println!("rp    {}", rp_srv.url());
    println!("relay {}", relay_srv.url());
    let (tx, rx) = std::sync::mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })?;
    let _ = rx.recv();
    rp_srv.shutdown();
    relay_srv.shutdown();
    Ok(())
}
