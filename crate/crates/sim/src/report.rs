//! Timing rows, aggregates, and their JSON / CSV / markdown forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Token issue at the sender through enrolment complete at the receiver.
pub const SYNC_FLOW: &str = "sync_flow";
/// RP challenge creation round trip.
pub const ENROL_CHALLENGE: &str = "enrol_challenge";
/// Keypair generation, signing, and RP verification.
pub const ENROL_KEYPAIR_SIGN_VERIFY: &str = "enrol_keypair_sign_verify";
pub const ENROL_TOTAL: &str = "enrol_total";

const PHASE_ORDER: [&str; 4] = [SYNC_FLOW, ENROL_CHALLENGE, ENROL_KEYPAIR_SIGN_VERIFY, ENROL_TOTAL];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub scenario: String,
    /// Empty for a direct registration ceremony.
    pub sender: String,
    pub receiver: String,
    pub phase: String,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub phase: String,
    pub mean_ms: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub transport: String,
    /// False for the in-memory transport: its times say nothing about a
    /// network deployment.
    pub comparable: bool,
    /// Platform label for each device name.
    #[serde(default)]
    pub platforms: BTreeMap<String, String>,
    pub rows: Vec<TimingRow>,
    pub aggregates: Vec<Aggregate>,
}

impl TimingReport {
    pub fn new(transport: &str, comparable: bool) -> Self {
        TimingReport { transport: transport.to_owned(), comparable, platforms: BTreeMap::new(), rows: Vec::new(), aggregates: Vec::new() }
    }

    pub fn push(&mut self, row: TimingRow) {
        assert!(row.elapsed_ms >= 0.0 && row.elapsed_ms.is_finite(), "elapsed time must be non-negative");
        self.rows.push(row);
        self.aggregates = aggregate(&self.rows);
    }

    pub fn phase<'a>(&'a self, phase: &'a str) -> impl Iterator<Item = &'a TimingRow> + 'a {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    pub fn aggregate(&self, phase: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.phase == phase)
    }

    fn label(&self, device: &str) -> String {
        match self.platforms.get(device).filter(|p| !p.is_empty()) {
            Some(p) => format!("{device} ({p})"),
            None => device.to_owned(),
        }
    }
}

fn phase_rank(p: &str) -> (usize, &str) {
    (PHASE_ORDER.iter().position(|x| *x == p).unwrap_or(PHASE_ORDER.len()), p)
}

fn aggregate(rows: &[TimingRow]) -> Vec<Aggregate> {
    let mut acc: BTreeMap<(usize, &str), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(phase_rank(&r.phase)).or_default();
        e.0 += r.elapsed_ms;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((_, phase), (sum, count))| Aggregate { phase: phase.to_owned(), mean_ms: sum / count as f64, count })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

pub fn emit_report(report: &TimingReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => serde_json::to_vec_pretty(report).expect("reports serialize"),
        Format::Csv => csv_bytes(report),
        Format::Markdown => markdown(report).into_bytes(),
    }
}

fn csv_bytes(report: &TimingReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "sender", "receiver", "phase", "elapsed_ms"]).expect("in-memory write");
    for r in &report.rows {
        w.serialize((&r.scenario, &r.sender, &r.receiver, &r.phase, r.elapsed_ms)).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn markdown(report: &TimingReport) -> String {
    let mut out = String::new();
    let note = if report.comparable { "" } else { " (in-memory; not comparable to network timings)" };
    let _ = writeln!(out, "Transport: {}{note}\n", report.transport);

    let _ = writeln!(out, "| Sender | Receiver | Sync time (ms) |\n|---|---|---:|");
    for r in report.phase(SYNC_FLOW) {
        let _ = writeln!(out, "| {} | {} | {:.1} |", report.label(&r.sender), report.label(&r.receiver), r.elapsed_ms);
    }
    if let Some(a) = report.aggregate(SYNC_FLOW) {
        let _ = writeln!(out, "| Average | | {:.1} |", a.mean_ms);
    }

    // One line per enrolment: the three phase rows share scenario and device
    // and arrive in order.
    let _ = writeln!(
        out,
        "\n| Device | Challenge creation (ms) | Keypair + sign + verify (ms) | Total (ms) |\n|---|---:|---:|---:|"
    );
    let challenge: Vec<_> = report.phase(ENROL_CHALLENGE).collect();
    let ksv: Vec<_> = report.phase(ENROL_KEYPAIR_SIGN_VERIFY).collect();
    let total: Vec<_> = report.phase(ENROL_TOTAL).collect();
    for ((c, k), t) in challenge.iter().zip(&ksv).zip(&total) {
        let _ = writeln!(
            out,
            "| {} | {:.1} | {:.1} | {:.1} |",
            report.label(&c.receiver),
            c.elapsed_ms,
            k.elapsed_ms,
            t.elapsed_ms
        );
    }
    let mean = |p| report.aggregate(p).map_or(String::new(), |a| format!("{:.1}", a.mean_ms));
    if !total.is_empty() {
        let _ = writeln!(
            out,
            "| Average | {} | {} | {} |",
            mean(ENROL_CHALLENGE),
            mean(ENROL_KEYPAIR_SIGN_VERIFY),
            mean(ENROL_TOTAL)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(phase: &str, ms: f64) -> TimingRow {
        TimingRow { scenario: "s".into(), sender: "a".into(), receiver: "b".into(), phase: phase.into(), elapsed_ms: ms }
    }

    #[test]
    fn empty_csv_is_header_only() {
        let out = emit_report(&TimingReport::new("loopback", true), Format::Csv);
        assert_eq!(String::from_utf8(out).unwrap(), "scenario,sender,receiver,phase,elapsed_ms\n");
    }

    #[test]
    fn mean_matches_hand_computation() {
        let mut r = TimingReport::new("loopback", true);
        for ms in [100.0, 250.0, 400.0] {
            r.push(row(SYNC_FLOW, ms));
        }
        let a = r.aggregate(SYNC_FLOW).unwrap();
        assert_eq!(a.count, 3);
        assert_eq!(a.mean_ms, 250.0);
        let csv = String::from_utf8(emit_report(&r, Format::Csv)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("s,a,b,sync_flow,250.0"));
    }

    #[test]
    fn json_round_trips() {
        let mut r = TimingReport::new("memory", false);
        r.platforms.insert("a".into(), "laptop".into());
        r.push(row(ENROL_CHALLENGE, 1.5));
        r.push(row(SYNC_FLOW, 7.25));
        let back: TimingReport = serde_json::from_slice(&emit_report(&r, Format::Json)).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.aggregates[0].phase, SYNC_FLOW);
    }

    #[test]
    fn markdown_has_both_tables() {
        let mut r = TimingReport::new("loopback", true);
        r.push(row(SYNC_FLOW, 10.0));
        for (p, ms) in [(ENROL_CHALLENGE, 1.0), (ENROL_KEYPAIR_SIGN_VERIFY, 2.0), (ENROL_TOTAL, 3.0)] {
            r.push(row(p, ms));
        }
        let md = String::from_utf8(emit_report(&r, Format::Markdown)).unwrap();
        assert!(md.contains("| a | b | 10.0 |"));
        assert!(md.contains("| b | 1.0 | 2.0 | 3.0 |"));
        assert!(md.contains("| Average | | 10.0 |"));
        assert_eq!(emit_report(&r, Format::Markdown), md.into_bytes());
    }
}
