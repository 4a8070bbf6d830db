use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::exploit::Status;
use crate::os::Driver;

use super::{HarnessError, MachineProfile, Strategy, TrialOptions};

/// One trial, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub profile: String,
    pub strategy: Strategy,
    pub driver: Driver,
    pub mitigation: bool,
    pub threshold_bytes: u64,
    pub available_bytes: u64,
    pub footprint_bytes: u64,
    pub footprint_fraction: f64,
    pub adjacent: bool,
    pub adjacency_pairs: u64,
    pub pt_pages: u64,
    pub drained_pt_pages: u64,
    pub stuffed_pt_pages: u64,
    pub flips: u64,
    pub changed_bits: u64,
    pub pt_flips: u64,
    pub status: Status,
    pub flippable: bool,
    pub exploitable: bool,
    pub root: bool,
    pub rounds: u64,
    pub pair_attempts: u64,
    pub activations: u64,
    pub guard_reserved_bytes: u64,
    pub guard_flank_cost_bytes: u64,
    pub error: String,
    #[serde(skip)]
    pub buddyinfo: Vec<(String, String)>,
}

impl TrialReport {
    pub fn new(profile: &MachineProfile, seed: u64, opts: &TrialOptions) -> Self {
        TrialReport {
            seed,
            profile: profile.name.clone(),
            strategy: opts.strategy,
            driver: profile.attack.driver,
            mitigation: opts.mitigation,
            threshold_bytes: profile.attack.threshold,
            available_bytes: 0,
            footprint_bytes: 0,
            footprint_fraction: 0.0,
            adjacent: false,
            adjacency_pairs: 0,
            pt_pages: 0,
            drained_pt_pages: 0,
            stuffed_pt_pages: 0,
            flips: 0,
            changed_bits: 0,
            pt_flips: 0,
            status: Status::None,
            flippable: false,
            exploitable: false,
            root: false,
            rounds: 0,
            pair_attempts: 0,
            activations: 0,
            guard_reserved_bytes: 0,
            guard_flank_cost_bytes: 0,
            error: String::new(),
            buddyinfo: Vec::new(),
        }
    }

    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

/// Counts and means over a batch of trials.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: u64,
    pub errors: u64,
    pub adjacent: u64,
    pub flippable: u64,
    pub exploitable: u64,
    pub root: u64,
    pub mean_footprint_bytes: f64,
    pub max_footprint_bytes: u64,
    pub mean_footprint_fraction: f64,
    pub mean_rounds: f64,
    pub mean_guard_reserved_bytes: f64,
    pub guard_flank_cost_bytes: u64,
}

impl Aggregate {
    pub fn from_reports(reports: &[TrialReport]) -> Self {
        let mut a = Aggregate { trials: reports.len() as u64, ..Aggregate::default() };
        if reports.is_empty() {
            return a;
        }
        let n = reports.len() as f64;
        for r in reports {
            a.errors += r.failed() as u64;
            a.adjacent += r.adjacent as u64;
            a.flippable += r.flippable as u64;
            a.exploitable += r.exploitable as u64;
            a.root += r.root as u64;
            a.mean_footprint_bytes += r.footprint_bytes as f64 / n;
            a.max_footprint_bytes = a.max_footprint_bytes.max(r.footprint_bytes);
            a.mean_footprint_fraction += r.footprint_fraction / n;
            a.mean_rounds += r.rounds as f64 / n;
            a.mean_guard_reserved_bytes += r.guard_reserved_bytes as f64 / n;
            a.guard_flank_cost_bytes = a.guard_flank_cost_bytes.max(r.guard_flank_cost_bytes);
        }
        a
    }

    pub fn rate(&self, count: u64) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            count as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "text" | "txt" => Ok(ReportFormat::Text),
            _ => Err(format!("unknown format {s:?} (csv, text)")),
        }
    }
}

fn mib(bytes: f64) -> f64 {
    bytes / crate::MIB as f64
}

pub fn emit_report<W: Write>(reports: &[TrialReport], format: ReportFormat, out: W) -> Result<(), HarnessError> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in reports {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        ReportFormat::Text => {
            let mut out = out;
            let a = Aggregate::from_reports(reports);
            if let Some(r) = reports.first() {
                writeln!(
                    out,
                    "profile {}  strategy {}  driver {:?}  mitigation {}",
                    r.profile, r.strategy, r.driver, r.mitigation
                )?;
            }
            let pct = |c| 100.0 * a.rate(c);
            writeln!(out, "trials       {}", a.trials)?;
            writeln!(out, "errors       {}", a.errors)?;
            writeln!(out, "adjacent     {} ({:.1}%)", a.adjacent, pct(a.adjacent))?;
            writeln!(out, "flippable    {} ({:.1}%)", a.flippable, pct(a.flippable))?;
            writeln!(out, "exploitable  {} ({:.1}%)", a.exploitable, pct(a.exploitable))?;
            writeln!(out, "root         {} ({:.1}%)", a.root, pct(a.root))?;
            writeln!(
                out,
                "footprint    mean {:.2} MiB  max {:.2} MiB  mean fraction {:.3}",
                mib(a.mean_footprint_bytes),
                mib(a.max_footprint_bytes as f64),
                a.mean_footprint_fraction
            )?;
            writeln!(out, "rounds       mean {:.1}", a.mean_rounds)?;
            if a.guard_flank_cost_bytes > 0 {
                writeln!(
                    out,
                    "guard        flank cost {} KiB per buffer  reserved mean {:.2} MiB",
                    a.guard_flank_cost_bytes / crate::KIB,
                    mib(a.mean_guard_reserved_bytes)
                )?;
            }
            for r in reports.iter().filter(|r| r.failed()) {
                writeln!(out, "seed {} failed: {}", r.seed, r.error)?;
            }
        }
    }
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<TrialReport>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
