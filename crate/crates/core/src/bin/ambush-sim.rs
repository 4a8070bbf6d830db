use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use ambush_sim::harness::{emit_report, run_trials, HarnessError, MachineProfile, ReportFormat, Strategy, TrialOptions};
use ambush_sim::os::Driver;

/// Simulate rowhammer attacks against a physically partitioned kernel.
#[derive(Debug, Parser)]
#[command(name = "ambush-sim", version)]
struct Cli {
    /// Built-in profile (dell, lenovo) or a TOML profile file.
    #[arg(long, default_value = "dell")]
    profile: String,
    /// ambush, spray or feng_shui.
    #[arg(long, default_value = "ambush")]
    strategy: Strategy,
    #[arg(long, default_value_t = 1)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attack memory threshold in bytes; K, M and G suffixes are binary.
    #[arg(long, value_parser = parse_size)]
    threshold: Option<u64>,
    /// video or sg.
    #[arg(long, value_parser = parse_driver)]
    driver: Option<Driver>,
    /// Place device buffers between guard rows.
    #[arg(long)]
    mitigation: bool,
    /// Stop after placement, without hammering.
    #[arg(long)]
    no_exploit: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// csv or text.
    #[arg(long, default_value = "text")]
    format: ReportFormat,
    /// Write buddyinfo snapshots of the first trial to this file.
    #[arg(long)]
    buddyinfo: Option<PathBuf>,
    /// Print the selected profile as TOML and exit.
    #[arg(long)]
    dump_profile: bool,
}

fn parse_driver(s: &str) -> Result<Driver, String> {
    match s {
        "video" => Ok(Driver::Video),
        "sg" => Ok(Driver::Sg),
        _ => Err(format!("unknown driver {s:?} (video, sg)")),
    }
}

fn parse_size(s: &str) -> Result<u64, String> {
    let (digits, unit) = match s.char_indices().find(|(_, c)| c.is_ascii_alphabetic()) {
        Some((i, _)) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let n: u64 = digits.trim().parse().map_err(|e| format!("bad size {s:?}: {e}"))?;
    let mult = match unit.to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KB" | "KIB" => ambush_sim::KIB,
        "M" | "MB" | "MIB" => ambush_sim::MIB,
        "G" | "GB" | "GIB" => ambush_sim::GIB,
        _ => return Err(format!("unknown unit in {s:?}")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("size {s:?} overflows"))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut profile = MachineProfile::load(&cli.profile)?;
    if let Some(t) = cli.threshold {
        profile.attack.threshold = t;
    }
    if let Some(d) = cli.driver {
        profile.attack.driver = d;
    }
    profile.validate()?;
    if cli.dump_profile {
        print!("{}", profile.to_toml());
        return Ok(());
    }
    let opts = TrialOptions {
        strategy: cli.strategy,
        mitigation: cli.mitigation,
        exploit: !cli.no_exploit,
        capture_buddyinfo: cli.buddyinfo.is_some(),
    };
    let reports = run_trials(&profile, cli.trials, cli.seed, &opts);
    if let (Some(path), Some(first)) = (&cli.buddyinfo, reports.first()) {
        let mut f = File::create(path)?;
        for (stage, text) in &first.buddyinfo {
            writeln!(f, "# {stage}\n{text}")?;
        }
    }
    match &cli.output {
        Some(path) => emit_report(&reports, cli.format, File::create(path)?),
        None => emit_report(&reports, cli.format, io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ambush-sim: {e}");
            ExitCode::FAILURE
        }
    }
}
