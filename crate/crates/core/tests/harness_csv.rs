mod common;

use ambush_sim::harness::{emit_report, read_csv, run_trials, Aggregate, MachineProfile, ReportFormat, Strategy, TrialOptions};

fn csv_of(reports: &[ambush_sim::harness::TrialReport]) -> String {
    let mut buf = Vec::new();
    emit_report(reports, ReportFormat::Csv, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn csv_parses_back_and_totals_match_aggregate() {
    let p = MachineProfile::dell_e6420();
    let reports = run_trials(&p, 3, 40, &TrialOptions::default());
    let text = csv_of(&reports);
    assert_eq!(text.lines().count(), 4);
    assert_eq!(read_csv(text.as_bytes()).unwrap(), reports);

    let t = common::csv_totals(&text);
    let a = Aggregate::from_reports(&reports);
    assert_eq!(
        (t.rows, t.adjacent, t.flippable, t.exploitable, t.root),
        (a.trials, a.adjacent, a.flippable, a.exploitable, a.root)
    );
    assert!((t.footprint_sum as f64 / t.rows as f64 - a.mean_footprint_bytes).abs() < 1.0);
}

#[test]
fn same_seed_same_bytes() {
    let p = MachineProfile::lenovo_t420();
    let opts = TrialOptions { exploit: false, ..TrialOptions::default() };
    assert_eq!(csv_of(&run_trials(&p, 2, 9, &opts)), csv_of(&run_trials(&p, 2, 9, &opts)));
}

#[test]
fn one_trial_one_row() {
    let p = MachineProfile::dell_e6420();
    let opts = TrialOptions { strategy: Strategy::FengShui, ..TrialOptions::default() };
    let text = csv_of(&run_trials(&p, 1, 0, &opts));
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().contains(",feng_shui,"));
}

#[test]
fn failed_trials_carry_their_error() {
    let mut p = MachineProfile::dell_e6420();
    p.attack.driver = ambush_sim::os::Driver::Sg;
    let r = &run_trials(&p, 1, 0, &TrialOptions { exploit: false, ..TrialOptions::default() })[0];
    assert!(r.failed());
    assert!(r.error.contains("VMA budget"));
    let mut buf = Vec::new();
    emit_report(std::slice::from_ref(r), ReportFormat::Text, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().contains("seed 0 failed"));
}

#[test]
fn profile_loads_from_toml_file() {
    let mut p = MachineProfile::lenovo_t420();
    p.attack.threshold = 150 * ambush_sim::MIB;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lenovo.toml");
    std::fs::write(&path, p.to_toml()).unwrap();
    assert_eq!(MachineProfile::load(path.to_str().unwrap()).unwrap(), p);
    assert!(MachineProfile::load(dir.path().join("missing.toml").to_str().unwrap()).is_err());
}
