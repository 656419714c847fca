use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use v2v_crossing::analytics::{write_pdr_samples, PdrSample};
use v2v_crossing::cli::{read_rows, DelayRow, ResidualRow, V2vRow};

const BIN: &str = env!("CARGO_BIN_EXE_v2v-crossing");

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.scenario"))
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(BIN).args(args).arg("--out").arg(out).output().unwrap()
}

fn summary(dir: &Path, name: &str) -> serde_json::Value {
    let text = std::fs::read(dir.join(format!("{name}.summary.json"))).unwrap();
    serde_json::from_slice(&text).unwrap()
}

#[test]
fn simulate_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("three_cars_late_joiner");
    let out = run(&["simulate", "--scenario", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(dir.path(), "three_cars_late_joiner");
    assert_eq!(s["vehicles"][0]["mainctrl_slots"][0], 4);
    assert_eq!(s["all_done"], true);
    assert!(s["safety_violations"].as_array().unwrap().is_empty());
    let trace = std::fs::read_to_string(dir.path().join("three_cars_late_joiner.trace.csv")).unwrap();
    assert!(trace.starts_with("slot,uid,mode,x,v,a,f,sent,received,lost,occupancy,action\n"));
}

#[test]
fn simulate_reports_burst_delay() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("burst_0_3");
    let out = run(&["simulate", "--scenario", path.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let s = summary(dir.path(), "burst_0_3");
    for uid in ["1", "2"] {
        assert_eq!(s["stats"][uid]["enter_delays"][0], 7);
    }
}

#[test]
fn threshold_override_forces_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("burst_0_3");
    let out = run(&["simulate", "--F", "2", "--scenario", path.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let s = summary(dir.path(), "burst_0_3");
    assert_eq!(s["failure_threshold"], 2);
    assert!(s["vehicles"].as_array().unwrap().iter().all(|v| !v["fallback_slot"].is_null()));
}

#[test]
fn malformed_scenario_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scenario");
    std::fs::write(&bad, r#"{"schema_version": 1, "vehicles": [{"uid": 1}]}"#).unwrap();
    let out = run(&["simulate", "--scenario", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let unknown = dir.path().join("unknown.scenario");
    std::fs::write(&unknown, r#"{"schema_version": 1, "vehicles": [], "speed": 3}"#).unwrap();
    assert_eq!(run(&["simulate", "--scenario", unknown.to_str().unwrap()], dir.path()).status.code(), Some(1));
}

#[test]
fn seeded_runs_are_identical() {
    let path = scenario("four_way_harsh_channel");
    let read = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        assert!(run(&["simulate", "--seed", seed, "--scenario", path.to_str().unwrap()], dir.path())
            .status
            .success());
        std::fs::read(dir.path().join("four_way_harsh_channel.trace.csv")).unwrap()
    };
    assert_eq!(read("3"), read("3"));
}

#[test]
fn sweep_delay_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["sweep-delay", "--xi", "iid,0.9", "--d-max", "200", "--d-step", "100", "--trials", "2000"],
        dir.path(),
    );
    assert!(out.status.success());
    let rows: Vec<DelayRow> = read_rows(&dir.path().join("delay_curves.csv")).unwrap();
    // two environments, two channels, three distances
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.mc_mean.is_some() && r.mc_stderr.is_some()));
    let zero: Vec<f64> = rows.iter().filter(|r| r.distance_m == 0.0).map(|r| r.expected_delay_slots).collect();
    assert!(zero.iter().all(|&d| (d - 3.0).abs() < 1e-12), "{zero:?}");
}

#[test]
fn custom_lambda_is_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sweep-delay", "--lambda", "0.002", "--xi", "iid", "--d-max", "100"], dir.path());
    assert!(out.status.success());
    let rows: Vec<DelayRow> = read_rows(&dir.path().join("delay_curves.csv")).unwrap();
    assert!(rows.iter().all(|r| r.environment == "custom"));
}

#[test]
fn v2v_prob_table_is_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["v2v-prob", "--F", "20", "--xi", "0.9"], dir.path());
    assert!(out.status.success());
    let rows: Vec<V2vRow> = read_rows(&dir.path().join("v2v_probability.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 21);
    let pick = |env: &str, d: f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.environment == env && r.distance_m == d)
            .map(|r| r.p_v2v)
            .collect()
    };
    for d in [200.0, 400.0] {
        let (open, harsh) = (pick("open-field", d), pick("harsh", d));
        assert!(open.windows(2).all(|w| w[1] >= w[0]));
        assert!(open.iter().zip(&harsh).all(|(o, h)| o >= h));
    }
}

#[test]
fn fit_pdr_recovers_decay_rate() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("exact.csv");
    let samples: Vec<PdrSample> = (1..=20)
        .map(|i| {
            let d = 25.0 * f64::from(i);
            PdrSample { distance: d, pdr: (-0.0013 * d).exp() }
        })
        .collect();
    write_pdr_samples(&input, &samples).unwrap();
    let out = run(&["fit-pdr", "--input", input.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lambda: f64 = stdout.trim().strip_prefix("lambda = ").unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!((lambda - 0.0013).abs() < 1e-6, "{lambda}");
    let rows: Vec<ResidualRow> = read_rows(&dir.path().join("pdr_residuals.csv")).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.residual.abs() < 1e-6));
}

#[test]
fn fit_pdr_rejects_zero_pdr() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    std::fs::write(&input, "distance_m,pdr\n100,0.9\n200,0\n").unwrap();
    let out = run(&["fit-pdr", "--input", input.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shipped_pdr_data_fits_environments() {
    let dir = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    for (file, want) in [("pdr_open_field.csv", 0.00063), ("pdr_harsh.csv", 0.0013)] {
        let out = run(&["fit-pdr", "--input", data.join(file).to_str().unwrap()], dir.path());
        assert!(out.status.success());
        let stdout = String::from_utf8_lossy(&out.stdout);
        let lambda: f64 = stdout.trim().strip_prefix("lambda = ").unwrap().split(' ').next().unwrap().parse().unwrap();
        assert!((lambda - want).abs() / want < 0.05, "{file}: {lambda}");
    }
}

#[test]
fn diagram_prints_every_table() {
    let out = Command::new(BIN).arg("diagram").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["three_cars_late_joiner", "burst_0_1", "burst_0_3", "burst_2_2"] {
        assert!(text.contains(&format!("== {name}")), "{name}");
    }
    assert!(text.contains("INITIATE_MAINCTRL"));
}

#[test]
fn bad_arguments_exit_with_config_error() {
    let out = Command::new(BIN).args(["simulate", "--F", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
