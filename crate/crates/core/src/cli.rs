//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analytics::{
    expected_enter_delay, fit_decay_rate, monte_carlo_enter_delay, read_pdr_samples, v2v_probability, Environment,
};
use crate::channel::{pdr, ChannelModel};
use crate::error::ConfigError;
use crate::sim::{bundled, check_safety, diagram_table, run_scenario, summarize, write_trace_csv, Scenario};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_SAFETY: u8 = 2;
pub const EXIT_LIVENESS: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "v2v-crossing", version, about = "Intersection crossing over sensors and lossy V2V links")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its trace and summary.
    Simulate(SimulateArgs),
    /// Expected ENTER delay against distance.
    SweepDelay(SweepArgs),
    /// Probability of completing over V2V against the failure threshold.
    V2vProb(V2vArgs),
    /// Fit the exponential delivery-ratio model to measured samples.
    FitPdr(FitArgs),
    /// Print the slot-by-slot message exchange of the scripted scenarios.
    Diagram(DiagramArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Directory for `<name>.trace.csv` and `<name>.summary.json`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the failure threshold F.
    #[arg(long = "F")]
    pub threshold: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ChannelArgs {
    /// Transition probabilities for the correlated model; `iid` selects the
    /// independent model.
    #[arg(long, value_delimiter = ',', default_value = "iid,0.5,0.7,0.9")]
    pub xi: Vec<String>,
    /// Decay rate replacing the two built-in environments.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long = "F", default_value_t = 30)]
    pub threshold: u32,
    #[command(flatten)]
    pub channel: ChannelArgs,
    #[arg(long, default_value_t = 0.0)]
    pub d_min: f64,
    #[arg(long, default_value_t = 500.0)]
    pub d_max: f64,
    #[arg(long, default_value_t = 25.0)]
    pub d_step: f64,
    /// Monte Carlo trials per point; 0 skips the simulation columns.
    #[arg(long, default_value_t = 0)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct V2vArgs {
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Largest failure threshold evaluated; rows cover 0..=F.
    #[arg(long = "F", default_value_t = 30)]
    pub threshold: u32,
    #[command(flatten)]
    pub channel: ChannelArgs,
    #[arg(long, value_delimiter = ',', default_value = "200,400")]
    pub distances: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with columns `distance_m,pdr`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagramArgs {
    /// Also write each trace here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub environment: String,
    pub xi: String,
    pub distance_m: f64,
    pub expected_delay_slots: f64,
    pub mc_mean: Option<f64>,
    pub mc_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2vRow {
    pub environment: String,
    pub distance_m: f64,
    pub xi: String,
    #[serde(rename = "F")]
    pub threshold: u32,
    pub p_v2v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub distance_m: f64,
    pub pdr: f64,
    pub model_pdr: f64,
    pub residual: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), ConfigError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn parse_xi(s: &str) -> Result<Option<f64>, ConfigError> {
    if s.trim() == "iid" {
        return Ok(None);
    }
    let xi: f64 = s
        .trim()
        .parse()
        .map_err(|_| ConfigError::Invalid(format!("xi '{s}' is neither 'iid' nor a number")))?;
    if !(0.0..1.0).contains(&xi) {
        return Err(ConfigError::Invalid(format!("xi {xi} must lie in [0, 1)")));
    }
    Ok(Some(xi))
}

fn xi_label(xi: Option<f64>) -> String {
    xi.map_or_else(|| "iid".to_string(), |x| x.to_string())
}

fn environments(lambda: Option<f64>) -> Result<Vec<(String, f64)>, ConfigError> {
    match lambda {
        Some(l) if l >= 0.0 && l.is_finite() => Ok(vec![("custom".into(), l)]),
        Some(l) => Err(ConfigError::Invalid(format!("lambda {l} must be >= 0"))),
        None => Ok(Environment::ALL.iter().map(|e| (e.to_string(), e.lambda())).collect()),
    }
}

pub fn distance_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>, ConfigError> {
    if !(step > 0.0 && min >= 0.0 && max >= min && min.is_finite() && max.is_finite()) {
        return Err(ConfigError::Invalid(format!(
            "distance range {min}..{max} step {step} is empty or malformed"
        )));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| min + step * i as f64).collect())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ConfigError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ConfigError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

pub fn sweep_delay(args: &SweepArgs) -> Result<Vec<DelayRow>, ConfigError> {
    let grid = distance_grid(args.d_min, args.d_max, args.d_step)?;
    let xis = args
        .channel
        .xi
        .iter()
        .map(|s| parse_xi(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (env, lambda) in environments(args.channel.lambda)? {
        for &xi in &xis {
            for &d in &grid {
                let expected = expected_enter_delay(pdr(d, lambda), args.threshold, xi)?;
                let (mc_mean, mc_stderr) = if args.trials > 0 {
                    let model = match xi {
                        Some(xi) => ChannelModel::CorrelatedBurst { lambda, xi },
                        None => ChannelModel::DistanceIid { lambda },
                    };
                    let seed = args.seed.wrapping_add(rows.len() as u64);
                    let (m, se) = monte_carlo_enter_delay(&model, d, args.threshold, args.trials, seed)?;
                    (Some(m), Some(se))
                } else {
                    (None, None)
                };
                rows.push(DelayRow {
                    environment: env.clone(),
                    xi: xi_label(xi),
                    distance_m: d,
                    expected_delay_slots: expected,
                    mc_mean,
                    mc_stderr,
                });
            }
        }
    }
    Ok(rows)
}

pub fn v2v_table(args: &V2vArgs) -> Result<Vec<V2vRow>, ConfigError> {
    let xis = args
        .channel
        .xi
        .iter()
        .map(|s| parse_xi(s))
        .collect::<Result<Vec<_>, _>>()?;
    if args.distances.iter().any(|d| !(*d >= 0.0)) {
        return Err(ConfigError::Invalid("distances must be nonnegative".into()));
    }
    let mut rows = Vec::new();
    for (env, lambda) in environments(args.channel.lambda)? {
        for &d in &args.distances {
            for &xi in &xis {
                for f in 0..=args.threshold {
                    rows.push(V2vRow {
                        environment: env.clone(),
                        distance_m: d,
                        xi: xi_label(xi),
                        threshold: f,
                        p_v2v: v2v_probability(pdr(d, lambda), f, xi)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn fit_pdr(args: &FitArgs) -> Result<(f64, Vec<ResidualRow>), ConfigError> {
    let samples = read_pdr_samples(&args.input)?;
    let lambda = fit_decay_rate(&samples)?;
    let rows = samples
        .iter()
        .map(|s| {
            let model_pdr = pdr(s.distance, lambda);
            ResidualRow {
                distance_m: s.distance,
                pdr: s.pdr,
                model_pdr,
                residual: s.pdr - model_pdr,
            }
        })
        .collect();
    Ok((lambda, rows))
}

fn write_trace_files(scenario: &Scenario, dir: &Path) -> Result<crate::sim::SimTrace, ConfigError> {
    ensure_dir(dir)?;
    let trace = run_scenario(scenario);
    let stem = if scenario.name.is_empty() { "scenario" } else { &scenario.name };
    let csv_path = dir.join(format!("{stem}.trace.csv"));
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    write_trace_csv(&trace, std::io::BufWriter::new(file))?;
    let json_path = dir.join(format!("{stem}.summary.json"));
    let summary = serde_json::to_string_pretty(&summarize(&trace))?;
    fs::write(&json_path, summary + "\n").map_err(io_err(&json_path))?;
    Ok(trace)
}

fn simulate(args: &SimulateArgs) -> Result<u8, ConfigError> {
    let mut scenario = Scenario::load(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(f) = args.threshold {
        scenario.failure_threshold = f;
    }
    scenario.validate()?;
    let trace = write_trace_files(&scenario, &args.out)?;
    let summary = summarize(&trace);
    for v in &summary.vehicles {
        let stats = &summary.stats[&v.uid];
        println!(
            "vehicle {}: route {} mainctrl {:?} enter delays {:?} fallback {} done {:?}",
            v.uid,
            v.route,
            v.mainctrl_slots,
            stats.enter_delays,
            stats.fallback_count,
            v.done_slot
        );
    }
    if !check_safety(&trace).is_empty() {
        eprintln!("safety violated: {} co-occupancies", summary.safety_violations.len());
        return Ok(EXIT_SAFETY);
    }
    if !summary.all_done {
        eprintln!("liveness violated: not every vehicle crossed within {} slots", scenario.max_slots);
        return Ok(EXIT_LIVENESS);
    }
    Ok(EXIT_OK)
}

fn diagram(args: &DiagramArgs) -> Result<u8, ConfigError> {
    for name in bundled::DIAGRAMS {
        let scenario = bundled::load(name).expect("bundled");
        let trace = match &args.out {
            Some(dir) => write_trace_files(&scenario, dir)?,
            None => run_scenario(&scenario),
        };
        println!("== {name} (F = {})", scenario.failure_threshold);
        print!("{}", diagram_table(&trace));
        println!();
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: &Cli) -> Result<u8, ConfigError> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::SweepDelay(a) => {
            let rows = sweep_delay(a)?;
            ensure_dir(&a.out)?;
            let path = a.out.join("delay_curves.csv");
            write_rows(&path, &rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(EXIT_OK)
        }
        Command::V2vProb(a) => {
            let rows = v2v_table(a)?;
            ensure_dir(&a.out)?;
            let path = a.out.join("v2v_probability.csv");
            write_rows(&path, &rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(EXIT_OK)
        }
        Command::FitPdr(a) => {
            let (lambda, rows) = fit_pdr(a)?;
            ensure_dir(&a.out)?;
            let path = a.out.join("pdr_residuals.csv");
            write_rows(&path, &rows)?;
            println!("lambda = {lambda:.8} 1/m");
            Ok(EXIT_OK)
        }
        Command::Diagram(a) => diagram(a),
    }
}

pub fn run(cli: &Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_inclusive() {
        assert_eq!(distance_grid(0.0, 100.0, 25.0).unwrap(), vec![0.0, 25.0, 50.0, 75.0, 100.0]);
        assert!(distance_grid(0.0, 100.0, 0.0).is_err());
        assert!(distance_grid(10.0, 5.0, 1.0).is_err());
    }

    #[test]
    fn xi_labels() {
        assert_eq!(parse_xi("iid").unwrap(), None);
        assert_eq!(parse_xi("0.7").unwrap(), Some(0.7));
        assert!(parse_xi("1.5").is_err());
        assert!(parse_xi("x").is_err());
    }

    #[test]
    fn zero_distance_has_floor_delay() {
        let args = SweepArgs {
            out: ".".into(),
            threshold: 30,
            channel: ChannelArgs {
                xi: vec!["iid".into(), "0.9".into()],
                lambda: None,
            },
            d_min: 0.0,
            d_max: 0.0,
            d_step: 1.0,
            trials: 0,
            seed: 1,
        };
        assert!(sweep_delay(&args).unwrap().iter().all(|r| r.expected_delay_slots == 3.0));
    }
}
