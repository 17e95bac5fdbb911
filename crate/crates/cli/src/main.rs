//! Command-line front end for the building/community energy simulator.
//!
//! Verbs map one-to-one onto the library's scenario operations. All files
//! are written atomically (temp file in the target directory + rename) so a
//! crashed run never leaves a half-written CSV or report behind.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aif_energy::community::CommunityModel;
use aif_energy::scenario::{
    apply_extreme_pricing, building_trace_csv, community_trace_csv, compare_baseline,
    run_building_day, run_community_day, sweep_ambiguity, RunReport, ScenarioError,
    COMMUNITY_DT_HOURS,
};
use aif_energy::{JointAction, ScenarioConfig, StochasticMatrix};

/// Community steps covering the 16:00-20:00 evening peak window.
const PEAK_WINDOW: std::ops::Range<usize> = 64..80;

#[derive(Parser)]
#[command(
    name = "aif-energy",
    about = "Active-inference building control and community energy planning"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Scenario config (JSON). Built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replaces every seed in the config deterministically.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress the one-line summary.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Simulate one building day under the one-step perception/control agent.
    RunBuilding,
    /// Simulate the full dual-layer community day.
    RunCommunity,
    /// Full-horizon solve vs the independent full-information baseline.
    CompareBaseline,
    /// Run the community day once per ambiguity weight with identical seeds.
    SweepAmbiguity {
        /// Comma-separated ambiguity weights.
        #[arg(long = "alpha-list", value_delimiter = ',', default_value = "0,0.5,1.0,1.5,2.0")]
        alpha_list: Vec<f64>,
    },
    /// Community day under the scarcity transform (prices x2, x3 in the peak).
    ExtremePricing,
    /// Write the observation and transition matrices as plain-text grids.
    DumpModel,
    /// Parse and validate the config, printing OK on success.
    ValidateConfig,
}

/// Process failure with the documented exit code.
enum CliError {
    /// Exit 2: the config failed to parse or validate.
    Config(String),
    /// Exit 3: a numerical failure (non-finite result, solver breakdown).
    Numerical(String),
    /// Exit 4: filesystem trouble.
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config { .. } | ScenarioError::Profile(_) => {
                CliError::Config(e.to_string())
            }
            ScenarioError::Agent { .. } => CliError::Numerical(e.to_string()),
            ScenarioError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            if !cli.quiet {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let config = load_config(cli)?;
    match &cli.verb {
        Verb::ValidateConfig => {
            config.validate().map_err(CliError::from)?;
            Ok("OK".to_string())
        }
        Verb::RunBuilding => run_building(cli, &config),
        Verb::RunCommunity => run_community(cli, &config, "run-community"),
        Verb::ExtremePricing => {
            let mut cfg = config;
            apply_extreme_pricing(&mut cfg.market);
            run_community(cli, &cfg, "extreme-pricing")
        }
        Verb::CompareBaseline => run_compare(cli, &config),
        Verb::SweepAmbiguity { alpha_list } => run_sweep(cli, &config, alpha_list),
        Verb::DumpModel => dump_model(cli, &config),
    }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            ScenarioConfig::from_json(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds.sensor_building_1 = seed;
        config.seeds.sensor_building_2 = seed.wrapping_add(1);
        config.seeds.market = seed.wrapping_add(2);
    }
    Ok(config)
}

/// Writes via a temp file in the same directory plus rename, so the final
/// path only ever holds complete content.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path
        .parent()
        .ok_or_else(|| CliError::Io(format!("{}: no parent directory", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn ensure_out_dir(cli: &Cli) -> Result<(), CliError> {
    fs::create_dir_all(&cli.out)?;
    Ok(())
}

fn check_finite(label: &str, values: impl IntoIterator<Item = f64>) -> Result<(), CliError> {
    for v in values {
        if !v.is_finite() {
            return Err(CliError::Numerical(format!("{label}: non-finite value")));
        }
    }
    Ok(())
}

fn run_building(cli: &Cli, config: &ScenarioConfig) -> Result<String, CliError> {
    let run = run_building_day(config)?;
    check_finite(
        "building trace",
        run.rows.iter().flat_map(|r| [r.phi_c, r.vfe, r.power_kw]),
    )?;
    ensure_out_dir(cli)?;
    write_atomic(&cli.out.join("building_1.csv"), &building_trace_csv(&run.rows))?;
    let report = serde_json::json!({
        "verb": "run-building",
        "seed_override": cli.seed,
        "config": config,
        "totals": {
            "comfort_fraction": [run.comfort_fraction],
            "occupancy_correlation": [run.occupancy_correlation],
        },
    });
    write_report(cli, &report)?;
    Ok(format!(
        "cost n/a | comfort {:.1}% | occupancy corr {:.3}",
        100.0 * run.comfort_fraction,
        run.occupancy_correlation
    ))
}

/// Peak-window (16:00-20:00) net battery discharge and spot purchases, kWh.
fn peak_window_stats(report: &RunReport) -> (f64, f64) {
    let mut net_discharge = 0.0;
    let mut purchases = 0.0;
    for row in &report.community_trace {
        if PEAK_WINDOW.contains(&row.step) {
            net_discharge += row.battery_flow_kw * COMMUNITY_DT_HOURS;
            purchases += row.spot_buy_kw * COMMUNITY_DT_HOURS;
        }
    }
    (net_discharge, purchases)
}

fn community_summary(report: &RunReport) -> String {
    let t = &report.totals;
    let comfort: Vec<String> = t
        .comfort_fraction
        .iter()
        .map(|c| format!("{:.1}%", 100.0 * c))
        .collect();
    let corr: Vec<String> = t
        .occupancy_correlation
        .iter()
        .map(|c| format!("{c:.3}"))
        .collect();
    format!(
        "total cost {:.4} | comfort {} | occupancy corr {}",
        t.spot_cost,
        comfort.join(" / "),
        corr.join(" / ")
    )
}

fn run_community(cli: &Cli, config: &ScenarioConfig, verb: &str) -> Result<String, CliError> {
    let report = run_community_day(config)?;
    check_finite(
        "community trace",
        report
            .community_trace
            .iter()
            .flat_map(|r| [r.efe, r.spot_cost, r.soc]),
    )?;
    ensure_out_dir(cli)?;
    for (i, rows) in report.building_traces.iter().enumerate() {
        write_atomic(
            &cli.out.join(format!("building_{}.csv", i + 1)),
            &building_trace_csv(rows),
        )?;
    }
    write_atomic(
        &cli.out.join("community.csv"),
        &community_trace_csv(&report.community_trace),
    )?;
    let (peak_discharge, peak_purchases) = peak_window_stats(&report);
    let json = serde_json::json!({
        "verb": verb,
        "seed_override": cli.seed,
        "config": config,
        "totals": report.totals,
        "metadata": {
            "degenerate_evidence_steps": report.degenerate_evidence_steps,
            "peak_net_battery_discharge_kwh": peak_discharge,
            "peak_spot_purchases_kwh": peak_purchases,
        },
    });
    write_report(cli, &json)?;
    Ok(community_summary(&report))
}

fn run_compare(cli: &Cli, config: &ScenarioConfig) -> Result<String, CliError> {
    let (aif, baseline) = compare_baseline(config)?;
    check_finite("solutions", aif.temperatures.iter().chain(&baseline.temperatures).copied())?;
    let max_diff = aif
        .temperatures
        .iter()
        .zip(&baseline.temperatures)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    ensure_out_dir(cli)?;
    let mut csv = String::from("step,aif_temp_c,baseline_temp_c,aif_airflow_kgps,baseline_airflow_kgps\n");
    for (k, (ta, tb)) in aif.temperatures.iter().zip(&baseline.temperatures).enumerate() {
        let (fa, fb) = if k < aif.actions.len() {
            (aif.actions[k].airflow, baseline.actions[k].airflow)
        } else {
            (f64::NAN, f64::NAN)
        };
        csv.push_str(&format!("{k},{ta:.6},{tb:.6},{fa:.6},{fb:.6}\n"));
    }
    write_atomic(&cli.out.join("comparison.csv"), &csv)?;
    let json = serde_json::json!({
        "verb": "compare-baseline",
        "seed_override": cli.seed,
        "config": config,
        "totals": {
            "max_temperature_difference_c": max_diff,
            "aif_objective": aif.objective,
            "baseline_objective": baseline.objective,
        },
    });
    write_report(cli, &json)?;
    Ok(format!(
        "max temp difference {:.4} C | objectives {:.4} vs {:.4}",
        max_diff, aif.objective, baseline.objective
    ))
}

fn run_sweep(cli: &Cli, config: &ScenarioConfig, alphas: &[f64]) -> Result<String, CliError> {
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(CliError::Config(
            "alpha list: weights must be finite and non-negative".to_string(),
        ));
    }
    let sweep = sweep_ambiguity(config, alphas)?;
    ensure_out_dir(cli)?;
    let mut csv = String::from(
        "alpha,spot_cost,deviation_kwh,pv_curtailed_kwh,battery_throughput_kwh\n",
    );
    for (alpha, report) in &sweep.runs {
        let t = &report.totals;
        csv.push_str(&format!(
            "{alpha},{},{},{},{}\n",
            t.spot_cost, t.deviation_kwh, t.pv_curtailed_kwh, t.battery_throughput_kwh
        ));
    }
    write_atomic(&cli.out.join("sweep.csv"), &csv)?;
    // Probe rows hold the selected-policy ambiguity per step, re-planned with
    // each alpha on an identical belief and market context.
    let monotone = sweep
        .probe_ambiguity
        .iter()
        .all(|row| row.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    let json = serde_json::json!({
        "verb": "sweep-ambiguity",
        "seed_override": cli.seed,
        "config": config,
        "alphas": alphas,
        "totals": sweep.runs.iter().map(|(a, r)| {
            serde_json::json!({ "alpha": a, "totals": r.totals })
        }).collect::<Vec<_>>(),
        "metadata": {
            "probe_ambiguity_per_step": sweep.probe_ambiguity,
            "ambiguity_non_increasing_in_alpha": monotone,
        },
    });
    write_report(cli, &json)?;
    Ok(format!(
        "{} alphas | selected-policy ambiguity non-increasing: {}",
        alphas.len(),
        monotone
    ))
}

fn matrix_grid(m: &StochasticMatrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if c > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{:.12}", m.get(r, c)));
        }
        out.push('\n');
    }
    out
}

fn dump_model(cli: &Cli, config: &ScenarioConfig) -> Result<String, CliError> {
    config.validate().map_err(CliError::from)?;
    let model = CommunityModel::build(&config.community_model)
        .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_out_dir(cli)?;
    let mut text = String::new();
    text.push_str(&format!(
        "# observation matrix A ({}x{})\n",
        model.a.rows(),
        model.a.cols()
    ));
    text.push_str(&matrix_grid(&model.a));
    for (u, b) in model.b.iter().enumerate() {
        let action = JointAction::from_index(u);
        text.push_str(&format!(
            "\n# transition matrix B[{u}] ({:?}, {:?}, {:?}) ({}x{})\n",
            action.u_b,
            action.u_ess,
            action.u_m,
            b.rows(),
            b.cols()
        ));
        text.push_str(&matrix_grid(b));
    }
    write_atomic(&cli.out.join("model.txt"), &text)?;
    Ok(format!(
        "wrote A and {} transition matrices to {}",
        model.b.len(),
        cli.out.join("model.txt").display()
    ))
}

fn write_report(cli: &Cli, json: &serde_json::Value) -> Result<(), CliError> {
    let pretty = serde_json::to_string_pretty(json)
        .map_err(|e| CliError::Io(format!("report serialization: {e}")))?;
    write_atomic(&cli.out.join("report.json"), &(pretty + "\n"))
}
